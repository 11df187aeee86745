//! The two decoder assemblies, mask prediction, the layer-wise rate probe, parameter
//! perturbations and the checkpoint format.
//!
//! Both assemblies start from patch embeddings `Z₀` (`D x N`) and learnable class embeddings
//! `Q₀` (`D x C`) and end with mask logits `M = Qᵀ LN(Z)` (`C x N`).
//!
//! - CA: `sa_layers` rounds of `Z ← step(LN(Z))` with `Q` held fixed, then `ca_layers` rounds of
//!   `Q ← cross_step(Q, LN(Z))`.
//! - SA: `sa_layers` rounds of `X ← step(LN(X))` on the concatenation `X = [Z, Q]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coding_rate::{projected_coding_rate, coding_rate, RateConfig};
use crate::error::{shape_err, Error, Result};
use crate::matcore::{qr_orthonormalize, Matrix, Rng, Seed};
use crate::operators::{
    layer_norm, msca_step, mssa_step, AttentionKernel, LayerNormParams, StepForm, SubspaceDictionary,
};
use crate::subspace::argmax_columns;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPCT";
pub const CHECKPOINT_VERSION: u32 = 1;

const Q0_INIT_SCALE: f64 = 0.02;
const ALPHA_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sa,
    Ca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub variant: Variant,
    pub dim: usize,
    pub sa_layers: usize,
    /// Cross-attention layers; ignored by the SA variant.
    pub ca_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub num_classes: usize,
    pub epsilon: f64,
    pub step_form: StepForm,
    /// LayerNorm on `Z` before the mask product.
    pub final_norm: bool,
    /// Also pass `Q` through the final LayerNorm before the mask product.
    pub normalize_queries: bool,
}

impl DecoderConfig {
    pub fn default_ca(dim: usize, num_classes: usize) -> Self {
        Self {
            variant: Variant::Ca,
            dim,
            sa_layers: 2,
            ca_layers: 2,
            heads: 4,
            head_dim: 4,
            num_classes,
            epsilon: crate::coding_rate::DEFAULT_EPSILON,
            step_form: StepForm::Simplified,
            final_norm: true,
            normalize_queries: false,
        }
    }

    pub fn default_sa(dim: usize, num_classes: usize) -> Self {
        Self {
            variant: Variant::Sa,
            sa_layers: 3,
            ca_layers: 0,
            ..Self::default_ca(dim, num_classes)
        }
    }

    pub fn dict_cols(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn rate(&self) -> RateConfig {
        RateConfig {
            epsilon: self.epsilon,
        }
    }

    /// Number of parameterized layers in declaration order (SA layers first).
    pub fn total_layers(&self) -> usize {
        match self.variant {
            Variant::Sa => self.sa_layers,
            Variant::Ca => self.sa_layers + self.ca_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rate().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return bad("dim, heads and head_dim must be positive");
        }
        if self.head_dim > self.dim {
            return bad("head_dim must not exceed dim");
        }
        if self.variant == Variant::Ca && self.num_classes == 0 {
            return bad("the CA variant needs at least one class");
        }
        if self.variant == Variant::Ca && self.ca_layers == 0 {
            return bad("the CA variant needs at least one cross-attention layer");
        }
        Ok(())
    }
}

/// Parameters of one attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub dict: SubspaceDictionary,
    pub alpha: f64,
    pub norm: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// SA layers first, then CA layers.
    pub layers: Vec<LayerParams>,
    pub final_norm: LayerNormParams,
    /// `D x C` initial class embeddings.
    pub q0: Matrix,
}

impl DecoderParams {
    /// Seeded initialization: Gaussian `Q₀` scaled by 0.02, per-head orthonormalized Gaussian
    /// dictionaries, step sizes 0.1, identity LayerNorms.
    pub fn init(cfg: &DecoderConfig, seed: Seed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed.derive("decoder-init"));
        let q0 = rng.gaussian_matrix(cfg.dim, cfg.num_classes).scale(Q0_INIT_SCALE);
        let layers = (0..cfg.total_layers())
            .map(|_| {
                Ok(LayerParams {
                    dict: SubspaceDictionary::random_orthonormal(cfg.dim, cfg.heads, cfg.head_dim, &mut rng)?,
                    alpha: ALPHA_INIT,
                    norm: LayerNormParams::identity(cfg.dim),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            final_norm: LayerNormParams::identity(cfg.dim),
            q0,
        })
    }

    /// Flattens into tensors: per layer `[P, α (1x1), gain (Dx1), bias (Dx1)]`, then final gain,
    /// final bias, `Q₀`.
    pub fn to_tensors(&self) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(4 * self.layers.len() + 3);
        for l in &self.layers {
            out.push(l.dict.full().clone());
            out.push(Matrix::scalar(l.alpha));
            out.push(Matrix::column(&l.norm.gain));
            out.push(Matrix::column(&l.norm.bias));
        }
        out.push(Matrix::column(&self.final_norm.gain));
        out.push(Matrix::column(&self.final_norm.bias));
        out.push(self.q0.clone());
        out
    }

    /// Shapes matching [`to_tensors`](Self::to_tensors) for `cfg`.
    pub fn tensor_shapes(cfg: &DecoderConfig) -> Vec<(usize, usize)> {
        let d = cfg.dim;
        let mut out = Vec::new();
        for _ in 0..cfg.total_layers() {
            out.extend([(d, cfg.dict_cols()), (1, 1), (d, 1), (d, 1)]);
        }
        out.extend([(d, 1), (d, 1), (d, cfg.num_classes)]);
        out
    }

    pub fn from_tensors(cfg: &DecoderConfig, tensors: &[Matrix]) -> Result<Self> {
        let shapes = Self::tensor_shapes(cfg);
        if tensors.len() != shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (t, s) in tensors.iter().zip(&shapes) {
            if t.shape() != *s {
                return Err(shape_err(
                    "DecoderParams::from_tensors",
                    format!("{}x{}", s.0, s.1),
                    format!("{}x{}", t.rows(), t.cols()),
                ));
            }
            t.ensure_finite("decoder parameter")?;
        }
        let norm = |g: &Matrix, b: &Matrix| LayerNormParams {
            gain: g.data().to_vec(),
            bias: b.data().to_vec(),
            eps: crate::operators::DEFAULT_LN_EPS,
        };
        let layers = tensors[..4 * cfg.total_layers()]
            .chunks(4)
            .map(|c| {
                Ok(LayerParams {
                    dict: SubspaceDictionary::new(c[0].clone(), cfg.heads)?,
                    alpha: c[1].as_scalar(),
                    norm: norm(&c[2], &c[3]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let k = 4 * cfg.total_layers();
        Ok(Self {
            layers,
            final_norm: norm(&tensors[k], &tensors[k + 1]),
            q0: tensors[k + 2].clone(),
        })
    }

    pub fn check(&self, cfg: &DecoderConfig) -> Result<()> {
        Self::from_tensors(cfg, &self.to_tensors()).map(|_| ())
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub z: Matrix,
    pub q: Matrix,
    /// `C x N` logits.
    pub masks: Matrix,
    /// State after each layer, in order: `(Z_ℓ, Q_ℓ)`. For the SA variant these are the two
    /// halves of the concatenated state.
    pub trace: Vec<(Matrix, Matrix)>,
}

fn check_finite_layer(m: &Matrix, layer: usize) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("decoder layer {layer} output")))
    }
}

fn masks_from(z: &Matrix, q: &Matrix, params: &DecoderParams, cfg: &DecoderConfig) -> Result<Matrix> {
    let zn = if cfg.final_norm {
        layer_norm(z, &params.final_norm)?
    } else {
        z.clone()
    };
    let qn = if cfg.normalize_queries {
        layer_norm(q, &params.final_norm)?
    } else {
        q.clone()
    };
    Ok(qn.t_matmul(&zn))
}

fn check_input(z0: &Matrix, params: &DecoderParams, cfg: &DecoderConfig) -> Result<()> {
    cfg.validate()?;
    if z0.rows() != cfg.dim || z0.cols() == 0 {
        return Err(shape_err(
            "decoder forward",
            format!("{} x N with N >= 1", cfg.dim),
            format!("{}x{}", z0.rows(), z0.cols()),
        ));
    }
    if params.layers.len() != cfg.total_layers() || params.q0.shape() != (cfg.dim, cfg.num_classes) {
        return Err(Error::InvalidArgument("parameters do not match the configuration".into()));
    }
    z0.ensure_finite("decoder input")
}

pub fn depict_ca_forward(z0: &Matrix, params: &DecoderParams, cfg: &DecoderConfig) -> Result<ForwardOutput> {
    check_input(z0, params, cfg)?;
    let rate = cfg.rate();
    let mut z = z0.clone();
    let q = params.q0.clone();
    let mut trace = Vec::with_capacity(cfg.total_layers());
    for (l, layer) in params.layers[..cfg.sa_layers].iter().enumerate() {
        let zn = layer_norm(&z, &layer.norm)?;
        z = mssa_step(&zn, &layer.dict, layer.alpha, &rate, cfg.step_form, AttentionKernel::Softmax)?;
        check_finite_layer(&z, l)?;
        trace.push((z.clone(), q.clone()));
    }
    let mut q = q;
    for (i, layer) in params.layers[cfg.sa_layers..].iter().enumerate() {
        let zn = layer_norm(&z, &layer.norm)?;
        q = msca_step(&q, &zn, &layer.dict, layer.alpha, &rate, cfg.step_form)?;
        check_finite_layer(&q, cfg.sa_layers + i)?;
        trace.push((z.clone(), q.clone()));
    }
    let masks = masks_from(&z, &q, params, cfg)?;
    Ok(ForwardOutput { z, q, masks, trace })
}

pub fn depict_sa_forward(z0: &Matrix, params: &DecoderParams, cfg: &DecoderConfig) -> Result<ForwardOutput> {
    check_input(z0, params, cfg)?;
    let rate = cfg.rate();
    let n = z0.cols();
    let c = cfg.num_classes;
    let mut x = Matrix::hcat(&[z0, &params.q0]);
    let mut trace = Vec::with_capacity(cfg.sa_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let xn = layer_norm(&x, &layer.norm)?;
        x = mssa_step(&xn, &layer.dict, layer.alpha, &rate, cfg.step_form, AttentionKernel::Softmax)?;
        check_finite_layer(&x, l)?;
        trace.push((x.cols_range(0, n), x.cols_range(n, c)));
    }
    let z = x.cols_range(0, n);
    let q = x.cols_range(n, c);
    let masks = masks_from(&z, &q, params, cfg)?;
    Ok(ForwardOutput { z, q, masks, trace })
}

pub fn forward(z0: &Matrix, params: &DecoderParams, cfg: &DecoderConfig) -> Result<ForwardOutput> {
    match cfg.variant {
        Variant::Sa => depict_sa_forward(z0, params, cfg),
        Variant::Ca => depict_ca_forward(z0, params, cfg),
    }
}

/// Per-column argmax of the logits; ties go to the lowest class index.
pub fn predict_labels(masks: &Matrix) -> Vec<usize> {
    argmax_columns(masks)
}

/// One row of the layer-wise rate probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    /// Layer whose dictionary supplies the head.
    pub layer: usize,
    pub head: usize,
    /// Index of the embedding state measured: 0 is the input, `k` the output of layer `k − 1`.
    pub point: usize,
    /// `R(P_hᵀ Z)` at that state.
    pub projected_rate: f64,
    /// `R(P_h P_hᵀ Z) / R(Z)`.
    pub rate_ratio: f64,
}

/// Own-layer effect of each head's step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnLayerDelta {
    pub layer: usize,
    pub head: usize,
    pub alpha: f64,
    /// `R(P_hᵀ Z_out) − R(P_hᵀ LN(Z_in))`.
    pub delta_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    pub own_layer: Vec<OwnLayerDelta>,
}

impl ProbeReport {
    /// Fraction of heads whose own-layer rate change has the sign implied by the step form:
    /// the simplified step compresses for `α > 0`, the full step expands.
    pub fn sign_agreement(&self, form: StepForm) -> f64 {
        let kappa = match form {
            StepForm::Simplified => 1.0,
            StepForm::Full => -1.0,
        };
        let counted: Vec<&OwnLayerDelta> = self.own_layer.iter().filter(|d| d.alpha != 0.0).collect();
        if counted.is_empty() {
            return 0.0;
        }
        let hits = counted
            .iter()
            .filter(|d| d.delta_rate.signum() == -(d.alpha.signum() * kappa))
            .count();
        hits as f64 / counted.len() as f64
    }

    /// Whether the heads include both rate-increasing and rate-decreasing ones.
    pub fn has_both_signs(&self) -> bool {
        self.own_layer.iter().any(|d| d.delta_rate > 0.0) && self.own_layer.iter().any(|d| d.delta_rate < 0.0)
    }
}

/// Projected coding rates of every self-attention head's subspace at every embedding state.
///
/// For the SA variant the state is the full concatenation `[Z, Q]`; for the CA variant only the
/// self-attention layers are probed.
pub fn layerwise_rate_probe(params: &DecoderParams, cfg: &DecoderConfig, z0: &Matrix) -> Result<ProbeReport> {
    let out = forward(z0, params, cfg)?;
    let rate = cfg.rate();
    let states: Vec<Matrix> = match cfg.variant {
        Variant::Sa => std::iter::once(Matrix::hcat(&[z0, &params.q0]))
            .chain(out.trace.iter().map(|(z, q)| Matrix::hcat(&[z, q])))
            .collect(),
        Variant::Ca => std::iter::once(z0.clone())
            .chain(out.trace.iter().take(cfg.sa_layers).map(|(z, _)| z.clone()))
            .collect(),
    };
    let probed = cfg.sa_layers;
    let totals = states
        .iter()
        .map(|s| coding_rate(s, &rate))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut own_layer = Vec::new();
    for (l, layer) in params.layers[..probed].iter().enumerate() {
        for h in 0..layer.dict.heads() {
            let ph = layer.dict.head(h);
            let ortho = qr_orthonormalize(&ph).ok();
            for (point, s) in states.iter().enumerate() {
                let projected = projected_coding_rate(s, &ph, &rate)?.value;
                let ratio_num = match &ortho {
                    Some(u) => coding_rate(&u.matmul(&u.t_matmul(s)), &rate)?,
                    None => coding_rate(&ph.matmul(&ph.t_matmul(s)), &rate)?,
                };
                let ratio = if totals[point] > 0.0 {
                    ratio_num / totals[point]
                } else {
                    0.0
                };
                rows.push(ProbeRow {
                    layer: l,
                    head: h,
                    point,
                    projected_rate: projected,
                    rate_ratio: ratio,
                });
            }
            let input = layer_norm(&states[l], &layer.norm)?;
            let before = projected_coding_rate(&input, &ph, &rate)?.value;
            let after = projected_coding_rate(&states[l + 1], &ph, &rate)?.value;
            own_layer.push(OwnLayerDelta {
                layer: l,
                head: h,
                alpha: layer.alpha,
                delta_rate: after - before,
            });
        }
    }
    Ok(ProbeReport { rows, own_layer })
}

/// Rates of the embeddings and of the class embeddings after one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementGap {
    /// 0 is the input state.
    pub point: usize,
    pub rate_z: f64,
    /// `R(Q)` of the `D x C` class embeddings.
    pub rate_q: f64,
    /// `R(Q̄)` with each class column replicated by the number of patches assigned to it.
    pub rate_qbar: f64,
    /// `R(Z) − R(Q̄)`.
    pub gap: f64,
}

/// `R(Z_ℓ)` against the rate of the class embeddings at every state, with assignments taken
/// from `argmax Q_ℓᵀ Z_ℓ`.
pub fn refinement_gaps(params: &DecoderParams, cfg: &DecoderConfig, z0: &Matrix) -> Result<Vec<RefinementGap>> {
    let out = forward(z0, params, cfg)?;
    let rate = cfg.rate();
    let states = std::iter::once((z0.clone(), params.q0.clone())).chain(out.trace);
    states
        .enumerate()
        .map(|(point, (z, q))| {
            let labels = argmax_columns(&q.t_matmul(&z));
            let mut counts = vec![0usize; q.cols()];
            for l in labels {
                counts[l] += 1;
            }
            let rate_z = coding_rate(&z, &rate)?;
            let rate_qbar = coding_rate(&q.replicate_columns(&counts), &rate)?;
            Ok(RefinementGap {
                point,
                rate_z,
                rate_q: coding_rate(&q, &rate)?,
                rate_qbar,
                gap: rate_z - rate_qbar,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "sigma")]
pub enum Perturbation {
    /// `P_h ← P_h O_h` with an independent random orthogonal `O_h` per head.
    PerHeadOrthogonal,
    /// `P ← P O` with one random orthogonal `K x K` matrix.
    FullOrthogonal,
    /// `P_h ← qr(P_h)`.
    OrthogonalizeHeads,
    /// `P ← P + σ·noise`.
    GaussianNoise(f64),
}

fn random_orthogonal(n: usize, rng: &mut Rng) -> Result<Matrix> {
    qr_orthonormalize(&rng.gaussian_matrix(n, n))
}

/// Perturbed copy of every layer's dictionary; other parameters are untouched.
pub fn perturb_params(params: &DecoderParams, kind: Perturbation, seed: Seed) -> Result<DecoderParams> {
    let mut rng = Rng::new(seed.derive("perturb"));
    let mut out = params.clone();
    for layer in &mut out.layers {
        let heads = layer.dict.heads();
        layer.dict = match kind {
            Perturbation::PerHeadOrthogonal => {
                let m = layer.dict.head_dim();
                layer.dict.map_heads(|_, b| Ok(b.matmul(&random_orthogonal(m, &mut rng)?)))?
            }
            Perturbation::FullOrthogonal => {
                let k = layer.dict.full().cols();
                let o = random_orthogonal(k, &mut rng)?;
                SubspaceDictionary::new(layer.dict.full().matmul(&o), heads)?
            }
            Perturbation::OrthogonalizeHeads => layer.dict.map_heads(|_, b| qr_orthonormalize(&b))?,
            Perturbation::GaussianNoise(sigma) => {
                let p = layer.dict.full();
                if sigma == 0.0 {
                    layer.dict.clone()
                } else {
                    let noise = rng.gaussian_matrix(p.rows(), p.cols()).scale(sigma);
                    SubspaceDictionary::new(p + &noise, heads)?
                }
            }
        };
    }
    Ok(out)
}

fn variant_code(v: Variant) -> u32 {
    match v {
        Variant::Sa => 0,
        Variant::Ca => 1,
    }
}

fn form_code(f: StepForm) -> u32 {
    match f {
        StepForm::Full => 0,
        StepForm::Simplified => 1,
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(cfg: &DecoderConfig, params: &DecoderParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        variant_code(cfg.variant),
        cfg.dim as u32,
        cfg.sa_layers as u32,
        cfg.ca_layers as u32,
        cfg.heads as u32,
        cfg.head_dim as u32,
        cfg.num_classes as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&cfg.epsilon.to_le_bytes());
    for v in [
        form_code(cfg.step_form),
        cfg.final_norm as u32,
        cfg.normalize_queries as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for t in params.to_tensors() {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ShapeCorrupt {
                path: self.path.to_path_buf(),
                detail: format!("needs {} bytes, file has {}", self.pos + n, self.bytes.len()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(DecoderConfig, DecoderParams)> {
    let corrupt = |detail: String| Error::ShapeCorrupt {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut cur = Cursor { bytes, pos: 4, path };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let variant = match cur.u32()? {
        0 => Variant::Sa,
        1 => Variant::Ca,
        v => return Err(corrupt(format!("unknown variant code {v}"))),
    };
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = cur.u32()? as usize;
    }
    let epsilon = cur.f64()?;
    let step_form = match cur.u32()? {
        0 => StepForm::Full,
        1 => StepForm::Simplified,
        v => return Err(corrupt(format!("unknown step form code {v}"))),
    };
    let final_norm = cur.u32()? != 0;
    let normalize_queries = cur.u32()? != 0;
    let cfg = DecoderConfig {
        variant,
        dim: dims[0],
        sa_layers: dims[1],
        ca_layers: dims[2],
        heads: dims[3],
        head_dim: dims[4],
        num_classes: dims[5],
        epsilon,
        step_form,
        final_norm,
        normalize_queries,
    };
    cfg.validate().map_err(|e| corrupt(e.to_string()))?;
    let shapes = DecoderParams::tensor_shapes(&cfg);
    let needed: usize = shapes.iter().map(|(r, c)| r * c).sum::<usize>() * 8;
    if bytes.len() - cur.pos != needed {
        return Err(corrupt(format!(
            "tensor payload is {} bytes, expected {needed}",
            bytes.len() - cur.pos
        )));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for (r, c) in shapes {
        let data = (0..r * c).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Matrix::from_col_major(r, c, data)?);
    }
    let params = DecoderParams::from_tensors(&cfg, &tensors).map_err(|e| corrupt(e.to_string()))?;
    Ok((cfg, params))
}

/// Writes the binary checkpoint and a JSON sidecar (`<path>.json`) describing the config.
pub fn save_checkpoint(path: &Path, cfg: &DecoderConfig, params: &DecoderParams) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(cfg, params))?;
    let sidecar = serde_json::json!({
        "format": "DPCT",
        "version": CHECKPOINT_VERSION,
        "config": cfg,
        "tensor_shapes": DecoderParams::tensor_shapes(cfg),
    });
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn load_checkpoint(path: &Path) -> Result<(DecoderConfig, DecoderParams)> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, path)
}
