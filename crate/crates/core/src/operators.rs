//! Subspace attention operators and their unrolled-gradient step forms.
//!
//! Softmax is always taken column-wise: for a score matrix `S = Kᵀ X` with keys in the rows,
//! each column (one query) is normalized over the keys.

use serde::{Deserialize, Serialize};

use crate::coding_rate::RateConfig;
use crate::error::{shape_err, Error, Result};
use crate::matcore::{qr_orthonormalize, Cholesky, Matrix, Rng};

/// Default LayerNorm stabilizer.
pub const DEFAULT_LN_EPS: f64 = 1e-10;

/// Largest `C·N²` the per-basis reference operator will allocate.
pub const PER_BASIS_CAP: usize = 1 << 24;

/// Column-wise softmax with max subtraction.
pub fn softmax_columns(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for j in 0..out.cols() {
        let col = out.col_mut(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in col.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in col.iter_mut() {
            *x /= sum;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub eps: f64,
}

impl LayerNormParams {
    /// Unit gain, zero bias.
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
            eps: DEFAULT_LN_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }
}

/// Per-column normalization over the feature axis (biased variance), then `gain ⊙ x + bias`.
pub fn layer_norm(z: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
    let d = z.rows();
    if p.gain.len() != d || p.bias.len() != d {
        return Err(shape_err(
            "layer_norm",
            format!("gain/bias of length {d}"),
            format!("{}/{}", p.gain.len(), p.bias.len()),
        ));
    }
    let mut out = z.clone();
    for j in 0..z.cols() {
        let col = out.col_mut(j);
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + p.eps).sqrt();
        for (i, x) in col.iter_mut().enumerate() {
            *x = p.gain[i] * (*x - mean) * inv + p.bias[i];
        }
    }
    Ok(out)
}

/// `D x K` dictionary split into `H` consecutive head blocks of `M` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceDictionary {
    full: Matrix,
    heads: usize,
}

impl SubspaceDictionary {
    pub fn new(full: Matrix, heads: usize) -> Result<Self> {
        if heads == 0 || full.cols() == 0 || full.cols() % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} dictionary columns cannot be split into {heads} equal heads",
                full.cols()
            )));
        }
        full.ensure_finite("subspace dictionary")?;
        Ok(Self { full, heads })
    }

    /// Concatenates equally sized head blocks.
    pub fn from_heads(blocks: &[Matrix]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("no head blocks".into()));
        }
        let (d, m) = blocks[0].shape();
        for b in blocks {
            if b.shape() != (d, m) {
                return Err(shape_err(
                    "SubspaceDictionary::from_heads",
                    format!("{d}x{m}"),
                    format!("{}x{}", b.rows(), b.cols()),
                ));
            }
        }
        let refs: Vec<&Matrix> = blocks.iter().collect();
        Self::new(Matrix::hcat(&refs), blocks.len())
    }

    /// Each head block is an independent QR-orthonormalized Gaussian.
    pub fn random_orthonormal(dim: usize, heads: usize, head_dim: usize, rng: &mut Rng) -> Result<Self> {
        if head_dim > dim {
            return Err(Error::InvalidArgument(format!(
                "head dimension {head_dim} exceeds ambient dimension {dim}"
            )));
        }
        let blocks = (0..heads)
            .map(|_| qr_orthonormalize(&rng.gaussian_matrix(dim, head_dim)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_heads(&blocks)
    }

    pub fn full(&self) -> &Matrix {
        &self.full
    }

    pub fn dim(&self) -> usize {
        self.full.rows()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.full.cols() / self.heads
    }

    pub fn head(&self, h: usize) -> Matrix {
        self.full.cols_range(h * self.head_dim(), self.head_dim())
    }

    /// Applies `f` to every head block and reassembles the dictionary.
    pub fn map_heads(&self, mut f: impl FnMut(usize, Matrix) -> Result<Matrix>) -> Result<Self> {
        let blocks = (0..self.heads)
            .map(|h| f(h, self.head(h)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_heads(&blocks)
    }
}

/// Which of the two update formulas a step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepForm {
    /// `(1 + αc)X − αc·Op(X)` with the operator carrying its own `c` prefactor.
    Full,
    /// `X − α·Op(X)` with the operator's prefactor dropped.
    #[default]
    Simplified,
}

/// Attention weighting between keys and queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AttentionKernel {
    #[default]
    Softmax,
    /// `AᵀA (I + c AᵀA)⁻¹`, for which the full self-attention step is an exact rate-gradient step.
    ExactInverse,
}

fn check_rows(op: &'static str, a: &Matrix, rows: usize) -> Result<()> {
    if a.rows() != rows {
        return Err(shape_err(
            op,
            format!("{rows} rows"),
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    Ok(())
}

/// `Aᵀ(I_M + c A Aᵀ)⁻¹ A`, equal to `AᵀA (I_N + c AᵀA)⁻¹`.
fn exact_inverse_kernel(a: &Matrix, c: f64) -> Result<Matrix> {
    let mut s = a.gram_outer().scale(c);
    for i in 0..s.rows() {
        s[(i, i)] += 1.0;
    }
    let solved = Cholesky::new(&s)?.solve(a);
    let k = a.t_matmul(&solved);
    Ok(Matrix::from_fn(k.rows(), k.cols(), |i, j| 0.5 * (k.get(i, j) + k.get(j, i))))
}

/// Self-attention of one head: `A·softmax(AᵀA)` with `A = Phᵀ Z`.
pub fn ssa_head(z: &Matrix, ph: &Matrix) -> Result<Matrix> {
    check_rows("ssa_head", ph, z.rows())?;
    let a = ph.t_matmul(z);
    Ok(a.matmul(&softmax_columns(&a.gram_inner())))
}

fn ssa_head_kernel(z: &Matrix, ph: &Matrix, kernel: AttentionKernel, c: f64) -> Result<Matrix> {
    match kernel {
        AttentionKernel::Softmax => ssa_head(z, ph),
        AttentionKernel::ExactInverse => {
            let a = ph.t_matmul(z);
            Ok(a.matmul(&exact_inverse_kernel(&a, c)?))
        }
    }
}

/// Grouped multi-head self-attention `scale · Σ_h P_h · SSA(Z | P_h)`.
///
/// The `M / (N ε²)` prefactor is applied in the full form and dropped in the simplified form.
pub fn mssa(
    z: &Matrix,
    dict: &SubspaceDictionary,
    cfg: &RateConfig,
    form: StepForm,
    kernel: AttentionKernel,
) -> Result<Matrix> {
    check_rows("mssa", z, dict.dim())?;
    let c = cfg.scale(dict.head_dim(), z.cols());
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for h in 0..dict.heads() {
        let ph = dict.head(h);
        let head = ssa_head_kernel(z, &ph, kernel, c)?;
        out.axpy(1.0, &ph.matmul(&head));
    }
    Ok(match form {
        StepForm::Full => out.scale(c),
        StepForm::Simplified => out,
    })
}

/// One head per basis vector: `(1 / (N ε²)) Σ_c p_c · SSA(Z | p_c)`.
///
/// Reference implementation; refuses work above `cap` attention entries.
pub fn mssa_per_basis(z: &Matrix, p: &Matrix, cfg: &RateConfig, cap: usize) -> Result<Matrix> {
    check_rows("mssa_per_basis", p, z.rows())?;
    let n = z.cols();
    let needed = p.cols().saturating_mul(n).saturating_mul(n);
    if needed > cap {
        return Err(Error::ResourceCap { needed, cap });
    }
    let c = cfg.scale(1, n);
    let mut out = Matrix::zeros(z.rows(), n);
    for k in 0..p.cols() {
        let pk = p.cols_range(k, 1);
        let a: Vec<f64> = (0..n).map(|j| crate::matcore::dot(pk.data(), z.col(j))).collect();
        // SSA(Z | p) is 1 x N: a · softmax(aᵀa)
        let scores = Matrix::from_fn(n, n, |i, j| a[i] * a[j]);
        let w = softmax_columns(&scores);
        for j in 0..n {
            let s: f64 = (0..n).map(|i| a[i] * w.get(i, j)).sum();
            for (dst, &pv) in out.col_mut(j).iter_mut().zip(pk.data()) {
                *dst += c * pv * s;
            }
        }
    }
    Ok(out)
}

/// One self-attention step on `Z`.
pub fn mssa_step(
    z: &Matrix,
    dict: &SubspaceDictionary,
    alpha: f64,
    cfg: &RateConfig,
    form: StepForm,
    kernel: AttentionKernel,
) -> Result<Matrix> {
    let op = mssa(z, dict, cfg, form, kernel)?;
    Ok(match form {
        StepForm::Full => {
            let c = cfg.scale(dict.head_dim(), z.cols());
            &z.scale(1.0 + alpha * c) - &op.scale(alpha * c)
        }
        StepForm::Simplified => z - &op.scale(alpha),
    })
}

/// Cross-attention of one head: `(Phᵀ Z)·softmax((Phᵀ Z)ᵀ(Phᵀ Q))`, an `M x C` matrix.
pub fn sca_head(q: &Matrix, z: &Matrix, ph: &Matrix) -> Result<Matrix> {
    check_rows("sca_head", ph, z.rows())?;
    check_rows("sca_head", q, z.rows())?;
    let a = ph.t_matmul(z);
    let b = ph.t_matmul(q);
    Ok(a.matmul(&softmax_columns(&a.t_matmul(&b))))
}

/// Multi-head cross-attention `scale · Σ_h P_h · SCA(Q | Z, P_h)`; the prefactor follows `form`.
pub fn msca(q: &Matrix, z: &Matrix, dict: &SubspaceDictionary, cfg: &RateConfig, form: StepForm) -> Result<Matrix> {
    check_rows("msca", z, dict.dim())?;
    check_rows("msca", q, dict.dim())?;
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for h in 0..dict.heads() {
        let ph = dict.head(h);
        out.axpy(1.0, &ph.matmul(&sca_head(q, z, &ph)?));
    }
    Ok(match form {
        StepForm::Full => out.scale(cfg.scale(dict.head_dim(), z.cols())),
        StepForm::Simplified => out,
    })
}

/// One cross-attention step on the class embeddings.
pub fn msca_step(
    q: &Matrix,
    z: &Matrix,
    dict: &SubspaceDictionary,
    alpha: f64,
    cfg: &RateConfig,
    form: StepForm,
) -> Result<Matrix> {
    let op = msca(q, z, dict, cfg, form)?;
    Ok(match form {
        StepForm::Full => {
            let c = cfg.scale(dict.head_dim(), z.cols());
            &q.scale(1.0 + alpha * c) - &op.scale(alpha * c)
        }
        StepForm::Simplified => q - &op.scale(alpha),
    })
}

/// Rate-ascent step on a surrogate `Q̄`:
/// `(1 + αc)Q̄ − αc² Q̄ K(Q̄)` with `c = D / (N ε²)`.
pub fn qbar_sa_step(qbar: &Matrix, alpha: f64, cfg: &RateConfig, kernel: AttentionKernel) -> Result<Matrix> {
    let c = cfg.scale(qbar.rows(), qbar.cols());
    let weights = match kernel {
        AttentionKernel::Softmax => softmax_columns(&qbar.gram_inner()),
        AttentionKernel::ExactInverse => exact_inverse_kernel(qbar, c)?,
    };
    Ok(&qbar.scale(1.0 + alpha * c) - &qbar.matmul(&weights).scale(alpha * c * c))
}

/// Cross-attention step with raw embeddings as keys:
/// `(1 + αc)Q − αc² Z softmax(ZᵀQ)` with `c = D / (N ε²)`.
pub fn ca_step(q: &Matrix, z: &Matrix, alpha: f64, cfg: &RateConfig) -> Result<Matrix> {
    check_rows("ca_step", q, z.rows())?;
    let c = cfg.scale(z.rows(), z.cols());
    let attended = z.matmul(&softmax_columns(&z.t_matmul(q)));
    Ok(&q.scale(1.0 + alpha * c) - &attended.scale(alpha * c * c))
}

/// The four products appearing in softmax-free self-attention on `[Z, Q]`.
#[derive(Debug, Clone)]
pub struct ConcatTerms {
    pub zzt_z: Matrix,
    pub qqt_z: Matrix,
    pub zzt_q: Matrix,
    pub qqt_q: Matrix,
}

#[derive(Debug, Clone)]
pub struct ConcatDecomposition {
    pub z_next: Matrix,
    pub q_next: Matrix,
    pub terms: ConcatTerms,
}

/// Softmax-free self-attention `X − α X XᵀX` on `X = [Z, Q]`, evaluated on the concatenation,
/// together with its split into four products.
pub fn concat_sa_decompose(z: &Matrix, q: &Matrix, alpha: f64) -> Result<ConcatDecomposition> {
    check_rows("concat_sa_decompose", q, z.rows())?;
    let n = z.cols();
    let x = Matrix::hcat(&[z, q]);
    let next = &x - &x.matmul(&x.gram_inner()).scale(alpha);
    let zzt = z.gram_outer();
    let qqt = q.gram_outer();
    let terms = ConcatTerms {
        zzt_z: zzt.matmul(z),
        qqt_z: qqt.matmul(z),
        zzt_q: zzt.matmul(q),
        qqt_q: qqt.matmul(q),
    };
    Ok(ConcatDecomposition {
        z_next: next.cols_range(0, n),
        q_next: next.cols_range(n, q.cols()),
        terms,
    })
}

impl ConcatTerms {
    /// Reassembles the update from the four products.
    pub fn apply(&self, z: &Matrix, q: &Matrix, alpha: f64) -> (Matrix, Matrix) {
        let z_next = z - &(&self.zzt_z + &self.qqt_z).scale(alpha);
        let q_next = q - &(&self.zzt_q + &self.qqt_q).scale(alpha);
        (z_next, q_next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding_rate::{coding_rate, projected_rate_gradient};
    use crate::matcore::{seeded_gaussian, Seed};

    fn naive_softmax_attention(keys: &Matrix, values: &Matrix, queries: &Matrix) -> Matrix {
        // values · softmax_over_keys(keysᵀ queries), written as explicit loops
        let n = keys.cols();
        let mut out = Matrix::zeros(values.rows(), queries.cols());
        for q in 0..queries.cols() {
            let scores: Vec<f64> = (0..n)
                .map(|k| (0..keys.rows()).map(|r| keys.get(r, k) * queries.get(r, q)).sum())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for r in 0..values.rows() {
                out[(r, q)] = (0..n).map(|k| values.get(r, k) * e[k] / total).sum();
            }
        }
        out
    }

    fn random_orthogonal(n: usize, seed: u64) -> Matrix {
        qr_orthonormalize(&seeded_gaussian(n, n, Seed(seed))).unwrap()
    }

    fn cfg() -> RateConfig {
        RateConfig::default()
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let s = seeded_gaussian(7, 5, Seed(1)).scale(30.0);
        let w = softmax_columns(&s);
        for j in 0..5 {
            assert!((w.col(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let p = LayerNormParams::identity(3);
        let z = Matrix::from_fn(3, 1, |_, _| 4.0);
        assert_eq!(layer_norm(&z, &p).unwrap().max_abs(), 0.0);

        let p2 = LayerNormParams::identity(2);
        let z = Matrix::column(&[1.0, -1.0]);
        assert!(layer_norm(&z, &p2).unwrap().max_abs_diff(&z) < 1e-9);

        let p = LayerNormParams::identity(16);
        let z = seeded_gaussian(16, 1, Seed(2));
        let y = layer_norm(&z, &p).unwrap();
        let mean = y.col(0).iter().sum::<f64>() / 16.0;
        let var = y.col(0).iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-12);
        assert!((var - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn ssa_head_cases() {
        let z = seeded_gaussian(4, 1, Seed(3));
        let ph = seeded_gaussian(4, 2, Seed(4));
        assert!(ssa_head(&z, &ph).unwrap().max_abs_diff(&ph.t_matmul(&z)) < 1e-15);

        let z = seeded_gaussian(4, 6, Seed(5));
        assert_eq!(ssa_head(&z, &Matrix::zeros(4, 2)).unwrap().max_abs(), 0.0);

        let ph = seeded_gaussian(4, 2, Seed(6));
        let a = ph.t_matmul(&z);
        let oracle = naive_softmax_attention(&a, &a, &a);
        assert!(ssa_head(&z, &ph).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn mssa_matches_head_accumulation() {
        let z = seeded_gaussian(8, 10, Seed(7));
        let dict = SubspaceDictionary::new(seeded_gaussian(8, 6, Seed(8)), 3).unwrap();
        let got = mssa(&z, &dict, &cfg(), StepForm::Full, AttentionKernel::Softmax).unwrap();
        let c = 2.0 / (10.0 * 0.25);
        let mut oracle = Matrix::zeros(8, 10);
        for h in 0..3 {
            let ph = dict.full().cols_range(2 * h, 2);
            let a = ph.t_matmul(&z);
            oracle = &oracle + &ph.matmul(&naive_softmax_attention(&a, &a, &a));
        }
        assert!(got.max_abs_diff(&oracle.scale(c)) < 1e-12);
    }

    #[test]
    fn mssa_single_head() {
        let z = seeded_gaussian(5, 7, Seed(9));
        let p = seeded_gaussian(5, 3, Seed(10));
        let dict = SubspaceDictionary::new(p.clone(), 1).unwrap();
        let got = mssa(&z, &dict, &cfg(), StepForm::Simplified, AttentionKernel::Softmax).unwrap();
        assert!(got.max_abs_diff(&p.matmul(&ssa_head(&z, &p).unwrap())) < 1e-15);
    }

    #[test]
    fn gauge_invariance_mssa_and_msca() {
        let z = seeded_gaussian(12, 20, Seed(11));
        let q = seeded_gaussian(12, 5, Seed(12));
        let mut rng = Rng::new(Seed(13));
        let dict = SubspaceDictionary::random_orthonormal(12, 3, 4, &mut rng).unwrap();
        let rotated = dict
            .map_heads(|h, b| Ok(b.matmul(&random_orthogonal(4, 100 + h as u64))))
            .unwrap();
        for form in [StepForm::Full, StepForm::Simplified] {
            let a = mssa(&z, &dict, &cfg(), form, AttentionKernel::Softmax).unwrap();
            let b = mssa(&z, &rotated, &cfg(), form, AttentionKernel::Softmax).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-10);
            let a = msca(&q, &z, &dict, &cfg(), form).unwrap();
            let b = msca(&q, &z, &rotated, &cfg(), form).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-10);
        }
    }

    #[test]
    fn per_basis_matches_grouped_with_unit_heads() {
        let z = seeded_gaussian(6, 16, Seed(14));
        let p = seeded_gaussian(6, 4, Seed(15));
        let dict = SubspaceDictionary::new(p.clone(), 4).unwrap();
        let grouped = mssa(&z, &dict, &cfg(), StepForm::Full, AttentionKernel::Softmax).unwrap();
        let per = mssa_per_basis(&z, &p, &cfg(), PER_BASIS_CAP).unwrap();
        assert!(grouped.max_abs_diff(&per) < 1e-12);
        assert_eq!(mssa_per_basis(&Matrix::zeros(6, 16), &p, &cfg(), PER_BASIS_CAP).unwrap().max_abs(), 0.0);
        assert!(matches!(
            mssa_per_basis(&z, &p, &cfg(), 100),
            Err(Error::ResourceCap { needed: 1024, cap: 100 })
        ));
    }

    #[test]
    fn steps_with_zero_alpha_or_zero_input() {
        let z = seeded_gaussian(6, 8, Seed(16));
        let q = seeded_gaussian(6, 3, Seed(17));
        let dict = SubspaceDictionary::new(seeded_gaussian(6, 4, Seed(18)), 2).unwrap();
        for form in [StepForm::Full, StepForm::Simplified] {
            let k = AttentionKernel::Softmax;
            assert_eq!(mssa_step(&z, &dict, 0.0, &cfg(), form, k).unwrap(), z);
            assert_eq!(mssa_step(&Matrix::zeros(6, 8), &dict, 0.3, &cfg(), form, k).unwrap().max_abs(), 0.0);
            assert_eq!(msca_step(&q, &z, &dict, 0.0, &cfg(), form).unwrap(), q);
        }
        assert_eq!(qbar_sa_step(&z, 0.0, &cfg(), AttentionKernel::Softmax).unwrap(), z);
        assert_eq!(qbar_sa_step(&Matrix::zeros(6, 8), 0.2, &cfg(), AttentionKernel::Softmax).unwrap().max_abs(), 0.0);
        assert_eq!(ca_step(&q, &z, 0.0, &cfg()).unwrap(), q);
    }

    #[test]
    fn exact_kernel_full_step_is_gradient_step() {
        // square orthogonal dictionary: P Pᵀ = I
        let z = seeded_gaussian(8, 12, Seed(19));
        let o = random_orthogonal(8, 20);
        let dict = SubspaceDictionary::new(o, 2).unwrap();
        let alpha = 1e-3;
        let out = mssa_step(&z, &dict, alpha, &cfg(), StepForm::Full, AttentionKernel::ExactInverse).unwrap();
        let mut grad = Matrix::zeros(8, 12);
        for h in 0..2 {
            grad.axpy(1.0, &projected_rate_gradient(&z, &dict.head(h), &cfg()).unwrap());
        }
        let delta = &out - &z;
        assert!(delta.max_abs_diff(&grad.scale(alpha)) < 1e-12);
    }

    #[test]
    fn sca_cases() {
        let z = seeded_gaussian(4, 1, Seed(21));
        let q = seeded_gaussian(4, 3, Seed(22));
        let ph = seeded_gaussian(4, 2, Seed(23));
        let out = sca_head(&q, &z, &ph).unwrap();
        let a = ph.t_matmul(&z);
        for c in 0..3 {
            assert!((out.get(0, c) - a.get(0, 0)).abs() < 1e-15);
            assert!((out.get(1, c) - a.get(1, 0)).abs() < 1e-15);
        }

        let z = seeded_gaussian(4, 6, Seed(24));
        assert!(sca_head(&z, &z, &ph).unwrap().max_abs_diff(&ssa_head(&z, &ph).unwrap()) < 1e-15);

        let b = ph.t_matmul(&q);
        let a = ph.t_matmul(&z);
        let oracle = naive_softmax_attention(&a, &a, &b);
        assert!(sca_head(&q, &z, &ph).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn msca_output_in_dictionary_span() {
        let z = seeded_gaussian(10, 15, Seed(25));
        let q = seeded_gaussian(10, 4, Seed(26));
        let mut rng = Rng::new(Seed(27));
        let dict = SubspaceDictionary::random_orthonormal(10, 2, 3, &mut rng).unwrap();
        let out = msca(&q, &z, &dict, &cfg(), StepForm::Full).unwrap();
        let basis = qr_orthonormalize(dict.full()).unwrap();
        let residual = &out - &basis.matmul(&basis.t_matmul(&out));
        assert!(residual.max_abs() <= 1e-10);
    }

    #[test]
    fn qbar_exact_step_increases_rate() {
        let qbar = seeded_gaussian(6, 10, Seed(28));
        let before = coding_rate(&qbar, &cfg()).unwrap();
        let after = qbar_sa_step(&qbar, 1e-3, &cfg(), AttentionKernel::ExactInverse).unwrap();
        assert!(coding_rate(&after, &cfg()).unwrap() > before);
    }

    #[test]
    fn ca_step_cases() {
        let z = seeded_gaussian(5, 7, Seed(29));
        let a = ca_step(&z, &z, 0.01, &cfg()).unwrap();
        let b = qbar_sa_step(&z, 0.01, &cfg(), AttentionKernel::Softmax).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);

        let q = seeded_gaussian(5, 3, Seed(30));
        let alpha = 0.05;
        let c = 5.0 / (7.0 * 0.25);
        let oracle = &q.scale(1.0 + alpha * c) - &naive_softmax_attention(&z, &z, &q).scale(alpha * c * c);
        assert!(ca_step(&q, &z, alpha, &cfg()).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn concat_decomposition_cases() {
        let z = seeded_gaussian(8, 12, Seed(31));
        let q = seeded_gaussian(8, 5, Seed(32));
        let d = concat_sa_decompose(&z, &q, 0.01).unwrap();
        let (zn, qn) = d.terms.apply(&z, &q, 0.01);
        assert!(d.z_next.max_abs_diff(&zn) < 1e-12);
        assert!(d.q_next.max_abs_diff(&qn) < 1e-12);

        let zero_q = Matrix::zeros(8, 5);
        let d = concat_sa_decompose(&z, &zero_q, 0.01).unwrap();
        let expected = &z - &z.matmul(&z.gram_inner()).scale(0.01);
        assert!(d.z_next.max_abs_diff(&expected) < 1e-12);
        assert_eq!(d.q_next.max_abs(), 0.0);

        let d = concat_sa_decompose(&z, &q, 0.0).unwrap();
        assert_eq!(d.z_next, z);
        assert_eq!(d.q_next, q);
    }

    #[test]
    fn shape_errors() {
        let z = seeded_gaussian(4, 3, Seed(33));
        let dict = SubspaceDictionary::new(seeded_gaussian(5, 2, Seed(34)), 1).unwrap();
        assert!(matches!(
            mssa(&z, &dict, &cfg(), StepForm::Full, AttentionKernel::Softmax),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(SubspaceDictionary::new(seeded_gaussian(4, 5, Seed(35)), 2).is_err());
    }
}
