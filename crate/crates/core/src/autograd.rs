//! Reverse-mode differentiation over a fixed set of matrix operations, the decoder graph built
//! from them, and the SGD training loops for the decoder and the linear baseline.
//!
//! A [`Tape`] records nodes in creation order. Every operation refers only to earlier nodes, so
//! the recorded graph is acyclic by construction and a single reverse sweep visits nodes in
//! topological order.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledImage;
use crate::decoder::{DecoderConfig, DecoderParams, Variant};
use crate::error::{shape_err, Error, Result};
use crate::matcore::{Matrix, Rng, Seed};
use crate::operators::{softmax_columns, StepForm, DEFAULT_LN_EPS};
use crate::subspace::argmax_columns;

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    TMatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    SoftmaxCols(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    AddBias(usize, usize),
    CrossEntropy(usize, Vec<usize>),
    SumSquaresHalf(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(m: &Matrix) -> String {
    format!("{}x{}", m.rows(), m.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVariable(v.index));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Matrix> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    fn val(&self, i: usize) -> &Matrix {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        if self.val(i).cols() != self.val(j).rows() {
            return Err(shape_err("matmul", format!("{} rows on the right", self.val(i).cols()), dims(self.val(j))));
        }
        let v = self.val(i).matmul(self.val(j));
        Ok(self.push(v, Op::MatMul(i, j)))
    }

    /// `aᵀ b`.
    pub fn t_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        if self.val(i).rows() != self.val(j).rows() {
            return Err(shape_err("t_matmul", format!("{} rows", self.val(i).rows()), dims(self.val(j))));
        }
        let v = self.val(i).t_matmul(self.val(j));
        Ok(self.push(v, Op::TMatMul(i, j)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let v = self.val(i).transpose();
        Ok(self.push(v, Op::Transpose(i)))
    }

    fn same_shape(&self, op: &'static str, i: usize, j: usize) -> Result<()> {
        if self.val(i).shape() != self.val(j).shape() {
            return Err(shape_err(op, dims(self.val(i)), dims(self.val(j))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", i, j)?;
        let v = self.val(i) + self.val(j);
        Ok(self.push(v, Op::Add(i, j)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", i, j)?;
        let v = self.val(i) - self.val(j);
        Ok(self.push(v, Op::Sub(i, j)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let i = self.idx(a)?;
        let v = self.val(i).scale(s);
        Ok(self.push(v, Op::Scale(i, s)))
    }

    /// `x · s` for a `1 x 1` variable `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (i, j) = (self.idx(x)?, self.idx(s)?);
        if self.val(j).shape() != (1, 1) {
            return Err(shape_err("mul_scalar", "1x1", dims(self.val(j))));
        }
        let v = self.val(i).scale(self.val(j).as_scalar());
        Ok(self.push(v, Op::MulScalar(i, j)))
    }

    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let v = softmax_columns(self.val(i));
        Ok(self.push(v, Op::SoftmaxCols(i)))
    }

    /// Per-column LayerNorm with `D x 1` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (i, g, b) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let d = self.val(i).rows();
        for k in [g, b] {
            if self.val(k).shape() != (d, 1) {
                return Err(shape_err("layer_norm", format!("{d}x1"), dims(self.val(k))));
            }
        }
        let xv = self.val(i);
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.cols());
        for j in 0..xv.cols() {
            let col = normalized.col_mut(j);
            let mean = col.iter().sum::<f64>() / d as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in col.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (gv, bv) = (self.val(g).data(), self.val(b).data());
        let out = Matrix::from_fn(d, xv.cols(), |r, c| gv[r] * normalized.get(r, c) + bv[r]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: i,
                gain: g,
                bias: b,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        if self.val(i).rows() != self.val(j).rows() {
            return Err(shape_err("concat_cols", format!("{} rows", self.val(i).rows()), dims(self.val(j))));
        }
        let v = Matrix::hcat(&[self.val(i), self.val(j)]);
        Ok(self.push(v, Op::ConcatCols(i, j)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.idx(a)?;
        if start + len > self.val(i).cols() {
            return Err(shape_err(
                "slice_cols",
                format!("at least {} columns", start + len),
                dims(self.val(i)),
            ));
        }
        let v = self.val(i).cols_range(start, len);
        Ok(self.push(v, Op::SliceCols(i, start)))
    }

    /// `x + b 1ᵀ` for a column `b`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(x)?, self.idx(b)?);
        let r = self.val(i).rows();
        if self.val(j).shape() != (r, 1) {
            return Err(shape_err("add_bias", format!("{r}x1"), dims(self.val(j))));
        }
        let bv = self.val(j).data().to_vec();
        let v = Matrix::from_fn(r, self.val(i).cols(), |a, c| self.val(i).get(a, c) + bv[a]);
        Ok(self.push(v, Op::AddBias(i, j)))
    }

    /// Mean per-column cross-entropy of logits against labels; a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let i = self.idx(logits)?;
        let loss = cross_entropy_loss(self.val(i), labels)?;
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy(i, labels.to_vec())))
    }

    /// `½‖a‖_F²`.
    pub fn sum_squares_half(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let v = 0.5 * self.val(i).data().iter().map(|x| x * x).sum::<f64>();
        Ok(self.push(Matrix::scalar(v), Op::SumSquaresHalf(i)))
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.idx(root)?;
        let rv = self.val(r);
        if rv.shape() != (1, 1) {
            return Err(Error::NonScalarRoot {
                rows: rv.rows(),
                cols: rv.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; r + 1];
        adj[r] = Some(Matrix::scalar(1.0));
        for k in (0..=r).rev() {
            let Some(g) = adj[k].take() else { continue };
            self.propagate(k, &g, &mut adj);
            adj[k] = Some(g);
        }
        Ok(Gradients { tape: self.id, adj })
    }

    fn propagate(&self, k: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let mut acc = |i: usize, m: Matrix| match &mut adj[i] {
            Some(a) => a.axpy(1.0, &m),
            slot @ None => *slot = Some(m),
        };
        match &self.nodes[k].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(self.val(*b)));
                acc(*b, self.val(*a).t_matmul(g));
            }
            Op::TMatMul(a, b) => {
                acc(*a, self.val(*b).matmul_t(g));
                acc(*b, self.val(*a).matmul(g));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::MulScalar(x, s) => {
                let sv = self.val(*s).as_scalar();
                let ds: f64 = g.data().iter().zip(self.val(*x).data()).map(|(a, b)| a * b).sum();
                acc(*x, g.scale(sv));
                acc(*s, Matrix::scalar(ds));
            }
            Op::SoftmaxCols(a) => {
                let y = &self.nodes[k].value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for j in 0..y.cols() {
                    let (yc, gc) = (y.col(j), g.col(j));
                    let inner: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                    for (d, (yi, gi)) in dx.col_mut(j).iter_mut().zip(yc.iter().zip(gc)) {
                        *d = yi * (gi - inner);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.val(*gain).data();
                let (d, n) = normalized.shape();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = Matrix::zeros(d, n);
                for j in 0..n {
                    let xh = normalized.col(j);
                    let gc = g.col(j);
                    let dxh: Vec<f64> = (0..d).map(|i| gc[i] * gv[i]).collect();
                    for i in 0..d {
                        dgain[i] += gc[i] * xh[i];
                        dbias[i] += gc[i];
                    }
                    let mean_d = dxh.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (i, dst) in dx.col_mut(j).iter_mut().enumerate() {
                        *dst = inv_std[j] * (dxh[i] - mean_d - xh[i] * mean_dx);
                    }
                }
                acc(*x, dx);
                acc(*gain, Matrix::column(&dgain));
                acc(*bias, Matrix::column(&dbias));
            }
            Op::ConcatCols(a, b) => {
                let na = self.val(*a).cols();
                acc(*a, g.cols_range(0, na));
                acc(*b, g.cols_range(na, g.cols() - na));
            }
            Op::SliceCols(a, start) => {
                let src = self.val(*a);
                let mut full = Matrix::zeros(src.rows(), src.cols());
                full.set_cols(*start, g);
                acc(*a, full);
            }
            Op::AddBias(x, b) => {
                let sums: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                acc(*x, g.clone());
                acc(*b, Matrix::column(&sums));
            }
            Op::CrossEntropy(a, labels) => {
                let logits = self.val(*a);
                let mut p = softmax_columns(logits);
                let n = labels.len() as f64;
                let gs = g.as_scalar();
                for (j, &l) in labels.iter().enumerate() {
                    p[(l, j)] -= 1.0;
                }
                acc(*a, p.scale(gs / n));
            }
            Op::SumSquaresHalf(a) => acc(*a, self.val(*a).scale(g.as_scalar())),
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`; zero-shaped like the variable when it does not influence the root.
    pub fn get(&self, tape: &Tape, v: Var) -> Result<Matrix> {
        if v.tape != self.tape {
            return Err(Error::ForeignVariable(v.index));
        }
        let value = tape.value(v)?;
        Ok(self
            .adj
            .get(v.index)
            .and_then(|a| a.clone())
            .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols())))
    }
}

/// Root value and gradients for `params`, in order.
pub fn value_and_grad(tape: &Tape, root: Var, params: &[Var]) -> Result<(f64, Vec<Matrix>)> {
    let grads = tape.backward(root)?;
    let value = tape.value(root)?.as_scalar();
    let g = params.iter().map(|&p| grads.get(tape, p)).collect::<Result<Vec<_>>>()?;
    Ok((value, g))
}

/// Mean over columns of `−log softmax(column)[label]`.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let (c, n) = logits.shape();
    if labels.len() != n {
        return Err(shape_err("cross_entropy_loss", format!("{n} labels"), format!("{}", labels.len())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cross-entropy over zero columns".into()));
    }
    let mut total = 0.0;
    for (j, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
        let col = logits.col(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - col[l];
    }
    Ok(total / n as f64)
}

/// Variables of a decoder graph.
#[derive(Debug, Clone)]
pub struct DecoderGraph {
    /// Leaves in [`DecoderParams::to_tensors`] order.
    pub params: Vec<Var>,
    pub logits: Var,
}

struct LayerVars {
    dict: Var,
    alpha: Var,
    gain: Var,
    bias: Var,
}

fn attention_sum(
    tape: &mut Tape,
    layer: &LayerVars,
    cfg: &DecoderConfig,
    keys: Var,
    queries: Option<Var>,
) -> Result<Var> {
    let m = cfg.head_dim;
    let mut out: Option<Var> = None;
    for h in 0..cfg.heads {
        let ph = tape.slice_cols(layer.dict, h * m, m)?;
        let a = tape.t_matmul(ph, keys)?;
        let scores = match queries {
            None => tape.t_matmul(a, a)?,
            Some(q) => {
                let b = tape.t_matmul(ph, q)?;
                tape.t_matmul(a, b)?
            }
        };
        let w = tape.softmax_cols(scores)?;
        let head = tape.matmul(a, w)?;
        let contrib = tape.matmul(ph, head)?;
        out = Some(match out {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
    }
    Ok(out.expect("at least one head"))
}

/// `x − α·op` (simplified) or `x + α·c·(x − c·op)` (full).
fn step(tape: &mut Tape, x: Var, op: Var, alpha: Var, form: StepForm, c: f64) -> Result<Var> {
    match form {
        StepForm::Simplified => {
            let scaled = tape.mul_scalar(op, alpha)?;
            tape.sub(x, scaled)
        }
        StepForm::Full => {
            let op_full = tape.scale(op, c)?;
            let diff = tape.sub(x, op_full)?;
            let diff = tape.scale(diff, c)?;
            let inc = tape.mul_scalar(diff, alpha)?;
            tape.add(x, inc)
        }
    }
}

/// Records the decoder forward pass for one image.
pub fn build_decoder_graph(
    tape: &mut Tape,
    cfg: &DecoderConfig,
    tensors: &[Matrix],
    z0: &Matrix,
) -> Result<DecoderGraph> {
    cfg.validate()?;
    let shapes = DecoderParams::tensor_shapes(cfg);
    if tensors.len() != shapes.len() || tensors.iter().zip(&shapes).any(|(t, s)| t.shape() != *s) {
        return Err(Error::InvalidArgument("tensors do not match the decoder configuration".into()));
    }
    if z0.rows() != cfg.dim {
        return Err(shape_err("build_decoder_graph", format!("{} rows", cfg.dim), dims(z0)));
    }
    let params: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let layers: Vec<LayerVars> = params[..4 * cfg.total_layers()]
        .chunks(4)
        .map(|c| LayerVars {
            dict: c[0],
            alpha: c[1],
            gain: c[2],
            bias: c[3],
        })
        .collect();
    let k = 4 * cfg.total_layers();
    let (final_gain, final_bias, q0) = (params[k], params[k + 1], params[k + 2]);
    let rate = cfg.rate();
    let z_in = tape.leaf(z0.clone());
    let n = z0.cols();

    let (z, q) = match cfg.variant {
        Variant::Ca => {
            let c = rate.scale(cfg.head_dim, n);
            let mut z = z_in;
            for layer in &layers[..cfg.sa_layers] {
                let zn = tape.layer_norm(z, layer.gain, layer.bias, DEFAULT_LN_EPS)?;
                let op = attention_sum(tape, layer, cfg, zn, None)?;
                z = step(tape, zn, op, layer.alpha, cfg.step_form, c)?;
            }
            let mut q = q0;
            for layer in &layers[cfg.sa_layers..] {
                let zn = tape.layer_norm(z, layer.gain, layer.bias, DEFAULT_LN_EPS)?;
                let op = attention_sum(tape, layer, cfg, zn, Some(q))?;
                q = step(tape, q, op, layer.alpha, cfg.step_form, c)?;
            }
            (z, q)
        }
        Variant::Sa => {
            let c = rate.scale(cfg.head_dim, n + cfg.num_classes);
            let mut x = tape.concat_cols(z_in, q0)?;
            for layer in &layers {
                let xn = tape.layer_norm(x, layer.gain, layer.bias, DEFAULT_LN_EPS)?;
                let op = attention_sum(tape, layer, cfg, xn, None)?;
                x = step(tape, xn, op, layer.alpha, cfg.step_form, c)?;
            }
            let z = tape.slice_cols(x, 0, n)?;
            let q = tape.slice_cols(x, n, cfg.num_classes)?;
            (z, q)
        }
    };
    let zf = if cfg.final_norm {
        tape.layer_norm(z, final_gain, final_bias, DEFAULT_LN_EPS)?
    } else {
        z
    };
    let qf = if cfg.normalize_queries {
        tape.layer_norm(q, final_gain, final_bias, DEFAULT_LN_EPS)?
    } else {
        q
    };
    let logits = tape.t_matmul(qf, zf)?;
    Ok(DecoderGraph { params, logits })
}

/// Per-image cross-entropy loss of the decoder and its parameter gradients.
pub fn decoder_loss_and_grad(
    cfg: &DecoderConfig,
    tensors: &[Matrix],
    image: &LabeledImage,
) -> Result<(f64, Vec<Matrix>, Matrix)> {
    let mut tape = Tape::new();
    let g = build_decoder_graph(&mut tape, cfg, tensors, &image.embeddings)?;
    let loss = tape.cross_entropy(g.logits, &image.labels)?;
    let (v, grads) = value_and_grad(&tape, loss, &g.params)?;
    Ok((v, grads, tape.value(g.logits)?.clone()))
}

/// Optimizer and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// 0 gives plain SGD.
    pub momentum: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs (0 disables).
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Rescale the batch gradient to at most this global norm (0 disables).
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            momentum: 0.9,
            decay_every: 10,
            decay_factor: 0.5,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss seen during the epoch.
    pub loss: f64,
    /// Patch accuracy seen during the epoch.
    pub accuracy: f64,
}

/// Per-image loss, gradients and number of correct patches.
type Evaluated = (f64, Vec<Matrix>, usize);

fn sgd<F>(mut tensors: Vec<Matrix>, data: &[LabeledImage], cfg: &TrainConfig, eval: F) -> Result<(Vec<Matrix>, Vec<EpochMetrics>)>
where
    F: Fn(&[Matrix], &LabeledImage) -> Result<Evaluated> + Sync,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut rng = Rng::new(Seed(cfg.seed).derive("sgd-shuffle"));
    let mut velocity: Vec<Matrix> = tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.lr;
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.decay_every > 0 && epoch % cfg.decay_every == 0 {
            lr *= cfg.decay_factor;
        }
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut patches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| eval(&tensors, &data[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut grad: Vec<Matrix> = tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
            for ((loss, g, hits), &i) in results.iter().zip(batch) {
                loss_sum += loss;
                correct += hits;
                patches += data[i].labels.len();
                for (acc, gi) in grad.iter_mut().zip(g) {
                    acc.axpy(1.0 / batch.len() as f64, gi);
                }
            }
            if !loss_sum.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            if cfg.clip_norm > 0.0 {
                let norm = grad.iter().map(|g| g.frobenius_norm().powi(2)).sum::<f64>().sqrt();
                if norm > cfg.clip_norm {
                    let s = cfg.clip_norm / norm;
                    for g in &mut grad {
                        *g = g.scale(s);
                    }
                }
            }
            for ((t, v), g) in tensors.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = v.scale(cfg.momentum);
                v.axpy(1.0, g);
                t.axpy(-lr, v);
            }
        }
        history.push(EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / patches as f64,
        });
    }
    Ok((tensors, history))
}

fn hits(logits: &Matrix, labels: &[usize]) -> usize {
    argmax_columns(logits).iter().zip(labels).filter(|(a, b)| a == b).count()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    pub history: Vec<EpochMetrics>,
}

/// Trains a decoder from a seeded initialization.
pub fn train_depict(
    data: &[LabeledImage],
    model: &DecoderConfig,
    train: &TrainConfig,
    init_seed: Seed,
) -> Result<TrainOutcome> {
    let init = DecoderParams::init(model, init_seed)?;
    train_depict_from(data, model, train, init)
}

pub fn train_depict_from(
    data: &[LabeledImage],
    model: &DecoderConfig,
    train: &TrainConfig,
    init: DecoderParams,
) -> Result<TrainOutcome> {
    for img in data {
        img.validate(model.num_classes)?;
    }
    let (tensors, history) = sgd(init.to_tensors(), data, train, |t, img| {
        let (loss, grads, logits) = decoder_loss_and_grad(model, t, img)?;
        Ok((loss, grads, hits(&logits, &img.labels)))
    })?;
    Ok(TrainOutcome {
        params: DecoderParams::from_tensors(model, &tensors)?,
        history,
    })
}

/// Per-patch linear classifier `W z + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `C x D`.
    pub weights: Matrix,
    /// `C x 1`.
    pub bias: Matrix,
}

impl LinearClassifier {
    pub fn logits(&self, z: &Matrix) -> Matrix {
        let wz = self.weights.matmul(z);
        Matrix::from_fn(wz.rows(), wz.cols(), |i, j| wz.get(i, j) + self.bias.get(i, 0))
    }

    pub fn predict(&self, z: &Matrix) -> Vec<usize> {
        argmax_columns(&self.logits(z))
    }
}

fn linear_loss_and_grad(tensors: &[Matrix], image: &LabeledImage) -> Result<Evaluated> {
    let mut tape = Tape::new();
    let w = tape.leaf(tensors[0].clone());
    let b = tape.leaf(tensors[1].clone());
    let z = tape.leaf(image.embeddings.clone());
    let wz = tape.matmul(w, z)?;
    let logits = tape.add_bias(wz, b)?;
    let loss = tape.cross_entropy(logits, &image.labels)?;
    let (v, g) = value_and_grad(&tape, loss, &[w, b])?;
    Ok((v, g, hits(tape.value(logits)?, &image.labels)))
}

/// Trains the linear baseline from a small seeded initialization.
pub fn train_linear(
    data: &[LabeledImage],
    dim: usize,
    classes: usize,
    train: &TrainConfig,
) -> Result<(LinearClassifier, Vec<EpochMetrics>)> {
    for img in data {
        img.validate(classes)?;
    }
    let mut rng = Rng::new(Seed(train.seed).derive("linear-init"));
    let init = vec![rng.gaussian_matrix(classes, dim).scale(0.02), Matrix::zeros(classes, 1)];
    let (t, history) = sgd(init, data, train, linear_loss_and_grad)?;
    Ok((
        LinearClassifier {
            weights: t[0].clone(),
            bias: t[1].clone(),
        },
        history,
    ))
}

/// Mean loss and patch accuracy of a decoder, evaluated in parallel.
pub fn evaluate_decoder(params: &DecoderParams, cfg: &DecoderConfig, data: &[LabeledImage]) -> Result<(f64, f64)> {
    let per = data
        .par_iter()
        .map(|img| {
            let out = crate::decoder::forward(&img.embeddings, params, cfg)?;
            Ok((
                cross_entropy_loss(&out.masks, &img.labels)?,
                hits(&out.masks, &img.labels),
                img.labels.len(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / data.len().max(1) as f64;
    let correct: usize = per.iter().map(|p| p.1).sum();
    let total: usize = per.iter().map(|p| p.2).sum();
    Ok((loss, correct as f64 / total.max(1) as f64))
}

pub fn evaluate_linear(model: &LinearClassifier, data: &[LabeledImage]) -> f64 {
    let correct: usize = data.iter().map(|img| hits(&model.logits(&img.embeddings), &img.labels)).sum();
    let total: usize = data.iter().map(|img| img.labels.len()).sum();
    correct as f64 / total.max(1) as f64
}

/// Denominator floor of [`relative_error`]. Central differences of an O(1) loss carry roundoff
/// near 1e-10 per entry, so gradients that vanish identically (shift-invariant logits, for one)
/// are compared in absolute terms below this norm.
pub const GRAD_NORM_FLOOR: f64 = 1e-4;

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, GRAD_NORM_FLOOR)`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).frobenius_norm() / a.frobenius_norm().max(b.frobenius_norm()).max(GRAD_NORM_FLOOR)
}

/// Central finite differences of `f` with respect to every entry of every tensor, with step
/// `1e-6·max(1, |x|)`.
pub fn finite_difference<F>(tensors: &[Matrix], f: F) -> Result<Vec<Matrix>>
where
    F: Fn(&[Matrix]) -> Result<f64>,
{
    let mut work = tensors.to_vec();
    let mut out = Vec::with_capacity(tensors.len());
    for t in 0..tensors.len() {
        let mut g = Matrix::zeros(tensors[t].rows(), tensors[t].cols());
        for k in 0..tensors[t].data().len() {
            let x = tensors[t].data()[k];
            let h = 1e-6 * x.abs().max(1.0);
            work[t].data_mut()[k] = x + h;
            let up = f(&work)?;
            work[t].data_mut()[k] = x - h;
            let down = f(&work)?;
            work[t].data_mut()[k] = x;
            g.data_mut()[k] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest per-tensor relative error between reverse-mode and finite-difference gradients of
/// the decoder loss on one image.
pub fn decoder_gradient_check(cfg: &DecoderConfig, params: &DecoderParams, image: &LabeledImage) -> Result<f64> {
    let tensors = params.to_tensors();
    let (_, grads, _) = decoder_loss_and_grad(cfg, &tensors, image)?;
    let fd = finite_difference(&tensors, |t| {
        let p = DecoderParams::from_tensors(cfg, t)?;
        let out = crate::decoder::forward(&image.embeddings, &p, cfg)?;
        cross_entropy_loss(&out.masks, &image.labels)
    })?;
    Ok(grads
        .iter()
        .zip(&fd)
        .map(|(g, f)| relative_error(g, f))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::forward;
    use crate::matcore::seeded_gaussian;

    fn small_ca() -> DecoderConfig {
        DecoderConfig {
            variant: Variant::Ca,
            dim: 8,
            sa_layers: 1,
            ca_layers: 1,
            heads: 2,
            head_dim: 2,
            num_classes: 3,
            epsilon: 0.5,
            step_form: StepForm::Simplified,
            final_norm: true,
            normalize_queries: false,
        }
    }

    fn random_image(d: usize, g: usize, classes: usize, seed: u64) -> LabeledImage {
        let mut rng = Rng::new(Seed(seed));
        LabeledImage {
            embeddings: rng.gaussian_matrix(d, g * g),
            labels: (0..g * g).map(|_| rng.below(classes)).collect(),
            grid: g,
        }
    }

    fn perturbed_params(cfg: &DecoderConfig, seed: u64) -> DecoderParams {
        // move away from the symmetric initialization so every gradient is exercised
        let p = DecoderParams::init(cfg, Seed(seed)).unwrap();
        let mut rng = Rng::new(Seed(seed + 1000));
        let t: Vec<Matrix> = p
            .to_tensors()
            .iter()
            .map(|m| {
                let noise = rng.gaussian_matrix(m.rows(), m.cols()).scale(0.3);
                m + &noise
            })
            .collect();
        DecoderParams::from_tensors(cfg, &t).unwrap()
    }

    fn op_check(build: impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Matrix]) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = build(&mut tape, &vars).unwrap();
        let (_, grads) = value_and_grad(&tape, root, &vars).unwrap();
        let fd = finite_difference(inputs, |t| {
            let mut tp = Tape::new();
            let v: Vec<Var> = t.iter().map(|m| tp.leaf(m.clone())).collect();
            let r = build(&mut tp, &v)?;
            Ok(tp.value(r)?.as_scalar())
        })
        .unwrap();
        for (g, f) in grads.iter().zip(&fd) {
            assert!(relative_error(g, f) <= 1e-5, "{g:?} vs {f:?}");
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_input() {
        let w = seeded_gaussian(3, 4, Seed(1));
        let mut tape = Tape::new();
        let v = tape.leaf(w.clone());
        let l = tape.sum_squares_half(v).unwrap();
        let (_, g) = value_and_grad(&tape, l, &[v]).unwrap();
        assert_eq!(g[0], w);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = seeded_gaussian(4, 1, Seed(2));
        let mut tape = Tape::new();
        let v = tape.leaf(logits.clone());
        let l = tape.cross_entropy(v, &[2]).unwrap();
        let (_, g) = value_and_grad(&tape, l, &[v]).unwrap();
        let mut expected = softmax_columns(&logits);
        expected[(2, 0)] -= 1.0;
        assert!(g[0].max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn cross_entropy_values() {
        let mut onehot = Matrix::zeros(3, 2);
        onehot[(1, 0)] = 800.0;
        onehot[(2, 1)] = 800.0;
        assert!(cross_entropy_loss(&onehot, &[1, 2]).unwrap() < 1e-300);
        let uniform = Matrix::zeros(5, 3);
        assert!((cross_entropy_loss(&uniform, &[0, 1, 4]).unwrap() - 5f64.ln()).abs() < 1e-15);

        let logits = seeded_gaussian(4, 7, Seed(3));
        let labels = [0, 3, 1, 1, 2, 0, 3];
        let mut oracle = 0.0;
        for j in 0..7 {
            let denom: f64 = (0..4).map(|c| logits.get(c, j).exp()).sum();
            oracle += -(logits.get(labels[j], j).exp() / denom).ln();
        }
        assert!((cross_entropy_loss(&logits, &labels).unwrap() - oracle / 7.0).abs() < 1e-12);
        assert!(matches!(
            cross_entropy_loss(&logits, &[0, 0, 0, 0, 0, 0, 4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn foreign_and_non_scalar_roots_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let va = a.leaf(Matrix::scalar(1.0));
        let vb = b.leaf(Matrix::scalar(1.0));
        assert!(matches!(a.add(va, vb), Err(Error::ForeignVariable(_))));
        let m = a.leaf(Matrix::zeros(2, 2));
        assert!(matches!(a.backward(m), Err(Error::NonScalarRoot { rows: 2, cols: 2 })));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let a = seeded_gaussian(3, 4, Seed(4));
        let b = seeded_gaussian(4, 2, Seed(5));
        let c = seeded_gaussian(3, 2, Seed(6));
        let s = Matrix::scalar(0.7);
        let gain = seeded_gaussian(3, 1, Seed(7));
        let bias = seeded_gaussian(3, 1, Seed(8));
        op_check(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let n = t.t_matmul(v[2], m)?;
                let tr = t.transpose(n)?;
                let sm = t.softmax_cols(tr)?;
                t.sum_squares_half(sm)
            },
            &[a.clone(), b.clone(), c.clone()],
        );
        op_check(
            |t, v| {
                let x = t.mul_scalar(v[0], v[1])?;
                let y = t.scale(x, -1.3)?;
                let z = t.sub(y, v[4])?;
                let w = t.add(z, v[0])?;
                let ln = t.layer_norm(w, v[2], v[3], 1e-10)?;
                t.sum_squares_half(ln)
            },
            &[a.clone(), s, gain, bias.clone(), seeded_gaussian(3, 4, Seed(9))],
        );
        op_check(
            |t, v| {
                let cat = t.concat_cols(v[0], v[1])?;
                let sl = t.slice_cols(cat, 2, 3)?;
                let ab = t.add_bias(sl, v[2])?;
                t.cross_entropy(ab, &[0, 2, 1])
            },
            &[a, c, bias],
        );
    }

    #[test]
    fn graph_matches_plain_forward() {
        for variant in [Variant::Ca, Variant::Sa] {
            for form in [StepForm::Simplified, StepForm::Full] {
                let cfg = DecoderConfig {
                    variant,
                    step_form: form,
                    sa_layers: 2,
                    normalize_queries: variant == Variant::Sa,
                    ..small_ca()
                };
                let p = perturbed_params(&cfg, 9);
                let z = seeded_gaussian(8, 16, Seed(10));
                let mut tape = Tape::new();
                let g = build_decoder_graph(&mut tape, &cfg, &p.to_tensors(), &z).unwrap();
                let plain = forward(&z, &p, &cfg).unwrap();
                assert!(tape.value(g.logits).unwrap().max_abs_diff(&plain.masks) <= 1e-12);
            }
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let img = random_image(8, 4, 3, 11);
        for variant in [Variant::Ca, Variant::Sa] {
            for form in [StepForm::Simplified, StepForm::Full] {
                let cfg = DecoderConfig {
                    variant,
                    step_form: form,
                    ..small_ca()
                };
                let p = perturbed_params(&cfg, 12);
                let err = decoder_gradient_check(&cfg, &p, &img).unwrap();
                assert!(err <= 1e-5, "{variant:?} {form:?}: {err}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let cfg = small_ca();
        let data: Vec<LabeledImage> = (0..3).map(|s| random_image(8, 4, 3, 20 + s)).collect();
        let train = TrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train_depict(&data, &cfg, &train, Seed(1)).unwrap();
        assert_eq!(out.params, DecoderParams::init(&cfg, Seed(1)).unwrap());
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn single_small_step_reduces_loss() {
        let cfg = small_ca();
        let img = random_image(8, 4, 3, 30);
        let init = perturbed_params(&cfg, 31);
        let before = cross_entropy_loss(&forward(&img.embeddings, &init, &cfg).unwrap().masks, &img.labels).unwrap();
        let train = TrainConfig {
            lr: 1e-3,
            epochs: 1,
            batch_size: 1,
            momentum: 0.0,
            clip_norm: 0.0,
            ..TrainConfig::default()
        };
        let out = train_depict_from(std::slice::from_ref(&img), &cfg, &train, init).unwrap();
        let after = cross_entropy_loss(&forward(&img.embeddings, &out.params, &cfg).unwrap().masks, &img.labels).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_ca();
        let data: Vec<LabeledImage> = (0..6).map(|s| random_image(8, 4, 3, 40 + s)).collect();
        let train = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train_depict(&data, &cfg, &train, Seed(2)).unwrap();
        let b = train_depict(&data, &cfg, &train, Seed(2)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn linear_baseline_learns_separable_data() {
        let mut rng = Rng::new(Seed(50));
        let data: Vec<LabeledImage> = (0..20)
            .map(|_| {
                let labels: Vec<usize> = (0..16).map(|_| rng.below(2)).collect();
                let z = Matrix::from_fn(3, 16, |i, j| {
                    let sign = if labels[j] == 0 { 1.0 } else { -1.0 };
                    if i == 0 { 2.0 * sign } else { 0.1 * rng.normal() }
                });
                LabeledImage {
                    embeddings: z,
                    labels,
                    grid: 4,
                }
            })
            .collect();
        let train = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let (model, _) = train_linear(&data, 3, 2, &train).unwrap();
        assert_eq!(evaluate_linear(&model, &data), 1.0);
    }

    #[test]
    fn invalid_train_config() {
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
