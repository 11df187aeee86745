//! Executable checks of the rate bounds, the low-rank identities, the concatenated-attention
//! decomposition, gradient exactness and gauge invariance.
//!
//! Every check returns a [`CheckReport`]. Hard checks pass only with zero failures at their
//! tolerance; soft checks compare a trend statistic with a threshold; report-only entries
//! publish a statistic and always pass. All tolerances and thresholds live in [`THRESHOLDS`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{decoder_gradient_check, finite_difference, relative_error};
use crate::coding_rate::{
    coding_rate, coding_rate_dual, per_basis_rate_sum, project_row, projected_coding_rate,
    projected_rate_gradient, row_rate, RateConfig,
};
use crate::datagen::{class_bases, generate_image, LabeledImage, SynthConfig};
use crate::decoder::{forward, perturb_params, predict_labels, DecoderConfig, DecoderParams, Perturbation, Variant};
use crate::error::Result;
use crate::matcore::{qr_orthonormalize, sym_eigen, Matrix, Rng, Seed};
use crate::operators::{concat_sa_decompose, mssa_step, AttentionKernel, StepForm, SubspaceDictionary};
use crate::subspace::{kmeans, lowrank_quality, principal_closed_form, QbarSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Hard,
    Soft,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub kind: CheckKind,
    pub trials: usize,
    pub failures: usize,
    /// Largest signed violation `lhs − rhs` (or error) over trials; negative means every trial
    /// held with room to spare.
    pub worst: f64,
    pub tolerance: f64,
    pub statistic: Option<f64>,
    pub threshold: Option<f64>,
    pub pass: bool,
    /// Additional named statistics.
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

impl CheckReport {
    fn hard(name: &str, trials: usize, failures: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            kind: CheckKind::Hard,
            trials,
            failures,
            worst,
            tolerance,
            statistic: None,
            threshold: None,
            pass: failures == 0,
            extra: BTreeMap::new(),
        }
    }

    fn soft(name: &str, trials: usize, failures: usize, statistic: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            kind: CheckKind::Soft,
            trials,
            failures,
            worst: 0.0,
            tolerance: 0.0,
            statistic: Some(statistic),
            threshold: Some(threshold),
            pass: statistic >= threshold,
            extra: BTreeMap::new(),
        }
    }

    fn report(name: &str, trials: usize, statistic: f64) -> Self {
        Self {
            name: name.into(),
            kind: CheckKind::Report,
            trials,
            failures: 0,
            worst: 0.0,
            tolerance: 0.0,
            statistic: Some(statistic),
            threshold: None,
            pass: true,
            extra: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.extra.insert(key.into(), value);
        self
    }
}

/// Tolerances of hard checks and thresholds of soft checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub coding_rate: f64,
    pub bound_slack: f64,
    pub decomposition: f64,
    pub gauge_logits: f64,
    pub closed_form: f64,
    pub rate_gradient: f64,
    pub decoder_gradient: f64,
    pub rz_ge_rq_fraction: f64,
    pub noise_sweep_spearman: f64,
    pub count_matching_fraction: f64,
}

pub const THRESHOLDS: Thresholds = Thresholds {
    coding_rate: 1e-9,
    bound_slack: 1e-9,
    decomposition: 1e-12,
    gauge_logits: 1e-10,
    closed_form: 1e-9,
    rate_gradient: 1e-6,
    decoder_gradient: 1e-5,
    rz_ge_rq_fraction: 0.95,
    noise_sweep_spearman: 0.8,
    count_matching_fraction: 0.90,
};

/// Trial counts used by [`run_all`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub coding_rate_trials: usize,
    pub coding_rate_max_dim: usize,
    pub bound_trials: usize,
    pub bound_dims: BoundDims,
    pub decomposition_trials: usize,
    pub rz_trials: usize,
    pub gauge_trials: usize,
    pub rate_gradient_trials: usize,
    pub decoder_gradient_seeds: usize,
    pub closed_form_trials: usize,
    pub sweep_trials: usize,
    pub count_trials: usize,
    pub cosine_trials: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            coding_rate_trials: 1000,
            coding_rate_max_dim: 64,
            bound_trials: 1000,
            bound_dims: BoundDims::default(),
            decomposition_trials: 500,
            rz_trials: 200,
            gauge_trials: 50,
            rate_gradient_trials: 100,
            decoder_gradient_seeds: 20,
            closed_form_trials: 200,
            sweep_trials: 20,
            count_trials: 100,
            cosine_trials: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundDims {
    pub dim: usize,
    pub n: usize,
    pub block_sizes: Vec<usize>,
}

impl Default for BoundDims {
    fn default() -> Self {
        Self {
            dim: 16,
            n: 24,
            block_sizes: vec![2, 4, 8],
        }
    }
}

/// `R(Z)` against its eigenvalue form and its dual form.
pub fn check_coding_rate(trials: usize, max_dim: usize, seed: Seed) -> Result<CheckReport> {
    let mut rng = Rng::new(seed);
    let tol = THRESHOLDS.coding_rate;
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..trials {
        let d = 1 + rng.below(max_dim);
        let n = 1 + rng.below(max_dim);
        let cfg = RateConfig::new(rng.uniform_range(0.1, 2.0))?;
        let z = rng.gaussian_matrix(d, n).scale(rng.uniform_range(0.1, 3.0));
        let primary = coding_rate(&z, &cfg)?;
        let dual = coding_rate_dual(&z, &cfg)?;
        let c = cfg.scale(d, n);
        let eig = 0.5 * sym_eigen(&z.gram_outer())?.values.iter().map(|l| (c * l.max(0.0)).ln_1p()).sum::<f64>();
        let err = (primary - eig).abs().max((primary - dual).abs());
        worst = worst.max(err);
        failures += usize::from(err > tol);
    }
    Ok(CheckReport::hard("coding_rate", trials, failures, worst, tol))
}

/// `γ = ½ M (M − 1) · max_{i≠j} Var(p_iᵀZ) / Var(p_jᵀZ)`, with `Var(x) = ‖x‖² / N`.
pub fn upper_bound_gamma(z: &Matrix, pp: &Matrix) -> f64 {
    let m = pp.cols();
    if m < 2 {
        return 0.0;
    }
    let n = z.cols() as f64;
    let vars: Vec<f64> = (0..m)
        .map(|i| {
            let row = project_row(z, pp.col(i));
            row.iter().map(|x| x * x).sum::<f64>() / n
        })
        .collect();
    let hi = vars.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = vars.iter().cloned().fold(f64::INFINITY, f64::min);
    0.5 * (m * (m - 1)) as f64 * (hi / lo)
}

/// Margins of the two-sided bound for one instance: `(lower − R, R − (Σ R_i + γ))`. Both are
/// non-positive when the bound holds.
pub fn bound_margins(z: &Matrix, pp: &Matrix, cfg: &RateConfig) -> Result<(f64, f64)> {
    let m = pp.cols();
    let projected = projected_coding_rate(z, pp, cfg)?.value;
    let coarse = cfg.with_epsilon(cfg.epsilon * m as f64);
    let lower = (0..m).map(|i| row_rate(&project_row(z, pp.col(i)), &coarse)).sum::<f64>() / m as f64;
    let upper = per_basis_rate_sum(z, pp, cfg)?.value + upper_bound_gamma(z, pp);
    Ok((lower - projected, projected - upper))
}

/// Lower and upper bound of the projected rate by per-basis rates.
pub fn check_bounds(trials: usize, dims: &BoundDims, seed: Seed) -> Result<Vec<CheckReport>> {
    let mut rng = Rng::new(seed);
    let tol = THRESHOLDS.bound_slack;
    let (mut lower_fail, mut upper_fail) = (0, 0);
    let (mut lower_worst, mut upper_worst) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut min_gamma_room = f64::INFINITY;
    for _ in 0..trials {
        let m = dims.block_sizes[rng.below(dims.block_sizes.len())];
        let cfg = RateConfig::new(rng.uniform_range(0.1, 1.5))?;
        let pp = qr_orthonormalize(&rng.gaussian_matrix(dims.dim, m))?;
        let scales: Vec<f64> = (0..dims.dim).map(|_| rng.uniform_range(0.1, 3.0)).collect();
        let z = Matrix::from_fn(dims.dim, dims.n, |i, _| scales[i] * rng.normal());
        let (lo, up) = bound_margins(&z, &pp, &cfg)?;
        lower_fail += usize::from(lo > tol);
        upper_fail += usize::from(up > tol);
        lower_worst = lower_worst.max(lo);
        if up.is_finite() {
            upper_worst = upper_worst.max(up);
            min_gamma_room = min_gamma_room.min(-up);
        }
    }
    Ok(vec![
        CheckReport::hard("bounds_lower", trials, lower_fail, finite_or_zero(lower_worst), tol),
        CheckReport::hard("bounds_upper", trials, upper_fail, finite_or_zero(upper_worst), tol)
            .with("min_room", finite_or_zero(min_gamma_room)),
    ])
}

fn finite_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

/// Concatenated softmax-free self-attention against its four-term split.
pub fn check_decomposition(trials: usize, seed: Seed) -> Result<CheckReport> {
    let mut rng = Rng::new(seed);
    let tol = THRESHOLDS.decomposition;
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..trials {
        let d = 2 + rng.below(15);
        let n = 1 + rng.below(24);
        let c = 1 + rng.below(6);
        // unit-scale entries keep the cubic terms O(1) so the entrywise tolerance is meaningful
        let z = rng.gaussian_matrix(d, n).scale(1.0 / (d as f64).sqrt());
        let q = rng.gaussian_matrix(d, c).scale(1.0 / (d as f64).sqrt());
        let alpha = rng.uniform_range(-0.5, 0.5);
        let dec = concat_sa_decompose(&z, &q, alpha)?;
        let (zn, qn) = dec.terms.apply(&z, &q, alpha);
        let err = dec.z_next.max_abs_diff(&zn).max(dec.q_next.max_abs_diff(&qn));
        worst = worst.max(err);
        failures += usize::from(err > tol);
    }
    Ok(CheckReport::hard("decomposition", trials, failures, worst, tol))
}

fn synthetic_image(seed: Seed, index: u64) -> Result<LabeledImage> {
    let cfg = SynthConfig {
        seed: seed.0,
        ..SynthConfig::default()
    };
    let bases = class_bases(&cfg)?;
    generate_image(&cfg, &bases, index, true)
}

fn distinct_labels(labels: &[usize]) -> usize {
    let mut seen = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// `R(Z) ≥ R(Q̄)` with `Q̄` the k-means centroids replicated by cluster size.
pub fn check_rz_ge_rq(trials: usize, seed: Seed) -> Result<CheckReport> {
    let cfg = RateConfig::default();
    let per: Vec<(bool, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let img = synthetic_image(seed, t as u64)?;
            let c = distinct_labels(&img.labels);
            let km = kmeans(&img.embeddings, c, seed.derive_index(t as u64))?;
            let q = lowrank_quality(&img.embeddings, &QbarSpec::kmeans(&km), &cfg)?;
            Ok((q.rate_z >= q.rate_qbar, q.rate_qbar - q.rate_z))
        })
        .collect::<Result<_>>()?;
    let held = per.iter().filter(|p| p.0).count();
    let worst = per.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(
        CheckReport::soft("rz_ge_rq", trials, trials - held, held as f64 / trials as f64, THRESHOLDS.rz_ge_rq_fraction)
            .with("worst_excess", finite_or_zero(worst)),
    )
}

fn random_model(rng: &mut Rng, variant: Variant) -> Result<(DecoderConfig, DecoderParams)> {
    let dim = 6 + rng.below(11);
    let head_dim = 1 + rng.below(4);
    let heads = 1 + rng.below(3);
    let classes = 2 + rng.below(4);
    let cfg = DecoderConfig {
        variant,
        dim,
        sa_layers: 1 + rng.below(2),
        ca_layers: if variant == Variant::Ca { 1 + rng.below(2) } else { 0 },
        heads,
        head_dim,
        num_classes: classes,
        epsilon: 0.5,
        step_form: if rng.below(2) == 0 { StepForm::Simplified } else { StepForm::Full },
        final_norm: true,
        normalize_queries: false,
    };
    let base = DecoderParams::init(&cfg, Seed(rng.next_u64()))?;
    let tensors: Vec<Matrix> = base
        .to_tensors()
        .iter()
        .map(|t| t + &rng.gaussian_matrix(t.rows(), t.cols()).scale(0.3))
        .collect();
    Ok((cfg.clone(), DecoderParams::from_tensors(&cfg, &tensors)?))
}

fn agreement(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len().max(1) as f64
}

/// Per-head orthogonal transforms of every dictionary leave the logits unchanged (hard); other
/// perturbations are summarized by prediction agreement (report only).
pub fn check_gauge_invariance(trials: usize, seed: Seed) -> Result<Vec<CheckReport>> {
    let mut rng = Rng::new(seed);
    let tol = THRESHOLDS.gauge_logits;
    let (mut failures, mut worst) = (0, 0.0f64);
    let others = [
        ("full_orthogonal", Perturbation::FullOrthogonal),
        ("orthogonalize_heads", Perturbation::OrthogonalizeHeads),
        ("gaussian_noise_0.1", Perturbation::GaussianNoise(0.1)),
    ];
    let mut other_sums = [0.0; 3];
    for t in 0..trials {
        let variant = if t % 2 == 0 { Variant::Ca } else { Variant::Sa };
        let (cfg, params) = random_model(&mut rng, variant)?;
        let n = 8 + rng.below(25);
        let z = rng.gaussian_matrix(cfg.dim, n);
        let base = forward(&z, &params, &cfg)?.masks;
        let labels = predict_labels(&base);
        let pseed = Seed(rng.next_u64());
        let rotated = perturb_params(&params, Perturbation::PerHeadOrthogonal, pseed)?;
        let masks = forward(&z, &rotated, &cfg)?.masks;
        let err = masks.max_abs_diff(&base);
        worst = worst.max(err);
        failures += usize::from(err > tol || predict_labels(&masks) != labels);
        for (sum, (_, kind)) in other_sums.iter_mut().zip(&others) {
            let p = perturb_params(&params, *kind, pseed)?;
            *sum += agreement(&predict_labels(&forward(&z, &p, &cfg)?.masks), &labels);
        }
    }
    let mut report = CheckReport::report(
        "gauge_other_perturbations",
        trials,
        other_sums.iter().sum::<f64>() / (3 * trials.max(1)) as f64,
    );
    for (sum, (name, _)) in other_sums.iter().zip(&others) {
        report = report.with(&format!("agreement_{name}"), sum / trials.max(1) as f64);
    }
    Ok(vec![CheckReport::hard("gauge_per_head", trials, failures, worst, tol), report])
}

/// Reverse-mode and closed-form gradients against central finite differences.
pub fn check_gradients(rate_trials: usize, decoder_seeds: usize, seed: Seed) -> Result<CheckReport> {
    let mut rng = Rng::new(seed.derive("rate"));
    let (mut failures, mut worst_rate) = (0, 0.0f64);
    for _ in 0..rate_trials {
        let d = 2 + rng.below(10);
        let n = 1 + rng.below(16);
        let m = 1 + rng.below(d);
        let cfg = RateConfig::new(rng.uniform_range(0.3, 1.5))?;
        let pp = qr_orthonormalize(&rng.gaussian_matrix(d, m))?;
        let z = rng.gaussian_matrix(d, n);
        let g = projected_rate_gradient(&z, &pp, &cfg)?;
        let fd = finite_difference(std::slice::from_ref(&z), |t| Ok(projected_coding_rate(&t[0], &pp, &cfg)?.value))?;
        let err = relative_error(&g, &fd[0]);
        worst_rate = worst_rate.max(err);
        failures += usize::from(err > THRESHOLDS.rate_gradient);
    }
    let decoder_errs: Vec<f64> = (0..decoder_seeds)
        .into_par_iter()
        .map(|s| {
            let s = seed.derive("decoder").derive_index(s as u64);
            let (cfg, params, image) = gradient_instance(s, if s.0 % 2 == 0 { StepForm::Simplified } else { StepForm::Full })?;
            decoder_gradient_check(&cfg, &params, &image)
        })
        .collect::<Result<_>>()?;
    let worst_decoder = decoder_errs.iter().cloned().fold(0.0, f64::max);
    failures += decoder_errs.iter().filter(|&&e| e > THRESHOLDS.decoder_gradient).count();
    Ok(CheckReport::hard(
        "gradients",
        rate_trials + decoder_seeds,
        failures,
        worst_rate.max(worst_decoder),
        THRESHOLDS.decoder_gradient,
    )
    .with("worst_rate_gradient", worst_rate)
    .with("worst_decoder_gradient", worst_decoder))
}

/// Decoder of width 8 with one layer of each kind, two heads of dimension 2, three classes,
/// and a random 4x4 image; parameters are moved off their initialization.
pub fn gradient_instance(seed: Seed, form: StepForm) -> Result<(DecoderConfig, DecoderParams, LabeledImage)> {
    let cfg = DecoderConfig {
        variant: Variant::Ca,
        dim: 8,
        sa_layers: 1,
        ca_layers: 1,
        heads: 2,
        head_dim: 2,
        num_classes: 3,
        epsilon: 0.5,
        step_form: form,
        final_norm: true,
        normalize_queries: false,
    };
    let mut rng = Rng::new(seed);
    let base = DecoderParams::init(&cfg, seed)?;
    let tensors: Vec<Matrix> = base
        .to_tensors()
        .iter()
        .map(|t| t + &rng.gaussian_matrix(t.rows(), t.cols()).scale(0.3))
        .collect();
    let params = DecoderParams::from_tensors(&cfg, &tensors)?;
    let image = LabeledImage {
        embeddings: rng.gaussian_matrix(8, 16),
        labels: (0..16).map(|_| rng.below(3)).collect(),
        grid: 4,
    };
    Ok((cfg, params, image))
}

/// Closed-form rate of replicated orthonormal columns.
pub fn check_closed_form(trials: usize, seed: Seed) -> Result<CheckReport> {
    let mut rng = Rng::new(seed);
    let tol = THRESHOLDS.closed_form;
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..trials {
        let d = 2 + rng.below(15);
        let c = 1 + rng.below(d);
        let n = c + rng.below(60);
        let cfg = RateConfig::new(rng.uniform_range(0.2, 1.5))?;
        let q = qr_orthonormalize(&rng.gaussian_matrix(d, c))?;
        let counts = random_counts(&mut rng, n, c);
        let rate = coding_rate(&q.replicate_columns(&counts), &cfg)?;
        let err = (rate - principal_closed_form(&counts, d, n, &cfg)).abs();
        worst = worst.max(err);
        failures += usize::from(err > tol);
    }
    Ok(CheckReport::hard("lowrank_closed_form", trials, failures, worst, tol))
}

/// Uniform random composition of `n` into `c` non-negative parts.
fn random_counts(rng: &mut Rng, n: usize, c: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..c - 1).map(|_| rng.below(n + 1)).collect();
    cuts.sort_unstable();
    let mut counts = Vec::with_capacity(c);
    let mut prev = 0;
    for &k in cuts.iter().chain(std::iter::once(&n)) {
        counts.push(k - prev);
        prev = k;
    }
    counts
}

/// Largest-remainder rounding of `weights` to non-negative integers summing to `n`.
pub fn proportional_counts(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if total <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = n;
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w.max(0.0) / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Noise level of the count-matching data: small enough that the rank-`C` surrogate can match
/// `R(Z)` up to the count error.
pub const COUNT_TRIAL_NOISE: f64 = 0.003;

pub const NOISE_SWEEP: [f64; 4] = [0.5, 0.25, 0.1, 0.05];

/// Points around `c` centres spanning a `(c − 1)`-dimensional affine subspace, plus isotropic
/// noise of level `sigma`.
fn affine_cluster_data(rng: &mut Rng, dim: usize, c: usize, per: usize, sigma: f64) -> Result<Matrix> {
    let basis = qr_orthonormalize(&rng.gaussian_matrix(dim, c))?;
    let shift = basis.col(c - 1).to_vec();
    let mut z = Matrix::zeros(dim, c * per);
    for k in 0..c {
        for j in 0..per {
            let col = z.col_mut(k * per + j);
            for (i, x) in col.iter_mut().enumerate() {
                let centre = if k + 1 < c { 2.0 * basis.get(i, k) } else { 0.0 };
                *x = shift[i] + centre + sigma * rng.normal();
            }
        }
    }
    Ok(z)
}

/// Soft trends of the low-rank surrogate: the k-means gap shrinks with noise, and counts matched
/// to the principal variances beat random counts.
pub fn check_lowrank_trends(sweep_trials: usize, count_trials: usize, seed: Seed) -> Result<Vec<CheckReport>> {
    let cfg = RateConfig::default();
    let mut rng = Rng::new(seed.derive("sweep"));
    let (mut sig, mut gaps) = (Vec::new(), Vec::new());
    for _ in 0..sweep_trials {
        for &s in &NOISE_SWEEP {
            let z = affine_cluster_data(&mut rng, 12, 4, 10, s)?;
            let km = kmeans(&z, 4, Seed(rng.next_u64()))?;
            sig.push(s);
            gaps.push(lowrank_quality(&z, &QbarSpec::kmeans(&km), &cfg)?.gap);
        }
    }
    let rho = spearman(&sig, &gaps);
    let sweep = CheckReport::soft(
        "lowrank_noise_sweep",
        sweep_trials * NOISE_SWEEP.len(),
        0,
        rho,
        THRESHOLDS.noise_sweep_spearman,
    );

    let mut rng = Rng::new(seed.derive("counts"));
    let mut wins = 0;
    for _ in 0..count_trials {
        let c = 2 + rng.below(3);
        let z = class_direction_data(&mut rng, 16, c, 64, COUNT_TRIAL_NOISE)?;
        let eig = sym_eigen(&z.gram_outer())?;
        let directions = eig.vectors.cols_range(0, c);
        let matched = proportional_counts(&eig.values[..c], z.cols());
        let random = random_counts(&mut rng, z.cols(), c);
        let gm = lowrank_quality(&z, &QbarSpec::explicit(directions.clone(), matched), &cfg)?.gap;
        let gr = lowrank_quality(&z, &QbarSpec::explicit(directions, random), &cfg)?.gap;
        wins += usize::from(gm <= gr);
    }
    let counts = CheckReport::soft(
        "lowrank_count_matching",
        count_trials,
        count_trials - wins,
        wins as f64 / count_trials.max(1) as f64,
        THRESHOLDS.count_matching_fraction,
    );
    Ok(vec![sweep, counts])
}

/// Unit-norm columns, each a signed multiple of one of `c` orthonormal directions plus noise;
/// class sizes are a random composition of `n` with every class non-empty.
fn class_direction_data(rng: &mut Rng, dim: usize, c: usize, n: usize, sigma: f64) -> Result<Matrix> {
    let basis = qr_orthonormalize(&rng.gaussian_matrix(dim, c))?;
    let sizes: Vec<usize> = random_counts(rng, n - c, c).iter().map(|k| k + 1).collect();
    let mut z = Matrix::zeros(dim, n);
    let mut j = 0;
    for (k, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            let sign = if rng.below(2) == 0 { 1.0 } else { -1.0 };
            for (i, x) in z.col_mut(j).iter_mut().enumerate() {
                *x = sign * basis.get(i, k) + sigma * rng.normal();
            }
            j += 1;
        }
    }
    Ok(unit_columns(&z))
}

fn unit_columns(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for j in 0..out.cols() {
        let col = out.col_mut(j);
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.iter_mut().for_each(|x| *x /= norm);
        }
    }
    out
}

fn cosine(a: &Matrix, b: &Matrix) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let den = a.frobenius_norm() * b.frobenius_norm();
    if den == 0.0 {
        1.0
    } else {
        dot / den
    }
}

/// Cosine between the softmax-attention step and the exact rate-ascent step (report only).
pub fn check_mssa_cosine(trials: usize, seed: Seed) -> Result<CheckReport> {
    let mut rng = Rng::new(seed);
    let cfg = RateConfig::default();
    let mut cos = Vec::with_capacity(trials);
    for _ in 0..trials {
        let d = 8 + rng.below(9);
        let m = 2 + rng.below(3);
        let heads = 1 + rng.below(d / m);
        let dict = SubspaceDictionary::random_orthonormal(d, heads, m, &mut rng)?;
        let n = 8 + rng.below(25);
        let z = rng.gaussian_matrix(d, n).scale(1.0 / (d as f64).sqrt());
        let soft = &mssa_step(&z, &dict, 1.0, &cfg, StepForm::Full, AttentionKernel::Softmax)? - &z;
        let exact = &mssa_step(&z, &dict, 1.0, &cfg, StepForm::Full, AttentionKernel::ExactInverse)? - &z;
        cos.push(cosine(&soft, &exact));
    }
    let mean = cos.iter().sum::<f64>() / cos.len().max(1) as f64;
    let min = cos.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(CheckReport::report("mssa_gradient_cosine", trials, mean).with("min", finite_or_zero(min)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub seed: u64,
    /// All hard checks passed.
    pub pass: bool,
    pub reports: Vec<CheckReport>,
}

impl VerifyOutcome {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per check; `extra` statistics are only in the JSON form.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.reports {
            w.serialize(CsvRow::from(r))?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self, json: &Path, csv_path: &Path) -> Result<()> {
        std::fs::File::create(json)?.write_all(self.to_json()?.as_bytes())?;
        std::fs::File::create(csv_path)?.write_all(self.to_csv()?.as_bytes())?;
        Ok(())
    }
}

/// Flat CSV row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub name: String,
    pub kind: CheckKind,
    pub trials: usize,
    pub failures: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub statistic: Option<f64>,
    pub threshold: Option<f64>,
    pub pass: bool,
}

impl From<&CheckReport> for CsvRow {
    fn from(r: &CheckReport) -> Self {
        Self {
            name: r.name.clone(),
            kind: r.kind,
            trials: r.trials,
            failures: r.failures,
            worst: r.worst,
            tolerance: r.tolerance,
            statistic: r.statistic,
            threshold: r.threshold,
            pass: r.pass,
        }
    }
}

pub fn parse_csv(s: &str) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(s.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

type CheckFn = Box<dyn Fn(Seed) -> Result<Vec<CheckReport>> + Send + Sync>;

/// Runs every check with its own stream derived from `(seed, check name)`.
pub fn run_all_with(seed: u64, cfg: &VerifyConfig) -> Result<VerifyOutcome> {
    let c = cfg.clone();
    let checks: Vec<(&str, CheckFn)> = vec![
        ("coding_rate", {
            let c = c.clone();
            Box::new(move |s| Ok(vec![check_coding_rate(c.coding_rate_trials, c.coding_rate_max_dim, s)?]))
        }),
        ("bounds", {
            let c = c.clone();
            Box::new(move |s| check_bounds(c.bound_trials, &c.bound_dims, s))
        }),
        ("decomposition", {
            let c = c.clone();
            Box::new(move |s| Ok(vec![check_decomposition(c.decomposition_trials, s)?]))
        }),
        ("rz_ge_rq", {
            let c = c.clone();
            Box::new(move |s| Ok(vec![check_rz_ge_rq(c.rz_trials, s)?]))
        }),
        ("gauge", {
            let c = c.clone();
            Box::new(move |s| check_gauge_invariance(c.gauge_trials, s))
        }),
        ("gradients", {
            let c = c.clone();
            Box::new(move |s| Ok(vec![check_gradients(c.rate_gradient_trials, c.decoder_gradient_seeds, s)?]))
        }),
        ("closed_form", {
            let c = c.clone();
            Box::new(move |s| Ok(vec![check_closed_form(c.closed_form_trials, s)?]))
        }),
        ("lowrank_trends", {
            let c = c.clone();
            Box::new(move |s| check_lowrank_trends(c.sweep_trials, c.count_trials, s))
        }),
        ("mssa_cosine", {
            let c = c.clone();
            Box::new(move |s| Ok(vec![check_mssa_cosine(c.cosine_trials, s)?]))
        }),
    ];
    let master = Seed(seed);
    let nested = checks
        .par_iter()
        .map(|(name, f)| f(master.derive(name)))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<CheckReport> = nested.into_iter().flatten().collect();
    let pass = overall_pass(&reports);
    Ok(VerifyOutcome { seed, pass, reports })
}

/// True when every hard check passed.
pub fn overall_pass(reports: &[CheckReport]) -> bool {
    reports.iter().filter(|r| r.kind == CheckKind::Hard).all(|r| r.pass)
}

pub fn run_all(seed: u64) -> Result<VerifyOutcome> {
    run_all_with(seed, &VerifyConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyConfig {
        VerifyConfig {
            coding_rate_trials: 20,
            coding_rate_max_dim: 12,
            bound_trials: 20,
            bound_dims: BoundDims::default(),
            decomposition_trials: 10,
            rz_trials: 10,
            gauge_trials: 4,
            rate_gradient_trials: 5,
            decoder_gradient_seeds: 1,
            closed_form_trials: 10,
            sweep_trials: 4,
            count_trials: 10,
            cosine_trials: 5,
        }
    }

    #[test]
    fn single_basis_bounds_are_equalities() {
        let mut rng = Rng::new(Seed(1));
        let cfg = RateConfig::default();
        let p = qr_orthonormalize(&rng.gaussian_matrix(6, 1)).unwrap();
        let z = rng.gaussian_matrix(6, 10);
        assert_eq!(upper_bound_gamma(&z, &p), 0.0);
        let (lo, up) = bound_margins(&z, &p, &cfg).unwrap();
        assert!(lo.abs() < 1e-12 && up.abs() < 1e-12);
    }

    #[test]
    fn equal_variances_give_unit_ratio() {
        // columns ±e1, ±e2 give identical projected energy on both axes
        let z = Matrix::from_rows(&[&[1.0, -1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, -1.0], &[0.0; 4]]);
        let p = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(upper_bound_gamma(&z, &p), 1.0);
    }

    #[test]
    fn decomposition_trivial_cases() {
        let z = Matrix::from_fn(3, 4, |i, j| (i + 2 * j) as f64 * 0.1);
        let d = concat_sa_decompose(&z, &Matrix::zeros(3, 2), 0.3).unwrap();
        assert_eq!(d.terms.qqt_z, Matrix::zeros(3, 4));
        let d0 = concat_sa_decompose(&z, &Matrix::zeros(3, 2), 0.0).unwrap();
        assert_eq!(d0.z_next, z);
    }

    #[test]
    fn spearman_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // ties get average ranks: x ranks (1.5, 1.5, 3), y ranks (1, 2, 3)
        let expected = 1.5 / (1.5f64 * 2.0).sqrt();
        assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn proportional_counts_sum_and_order() {
        assert_eq!(proportional_counts(&[3.0, 1.0], 8), vec![6, 2]);
        assert_eq!(proportional_counts(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        let mut rng = Rng::new(Seed(2));
        for _ in 0..50 {
            let c = 1 + rng.below(5);
            let n = rng.below(40);
            assert_eq!(random_counts(&mut rng, n, c).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn identity_orthogonal_keeps_logits() {
        let mut rng = Rng::new(Seed(3));
        let (cfg, params) = random_model(&mut rng, Variant::Ca).unwrap();
        let z = rng.gaussian_matrix(cfg.dim, 9);
        let noisy = perturb_params(&params, Perturbation::GaussianNoise(0.0), Seed(4)).unwrap();
        assert_eq!(forward(&z, &noisy, &cfg).unwrap().masks, forward(&z, &params, &cfg).unwrap().masks);
    }

    #[test]
    fn run_all_is_deterministic_and_round_trips() {
        let a = run_all_with(7, &small()).unwrap();
        let b = run_all_with(7, &small()).unwrap();
        assert_eq!(a, b);
        assert!(a.pass, "{a:#?}");
        assert_eq!(VerifyOutcome::from_json(&a.to_json().unwrap()).unwrap(), a);
        let rows = parse_csv(&a.to_csv().unwrap()).unwrap();
        assert_eq!(rows, a.reports.iter().map(CsvRow::from).collect::<Vec<_>>());
    }

    #[test]
    fn hard_failure_fails_overall() {
        let mut out = run_all_with(8, &small()).unwrap();
        let idx = out.reports.iter().position(|r| r.kind == CheckKind::Hard).unwrap();
        assert!(overall_pass(&out.reports));
        out.reports[idx] = CheckReport::hard("forced", 1, 1, 1.0, 0.0);
        assert!(!overall_pass(&out.reports));
    }
}
