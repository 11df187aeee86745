//! Rate-distortion functionals.
//!
//! For a `D x N` embedding set `Z` and distortion `ε`, the coding rate is
//! `R(Z) = ½ log det(I_D + (D / (N ε²)) Z Zᵀ)`. The same value is obtained on the `N x N` Gram
//! side, which is what the `_dual` variant evaluates. Projected variants replace `D` by the
//! number of projection bases `M`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matcore::{cholesky_logdet, dot, orthonormality_defect, Cholesky, Matrix};

/// Default distortion.
pub const DEFAULT_EPSILON: f64 = 0.5;

/// Columns of a head block count as orthonormal below this `‖PᵀP − I‖∞`.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Distortion setting shared by every rate formula. Dimensions come from the operands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub epsilon: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl RateConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        let cfg = Self { epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// The constant `dim / (n ε²)`.
    pub fn scale(&self, dim: usize, n: usize) -> f64 {
        dim as f64 / (n as f64 * self.epsilon * self.epsilon)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon }
    }
}

/// A projected rate together with whether the projection basis was orthonormal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedRate {
    pub value: f64,
    /// `‖PᵀP − I‖∞ ≤ 1e-6`. The bound theorems only apply when this holds.
    pub orthonormal_basis: bool,
}

fn check_embeddings(z: &Matrix, cfg: &RateConfig) -> Result<()> {
    cfg.validate()?;
    if z.rows() == 0 || z.cols() == 0 {
        return Err(shape_err(
            "coding rate",
            "D, N >= 1",
            format!("{}x{}", z.rows(), z.cols()),
        ));
    }
    z.ensure_finite("embeddings")
}

fn check_block(z: &Matrix, pp: &Matrix) -> Result<()> {
    if pp.rows() != z.rows() || pp.cols() == 0 {
        return Err(shape_err(
            "projection block",
            format!("{}xM with M >= 1", z.rows()),
            format!("{}x{}", pp.rows(), pp.cols()),
        ));
    }
    pp.ensure_finite("projection block")
}

/// `½ log det(I + c G)` for a symmetric PSD Gram matrix `G`.
fn half_logdet_shifted(gram: &Matrix, c: f64) -> Result<f64> {
    let n = gram.rows();
    let mut a = gram.scale(c);
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    Ok(0.5 * cholesky_logdet(&a)?)
}

/// `½ log det(I + c XXᵀ)` evaluated on whichever Gram side is smaller.
fn half_logdet_small_side(x: &Matrix, c: f64) -> Result<f64> {
    if x.rows() <= x.cols() {
        half_logdet_shifted(&x.gram_outer(), c)
    } else {
        half_logdet_shifted(&x.gram_inner(), c)
    }
}

/// `R(Z)`, evaluated on the smaller Gram side.
pub fn coding_rate(z: &Matrix, cfg: &RateConfig) -> Result<f64> {
    check_embeddings(z, cfg)?;
    half_logdet_small_side(z, cfg.scale(z.rows(), z.cols()))
}

/// `R(Z)` from the `D x D` form `½ log det(I_D + c ZZᵀ)`.
pub fn coding_rate_primal(z: &Matrix, cfg: &RateConfig) -> Result<f64> {
    check_embeddings(z, cfg)?;
    half_logdet_shifted(&z.gram_outer(), cfg.scale(z.rows(), z.cols()))
}

/// `R(Z)` from the `N x N` form `½ log det(I_N + c ZᵀZ)`.
pub fn coding_rate_dual(z: &Matrix, cfg: &RateConfig) -> Result<f64> {
    check_embeddings(z, cfg)?;
    half_logdet_shifted(&z.gram_inner(), cfg.scale(z.rows(), z.cols()))
}

/// Rate of a single projected row `x = pᵀZ`: `½ log(1 + ‖x‖² / (N ε²))`.
pub fn row_rate(x: &[f64], cfg: &RateConfig) -> f64 {
    let n = x.len();
    0.5 * (cfg.scale(1, n) * dot(x, x)).ln_1p()
}

/// `pᵀZ` for a single column `p` of the block.
pub(crate) fn project_row(z: &Matrix, p: &[f64]) -> Vec<f64> {
    (0..z.cols()).map(|j| dot(p, z.col(j))).collect()
}

/// `R(PᵀZ) = ½ log det(I_M + (M / (N ε²)) (PᵀZ)(PᵀZ)ᵀ)` for a `D x M` block `P`.
pub fn projected_coding_rate(z: &Matrix, pp: &Matrix, cfg: &RateConfig) -> Result<ProjectedRate> {
    check_embeddings(z, cfg)?;
    check_block(z, pp)?;
    let a = pp.t_matmul(z);
    let value = half_logdet_small_side(&a, cfg.scale(pp.cols(), z.cols()))?;
    Ok(ProjectedRate {
        value,
        orthonormal_basis: is_orthonormal(pp),
    })
}

/// `Σ_c ½ log(1 + (1 / (N ε²)) p_cᵀ Z Zᵀ p_c)` over the columns of `P`.
pub fn per_basis_rate_sum(z: &Matrix, pp: &Matrix, cfg: &RateConfig) -> Result<ProjectedRate> {
    check_embeddings(z, cfg)?;
    check_block(z, pp)?;
    let value = (0..pp.cols())
        .map(|c| row_rate(&project_row(z, pp.col(c)), cfg))
        .sum();
    Ok(ProjectedRate {
        value,
        orthonormal_basis: is_orthonormal(pp),
    })
}

/// Exact gradient of [`projected_coding_rate`] with respect to `Z`:
/// `c P Pᵀ Z (I_N + c Zᵀ P Pᵀ Z)⁻¹` with `c = M / (N ε²)`.
///
/// The inverse is applied through the push-through identity on the `M x M` side when `M < N`;
/// both sides are solved by Cholesky.
pub fn projected_rate_gradient(z: &Matrix, pp: &Matrix, cfg: &RateConfig) -> Result<Matrix> {
    check_embeddings(z, cfg)?;
    check_block(z, pp)?;
    let c = cfg.scale(pp.cols(), z.cols());
    let a = pp.t_matmul(z); // M x N
    // A (I_N + c AᵀA)⁻¹ = (I_M + c AAᵀ)⁻¹ A
    let weighted = if a.rows() < a.cols() {
        let mut s = a.gram_outer().scale(c);
        for i in 0..s.rows() {
            s[(i, i)] += 1.0;
        }
        Cholesky::new(&s)?.solve(&a)
    } else {
        let mut s = a.gram_inner().scale(c);
        for i in 0..s.rows() {
            s[(i, i)] += 1.0;
        }
        let inv = Cholesky::new(&s)?.inverse();
        a.matmul(&inv)
    };
    Ok(pp.matmul(&weighted).scale(c))
}

pub fn is_orthonormal(pp: &Matrix) -> bool {
    orthonormality_defect(pp) <= ORTHONORMAL_TOL
}
