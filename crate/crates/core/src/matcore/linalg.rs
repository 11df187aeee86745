//! Factorizations and eigen-solvers for small dense symmetric problems.

use crate::error::{shape_err, Error, Result};

use super::matrix::{dot, Matrix};

/// Relative asymmetry accepted by the symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-10;

const JITTER_BASE: f64 = 1e-12;
const JITTER_RETRIES: usize = 3;
const JACOBI_MAX_SWEEPS: usize = 100;
const RANK_TOL: f64 = 1e-12;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    factor: Matrix,
    /// Diagonal shift that was added before the factorization succeeded.
    pub jitter: f64,
}

impl Cholesky {
    /// Factors a symmetric positive-definite matrix.
    ///
    /// If the plain factorization breaks down, `1e-12 * trace/dim` is added to the diagonal and
    /// the attempt repeated with a 10x larger shift, up to three times.
    pub fn new(a: &Matrix) -> Result<Self> {
        check_symmetric(a)?;
        a.ensure_finite("cholesky input")?;
        let n = a.rows();
        if let Some(factor) = try_cholesky(a, 0.0) {
            return Ok(Self { factor, jitter: 0.0 });
        }
        let base = a.trace() / n.max(1) as f64;
        if base <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        let mut shift = JITTER_BASE * base;
        for _ in 0..JITTER_RETRIES {
            if let Some(factor) = try_cholesky(a, shift) {
                return Ok(Self { factor, jitter: shift });
            }
            shift *= 10.0;
        }
        Err(Error::NotPositiveDefinite)
    }

    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn logdet(&self) -> f64 {
        let n = self.factor.rows();
        2.0 * (0..n).map(|i| self.factor.get(i, i).ln()).sum::<f64>()
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let l = &self.factor;
        let n = l.rows();
        assert_eq!(b.rows(), n, "cholesky solve: rhs rows");
        let mut x = b.clone();
        for c in 0..x.cols() {
            let col = x.col_mut(c);
            // forward: L y = b
            for i in 0..n {
                let mut s = col[i];
                for k in 0..i {
                    s -= l.get(i, k) * col[k];
                }
                col[i] = s / l.get(i, i);
            }
            // backward: Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in i + 1..n {
                    s -= l.get(k, i) * col[k];
                }
                col[i] = s / l.get(i, i);
            }
        }
        x
    }

    pub fn inverse(&self) -> Matrix {
        self.solve(&Matrix::identity(self.factor.rows()))
    }
}

fn try_cholesky(a: &Matrix, shift: f64) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j) + shift;
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

pub(crate) fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(shape_err(
            "symmetric input",
            "square matrix",
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// `log det(A)` of a symmetric positive-definite matrix via its Cholesky factor.
pub fn cholesky_logdet(a: &Matrix) -> Result<f64> {
    Ok(Cholesky::new(a)?.logdet())
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors, column `i` paired with `values[i]`.
    pub vectors: Matrix,
}

impl SymEigen {
    pub fn reconstruct(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.vectors.rows(), self.vectors.cols(), |i, j| {
            self.vectors.get(i, j) * self.values[j]
        });
        scaled.matmul_t(&self.vectors)
    }
}

/// Cyclic Jacobi eigen-solver for symmetric matrices.
pub fn sym_eigen(a: &Matrix) -> Result<SymEigen> {
    check_symmetric(a)?;
    a.ensure_finite("sym_eigen input")?;
    let n = a.rows();
    let mut m = a.clone();
    // exact symmetry keeps the rotations consistent
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();
    let mut converged = n <= 1 || scale == 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                op: "sym_eigen",
                iterations: sweeps,
            });
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
        let off: f64 = (0..n)
            .flat_map(|j| (0..n).filter(move |&i| i != j).map(move |i| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        converged = off <= 1e-15 * scale || off < f64::MIN_POSITIVE;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok(SymEigen { values, vectors })
}

fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m.get(k, p);
        let mkq = m.get(k, q);
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m.get(p, k);
        let mqk = m.get(q, k);
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Orthonormal basis for the column span of `b` (thin QR, positive `R` diagonal).
///
/// Modified Gram-Schmidt with one reorthogonalization pass.
pub fn qr_orthonormalize(b: &Matrix) -> Result<Matrix> {
    let (rows, cols) = b.shape();
    if cols > rows {
        return Err(shape_err(
            "qr_orthonormalize",
            format!("cols <= rows ({rows})"),
            format!("{cols} cols"),
        ));
    }
    b.ensure_finite("qr_orthonormalize input")?;
    let mut q = b.clone();
    let mut r_diag = Vec::with_capacity(cols);
    for j in 0..cols {
        for _pass in 0..2 {
            for k in 0..j {
                let (head, tail) = q.data_mut().split_at_mut(j * rows);
                let qk = &head[k * rows..(k + 1) * rows];
                let qj = &mut tail[..rows];
                let proj = dot(qk, qj);
                for (x, &y) in qj.iter_mut().zip(qk) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(q.col(j), q.col(j)).sqrt();
        r_diag.push(norm);
        if norm == 0.0 {
            return Err(Error::RankDeficient { column: j });
        }
        for x in q.col_mut(j) {
            *x /= norm;
        }
    }
    let largest = r_diag.iter().cloned().fold(0.0, f64::max);
    if let Some(col) = r_diag.iter().position(|&d| d < RANK_TOL * largest) {
        return Err(Error::RankDeficient { column: col });
    }
    Ok(q)
}

/// Largest entry of `|QᵀQ - I|`.
pub fn orthonormality_defect(q: &Matrix) -> f64 {
    let g = q.t_matmul(q);
    g.max_abs_diff(&Matrix::identity(q.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::rng::seeded_gaussian;
    use crate::matcore::Seed;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let b = seeded_gaussian(n, n, Seed(seed));
        let mut a = b.gram_outer();
        for i in 0..n {
            a[(i, i)] += 1.0;
        }
        a
    }

    #[test]
    fn logdet_of_identity_is_zero() {
        assert_eq!(cholesky_logdet(&Matrix::identity(3)).unwrap(), 0.0);
    }

    #[test]
    fn logdet_of_diag_two() {
        let v = cholesky_logdet(&Matrix::diag(&[2.0, 2.0])).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn logdet_matches_eigenvalues() {
        for (n, seed) in [(8, 1), (16, 2), (64, 3)] {
            let a = random_spd(n, seed);
            let eig = sym_eigen(&a).unwrap();
            let oracle: f64 = eig.values.iter().map(|l| l.ln()).sum();
            let got = cholesky_logdet(&a).unwrap();
            assert!((got - oracle).abs() < 1e-9, "n={n}: {got} vs {oracle}");
        }
    }

    #[test]
    fn cholesky_rejects_indefinite_and_asymmetric() {
        let a = Matrix::diag(&[1.0, -1.0]);
        assert!(matches!(cholesky_logdet(&a), Err(Error::NotPositiveDefinite)));
        let b = Matrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]);
        assert!(matches!(cholesky_logdet(&b), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn jitter_rescues_roundoff_semidefinite() {
        // rank-1 Gram matrix: PSD but singular
        let v = Matrix::column(&[1.0, 2.0, 3.0]);
        let a = v.gram_outer();
        let chol = Cholesky::new(&a);
        // singular PSD input either needs jitter or fails, never silently succeeds without it
        if let Ok(c) = chol {
            assert!(c.jitter > 0.0);
        }
    }

    #[test]
    fn solve_inverts() {
        let a = random_spd(6, 9);
        let b = seeded_gaussian(6, 2, Seed(10));
        let x = Cholesky::new(&a).unwrap().solve(&b);
        assert!(a.matmul(&x).max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn eigen_diag() {
        let e = sym_eigen(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors.col(0).iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn eigen_identity() {
        let e = sym_eigen(&Matrix::identity(4)).unwrap();
        assert!(e.values.iter().all(|&l| l == 1.0));
        assert!(e.reconstruct().max_abs_diff(&Matrix::identity(4)) < 1e-15);
    }

    #[test]
    fn eigen_random_reconstructs() {
        let b = seeded_gaussian(6, 6, Seed(4));
        let a = Matrix::from_fn(6, 6, |i, j| b.get(i, j) + b.get(j, i));
        let e = sym_eigen(&a).unwrap();
        assert!((&a - &e.reconstruct()).frobenius_norm() <= 1e-9);
        assert!(orthonormality_defect(&e.vectors) <= 1e-9);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let av = a.matmul(&e.vectors);
        let vl = Matrix::from_fn(6, 6, |i, j| e.vectors.get(i, j) * e.values[j]);
        assert!(av.max_abs_diff(&vl) < 1e-9);
    }

    #[test]
    fn qr_of_orthonormal_is_identity_op() {
        let q = qr_orthonormalize(&seeded_gaussian(5, 3, Seed(5))).unwrap();
        let again = qr_orthonormalize(&q).unwrap();
        for j in 0..3 {
            let s = dot(q.col(j), again.col(j)).signum();
            for i in 0..5 {
                assert!((q.get(i, j) - s * again.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qr_hand_example() {
        let b = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let q = qr_orthonormalize(&b).unwrap();
        let expected = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        assert!(q.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn qr_random_gaussian_is_orthonormal() {
        let q = qr_orthonormalize(&seeded_gaussian(16, 4, Seed(6))).unwrap();
        assert!(orthonormality_defect(&q) <= 1e-10);
    }

    #[test]
    fn qr_rank_deficient() {
        let b = Matrix::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0]]);
        assert!(matches!(qr_orthonormalize(&b), Err(Error::RankDeficient { .. })));
    }
}
