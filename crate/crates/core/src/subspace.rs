//! PCA, k-means, PCA-based segmentation and low-rank approximation quality.
//!
//! Principal directions are sign-fixed so that the entry of largest magnitude in each direction
//! is positive (first such entry on ties). Everything downstream, including PCA segmentation,
//! inherits that convention.

use serde::{Deserialize, Serialize};

use crate::coding_rate::{coding_rate, RateConfig};
use crate::error::{Error, Result};
use crate::matcore::{dot, qr_orthonormalize, sym_eigen, Matrix, Rng, Seed};

const KMEANS_MAX_ITERS: usize = 300;
const RANK_REL_TOL: f64 = 1e-12;

/// Subtracts the mean column. Returns the centered matrix and the removed mean.
pub fn center_columns(z: &Matrix) -> (Matrix, Vec<f64>) {
    let (d, n) = z.shape();
    let mut mean = vec![0.0; d];
    for j in 0..n {
        for (m, x) in mean.iter_mut().zip(z.col(j)) {
            *m += x;
        }
    }
    if n > 0 {
        for m in &mut mean {
            *m /= n as f64;
        }
    }
    let centered = Matrix::from_fn(d, n, |i, j| z.get(i, j) - mean[i]);
    (centered, mean)
}

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// `D x C` orthonormal principal directions, sign-fixed.
    pub directions: Matrix,
    /// Projected variances `λ_c / N`, descending.
    pub variances: Vec<f64>,
    /// `C x N` coefficients `Uᵀ Z` of the centered data.
    pub coefficients: Matrix,
    /// Mean removed before the decomposition.
    pub mean: Vec<f64>,
    /// False when `C` exceeds the numerical rank; trailing directions then carry zero variance.
    pub rank_reached: bool,
    /// All eigenvalues of `Z Zᵀ` (centered), descending. Length `min(D, N)`.
    pub eigenvalues: Vec<f64>,
}

/// Leading eigenpairs of `Z Zᵀ` (no centering).
struct TopEigen {
    vectors: Matrix,
    values: Vec<f64>,
    all_values: Vec<f64>,
    rank_reached: bool,
}

fn check_count(z: &Matrix, c: usize) -> Result<()> {
    let limit = z.rows().min(z.cols());
    if c == 0 || c > limit {
        return Err(Error::InvalidArgument(format!(
            "component count {c} must be in 1..={limit} for a {}x{} matrix",
            z.rows(),
            z.cols()
        )));
    }
    Ok(())
}

/// Flips `u` so its largest-magnitude entry is positive.
pub fn fix_sign(u: &mut [f64]) {
    let mut best = 0;
    for (i, x) in u.iter().enumerate() {
        if x.abs() > u[best].abs() {
            best = i;
        }
    }
    if u[best] < 0.0 {
        for x in u.iter_mut() {
            *x = -*x;
        }
    }
}

fn top_eigen(z: &Matrix, c: usize) -> Result<TopEigen> {
    let (d, n) = z.shape();
    let (mut vectors, all_values) = if d <= n {
        let e = sym_eigen(&z.gram_outer())?;
        (e.vectors.cols_range(0, c), e.values)
    } else {
        // N x N side: u = Z v / sqrt(λ)
        let e = sym_eigen(&z.gram_inner())?;
        let lmax = e.values[0].max(0.0);
        let mut u = Matrix::zeros(d, c);
        for k in 0..c {
            let l = e.values[k];
            if l > RANK_REL_TOL * lmax * n as f64 && l > 0.0 {
                let v = e.vectors.cols_range(k, 1);
                let col = z.matmul(&v).scale(1.0 / l.sqrt());
                u.col_mut(k).copy_from_slice(col.data());
            }
        }
        (u, e.values)
    };
    let lmax = all_values.first().copied().unwrap_or(0.0).max(0.0);
    let tol = RANK_REL_TOL * lmax * d.max(n) as f64;
    let rank = all_values.iter().filter(|&&l| l > tol && l > 0.0).count();
    let rank_reached = rank >= c;
    if !rank_reached {
        complete_basis(&mut vectors, rank.min(c));
    }
    for k in 0..c {
        fix_sign(vectors.col_mut(k));
    }
    let values = all_values[..c].iter().map(|&l| l.max(0.0)).collect();
    Ok(TopEigen {
        vectors,
        values,
        all_values: all_values.iter().map(|&l| l.max(0.0)).collect(),
        rank_reached,
    })
}

/// Replaces columns `keep..` with an orthonormal completion of the first `keep` columns.
fn complete_basis(u: &mut Matrix, keep: usize) {
    let (d, c) = u.shape();
    let mut basis: Vec<Vec<f64>> = (0..keep).map(|k| u.col(k).to_vec()).collect();
    let mut e = 0;
    while basis.len() < c && e < d {
        let mut v = vec![0.0; d];
        v[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for b in &basis {
                let p = dot(b, &v);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            for x in &mut v {
                *x /= norm;
            }
            basis.push(v);
        }
    }
    for (k, b) in basis.iter().enumerate().skip(keep) {
        u.col_mut(k).copy_from_slice(b);
    }
}

/// PCA with `c` components. `z` is centered internally; the removed mean is reported.
pub fn pca(z: &Matrix, c: usize) -> Result<PcaResult> {
    check_count(z, c)?;
    z.ensure_finite("pca input")?;
    let (centered, mean) = center_columns(z);
    let top = top_eigen(&centered, c)?;
    let n = z.cols() as f64;
    let coefficients = top.vectors.t_matmul(&centered);
    Ok(PcaResult {
        variances: top.values.iter().map(|l| l / n).collect(),
        directions: top.vectors,
        coefficients,
        mean,
        rank_reached: top.rank_reached,
        eigenvalues: top.all_values,
    })
}

/// Best rank-`c` approximation `U Uᵀ Z` in Frobenius norm (no centering).
pub fn best_rank_c_approx(z: &Matrix, c: usize) -> Result<Matrix> {
    check_count(z, c)?;
    z.ensure_finite("best_rank_c_approx input")?;
    let top = top_eigen(z, c)?;
    Ok(top.vectors.matmul(&top.vectors.t_matmul(z)))
}

/// Labels each column by its largest signed coefficient on the top-`c` principal directions.
/// Ties go to the lowest direction index.
pub fn pca_segment(z: &Matrix, c: usize) -> Result<Vec<usize>> {
    if c < 2 {
        return Err(Error::InvalidArgument(format!(
            "pca segmentation needs at least 2 directions, got {c}"
        )));
    }
    let p = pca(z, c)?;
    Ok(argmax_columns(&p.coefficients))
}

/// Row index of the maximum in each column; ties resolve to the lowest index.
pub fn argmax_columns(scores: &Matrix) -> Vec<usize> {
    (0..scores.cols())
        .map(|j| {
            let col = scores.col(j);
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `D x C` centroids.
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub counts: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd update, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(z: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..z.cols())
        .map(|j| {
            let x = z.col(j);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..centroids.cols() {
                let d = sq_dist(x, centroids.col(k));
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn inertia_of(z: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(j, &k)| sq_dist(z.col(j), centroids.col(k)))
        .sum()
}

fn seed_plus_plus(z: &Matrix, c: usize, rng: &mut Rng) -> Matrix {
    let n = z.cols();
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<f64> = (0..n).map(|j| sq_dist(z.col(j), z.col(chosen[0]))).collect();
    while chosen.len() < c {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (j, &d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = j;
                    break;
                }
            }
            pick
        } else {
            rng.below(n)
        };
        chosen.push(next);
        for (j, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(z.col(j), z.col(next)));
        }
    }
    Matrix::from_fn(z.rows(), c, |i, k| z.get(i, chosen[k]))
}

/// Recomputes centroids as means; empty clusters are re-seeded at the point farthest from its
/// current centroid, which is then moved into the empty cluster.
fn update_centroids(z: &Matrix, centroids: &mut Matrix, assignments: &mut [usize]) {
    let (d, c) = centroids.shape();
    loop {
        let mut counts = vec![0usize; c];
        for &k in assignments.iter() {
            counts[k] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            let mut sums = Matrix::zeros(d, c);
            for (j, &k) in assignments.iter().enumerate() {
                for (s, x) in sums.col_mut(k).iter_mut().zip(z.col(j)) {
                    *s += x;
                }
            }
            for k in 0..c {
                let inv = 1.0 / counts[k] as f64;
                for (dst, s) in centroids.col_mut(k).iter_mut().zip(sums.col(k)) {
                    *dst = s * inv;
                }
            }
            return;
        };
        let mut far = 0;
        let mut far_d = -1.0;
        for (j, &k) in assignments.iter().enumerate() {
            if counts[k] < 2 {
                continue;
            }
            let dd = sq_dist(z.col(j), centroids.col(k));
            if dd > far_d {
                far_d = dd;
                far = j;
            }
        }
        assignments[far] = empty;
        centroids.col_mut(empty).copy_from_slice(z.col(far));
    }
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(z: &Matrix, c: usize, seed: Seed) -> Result<KMeansResult> {
    let n = z.cols();
    if c == 0 || c > n {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= C <= N, got C={c}, N={n}"
        )));
    }
    z.ensure_finite("kmeans input")?;
    let mut rng = Rng::new(seed);
    let mut centroids = seed_plus_plus(z, c, &mut rng);
    let mut assignments = assign(z, &centroids);
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        update_centroids(z, &mut centroids, &mut assignments);
        history.push(inertia_of(z, &centroids, &assignments));
        let next = assign(z, &centroids);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    if !converged {
        update_centroids(z, &mut centroids, &mut assignments);
    }
    let mut counts = vec![0usize; c];
    for &k in &assignments {
        counts[k] += 1;
    }
    let inertia = inertia_of(z, &centroids, &assignments);
    Ok(KMeansResult {
        centroids,
        assignments,
        counts,
        inertia,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Where the columns of a low-rank surrogate come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QbarSource {
    PrincipalDirections,
    KMeansCentroids,
    Explicit,
}

/// Columns plus replication counts that define a `D x N` surrogate `Q̄`.
#[derive(Debug, Clone)]
pub struct QbarSpec {
    pub source: QbarSource,
    /// `D x C` distinct columns.
    pub columns: Matrix,
    pub counts: Vec<usize>,
}

impl QbarSpec {
    /// Top-`counts.len()` principal directions of `z` (centered internally).
    pub fn principal(z: &Matrix, counts: Vec<usize>) -> Result<Self> {
        let p = pca(z, counts.len())?;
        Ok(Self {
            source: QbarSource::PrincipalDirections,
            columns: p.directions,
            counts,
        })
    }

    pub fn kmeans(result: &KMeansResult) -> Self {
        Self {
            source: QbarSource::KMeansCentroids,
            columns: result.centroids.clone(),
            counts: result.counts.clone(),
        }
    }

    pub fn explicit(columns: Matrix, counts: Vec<usize>) -> Self {
        Self {
            source: QbarSource::Explicit,
            columns,
            counts,
        }
    }

    /// The replicated `D x N` matrix.
    pub fn materialize(&self) -> Matrix {
        self.columns.replicate_columns(&self.counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowRankQuality {
    /// `|R(Z) − R(Q̄)|`.
    pub gap: f64,
    pub rate_z: f64,
    pub rate_qbar: f64,
    /// `½ Σ_c log(1 + (D / (N ε²)) n_c)`, reported for principal-direction surrogates.
    pub closed_form: Option<f64>,
}

/// Coding-rate gap between `z` and the surrogate described by `spec`.
pub fn lowrank_quality(z: &Matrix, spec: &QbarSpec, cfg: &RateConfig) -> Result<LowRankQuality> {
    let n = z.cols();
    let total: usize = spec.counts.iter().sum();
    if total != n {
        return Err(Error::CountMismatch {
            expected: n,
            got: total,
        });
    }
    if spec.columns.cols() != spec.counts.len() || spec.columns.rows() != z.rows() {
        return Err(crate::error::shape_err(
            "lowrank_quality",
            format!("{}x{}", z.rows(), spec.counts.len()),
            format!("{}x{}", spec.columns.rows(), spec.columns.cols()),
        ));
    }
    let qbar = spec.materialize();
    let rate_z = coding_rate(z, cfg)?;
    let rate_qbar = coding_rate(&qbar, cfg)?;
    let closed_form = (spec.source == QbarSource::PrincipalDirections)
        .then(|| principal_closed_form(&spec.counts, z.rows(), n, cfg));
    Ok(LowRankQuality {
        gap: (rate_z - rate_qbar).abs(),
        rate_z,
        rate_qbar,
        closed_form,
    })
}

/// `½ Σ_c log(1 + (D / (N ε²)) n_c)`: the rate of orthonormal columns replicated `n_c` times.
pub fn principal_closed_form(counts: &[usize], d: usize, n: usize, cfg: &RateConfig) -> f64 {
    let c = cfg.scale(d, n);
    0.5 * counts.iter().map(|&k| (c * k as f64).ln_1p()).sum::<f64>()
}

/// Optimal one-to-one matching between predicted and true label ids; returns the fraction of
/// columns whose matched prediction equals the truth.
pub fn matched_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "matched_accuracy: length mismatch");
    if pred.is_empty() {
        return 1.0;
    }
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let k = kp.max(kt);
    let mut agree = vec![vec![0i64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        agree[p][t] += 1;
    }
    let cost: Vec<Vec<i64>> = agree
        .iter()
        .map(|row| row.iter().map(|&a| -a).collect())
        .collect();
    let assignment = hungarian(&cost);
    let matched: i64 = assignment
        .iter()
        .enumerate()
        .map(|(p, &t)| agree[p][t])
        .sum();
    matched as f64 / pred.len() as f64
}

/// Minimum-cost perfect matching on a square cost matrix; `result[row] = col`.
fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            result[p[j] - 1] = j - 1;
        }
    }
    result
}

/// Orthonormal basis via QR, convenience re-export for surrogate construction.
pub fn orthonormal_columns(b: &Matrix) -> Result<Matrix> {
    qr_orthonormalize(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{orthonormality_defect, seeded_gaussian};

    fn brute_force_matched(pred: &[usize], truth: &[usize]) -> f64 {
        let k = pred.iter().chain(truth).max().unwrap() + 1;
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = 0;
        permute(&mut perm, 0, &mut |p| {
            let hits = pred.iter().zip(truth).filter(|(&a, &b)| p[a] == b).count();
            best = best.max(hits);
        });
        best as f64 / pred.len() as f64
    }

    fn permute(v: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
        if i == v.len() {
            f(v);
            return;
        }
        for j in i..v.len() {
            v.swap(i, j);
            permute(v, i + 1, f);
            v.swap(i, j);
        }
    }

    #[test]
    fn centering_cases() {
        let z = Matrix::from_rows(&[&[1.0, -1.0], &[2.0, -2.0]]);
        let (c, m) = center_columns(&z);
        assert_eq!(c, z);
        assert_eq!(m, vec![0.0, 0.0]);

        let same = Matrix::from_fn(3, 4, |i, _| i as f64 + 0.5);
        let (c, m) = center_columns(&same);
        assert_eq!(c.max_abs(), 0.0);
        assert_eq!(m, vec![0.5, 1.5, 2.5]);

        let r = seeded_gaussian(5, 13, Seed(1));
        let (c, _) = center_columns(&r);
        for i in 0..5 {
            assert!(c.row(i).iter().sum::<f64>().abs() < 1e-12 * 13.0);
        }
    }

    #[test]
    fn pca_plane_data() {
        let coeffs = seeded_gaussian(2, 20, Seed(2));
        let z = Matrix::from_fn(5, 20, |i, j| if i < 2 { coeffs.get(i, j) } else { 0.0 });
        let (zc, _) = center_columns(&z);
        let p = pca(&z, 2).unwrap();
        let recon = p.directions.matmul(&p.coefficients);
        assert!((&zc - &recon).frobenius_norm() < 1e-10);
        for k in 0..2 {
            assert!(p.directions.col(k)[2..].iter().all(|x| x.abs() < 1e-10));
        }
    }

    #[test]
    fn pca_matches_eigen_oracle() {
        let z = seeded_gaussian(8, 32, Seed(3));
        let p = pca(&z, 3).unwrap();
        let (zc, _) = center_columns(&z);
        let e = sym_eigen(&zc.gram_outer()).unwrap();
        for k in 0..3 {
            assert!((p.variances[k] - e.values[k] / 32.0).abs() < 1e-9);
            let proj: Vec<f64> = (0..32).map(|j| dot(p.directions.col(k), zc.col(j))).collect();
            let var = dot(&proj, &proj) / 32.0;
            assert!((var - p.variances[k]).abs() < 1e-9);
        }
        assert!(orthonormality_defect(&p.directions) < 1e-9);
        let recon = p.directions.matmul(&p.directions.t_matmul(&zc));
        let err = (&zc - &recon).frobenius_norm().powi(2);
        let tail: f64 = e.values[3..].iter().sum();
        assert!((err - tail).abs() < 1e-8);
    }

    #[test]
    fn pca_tall_matrix_uses_gram_side() {
        let z = seeded_gaussian(30, 6, Seed(4));
        let p = pca(&z, 3).unwrap();
        assert!(orthonormality_defect(&p.directions) < 1e-9);
        assert!(p.rank_reached);
        // centered 30x6 has rank 5
        let full = pca(&z, 6).unwrap();
        assert!(!full.rank_reached);
        assert!(orthonormality_defect(&full.directions) < 1e-9);
    }

    #[test]
    fn full_rank_approx_is_exact() {
        let z = seeded_gaussian(4, 7, Seed(5));
        let a = best_rank_c_approx(&z, 4).unwrap();
        assert!(a.max_abs_diff(&z) < 1e-9);
        let u = seeded_gaussian(4, 1, Seed(6));
        let v = seeded_gaussian(1, 7, Seed(7));
        let r1 = u.matmul(&v);
        assert!(best_rank_c_approx(&r1, 1).unwrap().max_abs_diff(&r1) < 1e-9);
    }

    #[test]
    fn eckart_young_against_random_competitors() {
        let z = seeded_gaussian(6, 10, Seed(8));
        let a = best_rank_c_approx(&z, 2).unwrap();
        let best = (&z - &a).frobenius_norm();
        for s in 0..100 {
            let l = seeded_gaussian(6, 2, Seed(1000 + s));
            let r = seeded_gaussian(2, 10, Seed(2000 + s));
            // least-squares fit of the competitor's row space to make it a fair candidate
            let cand = l.matmul(&r);
            assert!(best <= (&z - &cand).frobenius_norm() + 1e-12);
            let q = qr_orthonormalize(&l).unwrap();
            let proj = q.matmul(&q.t_matmul(&z));
            assert!(best <= (&z - &proj).frobenius_norm() + 1e-12);
        }
    }

    #[test]
    fn segment_orthogonal_axes() {
        // class 0 along +e1, class 1 along +e2
        let z = Matrix::from_fn(3, 10, |i, j| match (i, j < 5) {
            (0, true) => 2.0 + 0.1 * j as f64,
            (1, false) => 2.0 + 0.1 * j as f64,
            _ => 0.0,
        });
        let truth: Vec<usize> = (0..10).map(|j| usize::from(j >= 5)).collect();
        let labels = pca_segment(&z, 2).unwrap();
        assert_eq!(brute_force_matched(&labels, &truth), 1.0);
    }

    #[test]
    fn segment_identical_columns_all_zero() {
        let z = Matrix::from_fn(4, 6, |i, _| i as f64);
        assert_eq!(pca_segment(&z, 3).unwrap(), vec![0; 6]);
    }

    #[test]
    fn segment_sign_convention_is_stable() {
        let z = seeded_gaussian(6, 20, Seed(9));
        let mut flipped = z.clone();
        // negating the data flips every eigenvector; sign fixing must undo it consistently
        let a = pca(&z, 3).unwrap();
        for x in flipped.data_mut() {
            *x = -*x;
        }
        let b = pca(&flipped, 3).unwrap();
        assert!(a.directions.max_abs_diff(&b.directions) < 1e-9);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = Rng::new(Seed(10));
        for _ in 0..50 {
            let n = 30;
            let pred: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
            let a = matched_accuracy(&pred, &truth);
            let b = brute_force_matched(&pred, &truth);
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn kmeans_blobs() {
        let sigma = 0.1;
        let half = 50;
        let noise = seeded_gaussian(2, 2 * half, Seed(11));
        let z = Matrix::from_fn(2, 2 * half, |i, j| {
            let center = if j < half { -5.0 } else { 5.0 };
            (if i == 0 { center } else { 0.0 }) + sigma * noise.get(i, j)
        });
        let r = kmeans(&z, 2, Seed(12)).unwrap();
        let bound = 3.0 * sigma / (half as f64).sqrt();
        let mut xs: Vec<f64> = (0..2).map(|k| r.centroids.get(0, k)).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 5.0).abs() < bound && (xs[1] - 5.0).abs() < bound);
        assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert_eq!(r.counts.iter().sum::<usize>(), 2 * half);
    }

    #[test]
    fn kmeans_n_equals_c() {
        let z = seeded_gaussian(3, 5, Seed(13));
        let r = kmeans(&z, 5, Seed(14)).unwrap();
        assert!(r.inertia < 1e-24);
        assert!(r.counts.iter().all(|&n| n == 1));
    }

    #[test]
    fn kmeans_deterministic_and_means() {
        let z = seeded_gaussian(4, 40, Seed(15));
        let a = kmeans(&z, 3, Seed(16)).unwrap();
        let b = kmeans(&z, 3, Seed(16)).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
        for k in 0..3 {
            let members: Vec<usize> = (0..40).filter(|&j| a.assignments[j] == k).collect();
            for i in 0..4 {
                let m = members.iter().map(|&j| z.get(i, j)).sum::<f64>() / members.len() as f64;
                assert!((m - a.centroids.get(i, k)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kmeans_reseeds_empty_clusters() {
        // duplicate points force k-means++ to pick coincident seeds
        let z = Matrix::from_fn(2, 6, |i, j| if j < 5 { 0.0 } else { i as f64 + 1.0 });
        let r = kmeans(&z, 3, Seed(1)).unwrap();
        assert!(r.counts.iter().all(|&n| n >= 1));
        assert_eq!(r.counts.iter().sum::<usize>(), 6);
    }

    #[test]
    fn qbar_equal_to_z_has_zero_gap() {
        let cols = seeded_gaussian(5, 3, Seed(17));
        let counts = vec![4, 2, 3];
        let z = cols.replicate_columns(&counts);
        let spec = QbarSpec::explicit(cols, counts);
        let q = lowrank_quality(&z, &spec, &RateConfig::default()).unwrap();
        assert!(q.gap <= 1e-9);
    }

    #[test]
    fn principal_closed_form_holds() {
        let z = seeded_gaussian(8, 20, Seed(18));
        let spec = QbarSpec::principal(&z, vec![9, 6, 5]).unwrap();
        let q = lowrank_quality(&z, &spec, &RateConfig::default()).unwrap();
        assert!((q.rate_qbar - q.closed_form.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let z = seeded_gaussian(3, 5, Seed(19));
        let spec = QbarSpec::explicit(seeded_gaussian(3, 2, Seed(20)), vec![2, 2]);
        assert!(matches!(
            lowrank_quality(&z, &spec, &RateConfig::default()),
            Err(Error::CountMismatch { expected: 5, got: 4 })
        ));
    }
}
