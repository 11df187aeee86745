use proptest::prelude::*;

use depict::coding_rate::{coding_rate, coding_rate_dual, RateConfig};
use depict::datagen::{gen_range, SynthConfig};
use depict::decoder::{
    decode_checkpoint, encode_checkpoint, forward, perturb_params, predict_labels, DecoderConfig, DecoderParams,
    Perturbation,
};
use depict::matcore::{qr_orthonormalize, Rng};
use depict::operators::{layer_norm, LayerNormParams};
use depict::subspace::{center_columns, kmeans, pca};
use depict::verify::{bound_margins, proportional_counts};
use depict::{Matrix, Seed};

fn gaussian(seed: u64, rows: usize, cols: usize) -> Matrix {
    Rng::new(Seed(seed)).gaussian_matrix(rows, cols)
}

fn matrix() -> impl Strategy<Value = Matrix> {
    (1usize..7, 1usize..7).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| Matrix::from_col_major(r, c, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrix_length_must_match_shape(r in 1usize..6, c in 1usize..6, extra in 1usize..4) {
        prop_assert!(Matrix::from_col_major(r, c, vec![0.0; r * c + extra]).is_err());
        prop_assert!(Matrix::from_col_major(r, c, vec![0.0; r * c]).is_ok());
    }

    #[test]
    fn transpose_is_an_involution(a in matrix()) {
        prop_assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn product_transpose_identity(seed in any::<u64>(), (r, k, c) in (1usize..6, 1usize..6, 1usize..6)) {
        let a = gaussian(seed, r, k);
        let b = gaussian(seed ^ 1, k, c);
        let lhs = a.matmul(&b).transpose();
        let rhs = b.transpose().matmul(&a.transpose());
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn same_seed_same_stream(seed in any::<u64>(), label in "[a-z]{1,8}") {
        let mut a = Rng::new(Seed(seed).derive(&label));
        let mut b = Rng::new(Seed(seed).derive(&label));
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
        prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }

    #[test]
    fn coding_rate_nonnegative_and_matches_dual(seed in any::<u64>(), d in 1usize..20, n in 1usize..20, eps in 0.05f64..3.0) {
        let z = gaussian(seed, d, n);
        let cfg = RateConfig::new(eps).unwrap();
        let r = coding_rate(&z, &cfg).unwrap();
        prop_assert!(r >= 0.0);
        prop_assert!((r - coding_rate_dual(&z, &cfg).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn coding_rate_rotation_and_permutation_invariant(seed in any::<u64>(), d in 1usize..10, n in 2usize..16) {
        let z = gaussian(seed, d, n);
        let cfg = RateConfig::new(0.5).unwrap();
        let r = coding_rate(&z, &cfg).unwrap();
        let o = qr_orthonormalize(&gaussian(seed ^ 7, d, d)).unwrap();
        let rotated = o.matmul(&z);
        prop_assert!((coding_rate(&rotated, &cfg).unwrap() - r).abs() <= 1e-9);
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::new(Seed(seed)).shuffle(&mut perm);
        let permuted = Matrix::from_fn(d, n, |i, j| z[(i, perm[j])]);
        prop_assert!((coding_rate(&permuted, &cfg).unwrap() - r).abs() <= 1e-9);
    }

    #[test]
    fn projected_rate_bounds_hold(seed in any::<u64>(), m in 1usize..6, n in 4usize..24) {
        let d = m + 4;
        let z = gaussian(seed, d, n);
        let pp = qr_orthonormalize(&gaussian(seed ^ 3, d, m)).unwrap();
        let (lower, upper) = bound_margins(&z, &pp, &RateConfig::new(0.5).unwrap()).unwrap();
        prop_assert!(lower <= 1e-9, "lower-bound violation {}", lower);
        prop_assert!(upper <= 1e-9, "upper-bound violation {}", upper);
    }

    #[test]
    fn pca_directions_orthonormal_and_sorted(seed in any::<u64>(), d in 2usize..10, n in 3usize..30, c in 1usize..4) {
        let c = c.min(d);
        let z = gaussian(seed, d, n);
        let res = pca(&z, c).unwrap();
        let u = &res.directions;
        let gram = u.t_matmul(u);
        prop_assert!(gram.max_abs_diff(&Matrix::from_fn(c, c, |i, j| f64::from(u8::from(i == j)))) <= 1e-9);
        prop_assert!(res.variances.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        let (centered, _) = center_columns(&z);
        for k in 0..c {
            let proj = u.cols_range(k, 1).t_matmul(&centered);
            let var = proj.data().iter().map(|x| x * x).sum::<f64>() / n as f64;
            prop_assert!((var - res.variances[k]).abs() <= 1e-9);
        }
    }

    #[test]
    fn centered_rows_sum_to_zero(seed in any::<u64>(), d in 1usize..8, n in 1usize..30) {
        let (c, mean) = center_columns(&gaussian(seed, d, n).scale(5.0));
        prop_assert_eq!(mean.len(), d);
        for i in 0..d {
            let s: f64 = (0..n).map(|j| c[(i, j)]).sum();
            prop_assert!(s.abs() <= 1e-12 * n as f64 * 10.0);
        }
    }

    #[test]
    fn kmeans_counts_and_centroids(seed in any::<u64>(), d in 1usize..6, n in 4usize..30, c in 1usize..4) {
        let z = gaussian(seed, d, n);
        let res = kmeans(&z, c, Seed(seed)).unwrap();
        prop_assert_eq!(res.counts.iter().sum::<usize>(), n);
        prop_assert_eq!(res.assignments.len(), n);
        for (k, &count) in res.counts.iter().enumerate() {
            prop_assert!(count >= 1);
            for i in 0..d {
                let mean = (0..n).filter(|&j| res.assignments[j] == k).map(|j| z[(i, j)]).sum::<f64>() / count as f64;
                prop_assert!((mean - res.centroids[(i, k)]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_columns(seed in any::<u64>(), d in 2usize..12, n in 1usize..8) {
        let z = gaussian(seed, d, n).scale(3.0);
        let p = LayerNormParams::identity(d);
        let out = layer_norm(&z, &p).unwrap();
        let stats = |c: &[f64]| {
            let mean = c.iter().sum::<f64>() / d as f64;
            (mean, c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64)
        };
        for j in 0..n {
            let (_, raw_var) = stats(z.col(j));
            let (mean, var) = stats(out.col(j));
            prop_assert!(mean.abs() <= 1e-12);
            // Exactly 1 up to the stabilizer.
            prop_assert!((var - raw_var / (raw_var + p.eps)).abs() <= 1e-12);
        }
    }

    #[test]
    fn proportional_counts_sum_to_total(weights in prop::collection::vec(0.0f64..5.0, 1..8), n in 0usize..200) {
        let counts = proportional_counts(&weights, n);
        prop_assert_eq!(counts.len(), weights.len());
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn per_head_rotation_keeps_predictions(seed in any::<u64>(), ca in any::<bool>()) {
        let cfg = if ca { DecoderConfig::default_ca(8, 3) } else { DecoderConfig::default_sa(8, 3) };
        let params = DecoderParams::init(&cfg, Seed(seed)).unwrap();
        let z = gaussian(seed ^ 5, 8, 12);
        let base = forward(&z, &params, &cfg).unwrap().masks;
        let rotated = perturb_params(&params, Perturbation::PerHeadOrthogonal, Seed(seed ^ 9)).unwrap();
        let after = forward(&z, &rotated, &cfg).unwrap().masks;
        prop_assert!(base.max_abs_diff(&after) <= 1e-10);
        prop_assert_eq!(predict_labels(&base), predict_labels(&after));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact(seed in any::<u64>(), ca in any::<bool>()) {
        let cfg = if ca { DecoderConfig::default_ca(6, 2) } else { DecoderConfig::default_sa(6, 2) };
        let params = DecoderParams::init(&cfg, Seed(seed)).unwrap();
        let bytes = encode_checkpoint(&cfg, &params);
        let (c2, p2) = decode_checkpoint(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(c2, cfg);
        prop_assert_eq!(p2, params);
    }

    #[test]
    fn synthetic_images_are_well_formed(seed in any::<u64>(), start in 0u64..1000) {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let a = gen_range(&cfg, start, 3).unwrap();
        let b = gen_range(&cfg, start, 3).unwrap();
        prop_assert_eq!(&a, &b);
        for img in &a {
            prop_assert_eq!(img.labels.len(), img.grid * img.grid);
            prop_assert_eq!(img.embeddings.shape(), (cfg.ambient_dim, img.grid * img.grid));
            prop_assert!(img.labels.iter().all(|&l| l < cfg.classes));
            prop_assert!(img.embeddings.is_finite());
        }
    }
}
