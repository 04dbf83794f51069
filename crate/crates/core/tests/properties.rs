//! Structural invariants checked over random inputs.

use nalgebra::DMatrix;
use plume_core::bayes::{lanczos, mahalanobis, DenseOperator, GaussianPrior, LaplacePosterior};
use plume_core::dispersion::{GridSpec, DOMAIN_X, DOMAIN_Y};
use plume_core::flownet::{glorot_init, FlowNetParams};
use plume_core::io::Array;
use plume_core::observe::{ObservationOperator, Sampling};
use plume_core::reduction::fit_pca;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn prior(n: usize) -> GaussianPrior {
    GaussianPrior::new(vec![100.0; n], 0.5, 0.3, 0.02).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pca_basis_is_orthonormal_sorted_and_signed(seed in any::<u64>(), m in 5usize..30, k in 3usize..12, r in 1usize..4) {
        let b = fit_pca(&random_matrix(m, k, seed), r.min(k - 1)).unwrap();
        let gram = b.basis.transpose() * &b.basis;
        prop_assert!((gram - DMatrix::identity(b.rank(), b.rank())).amax() < 1e-12);
        prop_assert!(b.singular_values.windows(2).all(|w| w[0] >= w[1]));
        for col in b.basis.column_iter() {
            let lead = col.iter().copied().fold(0.0_f64, |a, v| if v.abs() > a.abs() { v } else { a });
            prop_assert!(lead > 0.0);
        }
    }

    #[test]
    fn observation_rows_are_convex(seed in any::<u64>(), sampling in prop_oneof![Just(Sampling::Nearest), Just(Sampling::Bilinear)]) {
        let grid = GridSpec::new(41, 9, 4, 2.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locs: Vec<(f64, f64)> = (0..6).map(|_| (rng.gen_range(0.0..=DOMAIN_X), rng.gen_range(0.0..=DOMAIN_Y))).collect();
        let op = ObservationOperator::new(&grid, &locs, sampling).unwrap();
        for row in &op.rows {
            prop_assert!(row.iter().all(|(_, w)| *w >= 0.0));
            prop_assert!((row.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-14);
        }
        let obs = op.observe(&vec![7.5; grid.m()]).unwrap();
        prop_assert!(obs.iter().all(|v| (v - 7.5).abs() < 1e-12));
    }

    #[test]
    fn prior_factor_round_trips(seed in any::<u64>(), n in 4usize..60) {
        let p = prior(n);
        let v: Vec<f64> = random_matrix(n, 1, seed).iter().copied().collect();
        let back = p.solve_factor(&p.apply_factor(&v));
        prop_assert!(plume_core::linalg::rel_l2(&back, &v) < 1e-12);
    }

    #[test]
    fn laplace_factors_satisfy_the_woodbury_identity(seed in any::<u64>(), n in 6usize..25) {
        let a = random_matrix(n, n, seed);
        let op = DenseOperator(&a * a.transpose());
        let (eigenvalues, eigenvectors) = lanczos(&op, n, 1e-3, seed).unwrap();
        prop_assert!(eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(eigenvalues.iter().all(|l| *l >= 0.0));
        let vtv = eigenvectors.transpose() * &eigenvectors;
        prop_assert!((vtv - DMatrix::identity(eigenvalues.len(), eigenvalues.len())).amax() < 1e-10);
        let lp = LaplacePosterior { z_map: vec![100.0; n], eigenvalues, eigenvectors };
        for (p, d) in lp.p().iter().zip(lp.d()) {
            prop_assert!((2.0 * p + p * p + d).abs() < 1e-12);
        }
        let pr = prior(n);
        prop_assert_eq!(mahalanobis(&lp.z_map, &lp, &pr), 0.0);
        let x: Vec<f64> = lp.z_map.iter().zip(random_matrix(n, 1, seed ^ 1).iter()).map(|(m, e)| m + e).collect();
        prop_assert!(mahalanobis(&x, &lp, &pr) > 0.0);
    }

    #[test]
    fn glorot_weights_respect_their_bound(seed in any::<u64>(), fan_out in 1usize..40, fan_in in 1usize..40) {
        let w = glorot_init(fan_out, fan_in, seed);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        prop_assert!(w.iter().all(|v| v.abs() <= bound));
        prop_assert_eq!(w, glorot_init(fan_out, fan_in, seed));
    }

    #[test]
    fn network_parameters_round_trip_exactly(seed in any::<u64>(), r in 1usize..6, rw in 1usize..4, width in 1usize..9) {
        let net = FlowNetParams::new(r, rw, width, 2, 0.5, seed);
        let xi = net.flatten();
        prop_assert_eq!(xi.len(), net.num_params());
        let mut other = FlowNetParams::new(r, rw, width, 2, 0.5, seed.wrapping_add(1));
        other.set_flat(&xi).unwrap();
        prop_assert_eq!(other.flatten(), xi);
    }

    #[test]
    fn containers_round_trip_bit_exactly(seed in any::<u64>(), rows in 0usize..6, cols in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| f64::from_bits(rng.gen::<u64>() & 0x7fef_ffff_ffff_ffff)).collect();
        let a = Array::new("random", vec![rows, cols], data).unwrap();
        let bytes = a.encode();
        let back = Array::decode(&bytes, "random").unwrap();
        prop_assert_eq!(back.shape, a.shape.clone());
        prop_assert!(back.data.iter().zip(&a.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        if rows * cols > 0 {
            let mut bad = bytes.clone();
            let k = bad.len() - 1 - (seed as usize % (8 * rows * cols));
            bad[k] ^= 0x01;
            prop_assert!(Array::decode(&bad, "random").is_err());
        }
    }
}
