//! Truncated PCA of state and wind snapshots.
//!
//! Snapshots are centered by their mean over every column before the
//! decomposition. When there are fewer snapshots than spatial nodes the thin
//! SVD comes from the eigendecomposition of the `K × K` Gram matrix (the
//! snapshot method); otherwise from the `m × m` covariance. Each basis column
//! is re-orthonormalized and signed so that its largest-magnitude entry is
//! positive, which makes fits bit-reproducible.

use nalgebra::{DMatrix, DVector};

use crate::dispersion::{StateTrajectory, WindField};
use crate::error::{Error, Result};
use crate::linalg;

/// Mean, orthonormal basis and singular values of a truncated PCA.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `m × r`, column-orthonormal.
    pub basis: DMatrix<f64>,
    /// Leading singular values of the centered snapshot matrix, descending.
    pub singular_values: Vec<f64>,
}

impl PcaBasis {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Leading `rank` modes of this basis.
    pub fn truncated(&self, rank: usize) -> Result<Self> {
        if rank > self.rank() {
            return Err(Error::RankTooLarge {
                requested: rank,
                available: self.rank(),
            });
        }
        Ok(Self {
            mean: self.mean.clone(),
            basis: self.basis.columns(0, rank).into_owned(),
            singular_values: self.singular_values[..rank].to_vec(),
        })
    }

    /// `Uᵀ (u − μ)`
    pub fn project(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "pca project",
                expected: self.dim(),
                actual: u.len(),
            });
        }
        let centered = DVector::from_iterator(u.len(), u.iter().zip(&self.mean).map(|(a, b)| a - b));
        Ok(self.basis.tr_mul(&centered).as_slice().to_vec())
    }

    /// `μ + U c`
    pub fn reconstruct(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.rank() {
            return Err(Error::DimensionMismatch {
                context: "pca reconstruct",
                expected: self.rank(),
                actual: c.len(),
            });
        }
        let mut out = self.mean.clone();
        for (k, ck) in c.iter().enumerate() {
            linalg::axpy(*ck, self.basis.column(k).as_slice(), &mut out);
        }
        Ok(out)
    }
}

/// Fits the leading `rank` principal directions of the columns of
/// `snapshots` (`m × K`, uncentered).
pub fn fit_pca(snapshots: &DMatrix<f64>, rank: usize) -> Result<PcaBasis> {
    let (m, k) = snapshots.shape();
    if rank > m.min(k) {
        return Err(Error::RankTooLarge {
            requested: rank,
            available: m.min(k),
        });
    }
    if snapshots.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pca snapshots"));
    }
    let mean: Vec<f64> = (0..m).map(|i| snapshots.row(i).sum() / k as f64).collect();
    let mut centered = snapshots.clone();
    for mut col in centered.column_iter_mut() {
        for (v, mu) in col.iter_mut().zip(&mean) {
            *v -= mu;
        }
    }

    let (mut basis, singular_values) = if k <= m {
        let gram = centered.transpose() * &centered;
        let (vals, vecs) = sorted_eigen(gram);
        let sv: Vec<f64> = vals.iter().take(rank).map(|l| l.max(0.0).sqrt()).collect();
        let mut u = &centered * vecs.columns(0, rank);
        for (j, s) in sv.iter().enumerate() {
            // Null directions are filled in by the orthonormalization below.
            let scale = if *s > f64::EPSILON * sv[0].max(1.0) * k as f64 { 1.0 / s } else { 0.0 };
            u.column_mut(j).scale_mut(scale);
        }
        (u, sv)
    } else {
        let cov = &centered * centered.transpose();
        let (vals, vecs) = sorted_eigen(cov);
        let sv: Vec<f64> = vals.iter().take(rank).map(|l| l.max(0.0).sqrt()).collect();
        (vecs.columns(0, rank).into_owned(), sv)
    };
    orthonormalize_columns(&mut basis);
    fix_signs(&mut basis);
    Ok(PcaBasis {
        mean,
        basis,
        singular_values,
    })
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
fn sorted_eigen(a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = a.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Two passes of modified Gram-Schmidt; degenerate columns are replaced by
/// the first coordinate direction that is not yet spanned.
fn orthonormalize_columns(u: &mut DMatrix<f64>) {
    let (m, r) = u.shape();
    let mut fallback = 0;
    for j in 0..r {
        let mut filled = false;
        loop {
            for _ in 0..2 {
                for i in 0..j {
                    let proj = u.column(i).dot(&u.column(j));
                    let ci = u.column(i).clone_owned();
                    u.column_mut(j).axpy(-proj, &ci, 1.0);
                }
            }
            let nrm = u.column(j).norm();
            if nrm > 1e-8 || (filled && nrm > 1e-3) {
                u.column_mut(j).scale_mut(1.0 / nrm);
                break;
            }
            assert!(fallback < m, "cannot complete an orthonormal basis");
            u.column_mut(j).fill(0.0);
            u[(fallback, j)] = 1.0;
            fallback += 1;
            filled = true;
        }
    }
}

fn fix_signs(u: &mut DMatrix<f64>) {
    for mut col in u.column_iter_mut() {
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Worst relative ℓ² reconstruction error over a set of snapshots; snapshots
/// with zero norm are skipped.
pub fn reconstruction_error<'a>(
    dataset: impl IntoIterator<Item = &'a [f64]>,
    basis: &PcaBasis,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for u in dataset {
        let nrm = linalg::norm(u);
        if nrm == 0.0 {
            continue;
        }
        let rec = basis.reconstruct(&basis.project(u)?)?;
        worst = worst.max(linalg::norm(&linalg::sub(u, &rec)) / nrm);
    }
    Ok(worst)
}

/// Worst relative error for every truncation `0..=rank` of `basis`,
/// computed from one projection per snapshot.
pub fn reconstruction_error_profile<'a>(
    dataset: impl IntoIterator<Item = &'a [f64]>,
    basis: &PcaBasis,
) -> Result<Vec<f64>> {
    let r = basis.rank();
    let mut worst = vec![0.0_f64; r + 1];
    for u in dataset {
        let nrm_sq = linalg::norm_sq(u);
        if nrm_sq == 0.0 {
            continue;
        }
        let c = basis.project(u)?;
        let centered: Vec<f64> = u.iter().zip(&basis.mean).map(|(a, b)| a - b).collect();
        let mut resid = linalg::norm_sq(&centered);
        worst[0] = worst[0].max((resid.max(0.0) / nrm_sq).sqrt());
        for k in 0..r {
            resid -= c[k] * c[k];
            worst[k + 1] = worst[k + 1].max((resid.max(0.0) / nrm_sq).sqrt());
        }
    }
    Ok(worst)
}

/// How the truncation rank is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankRule {
    Fixed(usize),
    /// Smallest rank whose worst relative error on the check set is within
    /// `max_rel_error`, searching up to `max_rank`.
    ErrorTarget { max_rel_error: f64, max_rank: usize },
}

/// Fits a basis under `rule`. The error target is checked against `check`
/// (the fitting snapshots when `check` is empty).
pub fn fit_pca_with_rule(
    snapshots: &DMatrix<f64>,
    check: &[&[f64]],
    rule: RankRule,
) -> Result<PcaBasis> {
    match rule {
        RankRule::Fixed(r) => fit_pca(snapshots, r),
        RankRule::ErrorTarget {
            max_rel_error,
            max_rank,
        } => {
            let cap = max_rank.min(snapshots.nrows()).min(snapshots.ncols());
            let full = fit_pca(snapshots, cap)?;
            let profile = if check.is_empty() {
                let cols: Vec<Vec<f64>> = snapshots
                    .column_iter()
                    .map(|c| c.iter().copied().collect())
                    .collect();
                reconstruction_error_profile(cols.iter().map(|c| c.as_slice()), &full)?
            } else {
                reconstruction_error_profile(check.iter().copied(), &full)?
            };
            let r = profile
                .iter()
                .position(|e| *e <= max_rel_error)
                .unwrap_or(cap);
            full.truncated(r)
        }
    }
}

/// Stacks all snapshots of the given trajectories as columns.
pub fn state_snapshot_matrix(trajectories: &[&StateTrajectory]) -> DMatrix<f64> {
    let m = trajectories[0].m;
    let cols: usize = trajectories.iter().map(|t| t.n_steps + 1).sum();
    let mut out = DMatrix::zeros(m, cols);
    let mut c = 0;
    for t in trajectories {
        for u in t.snapshots() {
            out.column_mut(c).copy_from_slice(u);
            c += 1;
        }
    }
    out
}

/// Stacks every time step of the given wind fields as columns.
pub fn wind_snapshot_matrix(winds: &[&WindField]) -> DMatrix<f64> {
    let m = winds[0].m;
    let cols: usize = winds.iter().map(|w| w.n_steps).sum();
    let mut out = DMatrix::zeros(m, cols);
    let mut c = 0;
    for w in winds {
        for n in 0..w.n_steps {
            out.column_mut(c).copy_from_slice(w.step(n));
            c += 1;
        }
    }
    out
}

/// Reduced coordinates `c_n` of one trajectory together with the norms
/// needed to evaluate full-state errors without reconstructing.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedTrajectory {
    pub rank: usize,
    /// Row-major `(N + 1) × r`.
    pub coords: Vec<f64>,
    /// `‖u_n‖²`
    pub state_norm_sq: Vec<f64>,
    /// `‖(I − U Uᵀ)(u_n − μ)‖²`, the part of each snapshot outside the basis.
    pub residual_norm_sq: Vec<f64>,
}

impl ReducedTrajectory {
    pub fn from_states(traj: &StateTrajectory, basis: &PcaBasis) -> Result<Self> {
        let r = basis.rank();
        let mut coords = Vec::with_capacity((traj.n_steps + 1) * r);
        let mut state_norm_sq = Vec::with_capacity(traj.n_steps + 1);
        let mut residual_norm_sq = Vec::with_capacity(traj.n_steps + 1);
        for u in traj.snapshots() {
            let c = basis.project(u)?;
            let centered = linalg::sub(u, &basis.mean);
            residual_norm_sq.push((linalg::norm_sq(&centered) - linalg::norm_sq(&c)).max(0.0));
            state_norm_sq.push(linalg::norm_sq(u));
            coords.extend_from_slice(&c);
        }
        Ok(Self {
            rank: r,
            coords,
            state_norm_sq,
            residual_norm_sq,
        })
    }

    /// Wraps bare coordinates; full-state norms are taken as the reduced ones.
    pub fn from_coords(rank: usize, coords: Vec<f64>) -> Self {
        let state_norm_sq: Vec<f64> = coords.chunks_exact(rank).map(linalg::norm_sq).collect();
        let residual_norm_sq = vec![0.0; state_norm_sq.len()];
        Self {
            rank,
            coords,
            state_norm_sq,
            residual_norm_sq,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.coords.len() / self.rank - 1
    }

    pub fn coord(&self, n: usize) -> &[f64] {
        &self.coords[n * self.rank..(n + 1) * self.rank]
    }
}

/// Reduced wind coordinates, row-major `N × r_w`.
pub fn reduce_wind(wind: &WindField, basis: &PcaBasis) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(wind.n_steps * basis.rank());
    for n in 0..wind.n_steps {
        out.extend(basis.project(wind.step(n))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(m: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, k, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn columns(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
        a.column_iter().map(|c| c.iter().copied().collect()).collect()
    }

    #[test]
    fn rank_one_data_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let offset: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = DMatrix::from_fn(40, 9, |i, j| offset[i] + (j as f64 - 3.0) * dir[i]);
        let basis = fit_pca(&a, 1).unwrap();
        for col in columns(&a) {
            let rec = basis.reconstruct(&basis.project(&col).unwrap()).unwrap();
            assert!(linalg::norm(&linalg::sub(&rec, &col)) < 1e-10);
        }
    }

    #[test]
    fn full_rank_is_exact_and_orthonormal() {
        let a = random_matrix(30, 8, 2);
        let basis = fit_pca(&a, 8).unwrap();
        let gram = basis.basis.tr_mul(&basis.basis);
        assert!((gram - DMatrix::identity(8, 8)).abs().max() < 1e-12);
        for col in columns(&a) {
            let rec = basis.reconstruct(&basis.project(&col).unwrap()).unwrap();
            assert!(linalg::norm(&linalg::sub(&rec, &col)) < 1e-10);
        }
        assert!(basis.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn wide_data_uses_covariance_route() {
        let a = random_matrix(6, 20, 3);
        let basis = fit_pca(&a, 6).unwrap();
        let gram = basis.basis.tr_mul(&basis.basis);
        assert!((gram - DMatrix::identity(6, 6)).abs().max() < 1e-12);
        assert!(reconstruction_error(columns(&a).iter().map(|c| c.as_slice()), &basis).unwrap() < 1e-10);
    }

    #[test]
    fn energy_identity() {
        let a = random_matrix(25, 10, 4);
        let basis = fit_pca(&a, 10).unwrap();
        let mut centered = a.clone();
        for mut col in centered.column_iter_mut() {
            for (v, mu) in col.iter_mut().zip(&basis.mean) {
                *v -= mu;
            }
        }
        let energy: f64 = basis.singular_values.iter().map(|s| s * s).sum();
        assert!((energy / centered.norm_squared() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn project_reconstruct_examples() {
        let a = random_matrix(20, 7, 5);
        let basis = fit_pca(&a, 4).unwrap();
        assert!(linalg::norm(&basis.project(&basis.mean).unwrap()) < 1e-14);
        for i in 0..4 {
            let mut u = basis.mean.clone();
            linalg::axpy(1.0, basis.basis.column(i).as_slice(), &mut u);
            let c = basis.project(&u).unwrap();
            for (k, ck) in c.iter().enumerate() {
                assert!((ck - if k == i { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert_eq!(basis.reconstruct(&[0.0; 4]).unwrap(), basis.mean);
        assert!(matches!(basis.project(&[0.0; 3]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(basis.reconstruct(&[0.0; 3]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(fit_pca(&a, 8), Err(Error::RankTooLarge { .. })));
    }

    #[test]
    fn reconstruction_error_examples() {
        let a = random_matrix(20, 7, 6);
        let basis = fit_pca(&a, 7).unwrap();
        let cols = columns(&a);
        assert!(reconstruction_error(cols.iter().map(|c| c.as_slice()), &basis).unwrap() < 1e-12);

        // Mean-free data spanning only the first two coordinates; probe along the third.
        let b = DMatrix::from_fn(5, 4, |i, j| match (i, j) {
            (0, 0) => 1.0,
            (0, 1) => -1.0,
            (1, 2) => 1.0,
            (1, 3) => -1.0,
            _ => 0.0,
        });
        let basis = fit_pca(&b, 2).unwrap();
        let probe = [0.0, 0.0, 1.0, 0.0, 0.0];
        assert!((reconstruction_error([&probe[..]], &basis).unwrap() - 1.0).abs() < 1e-14);
        let zero = [0.0; 5];
        assert_eq!(reconstruction_error([&zero[..]], &basis).unwrap(), 0.0);
    }

    #[test]
    fn error_profile_matches_direct_loop_and_is_monotone() {
        let a = random_matrix(30, 12, 7);
        let full = fit_pca(&a, 12).unwrap();
        let cols = columns(&a);
        let profile = reconstruction_error_profile(cols.iter().map(|c| c.as_slice()), &full).unwrap();
        for r in 1..=12 {
            let direct = reconstruction_error(cols.iter().map(|c| c.as_slice()), &full.truncated(r).unwrap()).unwrap();
            // Incremental residuals cancel down to ~sqrt(eps) near exact fits.
            assert!((profile[r] - direct).abs() < 1e-7, "rank {r}");
            assert!(profile[r] <= profile[r - 1] + 1e-15);
        }
    }

    #[test]
    fn error_target_picks_smallest_sufficient_rank() {
        let a = random_matrix(30, 12, 8);
        let cols = columns(&a);
        let basis = fit_pca_with_rule(
            &a,
            &[],
            RankRule::ErrorTarget {
                max_rel_error: 0.5,
                max_rank: 12,
            },
        )
        .unwrap();
        let r = basis.rank();
        let full = fit_pca(&a, 12).unwrap();
        let err = |k: usize| {
            reconstruction_error(cols.iter().map(|c| c.as_slice()), &full.truncated(k).unwrap()).unwrap()
        };
        assert!(err(r) <= 0.5);
        assert!(r == 0 || err(r - 1) > 0.5);
    }

    #[test]
    fn linear_for_mean_free_data() {
        let mut a = random_matrix(15, 6, 9);
        let mean: Vec<f64> = (0..15).map(|i| a.row(i).sum() / 6.0).collect();
        for mut col in a.column_iter_mut() {
            for (v, mu) in col.iter_mut().zip(&mean) {
                *v -= mu;
            }
        }
        let basis = fit_pca(&a, 3).unwrap();
        assert!(linalg::norm(&basis.mean) < 1e-14);
        let u1: Vec<f64> = a.column(0).iter().copied().collect();
        let u2: Vec<f64> = (0..15).map(|i| (i as f64).sin()).collect();
        let (al, be) = (1.7, -0.3);
        let mix: Vec<f64> = u1.iter().zip(&u2).map(|(x, y)| al * x + be * y).collect();
        let lhs = basis.project(&mix).unwrap();
        let p1 = basis.project(&u1).unwrap();
        let p2 = basis.project(&u2).unwrap();
        for k in 0..3 {
            assert!((lhs[k] - (al * p1[k] + be * p2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_is_deterministic_and_signed() {
        let a = random_matrix(40, 10, 10);
        let b1 = fit_pca(&a, 5).unwrap();
        let b2 = fit_pca(&a, 5).unwrap();
        assert_eq!(b1, b2);
        for col in b1.basis.column_iter() {
            let big = col.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn projection_is_idempotent(seed in 0u64..500, probe in proptest::collection::vec(-5.0f64..5.0, 18)) {
            let a = random_matrix(18, 9, seed);
            let basis = fit_pca(&a, 4).unwrap();
            let c = basis.project(&probe).unwrap();
            let again = basis.project(&basis.reconstruct(&c).unwrap()).unwrap();
            for (x, y) in c.iter().zip(&again) {
                proptest::prop_assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
            }
        }
    }
}
