//! Sensors, the parameter-to-observable map and its Jacobian actions.
//!
//! Observations of step `n = 1..N` are stacked time-major into one vector
//! `d = (d_1, …, d_N)` of length `L·N`. The surrogate map reconstructs the
//! physical state `U_r c + μ` before observing, so the observation of a
//! reduced state is the affine map `(O U_r) c + O μ`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dispersion::{GridSpec, PdeSolver, SourceMagnitude, StateTrajectory, WindField, DOMAIN_X, DOMAIN_Y};
use crate::error::{Error, Result};
use crate::flownet::FlowNetParams;
use crate::reduction::PcaBasis;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Bilinear,
    Nearest,
}

/// Ten sensors at `x = 18, 36, …, 180` km with altitudes cycling 5, 10, 15 km.
pub fn default_sensors() -> Vec<(f64, f64)> {
    (0..10).map(|k| (18.0 * (k + 1) as f64, [5.0, 10.0, 15.0][k % 3])).collect()
}

/// Sparse interpolation rows; every row is nonnegative and sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationOperator {
    pub locations: Vec<(f64, f64)>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub m: usize,
}

impl ObservationOperator {
    pub fn new(grid: &GridSpec, locations: &[(f64, f64)], sampling: Sampling) -> Result<Self> {
        let mut rows = Vec::with_capacity(locations.len());
        for &(x, y) in locations {
            if !(0.0..=DOMAIN_X).contains(&x) || !(0.0..=DOMAIN_Y).contains(&y) {
                return Err(Error::Config(format!("sensor ({x}, {y}) lies outside the domain")));
            }
            let (sx, sy) = (x / grid.dx(), y / grid.dy());
            let row = match sampling {
                Sampling::Nearest => {
                    let i = (sx.round() as usize).min(grid.nx - 1);
                    let j = (sy.round() as usize).min(grid.ny - 1);
                    vec![(grid.index(i, j), 1.0)]
                }
                Sampling::Bilinear => {
                    let i = (sx.floor() as usize).min(grid.nx - 2);
                    let j = (sy.floor() as usize).min(grid.ny - 2);
                    let fx = (sx - i as f64).clamp(0.0, 1.0);
                    let fy = (sy - j as f64).clamp(0.0, 1.0);
                    [
                        (grid.index(i, j), (1.0 - fx) * (1.0 - fy)),
                        (grid.index(i + 1, j), fx * (1.0 - fy)),
                        (grid.index(i, j + 1), (1.0 - fx) * fy),
                        (grid.index(i + 1, j + 1), fx * fy),
                    ]
                    .into_iter()
                    .filter(|(_, w)| *w != 0.0)
                    .collect()
                }
            };
            rows.push(row);
        }
        Ok(Self {
            locations: locations.to_vec(),
            rows,
            m: grid.m(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `O u`
    pub fn observe(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.m {
            return Err(Error::DimensionMismatch {
                context: "observe state",
                expected: self.m,
                actual: u.len(),
            });
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().map(|(k, w)| w * u[*k]).sum())
            .collect())
    }

    /// `(O U_r, O μ)`
    pub fn reduced(&self, basis: &PcaBasis) -> Result<(DMatrix<f64>, Vec<f64>)> {
        let obs_mean = self.observe(&basis.mean)?;
        let mut obs_basis = DMatrix::zeros(self.len(), basis.rank());
        for k in 0..basis.rank() {
            let col = self.observe(basis.basis.column(k).as_slice())?;
            obs_basis.column_mut(k).copy_from_slice(&col);
        }
        Ok((obs_basis, obs_mean))
    }
}

pub fn observe(u: &[f64], op: &ObservationOperator) -> Result<Vec<f64>> {
    op.observe(u)
}

/// Observations `d_1..d_N`, stacked time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub n_obs: usize,
    pub n_steps: usize,
    pub values: Vec<f64>,
}

impl ObservationSet {
    pub fn step(&self, n: usize) -> &[f64] {
        &self.values[(n - 1) * self.n_obs..n * self.n_obs]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Observations of `u_1..u_N`, each multiplied by `1 + noise_rel·ζ` with
/// `ζ` standard normal.
pub fn make_test_observations(
    truth: &StateTrajectory,
    op: &ObservationOperator,
    noise_rel: f64,
    seed: u64,
) -> Result<ObservationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(truth.n_steps * op.len());
    for n in 1..=truth.n_steps {
        for v in op.observe(truth.snapshot(n))? {
            let zeta: f64 = StandardNormal.sample(&mut rng);
            values.push(v * (1.0 + noise_rel * zeta));
        }
    }
    Ok(ObservationSet {
        n_obs: op.len(),
        n_steps: truth.n_steps,
        values,
    })
}

/// Linear action of `∂F/∂z` at a fixed point.
pub trait Linearization {
    /// `(∂F/∂z) v`
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
    /// `(∂F/∂z)ᵀ y`
    fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>>;
}

/// A map `z ↦ F(z)` from `n_params` source values to `n_data` observables.
pub trait ForwardModel {
    type Lin: Linearization;
    fn n_params(&self) -> usize;
    fn n_data(&self) -> usize;
    fn predict(&self, z: &[f64]) -> Result<Vec<f64>>;
    /// `F(z)` together with the linearization at `z`.
    fn linearize(&self, z: &[f64]) -> Result<(Vec<f64>, Self::Lin)>;
}

/// Surrogate parameter-to-observable map for one fixed reduced wind.
#[derive(Clone, Debug)]
pub struct SurrogateForward {
    pub net: FlowNetParams,
    /// `U_rᵀ (u_0 − μ)`
    pub c0: Vec<f64>,
    /// Reduced wind, row-major `N × r_w`.
    pub wind: Vec<f64>,
    pub obs_basis: DMatrix<f64>,
    pub obs_mean: Vec<f64>,
}

impl SurrogateForward {
    pub fn new(
        net: FlowNetParams,
        basis: &PcaBasis,
        op: &ObservationOperator,
        wind: Vec<f64>,
        u0: &[f64],
    ) -> Result<Self> {
        if basis.rank() != net.r {
            return Err(Error::DimensionMismatch {
                context: "surrogate basis rank",
                expected: net.r,
                actual: basis.rank(),
            });
        }
        if net.r_w == 0 || wind.len() % net.r_w != 0 {
            return Err(Error::DimensionMismatch {
                context: "surrogate reduced wind",
                expected: net.r_w,
                actual: wind.len(),
            });
        }
        let (obs_basis, obs_mean) = op.reduced(basis)?;
        Ok(Self {
            c0: basis.project(u0)?,
            net,
            wind,
            obs_basis,
            obs_mean,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.wind.len() / self.net.r_w
    }

    /// Same map with another reduced wind.
    pub fn with_wind(&self, wind: Vec<f64>) -> Result<Self> {
        if wind.len() != self.wind.len() {
            return Err(Error::DimensionMismatch {
                context: "surrogate reduced wind",
                expected: self.wind.len(),
                actual: wind.len(),
            });
        }
        Ok(Self { wind, ..self.clone() })
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.n_steps() {
            return Err(Error::DimensionMismatch {
                context: "source magnitude steps",
                expected: self.n_steps(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    fn observe_reduced(&self, c: &[f64], out: &mut Vec<f64>) {
        let o = &self.obs_basis * DVector::from_column_slice(c);
        out.extend(o.iter().zip(&self.obs_mean).map(|(a, b)| a + b));
    }

    fn wind_step(&self, n: usize) -> &[f64] {
        &self.wind[n * self.net.r_w..(n + 1) * self.net.r_w]
    }

    /// Composed reduced states `c_1..c_N` from `c_0`.
    pub fn rollout(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_z(z)?;
        let mut c = self.c0.clone();
        let mut out = Vec::with_capacity(z.len());
        for (n, zn) in z.iter().enumerate() {
            c = self.net.forward(&c, *zn, self.wind_step(n))?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("surrogate rollout"));
            }
            out.push(c.clone());
        }
        Ok(out)
    }
}

impl ForwardModel for SurrogateForward {
    type Lin = ForwardCache;

    fn n_params(&self) -> usize {
        self.n_steps()
    }

    fn n_data(&self) -> usize {
        self.n_steps() * self.obs_mean.len()
    }

    fn predict(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_data());
        for c in self.rollout(z)? {
            self.observe_reduced(&c, &mut out);
        }
        Ok(out)
    }

    fn linearize(&self, z: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_z(z)?;
        let mut c = self.c0.clone();
        let mut states = Vec::with_capacity(z.len());
        let mut dc = Vec::with_capacity(z.len());
        let mut dz = Vec::with_capacity(z.len());
        let mut pred = Vec::with_capacity(self.n_data());
        for (n, zn) in z.iter().enumerate() {
            let w = self.wind_step(n);
            let jac = self.net.jacobians(&c, *zn, w)?;
            states.push(c.clone());
            c = self.net.forward(&c, *zn, w)?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("surrogate rollout"));
            }
            self.observe_reduced(&c, &mut pred);
            dc.push(jac.dc);
            dz.push(jac.dz);
        }
        let cache = ForwardCache {
            z: z.to_vec(),
            states,
            dc,
            dz,
            obs_basis: self.obs_basis.clone(),
            stale: false,
        };
        Ok((pred, cache))
    }
}

/// Per-step network Jacobians along one surrogate trajectory.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// The source values the cache was built for.
    pub z: Vec<f64>,
    /// `c_0..c_{N−1}`
    pub states: Vec<Vec<f64>>,
    pub dc: Vec<DMatrix<f64>>,
    pub dz: Vec<DVector<f64>>,
    obs_basis: DMatrix<f64>,
    stale: bool,
}

impl ForwardCache {
    /// Marks the cache unusable, e.g. after the source values moved.
    pub fn invalidate(&mut self) {
        self.stale = true;
    }

    pub fn is_valid_for(&self, z: &[f64]) -> bool {
        !self.stale && self.z == z
    }

    fn n_steps(&self) -> usize {
        self.dc.len()
    }

    fn check(&self, len: usize, expected: usize, context: &'static str) -> Result<()> {
        if self.stale {
            return Err(Error::StaleCache);
        }
        if len != expected {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                actual: len,
            });
        }
        Ok(())
    }
}

impl Linearization for ForwardCache {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v.len(), self.n_steps(), "jacobian input")?;
        let r = self.obs_basis.ncols();
        let mut dc = DVector::zeros(r);
        let mut out = Vec::with_capacity(self.n_steps() * self.obs_basis.nrows());
        for n in 0..self.n_steps() {
            dc = &self.dc[n] * &dc;
            dc.axpy(v[n], &self.dz[n], 1.0);
            out.extend((&self.obs_basis * &dc).iter());
        }
        Ok(out)
    }

    fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        let l = self.obs_basis.nrows();
        let n_steps = self.n_steps();
        self.check(y.len(), n_steps * l, "jacobian transpose input")?;
        let mut out = vec![0.0; n_steps];
        // lambda = adjoint of c_{n+1}
        let mut lambda = DVector::zeros(self.obs_basis.ncols());
        for n in (0..n_steps).rev() {
            let yn = DVector::from_column_slice(&y[n * l..(n + 1) * l]);
            lambda += self.obs_basis.transpose() * yn;
            out[n] = self.dz[n].dot(&lambda);
            lambda = self.dc[n].transpose() * &lambda;
        }
        Ok(out)
    }
}

pub fn apply_jacobian(cache: &ForwardCache, v: &[f64]) -> Result<Vec<f64>> {
    cache.apply(v)
}

pub fn apply_jacobian_transpose(cache: &ForwardCache, y: &[f64]) -> Result<Vec<f64>> {
    cache.apply_transpose(y)
}

/// `F_n` for `n = 1..N` from the surrogate started at the projected `u_0`.
pub fn predict_observables(
    z: &SourceMagnitude,
    wind_reduced: &[f64],
    xi: &FlowNetParams,
    basis: &PcaBasis,
    op: &ObservationOperator,
    u0: &[f64],
) -> Result<ObservationSet> {
    let fwd = SurrogateForward::new(xi.clone(), basis, op, wind_reduced.to_vec(), u0)?;
    Ok(ObservationSet {
        n_obs: op.len(),
        n_steps: z.len(),
        values: fwd.predict(&z.values)?,
    })
}

/// Affine map `F(z) = A z + b` with an explicit matrix.
#[derive(Clone, Debug)]
pub struct LinearForward {
    pub matrix: DMatrix<f64>,
    pub offset: Vec<f64>,
}

impl LinearForward {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        let offset = vec![0.0; matrix.nrows()];
        Self { matrix, offset }
    }
}

#[derive(Clone, Debug)]
pub struct LinearJacobian(pub DMatrix<f64>);

impl Linearization for LinearJacobian {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.0.ncols() {
            return Err(Error::DimensionMismatch {
                context: "linear jacobian input",
                expected: self.0.ncols(),
                actual: v.len(),
            });
        }
        Ok((&self.0 * DVector::from_column_slice(v)).as_slice().to_vec())
    }

    fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.0.nrows() {
            return Err(Error::DimensionMismatch {
                context: "linear jacobian transpose input",
                expected: self.0.nrows(),
                actual: y.len(),
            });
        }
        Ok((self.0.transpose() * DVector::from_column_slice(y)).as_slice().to_vec())
    }
}

impl ForwardModel for LinearForward {
    type Lin = LinearJacobian;

    fn n_params(&self) -> usize {
        self.matrix.ncols()
    }

    fn n_data(&self) -> usize {
        self.matrix.nrows()
    }

    fn predict(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = LinearJacobian(self.matrix.clone()).apply(z)?;
        for (o, b) in out.iter_mut().zip(&self.offset) {
            *o += b;
        }
        Ok(out)
    }

    fn linearize(&self, z: &[f64]) -> Result<(Vec<f64>, LinearJacobian)> {
        Ok((self.predict(z)?, LinearJacobian(self.matrix.clone())))
    }
}

/// Observables of the full PDE solution for a fixed wind, bypassing the
/// surrogate.
pub struct PdeForward<'a> {
    pub solver: &'a PdeSolver<'a>,
    pub wind: &'a WindField,
    pub op: &'a ObservationOperator,
}

impl PdeForward<'_> {
    pub fn predict(&self, z: &[f64]) -> Result<Vec<f64>> {
        let traj = self.solver.solve(&SourceMagnitude::new(z.to_vec())?, self.wind)?;
        let mut out = Vec::with_capacity(traj.n_steps * self.op.len());
        for n in 1..=traj.n_steps {
            out.extend(self.op.observe(traj.snapshot(n))?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use rand::Rng;

    fn grid() -> GridSpec {
        GridSpec::new(21, 11, 4, 2.0, 1).unwrap()
    }

    #[test]
    fn observation_examples() {
        let g = grid(); // dx = 10, dy = 2
        let op = ObservationOperator::new(&g, &[(30.0, 4.0), (35.0, 5.0), (0.0, 20.0)], Sampling::Bilinear).unwrap();
        let u = vec![7.5; g.m()];
        assert!(op.observe(&u).unwrap().iter().all(|v| (v - 7.5).abs() < 1e-14));
        for row in &op.rows {
            assert!((row.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(row.iter().all(|(_, w)| *w >= 0.0));
        }
        let u: Vec<f64> = (0..g.m()).map(|k| (k as f64 * 0.37).sin()).collect();
        let obs = op.observe(&u).unwrap();
        assert_eq!(obs[0], u[g.index(3, 2)]);
        let corners = [g.index(3, 2), g.index(4, 2), g.index(3, 3), g.index(4, 3)];
        let avg = corners.iter().map(|&k| u[k]).sum::<f64>() / 4.0;
        assert!((obs[1] - avg).abs() < 1e-15);
        assert_eq!(obs[2], u[g.index(0, 10)]);

        let nearest = ObservationOperator::new(&g, &[(34.0, 5.2)], Sampling::Nearest).unwrap();
        assert_eq!(nearest.observe(&u).unwrap()[0], u[g.index(3, 3)]);
        assert!(ObservationOperator::new(&g, &[(201.0, 1.0)], Sampling::Bilinear).is_err());
        assert!(matches!(op.observe(&[0.0; 3]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn default_sensors_sit_on_desk_nodes() {
        let g = GridSpec::desk();
        let s = default_sensors();
        assert_eq!(s.len(), 10);
        let op = ObservationOperator::new(&g, &s, Sampling::Bilinear).unwrap();
        assert!(op.rows.iter().all(|row| row.len() == 1));
    }

    fn small_surrogate(seed: u64) -> (SurrogateForward, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grid();
        let snaps = DMatrix::from_fn(g.m(), 12, |_, _| rng.gen_range(0.0..1.0));
        let basis = crate::reduction::fit_pca(&snaps, 4).unwrap();
        let mut net = FlowNetParams::new(4, 2, 6, 2, 0.5, seed);
        for b in net.biases.iter_mut() {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
        let op = ObservationOperator::new(&g, &[(30.0, 4.0), (115.0, 9.0), (180.0, 13.0)], Sampling::Bilinear).unwrap();
        let n = 8;
        let wind: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fwd = SurrogateForward::new(net, &basis, &op, wind, &vec![0.0; g.m()]).unwrap();
        (fwd, n)
    }

    #[test]
    fn frozen_surrogate_gives_constant_observables() {
        let (mut fwd, n) = small_surrogate(1);
        fwd.net.zero_output_layer();
        let pred = fwd.predict(&vec![3.0; n]).unwrap();
        let first = &pred[..3];
        for k in 1..n {
            assert_eq!(&pred[3 * k..3 * k + 3], first);
        }
        let (_, cache) = fwd.linearize(&vec![3.0; n]).unwrap();
        assert!(cache.apply(&vec![1.0; n]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_activation_matches_closed_form() {
        let (mut fwd, n) = small_surrogate(2);
        fwd.net.activation = crate::flownet::Activation::Identity;
        let z: Vec<f64> = (0..n).map(|k| 0.2 * k as f64).collect();
        let pred = fwd.predict(&z).unwrap();
        let (_, cache) = fwd.linearize(&z).unwrap();
        // Affine surrogate: c_{n+1} = A c_n + b z_n + const, so F(z) − F(0) = J z.
        let base = fwd.predict(&vec![0.0; n]).unwrap();
        let jz = cache.apply(&z).unwrap();
        for k in 0..pred.len() {
            assert!((pred[k] - base[k] - jz[k]).abs() < 1e-12 * (1.0 + pred[k].abs()));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_and_adjoint() {
        let (fwd, n) = small_surrogate(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (pred, cache) = fwd.linearize(&z).unwrap();
        assert_eq!(pred, fwd.predict(&z).unwrap());
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jv = cache.apply(&v).unwrap();
        let h = 1e-5;
        let zp: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let zm: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let fp = fwd.predict(&zp).unwrap();
        let fm = fwd.predict(&zm).unwrap();
        let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(linalg::norm(&linalg::sub(&jv, &fd)) <= 1e-6 * linalg::norm(&fd));

        let y: Vec<f64> = (0..jv.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jty = cache.apply_transpose(&y).unwrap();
        let lhs = linalg::dot(&jv, &y);
        let rhs = linalg::dot(&v, &jty);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()));

        assert!(cache.apply(&vec![0.0; n]).unwrap().iter().all(|x| *x == 0.0));
        assert!(cache.apply_transpose(&vec![0.0; jv.len()]).unwrap().iter().all(|x| *x == 0.0));

        // Linearity in v.
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = v.iter().zip(&w).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let jw = cache.apply(&w).unwrap();
        let jmix = cache.apply(&mix).unwrap();
        for k in 0..jmix.len() {
            assert!((jmix[k] - (2.0 * jv[k] - 3.0 * jw[k])).abs() < 1e-12 * (1.0 + jmix[k].abs()));
        }
    }

    #[test]
    fn causality() {
        let (fwd, n) = small_surrogate(5);
        let z = vec![1.0; n];
        let base = fwd.predict(&z).unwrap();
        for k in 0..n {
            let mut zk = z.clone();
            zk[k] += 0.5;
            let p = fwd.predict(&zk).unwrap();
            // F_m for m ≤ k depends on z_0..z_{m−1} only.
            assert_eq!(&p[..3 * k], &base[..3 * k]);
            assert_ne!(&p[3 * k..3 * k + 3], &base[3 * k..3 * k + 3]);
        }
        let (_, cache) = fwd.linearize(&z).unwrap();
        let mut y = vec![0.0; 3 * n];
        y[3 * 4 + 1] = 1.0; // observation at step n = 5
        let g = cache.apply_transpose(&y).unwrap();
        assert!(g[5..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (fwd, n) = small_surrogate(6);
        let (_, mut cache) = fwd.linearize(&vec![1.0; n]).unwrap();
        assert!(cache.is_valid_for(&vec![1.0; n]));
        assert!(!cache.is_valid_for(&vec![2.0; n]));
        cache.invalidate();
        assert!(matches!(cache.apply(&vec![0.0; n]), Err(Error::StaleCache)));
        assert!(matches!(cache.apply_transpose(&vec![0.0; 3 * n]), Err(Error::StaleCache)));
    }

    #[test]
    fn test_observations_noise() {
        let g = GridSpec::new(11, 6, 100, 10.0, 1).unwrap();
        let mut traj = StateTrajectory::zeros(g.m(), 100);
        for n in 1..=100 {
            for (k, v) in traj.snapshot_mut(n).iter_mut().enumerate() {
                *v = 1.0 + (k + n) as f64 * 0.01;
            }
        }
        let locs: Vec<(f64, f64)> = (0..100).map(|k| (2.0 * k as f64, 0.2 * (k % 100) as f64)).collect();
        let op = ObservationOperator::new(&g, &locs, Sampling::Bilinear).unwrap();
        let exact = make_test_observations(&traj, &op, 0.0, 1).unwrap();
        assert_eq!(exact.step(3), op.observe(traj.snapshot(3)).unwrap().as_slice());
        let noisy = make_test_observations(&traj, &op, 0.02, 1).unwrap();
        let ratios: Vec<f64> = noisy.values.iter().zip(&exact.values).map(|(a, b)| a / b - 1.0).collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (ratios.len() - 1) as f64).sqrt();
        assert_eq!(ratios.len(), 10_000);
        assert!((sd / 0.02 - 1.0).abs() < 0.03, "sd {sd}");
        assert_eq!(noisy, make_test_observations(&traj, &op, 0.02, 1).unwrap());

        let zero = StateTrajectory::zeros(g.m(), 100);
        assert!(make_test_observations(&zero, &op, 0.02, 9).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pde_forward_is_linear_in_source() {
        let params = crate::dispersion::PhysicalParams::default();
        let bound = crate::dispersion::wind_speed_bound(0.35);
        let g = GridSpec::with_auto_substeps(41, 11, 20, 10.0, &params, bound).unwrap();
        let solver = PdeSolver::new(&g, &params);
        let wind = WindField::from_params(&crate::dispersion::WindParams::mean(0.35), &g);
        let op = ObservationOperator::new(&g, &default_sensors(), Sampling::Bilinear).unwrap();
        let fwd = PdeForward {
            solver: &solver,
            wind: &wind,
            op: &op,
        };
        let z1: Vec<f64> = (0..20).map(|k| 1000.0 + 50.0 * k as f64).collect();
        let z2: Vec<f64> = (0..20).map(|k| 3000.0 * (-0.1 * k as f64).exp()).collect();
        let mix: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 0.7 * a - 1.3 * b).collect();
        let f1 = fwd.predict(&z1).unwrap();
        let f2 = fwd.predict(&z2).unwrap();
        let fm = fwd.predict(&mix).unwrap();
        let comb: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| 0.7 * a - 1.3 * b).collect();
        assert!(linalg::rel_l2(&fm, &comb) < 1e-10);
    }
}
