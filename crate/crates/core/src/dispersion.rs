//! Ground-truth SO₂ dispersion model.
//!
//! Solves
//!
//! ```text
//! ∂u/∂t − κ∇²u + w ∂u/∂x − S ∂u/∂y = −k u + z(t) F(x, y)   on [0,200] × [0,20] km
//! ∇u·n = 0 on the boundary,  u = 0 at t = 0
//! ```
//!
//! with a method-of-lines discretization on a uniform node-centered grid:
//! central differences for diffusion, first-order upwinding for the two
//! advective terms, and Heun's method (explicit RK2) in time. Homogeneous
//! Neumann conditions are imposed with mirrored ghost nodes, which makes the
//! diffusion operator conservative with respect to the dual-cell areas
//! returned by [`GridSpec::cell_area`].
//!
//! The source magnitude `z_n` and the wind `w_n` are held constant on each
//! output interval `[t_n, t_{n+1})`; the wind is sampled at the interval start.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Longitudinal extent of the domain in km.
pub const DOMAIN_X: f64 = 200.0;
/// Vertical extent of the domain in km.
pub const DOMAIN_Y: f64 = 20.0;

/// Safety factor applied to every explicit stability limit.
pub const STABILITY_FACTOR: f64 = 0.4;

/// Space-time discretization.
///
/// Nodes are stored row-major with `x` fastest: node `(i, j)` lives at
/// `j * nx + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Number of output intervals `N`; trajectories carry `N + 1` snapshots.
    pub n_steps: usize,
    /// Final time `T` in minutes.
    pub final_time: f64,
    /// Explicit solver steps per output interval.
    pub substeps_per_node: usize,
}

impl GridSpec {
    pub fn new(
        nx: usize,
        ny: usize,
        n_steps: usize,
        final_time: f64,
        substeps_per_node: usize,
    ) -> Result<Self> {
        let grid = Self {
            nx,
            ny,
            n_steps,
            final_time,
            substeps_per_node,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with the substep count chosen from the stability bound for winds
    /// up to `wind_bound` km/min.
    pub fn with_auto_substeps(
        nx: usize,
        ny: usize,
        n_steps: usize,
        final_time: f64,
        params: &PhysicalParams,
        wind_bound: f64,
    ) -> Result<Self> {
        let mut grid = Self::new(nx, ny, n_steps, final_time, 1)?;
        let bound = grid.stable_step(params, wind_bound);
        grid.substeps_per_node = (grid.dt() / bound).ceil().max(1.0) as usize;
        Ok(grid)
    }

    /// Desk-scale default: 201 × 41 nodes, 120 output steps over 60 minutes.
    pub fn desk() -> Self {
        Self::with_auto_substeps(
            201,
            41,
            120,
            60.0,
            &PhysicalParams::default(),
            wind_speed_bound(1.0),
        )
        .expect("desk grid is valid")
    }

    /// The 1001 × 101 = 101101 node grid of the original study.
    pub fn full_scale() -> Self {
        Self::with_auto_substeps(
            1001,
            101,
            120,
            60.0,
            &PhysicalParams::default(),
            wind_speed_bound(1.0),
        )
        .expect("full grid is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Config("grid needs at least 2 nodes per axis".into()));
        }
        if self.n_steps < 1 {
            return Err(Error::Config("grid needs at least one time step".into()));
        }
        if !(self.final_time > 0.0 && self.final_time.is_finite()) {
            return Err(Error::Config("final time must be positive".into()));
        }
        if self.substeps_per_node < 1 {
            return Err(Error::Config("substeps_per_node must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of spatial nodes `m`.
    pub fn m(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        DOMAIN_X / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        DOMAIN_Y / (self.ny - 1) as f64
    }

    /// Output interval `Δt = T / N`.
    pub fn dt(&self) -> f64 {
        self.final_time / self.n_steps as f64
    }

    pub fn dt_sub(&self) -> f64 {
        self.dt() / self.substeps_per_node as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }

    pub fn y(&self, j: usize) -> f64 {
        j as f64 * self.dy()
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Area of the dual cell around node `(i, j)`; boundary cells are halved.
    pub fn cell_area(&self, i: usize, j: usize) -> f64 {
        let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
        let wy = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 };
        wx * wy * self.dx() * self.dy()
    }

    /// Largest stable explicit step for the given physics and wind bound.
    pub fn stable_step(&self, params: &PhysicalParams, wind_bound: f64) -> f64 {
        let h = self.dx().min(self.dy());
        let mut bound = f64::INFINITY;
        if params.kappa > 0.0 {
            bound = bound.min(h * h / (4.0 * params.kappa));
        }
        if wind_bound > 0.0 {
            bound = bound.min(self.dx() / wind_bound);
        }
        if params.settling_speed > 0.0 {
            bound = bound.min(self.dy() / params.settling_speed);
        }
        STABILITY_FACTOR * bound
    }
}

/// Physical constants of the dispersion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalParams {
    /// Diffusivity κ (km²/min).
    pub kappa: f64,
    /// Terminal falling speed S (km/min) used by the solver.
    pub settling_speed: f64,
    /// SO₂ density (kg/m³).
    pub rho_so2: f64,
    /// Atmospheric density (kg/m³).
    pub rho_atmo: f64,
    /// Gravitational acceleration (km/min²).
    pub gravity: f64,
    /// Drag coefficient.
    pub drag_coefficient: f64,
    /// Particle radius (km).
    pub particle_radius: f64,
    /// Depletion rate k = 1 / e-folding time (1/min).
    pub depletion_rate: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            kappa: 1e-1,
            settling_speed: 1.705e-4,
            rho_so2: 2.92,
            rho_atmo: 1.28,
            gravity: 35.316,
            drag_coefficient: 0.38,
            particle_radius: 5e-11,
            depletion_rate: 1.0 / 44_640.0,
        }
    }
}

impl PhysicalParams {
    /// Pure diffusion: no settling and no depletion.
    pub fn diffusion_only(kappa: f64) -> Self {
        Self {
            kappa,
            settling_speed: 0.0,
            depletion_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.kappa,
            self.settling_speed,
            self.rho_so2,
            self.rho_atmo,
            self.gravity,
            self.drag_coefficient,
            self.particle_radius,
            self.depletion_rate,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("physical parameters must be positive".into()))
        }
    }
}

/// Terminal speed from balancing gravity and drag,
/// `S = sqrt((8/3)(ρ_SO₂/ρ_atmo)(g/C_s) r)`.
pub fn terminal_speed(p: &PhysicalParams) -> f64 {
    (8.0 / 3.0 * (p.rho_so2 / p.rho_atmo) * (p.gravity / p.drag_coefficient) * p.particle_radius)
        .sqrt()
}

/// Stationary spatial profile of the source.
pub fn source_profile(x: f64, y: f64) -> f64 {
    (-100.0 * (x - 5.0).powi(2)).exp() * (-0.1 * (y - 9.0).powi(2)).exp()
}

/// `∫_a^b exp(−s (t − c)²) dt`
fn gaussian_integral(s: f64, c: f64, a: f64, b: f64) -> f64 {
    use statrs::function::erf::erf;
    let r = s.sqrt();
    0.5 * (PI / s).sqrt() * (erf(r * (b - c)) - erf(r * (a - c)))
}

/// Source profile averaged over each node's dual cell.
///
/// The x-profile is far narrower than any desk-scale spacing; averaging keeps
/// the injected mass independent of the grid resolution.
pub fn cell_source_profile(grid: &GridSpec) -> Vec<f64> {
    let (dx, dy) = (grid.dx(), grid.dy());
    let fx: Vec<f64> = (0..grid.nx)
        .map(|i| {
            let x = grid.x(i);
            let (a, b) = ((x - dx / 2.0).max(0.0), (x + dx / 2.0).min(DOMAIN_X));
            gaussian_integral(100.0, 5.0, a, b) / (b - a)
        })
        .collect();
    let fy: Vec<f64> = (0..grid.ny)
        .map(|j| {
            let y = grid.y(j);
            let (a, b) = ((y - dy / 2.0).max(0.0), (y + dy / 2.0).min(DOMAIN_Y));
            gaussian_integral(0.1, 9.0, a, b) / (b - a)
        })
        .collect();
    let mut out = vec![0.0; grid.m()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            out[grid.index(i, j)] = fx[i] * fy[j];
        }
    }
    out
}

/// Time-varying source magnitude, one value per output interval.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceMagnitude {
    pub values: Vec<f64>,
}

impl SourceMagnitude {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("source magnitude"));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `z(t) = 3·10³ η₁ exp(−0.015 η₂ t)`
pub fn source_magnitude_at(eta1: f64, eta2: f64, t: f64) -> f64 {
    3e3 * eta1 * (-0.015 * eta2 * t).exp()
}

/// Decaying-exponential source evaluated at the start of each interval.
pub fn sample_source_magnitude(eta1: f64, eta2: f64, grid: &GridSpec) -> SourceMagnitude {
    SourceMagnitude {
        values: (0..grid.n_steps)
            .map(|n| source_magnitude_at(eta1, eta2, grid.time(n)))
            .collect(),
    }
}

/// Sampling intervals for the nine wind parameters at full variability.
pub const THETA_RANGES: [(f64, f64); 9] = [
    (0.0, 0.2),
    (0.95, 1.05),
    (0.0, 0.2),
    (0.95, 1.05),
    (-0.1, 0.1),
    (-0.05, 0.15),
    (-0.05, 0.15),
    (-0.05, 0.15),
    (-0.05, 0.15),
];

/// Variability scale of the greater-variability case.
pub const GREATER_VARIABILITY: f64 = 1.0;
/// Variability scale of the lesser-variability case.
pub const LESSER_VARIABILITY: f64 = 0.35;

/// Parameter intervals shrunk by `scale` about their midpoints.
pub fn theta_bounds(scale: f64) -> [(f64, f64); 9] {
    THETA_RANGES.map(|(lo, hi)| {
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo) * scale;
        (mid - half, mid + half)
    })
}

/// Upper bound on `|w|` for any θ in the scaled intervals.
pub fn wind_speed_bound(scale: f64) -> f64 {
    let b = theta_bounds(scale);
    let amp = |k: usize| b[k].0.abs().max(b[k].1.abs());
    let x_max = 1.0 + (5..9).map(amp).sum::<f64>();
    let y_max = 0.25 + 3.75 * (0.9 + 0.1 * amp(4));
    x_max * y_max
}

/// Parameters θ of the synthetic longitudinal wind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindParams {
    pub theta: [f64; 9],
    pub variability_scale: f64,
}

impl WindParams {
    /// θ at the midpoint of every interval; generates the mean wind `w̄`.
    pub fn mean(variability_scale: f64) -> Self {
        Self {
            theta: THETA_RANGES.map(|(lo, hi)| 0.5 * (lo + hi)),
            variability_scale,
        }
    }

    pub fn zero() -> Self {
        Self {
            theta: [0.0; 9],
            variability_scale: GREATER_VARIABILITY,
        }
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "variability scale {scale} outside (0, 1]"
        )))
    }
}

/// Draws θ uniformly from the scaled intervals; deterministic per seed.
pub fn sample_wind_params(seed: u64, variability_scale: f64) -> Result<WindParams> {
    check_scale(variability_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = theta_bounds(variability_scale);
    let theta = bounds.map(|(lo, hi)| rng.gen_range(lo..=hi));
    Ok(WindParams {
        theta,
        variability_scale,
    })
}

fn wind_x_factor(th: &[f64; 9], x: f64, t: f64) -> f64 {
    let t1 = 0.9 + th[0] * (2.0 * PI * th[1] * t / 60.0).cos();
    let t2 = 0.9 + th[2] * (4.0 * PI * th[3] * t / 60.0).cos();
    let a1 = 4.0 * PI * t1 * x / 200.0;
    let a2 = 6.0 * PI * t2 * x / 200.0;
    1.0 + th[5] * a1.sin() + th[6] * a1.cos() + th[7] * a2.sin() + th[8] * a2.cos()
}

fn wind_y_factor(th: &[f64; 9], y: f64, t: f64) -> f64 {
    let t3 = 0.9 + 0.1 * th[4] * (2.0 * PI * t / 60.0).cos();
    0.25 + 3.75 * t3 * (PI * y / 20.0).sin()
}

/// Longitudinal wind `w(x, y, t) = X(x, t) Y(y, t)` in km/min.
pub fn evaluate_wind(theta: &WindParams, x: f64, y: f64, t: f64) -> f64 {
    wind_x_factor(&theta.theta, x, t) * wind_y_factor(&theta.theta, y, t)
}

/// Wind sampled at every node for the interval starts `t_0 .. t_{N−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindField {
    pub n_steps: usize,
    pub m: usize,
    /// Row-major `N × m`.
    pub values: Vec<f64>,
}

impl WindField {
    pub fn from_params(theta: &WindParams, grid: &GridSpec) -> Self {
        let (nx, ny, m) = (grid.nx, grid.ny, grid.m());
        let mut values = vec![0.0; grid.n_steps * m];
        let mut xf = vec![0.0; nx];
        for n in 0..grid.n_steps {
            let t = grid.time(n);
            for (i, v) in xf.iter_mut().enumerate() {
                *v = wind_x_factor(&theta.theta, grid.x(i), t);
            }
            let row = &mut values[n * m..(n + 1) * m];
            for j in 0..ny {
                let yv = wind_y_factor(&theta.theta, grid.y(j), t);
                for i in 0..nx {
                    row[j * nx + i] = xf[i] * yv;
                }
            }
        }
        Self {
            n_steps: grid.n_steps,
            m,
            values,
        }
    }

    pub fn zeros(n_steps: usize, m: usize) -> Self {
        Self {
            n_steps,
            m,
            values: vec![0.0; n_steps * m],
        }
    }

    pub fn step(&self, n: usize) -> &[f64] {
        &self.values[n * self.m..(n + 1) * self.m]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }
}

/// `‖w − w̄‖² / ‖w̄‖²`, the squared-norm ratio used to rank wind samples.
pub fn relative_wind_distance(w: &WindField, wbar: &WindField) -> Result<f64> {
    if w.values.len() != wbar.values.len() {
        return Err(Error::DimensionMismatch {
            context: "relative_wind_distance",
            expected: wbar.values.len(),
            actual: w.values.len(),
        });
    }
    let denom = linalg::norm_sq(&wbar.values);
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = w
        .values
        .iter()
        .zip(&wbar.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(num / denom)
}

/// Indices of the `count` largest scores, largest first; ties keep the lower
/// index first.
pub fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Picks the `count` candidates farthest from `wbar`.
pub fn select_extreme_winds(
    candidates: &[WindField],
    wbar: &WindField,
    count: usize,
) -> Result<Vec<usize>> {
    if count > candidates.len() {
        return Err(Error::Config(format!(
            "cannot select {count} of {} wind candidates",
            candidates.len()
        )));
    }
    let d = candidates
        .iter()
        .map(|w| relative_wind_distance(w, wbar))
        .collect::<Result<Vec<_>>>()?;
    Ok(top_indices(&d, count))
}

/// Mean Euclidean distance from `w` to each training wind.
pub fn mean_distance(w: &WindField, training: &[WindField]) -> f64 {
    training
        .iter()
        .map(|t| linalg::norm(&linalg::sub(&w.values, &t.values)))
        .sum::<f64>()
        / training.len() as f64
}

/// Index of the candidate with the largest mean distance to the training
/// winds; ties resolve to the lower index.
pub fn select_test_wind(candidates: &[WindField], training: &[WindField]) -> Result<usize> {
    if candidates.is_empty() || training.is_empty() {
        return Err(Error::Config("test wind selection needs nonempty sets".into()));
    }
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| mean_distance(c, training))
        .collect();
    Ok(top_indices(&scores, 1)[0])
}

/// Discretized state at `N + 1` output times.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTrajectory {
    pub m: usize,
    pub n_steps: usize,
    /// Row-major `(N + 1) × m`.
    pub values: Vec<f64>,
}

impl StateTrajectory {
    pub fn zeros(m: usize, n_steps: usize) -> Self {
        Self {
            m,
            n_steps,
            values: vec![0.0; m * (n_steps + 1)],
        }
    }

    pub fn snapshot_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.m..(n + 1) * self.m]
    }

    pub fn snapshot(&self, n: usize) -> &[f64] {
        &self.values[n * self.m..(n + 1) * self.m]
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.m)
    }
}

/// `Σ u · |dual cell|`
pub fn total_mass(grid: &GridSpec, u: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            s += u[grid.index(i, j)] * grid.cell_area(i, j);
        }
    }
    s
}

/// Explicit finite-difference solver for the dispersion PDE.
pub struct PdeSolver<'a> {
    grid: &'a GridSpec,
    params: &'a PhysicalParams,
    profile: Vec<f64>,
}

impl<'a> PdeSolver<'a> {
    pub fn new(grid: &'a GridSpec, params: &'a PhysicalParams) -> Self {
        Self {
            grid,
            params,
            profile: cell_source_profile(grid),
        }
    }

    /// Solves from the zero initial condition.
    pub fn solve(&self, z: &SourceMagnitude, wind: &WindField) -> Result<StateTrajectory> {
        self.solve_from(&vec![0.0; self.grid.m()], z, wind)
    }

    pub fn solve_from(
        &self,
        initial: &[f64],
        z: &SourceMagnitude,
        wind: &WindField,
    ) -> Result<StateTrajectory> {
        let g = self.grid;
        let m = g.m();
        for (context, expected, actual) in [
            ("initial state", m, initial.len()),
            ("source magnitude", g.n_steps, z.len()),
            ("wind steps", g.n_steps, wind.n_steps),
            ("wind nodes", m, wind.m),
        ] {
            if expected != actual {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                });
            }
        }
        let bound = g.stable_step(self.params, wind.max_abs());
        if g.dt_sub() > bound {
            return Err(Error::StabilityViolation {
                dt_sub: g.dt_sub(),
                bound,
            });
        }

        let h = g.dt_sub();
        let mut values = Vec::with_capacity((g.n_steps + 1) * m);
        values.extend_from_slice(initial);
        let mut u = initial.to_vec();
        let mut k1 = vec![0.0; m];
        let mut k2 = vec![0.0; m];
        let mut stage = vec![0.0; m];
        for n in 0..g.n_steps {
            let w = wind.step(n);
            let zn = z.values[n];
            for _ in 0..g.substeps_per_node {
                self.rhs(&u, w, zn, &mut k1);
                for k in 0..m {
                    stage[k] = u[k] + h * k1[k];
                }
                self.rhs(&stage, w, zn, &mut k2);
                for k in 0..m {
                    u[k] += 0.5 * h * (k1[k] + k2[k]);
                }
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("pde state"));
            }
            values.extend_from_slice(&u);
        }
        Ok(StateTrajectory {
            m,
            n_steps: g.n_steps,
            values,
        })
    }

    fn rhs(&self, u: &[f64], wind: &[f64], zn: f64, out: &mut [f64]) {
        let g = self.grid;
        let (nx, ny) = (g.nx, g.ny);
        let (dx, dy) = (g.dx(), g.dy());
        let (idx2, idy2) = (1.0 / (dx * dx), 1.0 / (dy * dy));
        let kappa = self.params.kappa;
        let settle = self.params.settling_speed;
        let decay = self.params.depletion_rate;
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                let c = u[k];
                // Mirrored ghost nodes enforce the zero normal derivative.
                let west = if i > 0 { u[k - 1] } else { u[k + 1] };
                let east = if i + 1 < nx { u[k + 1] } else { u[k - 1] };
                let south = if j > 0 { u[k - nx] } else { u[k + nx] };
                let north = if j + 1 < ny { u[k + nx] } else { u[k - nx] };

                let diffusion = kappa * ((west - 2.0 * c + east) * idx2 + (south - 2.0 * c + north) * idy2);
                let w = wind[k];
                let advect_x = if w > 0.0 {
                    w * (c - west) / dx
                } else {
                    w * (east - c) / dx
                };
                // Settling moves material downward: upwind from above.
                let settling = settle * (north - c) / dy;
                out[k] = diffusion - advect_x + settling - decay * c + zn * self.profile[k];
            }
        }
    }
}

/// Generates the wind field from θ and solves from the zero initial state.
pub fn solve_pde(
    z: &SourceMagnitude,
    theta: &WindParams,
    grid: &GridSpec,
    params: &PhysicalParams,
) -> Result<StateTrajectory> {
    let wind = WindField::from_params(theta, grid);
    PdeSolver::new(grid, params).solve(z, &wind)
}
