//! Gaussian prior, noise and approximation-error models, the MAP problem and
//! the Laplace posterior.
//!
//! The prior precision is `Γ_prior⁻¹ = E Eᵀ` with `E = (γ/Δt²) K + δ I`,
//! where `K` is the symmetric second-difference matrix with Neumann ends.
//! `E` is symmetric tridiagonal, so products and solves with `E` and `Eᵀ`
//! cost `O(N)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::observe::{ForwardModel, Linearization};

/// `10000 − (8000/60)·t`
pub fn prior_mean_at(t: f64) -> f64 {
    10_000.0 - 8_000.0 / 60.0 * t
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub gamma: f64,
    pub delta: f64,
    pub dt: f64,
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, dt: f64, gamma: f64, delta: f64) -> Result<Self> {
        if !(gamma >= 0.0) || !(delta > 0.0) || !(dt > 0.0) {
            return Err(Error::Config(format!(
                "prior needs gamma >= 0, delta > 0, dt > 0 (got {gamma}, {delta}, {dt})"
            )));
        }
        let n = mean.len();
        let a = gamma / (dt * dt);
        let diag = (0..n)
            .map(|i| {
                let k = if n == 1 {
                    0.0
                } else if i == 0 || i == n - 1 {
                    1.0
                } else {
                    2.0
                };
                a * k + delta
            })
            .collect();
        let off = vec![-a; n.saturating_sub(1)];
        Ok(Self {
            mean,
            gamma,
            delta,
            dt,
            diag,
            off,
        })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// `E v` (equal to `Eᵀ v`).
    pub fn apply_factor(&self, v: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * v[i];
                if i > 0 {
                    s += self.off[i - 1] * v[i - 1];
                }
                if i + 1 < n {
                    s += self.off[i] * v[i + 1];
                }
                s
            })
            .collect()
    }

    /// `E⁻¹ v` (equal to `E⁻ᵀ v`).
    pub fn solve_factor(&self, v: &[f64]) -> Vec<f64> {
        linalg::solve_tridiagonal(&self.off, &self.diag, &self.off, v)
    }

    /// `Γ_prior⁻¹ v = E Eᵀ v`
    pub fn apply_precision(&self, v: &[f64]) -> Vec<f64> {
        self.apply_factor(&self.apply_factor(v))
    }

    /// `Γ_prior v`
    pub fn apply_covariance(&self, v: &[f64]) -> Vec<f64> {
        self.solve_factor(&self.solve_factor(v))
    }

    pub fn covariance_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut c = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            c.column_mut(j).copy_from_slice(&self.apply_covariance(&e));
            e[j] = 0.0;
        }
        c
    }

    /// `z̄ + E⁻ᵀ ω`
    pub fn sample_with(&self, omega: &[f64]) -> Vec<f64> {
        let mut z = self.solve_factor(omega);
        linalg::axpy(1.0, &self.mean, &mut z);
        z
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let omega: Vec<f64> = (0..self.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with(&omega)
    }

    /// `‖z − z̄‖²` in the prior precision.
    pub fn norm_sq(&self, z: &[f64]) -> f64 {
        linalg::norm_sq(&self.apply_factor(&linalg::sub(z, &self.mean)))
    }
}

/// Prior with mean `prior_mean_at(t_n)` on `n` steps of length `dt`.
pub fn build_prior(n: usize, dt: f64, gamma: f64, delta: f64) -> Result<GaussianPrior> {
    let mean = (0..n).map(|k| prior_mean_at(k as f64 * dt)).collect();
    GaussianPrior::new(mean, dt, gamma, delta)
}

/// `(γ, δ)` such that at the middle step the prior correlation at lag
/// `corr_time` is `1/e` and the standard deviation is `target_std`.
pub fn calibrate_prior(n: usize, dt: f64, corr_time: f64, target_std: f64) -> Result<(f64, f64)> {
    let lag = (corr_time / dt).round() as usize;
    let mid = n / 2;
    if lag == 0 || mid + lag >= n {
        return Err(Error::Config(format!(
            "correlation time {corr_time} does not fit in {n} steps of {dt}"
        )));
    }
    // With δ = 1 the correlation depends only on a = γ/Δt².
    let stats = |a: f64| {
        let p = GaussianPrior::new(vec![0.0; n], 1.0, a, 1.0).expect("valid prior");
        let mut e = vec![0.0; n];
        e[mid] = 1.0;
        let col = p.apply_covariance(&e);
        e[mid] = 0.0;
        e[mid + lag] = 1.0;
        let far = p.apply_covariance(&e)[mid + lag];
        (col[mid + lag] / (col[mid] * far).sqrt(), col[mid].sqrt())
    };
    let target = (-1.0_f64).exp();
    let (mut lo, mut hi) = (-8.0_f64, 12.0_f64);
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if stats(10f64.powf(m)).0 < target {
            lo = m;
        } else {
            hi = m;
        }
    }
    let a = 10f64.powf(0.5 * (lo + hi));
    let std_unit = stats(a).1;
    let delta = std_unit / target_std;
    Ok((a * delta * dt * dt, delta))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
}

/// Empirical approximation-error statistics and the factorized
/// `Γ_BAE = σ² I + Γ_e`.
#[derive(Clone, Debug)]
pub struct BaeStats {
    pub mean_error: Vec<f64>,
    pub cov_error: DMatrix<f64>,
    pub samples: usize,
    pub sigma: f64,
    /// Diagonal shift added to make `Γ_BAE` factorizable.
    pub jitter: f64,
    factor: Cholesky<f64, Dyn>,
}

impl BaeStats {
    /// Mean and `1/(b − 1)` covariance of the error samples.
    pub fn from_errors(errors: &[Vec<f64>], noise: NoiseModel) -> Result<Self> {
        let b = errors.len();
        if b < 2 {
            return Err(Error::Config(format!("approximation error needs at least 2 samples, got {b}")));
        }
        let dim = errors[0].len();
        let mut mean = vec![0.0; dim];
        for e in errors {
            if e.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "approximation error sample",
                    expected: dim,
                    actual: e.len(),
                });
            }
            linalg::axpy(1.0 / b as f64, e, &mut mean);
        }
        let mut dev = DMatrix::zeros(dim, b);
        for (k, e) in errors.iter().enumerate() {
            for i in 0..dim {
                dev[(i, k)] = e[i] - mean[i];
            }
        }
        let mut cov = &dev * dev.transpose();
        cov /= (b - 1) as f64;
        Self::from_moments(mean, cov, b, noise)
    }

    /// Stats from a stored mean and covariance; `samples` is informational.
    pub fn from_moments(mean: Vec<f64>, cov: DMatrix<f64>, samples: usize, noise: NoiseModel) -> Result<Self> {
        let dim = mean.len();
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::DimensionMismatch {
                context: "approximation error covariance",
                expected: dim,
                actual: cov.nrows(),
            });
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("approximation error covariance"));
        }
        let mut total = cov.clone();
        for i in 0..dim {
            total[(i, i)] += noise.sigma * noise.sigma;
        }
        let base_jitter = 1e-8 * total.trace() / dim as f64;
        let mut jitter = 0.0;
        let factor = loop {
            let mut m = total.clone();
            for i in 0..dim {
                m[(i, i)] += jitter;
            }
            if let Some(f) = Cholesky::new(m) {
                break f;
            }
            jitter = if jitter == 0.0 { base_jitter } else { jitter * 10.0 };
            if jitter > total.trace() {
                return Err(Error::NotPositiveDefinite("approximation error covariance"));
            }
        };
        Ok(Self {
            mean_error: mean,
            cov_error: cov,
            samples,
            sigma: noise.sigma,
            jitter,
            factor,
        })
    }

    /// `Γ_BAE⁻¹ ρ`
    pub fn solve(&self, rho: &[f64]) -> Vec<f64> {
        self.factor.solve(&DVector::from_column_slice(rho)).as_slice().to_vec()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mut m = self.cov_error.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += self.sigma * self.sigma + self.jitter;
        }
        m
    }
}

/// Approximation-error statistics of `e_ℓ = F(z_ℓ, w_ℓ) − F(z_ℓ, w̄)` with
/// `z_ℓ` drawn from the prior. `with_wind(ℓ)` returns the forward model for
/// the `ℓ`-th wind sample; `mean_forward` uses the mean wind.
pub fn estimate_bae<F, W>(
    prior: &GaussianPrior,
    mean_forward: &F,
    mut with_wind: W,
    b: usize,
    seed: u64,
    noise: NoiseModel,
) -> Result<BaeStats>
where
    F: ForwardModel,
    W: FnMut(usize) -> Result<F>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(b);
    for l in 0..b {
        let z = prior.sample(&mut rng);
        let fwd = with_wind(l)?;
        errors.push(linalg::sub(&fwd.predict(&z)?, &mean_forward.predict(&z)?));
    }
    BaeStats::from_errors(&errors, noise)
}

/// Data-misfit weighting: the plain noise model or the approximation-error model.
#[derive(Clone, Debug)]
pub enum DataModel {
    Traditional(NoiseModel),
    Bae(BaeStats),
}

impl DataModel {
    pub fn is_bae(&self) -> bool {
        matches!(self, DataModel::Bae(_))
    }

    /// `ē`, or `None` in the traditional model.
    pub fn mean_error(&self) -> Option<&[f64]> {
        match self {
            DataModel::Traditional(_) => None,
            DataModel::Bae(s) => Some(&s.mean_error),
        }
    }

    /// `Γ⁻¹ ρ`
    pub fn solve(&self, rho: &[f64]) -> Vec<f64> {
        match self {
            DataModel::Traditional(n) => linalg::scale(rho, 1.0 / (n.sigma * n.sigma)),
            DataModel::Bae(s) => s.solve(rho),
        }
    }
}

/// Everything the MAP objective needs. Immutable once assembled.
pub struct InverseProblem<'a, F: ForwardModel> {
    pub forward: &'a F,
    pub data: &'a [f64],
    pub model: &'a DataModel,
    pub prior: &'a GaussianPrior,
    /// Multiplies the misfit; zero leaves the prior term alone.
    pub data_weight: f64,
}

/// Objective, gradient and linearization at one point.
pub struct Linearized<L> {
    pub z: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub lin: L,
}

impl<'a, F: ForwardModel> InverseProblem<'a, F> {
    pub fn new(forward: &'a F, data: &'a [f64], model: &'a DataModel, prior: &'a GaussianPrior) -> Result<Self> {
        if data.len() != forward.n_data() {
            return Err(Error::DimensionMismatch {
                context: "observation data",
                expected: forward.n_data(),
                actual: data.len(),
            });
        }
        if prior.len() != forward.n_params() {
            return Err(Error::DimensionMismatch {
                context: "prior length",
                expected: forward.n_params(),
                actual: prior.len(),
            });
        }
        Ok(Self {
            forward,
            data,
            model,
            prior,
            data_weight: 1.0,
        })
    }

    fn residual(&self, pred: &[f64]) -> Vec<f64> {
        let mut rho = linalg::sub(pred, self.data);
        if let Some(e) = self.model.mean_error() {
            linalg::axpy(1.0, e, &mut rho);
        }
        rho
    }

    /// `½ ρᵀ Γ⁻¹ ρ + ½ ‖z − z̄‖²_{Γ_prior⁻¹}` with `ρ = F(z) + ē − d`.
    pub fn objective(&self, z: &[f64]) -> Result<f64> {
        let rho = self.residual(&self.forward.predict(z)?);
        let value = 0.5 * self.data_weight * linalg::dot(&rho, &self.model.solve(&rho)) + 0.5 * self.prior.norm_sq(z);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("objective"))
        }
    }

    pub fn linearize(&self, z: &[f64]) -> Result<Linearized<F::Lin>> {
        let (pred, lin) = self.forward.linearize(z)?;
        let rho = self.residual(&pred);
        let weighted = self.model.solve(&rho);
        let value = 0.5 * self.data_weight * linalg::dot(&rho, &weighted) + 0.5 * self.prior.norm_sq(z);
        if !value.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        let mut gradient = self.prior.apply_precision(&linalg::sub(z, &self.prior.mean));
        if self.data_weight != 0.0 {
            linalg::axpy(self.data_weight, &lin.apply_transpose(&weighted)?, &mut gradient);
        }
        Ok(Linearized {
            z: z.to_vec(),
            value,
            gradient,
            lin,
        })
    }

    pub fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.linearize(z)?.gradient)
    }

    /// Gauss-Newton misfit part `Jᵀ Γ⁻¹ J v`.
    pub fn misfit_hessian_vp(&self, lin: &F::Lin, v: &[f64]) -> Result<Vec<f64>> {
        if self.data_weight == 0.0 {
            return Ok(vec![0.0; v.len()]);
        }
        let jv = lin.apply(v)?;
        Ok(linalg::scale(&lin.apply_transpose(&self.model.solve(&jv))?, self.data_weight))
    }

    /// `(Jᵀ Γ⁻¹ J + Γ_prior⁻¹) v`
    pub fn hessian_vp(&self, lin: &F::Lin, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.misfit_hessian_vp(lin, v)?;
        linalg::axpy(1.0, &self.prior.apply_precision(v), &mut out);
        Ok(out)
    }

    pub fn gn_hessian_vp(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let (_, lin) = self.forward.linearize(z)?;
        self.hessian_vp(&lin, v)
    }
}

pub fn objective<F: ForwardModel>(z: &[f64], ctx: &InverseProblem<F>) -> Result<f64> {
    ctx.objective(z)
}

pub fn gradient<F: ForwardModel>(z: &[f64], ctx: &InverseProblem<F>) -> Result<Vec<f64>> {
    ctx.gradient(z)
}

pub fn gn_hessian_vp<F: ForwardModel>(z: &[f64], v: &[f64], ctx: &InverseProblem<F>) -> Result<Vec<f64>> {
    ctx.gn_hessian_vp(z, v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub z: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub initial_grad_norm: f64,
    pub iterations: usize,
    pub cg_iterations: usize,
    /// Objective at the start and after every accepted step.
    pub values: Vec<f64>,
    pub converged: bool,
    pub line_search_failed: bool,
}

/// Inexact Newton-CG with prior-preconditioned CG and Armijo backtracking.
/// Stops once `‖∇J‖ ≤ tol·‖∇J(z_init)‖`.
pub fn compute_map<F: ForwardModel>(
    ctx: &InverseProblem<F>,
    z_init: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<MapResult> {
    let mut point = ctx.linearize(z_init)?;
    let g0 = linalg::norm(&point.gradient);
    let mut values = vec![point.value];
    let mut cg_total = 0;
    let mut iterations = 0;
    let mut line_search_failed = false;
    let mut converged = g0 == 0.0;
    while !converged && iterations < max_iters {
        let gnorm = linalg::norm(&point.gradient);
        let forcing = 0.5 * (gnorm / g0).sqrt().min(1.0);
        let (step, used) = preconditioned_cg(ctx, &point.lin, &point.gradient, forcing)?;
        cg_total += used;
        let slope = linalg::dot(&point.gradient, &step);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = point.z.iter().zip(&step).map(|(z, p)| z + alpha * p).collect();
            if let Ok(v) = ctx.objective(&trial) {
                if v <= point.value + 1e-4 * alpha * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(trial) = accepted else {
            line_search_failed = true;
            break;
        };
        point = ctx.linearize(&trial)?;
        values.push(point.value);
        iterations += 1;
        converged = linalg::norm(&point.gradient) <= tol * g0;
    }
    Ok(MapResult {
        grad_norm: linalg::norm(&point.gradient),
        z: point.z,
        value: point.value,
        initial_grad_norm: g0,
        iterations,
        cg_iterations: cg_total,
        values,
        converged,
        line_search_failed,
    })
}

/// Solves `H p = −g` by CG preconditioned with `Γ_prior` to relative
/// residual `forcing`.
fn preconditioned_cg<F: ForwardModel>(
    ctx: &InverseProblem<F>,
    lin: &F::Lin,
    g: &[f64],
    forcing: f64,
) -> Result<(Vec<f64>, usize)> {
    let n = g.len();
    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let r0 = linalg::norm(&r);
    let mut s = ctx.prior.apply_covariance(&r);
    let mut d = s.clone();
    let mut rs = linalg::dot(&r, &s);
    for it in 0..2 * n.max(1) {
        if linalg::norm(&r) <= forcing * r0 {
            return Ok((x, it));
        }
        let hd = ctx.hessian_vp(lin, &d)?;
        let curv = linalg::dot(&d, &hd);
        if !(curv > 0.0) {
            // GN Hessian is SPD; this only guards against roundoff.
            if it == 0 {
                return Ok((s, 1));
            }
            return Ok((x, it));
        }
        let alpha = rs / curv;
        linalg::axpy(alpha, &d, &mut x);
        linalg::axpy(-alpha, &hd, &mut r);
        s = ctx.prior.apply_covariance(&r);
        let rs_new = linalg::dot(&r, &s);
        let beta = rs_new / rs;
        rs = rs_new;
        for (di, si) in d.iter_mut().zip(&s) {
            *di = si + beta * *di;
        }
    }
    Ok((x, 2 * n.max(1)))
}

/// Eigenpairs of the prior-preconditioned misfit Hessian at the MAP point.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacePosterior {
    pub z_map: Vec<f64>,
    /// Descending, all at least the truncation tolerance.
    pub eigenvalues: Vec<f64>,
    /// `N × k`, orthonormal columns.
    pub eigenvectors: DMatrix<f64>,
}

impl LaplacePosterior {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `λ/(1 + λ)`
    pub fn d(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| l / (1.0 + l)).collect()
    }

    /// `−1 + 1/√(1 + λ)`
    pub fn p(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| -1.0 + 1.0 / (1.0 + l).sqrt()).collect()
    }

    /// `(I + V P Vᵀ) ω`
    fn smw_apply(&self, omega: &[f64]) -> Vec<f64> {
        let mut out = omega.to_vec();
        for (k, p) in self.p().iter().enumerate() {
            let v = self.eigenvectors.column(k);
            let c = p * linalg::dot(v.as_slice(), omega);
            linalg::axpy(c, v.as_slice(), &mut out);
        }
        out
    }

    /// `L ω = E⁻ᵀ (I + V P Vᵀ) ω`
    pub fn apply_sqrt_covariance(&self, prior: &GaussianPrior, omega: &[f64]) -> Vec<f64> {
        prior.solve_factor(&self.smw_apply(omega))
    }

    /// Dense `L Lᵀ`.
    pub fn covariance_dense(&self, prior: &GaussianPrior) -> DMatrix<f64> {
        let n = prior.len();
        let mut l = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            l.column_mut(j).copy_from_slice(&self.apply_sqrt_covariance(prior, &e));
            e[j] = 0.0;
        }
        &l * l.transpose()
    }
}

/// Symmetric linear operator on `ℝⁿ`.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// `E⁻¹ Jᵀ Γ⁻¹ J E⁻ᵀ` at a fixed linearization.
pub struct PreconditionedMisfit<'c, 'a, F: ForwardModel> {
    pub ctx: &'c InverseProblem<'a, F>,
    pub lin: F::Lin,
}

impl<F: ForwardModel> SymmetricOperator for PreconditionedMisfit<'_, '_, F> {
    fn dim(&self) -> usize {
        self.ctx.prior.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let w = self.ctx.prior.solve_factor(v);
        Ok(self.ctx.prior.solve_factor(&self.ctx.misfit_hessian_vp(&self.lin, &w)?))
    }
}

/// Dense symmetric matrix as an operator.
pub struct DenseOperator(pub DMatrix<f64>);

impl SymmetricOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok((&self.0 * DVector::from_column_slice(v)).as_slice().to_vec())
    }
}

/// Leading eigenpairs of a symmetric PSD operator by Lanczos with full
/// reorthogonalization. Invariant subspaces restart from fresh random
/// vectors orthogonal to the Krylov basis. Keeps eigenvalues `≥ tol`, at
/// most `k_max` of them, in descending order.
pub fn lanczos<O: SymmetricOperator>(op: &O, k_max: usize, tol: f64, seed: u64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = op.dim();
    let steps = n.min(k_max.saturating_mul(2).max(k_max + 20));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    let mut next = fresh_direction(&q, n, &mut rng).ok_or(Error::LanczosBreakdown)?;
    let mut scale = 0.0_f64;
    while q.len() < steps {
        let v = next;
        let mut w = op.apply(&v)?;
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("lanczos operator"));
        }
        let a = linalg::dot(&v, &w);
        q.push(v);
        alpha.push(a);
        for _ in 0..2 {
            for qi in &q {
                let c = linalg::dot(qi, &w);
                linalg::axpy(-c, qi, &mut w);
            }
        }
        let b = linalg::norm(&w);
        scale = scale.max(a.abs()).max(b);
        if q.len() == steps {
            break;
        }
        if b > 1e-10 * scale.max(f64::MIN_POSITIVE) {
            beta.push(b);
            next = linalg::scale(&w, 1.0 / b);
        } else {
            // Invariant subspace: decouple and continue elsewhere.
            beta.push(0.0);
            match fresh_direction(&q, n, &mut rng) {
                Some(v) => next = v,
                None => break,
            }
        }
    }
    let k = q.len();
    let t = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = t.symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] >= tol && eig.eigenvalues[i] > 0.0)
        .take(k_max)
        .collect();
    let qm = DMatrix::from_fn(n, k, |i, j| q[j][i]);
    let mut vecs = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let mut v = &qm * eig.eigenvectors.column(i);
        let big = v.iter().copied().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.neg_mut();
        }
        vecs.column_mut(c).copy_from(&v);
    }
    Ok((keep.iter().map(|&i| eig.eigenvalues[i]).collect(), vecs))
}

fn fresh_direction<R: Rng>(q: &[Vec<f64>], n: usize, rng: &mut R) -> Option<Vec<f64>> {
    if q.len() >= n {
        return None;
    }
    for _ in 0..8 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for qi in q {
                let c = linalg::dot(qi, &v);
                linalg::axpy(-c, qi, &mut v);
            }
        }
        let nrm = linalg::norm(&v);
        if nrm > 1e-6 {
            return Some(linalg::scale(&v, 1.0 / nrm));
        }
    }
    None
}

/// Laplace approximation at `z_map` from the prior-preconditioned GN misfit
/// Hessian.
pub fn laplace_eig<F: ForwardModel>(
    z_map: &[f64],
    ctx: &InverseProblem<F>,
    k_max: usize,
    tol: f64,
    seed: u64,
) -> Result<LaplacePosterior> {
    let (_, lin) = ctx.forward.linearize(z_map)?;
    let op = PreconditionedMisfit { ctx, lin };
    let (eigenvalues, eigenvectors) = lanczos(&op, k_max, tol, seed)?;
    Ok(LaplacePosterior {
        z_map: z_map.to_vec(),
        eigenvalues,
        eigenvectors,
    })
}

/// `count` draws `z_MAP + L ω`.
pub fn posterior_sample(lp: &LaplacePosterior, prior: &GaussianPrior, seed: u64, count: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let omega: Vec<f64> = (0..prior.len()).map(|_| rng.sample(StandardNormal)).collect();
            let mut z = lp.apply_sqrt_covariance(prior, &omega);
            linalg::axpy(1.0, &lp.z_map, &mut z);
            z
        })
        .collect()
}

/// `sqrt(δᵀ Σ⁻¹ δ)` with `δ = x − z_MAP` and
/// `Σ⁻¹ = E (I + V Λ Vᵀ) Eᵀ`.
pub fn mahalanobis(x: &[f64], lp: &LaplacePosterior, prior: &GaussianPrior) -> f64 {
    let y = prior.apply_factor(&linalg::sub(x, &lp.z_map));
    let mut s = linalg::norm_sq(&y);
    for (k, l) in lp.eigenvalues.iter().enumerate() {
        let c = linalg::dot(lp.eigenvectors.column(k).as_slice(), &y);
        s += l * c * c;
    }
    s.sqrt()
}
