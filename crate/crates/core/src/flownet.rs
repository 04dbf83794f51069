//! Residual flow-map network `𝓝(c, z, w; ξ) = c + Δt·𝓔(c, z, w; ξ)` on
//! reduced coordinates, its Jacobians, the composed multi-step loss and its
//! training.
//!
//! `𝓔` is a dense ELU network wrapped in a fixed affine normalization:
//! inputs are shifted and scaled per coordinate before the first layer and
//! the linear output is scaled per coordinate. The normalization is fitted
//! once from training data and is not trained.
//!
//! Batches are stored column-wise: each column of an input matrix is one
//! sample `[c; z; w]`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::reduction::ReducedTrajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// ELU with `α = 1`.
    Elu,
    /// No nonlinearity; turns the network into a product of affine maps.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Elu => {
                if a > 0.0 {
                    a
                } else {
                    a.exp_m1()
                }
            }
            Activation::Identity => a,
        }
    }

    /// Derivative expressed through the activation output `h`.
    #[inline]
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Elu => {
                if h > 0.0 {
                    1.0
                } else {
                    h + 1.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fixed affine maps around the trainable layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(n_in: usize, n_out: usize) -> Self {
        Self {
            input_shift: vec![0.0; n_in],
            input_scale: vec![1.0; n_in],
            output_scale: vec![1.0; n_out],
        }
    }

    /// Per-coordinate mean and standard deviation of the inputs, and the
    /// standard deviation of the one-step increments `(c_{n+1} − c_n)/Δt`.
    pub fn fit(data: &FlowDataset, dt: f64) -> Self {
        let (r, rw) = (data.r, data.r_w);
        let n_in = r + 1 + rw;
        let mut sum = vec![0.0; n_in];
        let mut sum_sq = vec![0.0; n_in];
        let mut inc_sum = vec![0.0; r];
        let mut inc_sq = vec![0.0; r];
        let mut count = 0.0;
        for s in &data.samples {
            for n in 0..data.n_steps {
                let x = s.input(n, s.states.coord(n));
                for (k, v) in x.iter().enumerate() {
                    sum[k] += v;
                    sum_sq[k] += v * v;
                }
                let next = s.states.coord(n + 1);
                for k in 0..r {
                    let d = (next[k] - x[k]) / dt;
                    inc_sum[k] += d;
                    inc_sq[k] += d * d;
                }
                count += 1.0;
            }
        }
        let std = |s: f64, sq: f64| {
            let mean = s / count;
            let var = (sq / count - mean * mean).max(0.0);
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                sd
            } else {
                1.0
            }
        };
        let mut input_scale: Vec<f64> = sum.iter().zip(&sum_sq).map(|(s, q)| std(*s, *q)).collect();
        // Few distinct winds leave the minor wind modes nearly constant over
        // the data; scaling each by its own spread would place any unseen
        // wind far outside the training range. The wind block therefore
        // shares the scale of its widest coordinate.
        let wind_scale = input_scale[r + 1..].iter().copied().fold(0.0, f64::max);
        if wind_scale > 0.0 {
            input_scale[r + 1..].iter_mut().for_each(|s| *s = wind_scale);
        }
        Self {
            input_shift: sum.iter().map(|s| s / count).collect(),
            input_scale,
            output_scale: inc_sum.iter().zip(&inc_sq).map(|(s, q)| std(*s, *q)).collect(),
        }
    }
}

/// Weights and biases `ξ` plus the fixed architecture data.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowNetParams {
    pub r: usize,
    pub r_w: usize,
    pub dt: f64,
    pub activation: Activation,
    /// `weights[l]` maps layer `l` to layer `l + 1` and has shape `out × in`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub norm: Normalization,
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`, shape `fan_out × fan_in`.
pub fn glorot_uniform<R: Rng>(fan_out: usize, fan_in: usize, rng: &mut R) -> DMatrix<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..=bound))
}

pub fn glorot_init(fan_out: usize, fan_in: usize, seed: u64) -> DMatrix<f64> {
    glorot_uniform(fan_out, fan_in, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl FlowNetParams {
    /// Glorot-initialized network with `depth` hidden layers of `width`
    /// units, zero biases and identity normalization.
    pub fn new(r: usize, r_w: usize, width: usize, depth: usize, dt: f64, seed: u64) -> Self {
        let mut sizes = vec![r + 1 + r_w];
        sizes.extend(std::iter::repeat(width).take(depth));
        sizes.push(r);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<_> = sizes
            .windows(2)
            .map(|w| glorot_uniform(w[1], w[0], &mut rng))
            .collect();
        let biases = sizes[1..].iter().map(|&n| DVector::zeros(n)).collect();
        Self {
            r,
            r_w,
            dt,
            activation: Activation::Elu,
            weights,
            biases,
            norm: Normalization::identity(r + 1 + r_w, r),
        }
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Self {
        assert_eq!(norm.input_shift.len(), self.n_in());
        assert_eq!(norm.output_scale.len(), self.r);
        self.norm = norm;
        self
    }

    pub fn n_in(&self) -> usize {
        self.r + 1 + self.r_w
    }

    pub fn depth(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn width(&self) -> usize {
        if self.depth() == 0 {
            0
        } else {
            self.weights[0].nrows()
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Zeroes the last layer so that `𝓝(c, ·) = c`.
    pub fn zero_output_layer(&mut self) {
        self.weights.last_mut().unwrap().fill(0.0);
        self.biases.last_mut().unwrap().fill(0.0);
    }

    /// `ξ` as one vector: per layer, the weights column-major then the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flow net parameters",
                expected: self.num_params(),
                actual: xi.len(),
            });
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&xi[off..off + n]);
            off += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&xi[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check_inputs(&self, c: &[f64], w: &[f64]) -> Result<()> {
        if c.len() != self.r {
            return Err(Error::DimensionMismatch {
                context: "flow net state",
                expected: self.r,
                actual: c.len(),
            });
        }
        if w.len() != self.r_w {
            return Err(Error::DimensionMismatch {
                context: "flow net wind",
                expected: self.r_w,
                actual: w.len(),
            });
        }
        Ok(())
    }

    /// Normalized inputs of a batch of raw columns, in place.
    fn normalize_inputs(&self, x: &mut DMatrix<f64>) {
        for mut col in x.column_iter_mut() {
            for ((v, s), k) in col.iter_mut().zip(&self.norm.input_shift).zip(&self.norm.input_scale) {
                *v = (*v - s) / k;
            }
        }
    }

    /// Runs the layers on normalized inputs. Returns the scaled outputs
    /// `𝓔` and the hidden activations (input first).
    fn forward_layers(&self, x: DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let n_layers = self.weights.len();
        let mut acts = Vec::with_capacity(n_layers);
        acts.push(x);
        for l in 0..n_layers {
            let mut a = &self.weights[l] * &acts[l];
            let b = &self.biases[l];
            let last = l + 1 == n_layers;
            for mut col in a.column_iter_mut() {
                if last {
                    for ((v, bi), s) in col.iter_mut().zip(b.iter()).zip(&self.norm.output_scale) {
                        *v = (*v + bi) * s;
                    }
                } else {
                    for (v, bi) in col.iter_mut().zip(b.iter()) {
                        *v = self.activation.apply(*v + bi);
                    }
                }
            }
            if last {
                return (a, acts);
            }
            acts.push(a);
        }
        unreachable!("network has at least one layer")
    }

    /// `𝓔(c, z, w)` for one sample.
    pub fn residual(&self, c: &[f64], z: f64, w: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(c, w)?;
        let mut x = DMatrix::from_iterator(self.n_in(), 1, c.iter().copied().chain([z]).chain(w.iter().copied()));
        self.normalize_inputs(&mut x);
        Ok(self.forward_layers(x).0.as_slice().to_vec())
    }

    /// One step `c + Δt·𝓔(c, z, w)`.
    pub fn forward(&self, c: &[f64], z: f64, w: &[f64]) -> Result<Vec<f64>> {
        let e = self.residual(c, z, w)?;
        Ok(c.iter().zip(&e).map(|(ci, ei)| ci + self.dt * ei).collect())
    }

    /// One step for every column of `states`; column `j` uses `z[j]` and
    /// column `j` of `winds` (`r_w × B`).
    pub fn forward_batch(&self, states: &DMatrix<f64>, z: &[f64], winds: &DMatrix<f64>) -> DMatrix<f64> {
        let b = states.ncols();
        let mut x = DMatrix::zeros(self.n_in(), b);
        x.rows_mut(0, self.r).copy_from(states);
        x.row_mut(self.r).copy_from_slice(z);
        if self.r_w > 0 {
            x.rows_mut(self.r + 1, self.r_w).copy_from(winds);
        }
        self.normalize_inputs(&mut x);
        let (e, _) = self.forward_layers(x);
        let mut out = states.clone();
        let dt = self.dt;
        out.zip_apply(&e, |a, b| *a += dt * b);
        out
    }

    /// Analytic Jacobians of one step at `(c, z, w)`.
    pub fn jacobians(&self, c: &[f64], z: f64, w: &[f64]) -> Result<NetJacobians> {
        self.check_inputs(c, w)?;
        let mut x = DMatrix::from_iterator(self.n_in(), 1, c.iter().copied().chain([z]).chain(w.iter().copied()));
        self.normalize_inputs(&mut x);
        let (_, acts) = self.forward_layers(x);
        // M accumulates d(layer output)/d(raw input).
        let mut m = self.weights[0].clone();
        for (k, s) in self.norm.input_scale.iter().enumerate() {
            m.column_mut(k).scale_mut(1.0 / s);
        }
        for l in 1..self.weights.len() {
            for (i, h) in acts[l].iter().enumerate() {
                m.row_mut(i).scale_mut(self.activation.derivative_from_output(*h));
            }
            m = &self.weights[l] * m;
        }
        for (i, s) in self.norm.output_scale.iter().enumerate() {
            m.row_mut(i).scale_mut(s * self.dt);
        }
        let mut dc = m.columns(0, self.r).into_owned();
        for i in 0..self.r {
            dc[(i, i)] += 1.0;
        }
        Ok(NetJacobians {
            dc,
            dz: m.column(self.r).into_owned(),
            dw: m.columns(self.r + 1, self.r_w).into_owned(),
        })
    }
}

/// Jacobians of `𝓝` with respect to its three inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct NetJacobians {
    /// `r × r`, includes the identity from the residual connection.
    pub dc: DMatrix<f64>,
    pub dz: DVector<f64>,
    pub dw: DMatrix<f64>,
}

pub fn net_forward(c: &[f64], z: f64, w: &[f64], xi: &FlowNetParams) -> Result<Vec<f64>> {
    xi.forward(c, z, w)
}

pub fn net_jacobians(c: &[f64], z: f64, w: &[f64], xi: &FlowNetParams) -> Result<NetJacobians> {
    xi.jacobians(c, z, w)
}

/// Left fold of `net_forward` over `p = z.len()` steps; `w` is row-major
/// `p × r_w`.
pub fn compose(c0: &[f64], z: &[f64], w: &[f64], xi: &FlowNetParams) -> Result<Vec<f64>> {
    if w.len() != z.len() * xi.r_w {
        return Err(Error::DimensionMismatch {
            context: "compose wind steps",
            expected: z.len() * xi.r_w,
            actual: w.len(),
        });
    }
    let mut c = c0.to_vec();
    for (j, zj) in z.iter().enumerate() {
        c = xi.forward(&c, *zj, &w[j * xi.r_w..(j + 1) * xi.r_w])?;
    }
    Ok(c)
}

/// One training or validation trajectory in reduced coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub states: ReducedTrajectory,
    /// `z_n`, length `N`.
    pub z: Vec<f64>,
    /// Reduced wind, row-major `N × r_w`.
    pub wind: Vec<f64>,
}

impl FlowSample {
    fn wind_step(&self, n: usize) -> &[f64] {
        let rw = self.wind.len() / self.z.len();
        &self.wind[n * rw..(n + 1) * rw]
    }

    fn input(&self, n: usize, c: &[f64]) -> Vec<f64> {
        let mut x = c.to_vec();
        x.push(self.z[n]);
        x.extend_from_slice(self.wind_step(n));
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowDataset {
    pub r: usize,
    pub r_w: usize,
    pub n_steps: usize,
    pub samples: Vec<FlowSample>,
}

impl FlowDataset {
    pub fn new(r: usize, r_w: usize, samples: Vec<FlowSample>) -> Result<Self> {
        let n_steps = samples.first().map(|s| s.z.len()).unwrap_or(0);
        for s in &samples {
            let checks = [
                (s.states.rank, r, "dataset rank"),
                (s.z.len(), n_steps, "dataset source steps"),
                (s.states.n_steps(), n_steps, "dataset state steps"),
                (s.wind.len(), n_steps * r_w, "dataset wind steps"),
            ];
            for (actual, expected, context) in checks {
                if actual != expected {
                    return Err(Error::DimensionMismatch {
                        context,
                        expected,
                        actual,
                    });
                }
            }
        }
        Ok(Self {
            r,
            r_w,
            n_steps,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All anchors `(i, n)` ordered by `n`, then `i`.
    fn anchors(&self) -> Vec<(usize, usize)> {
        (0..self.n_steps)
            .flat_map(|n| (0..self.len()).map(move |i| (i, n)))
            .collect()
    }
}

/// Every composed prediction of one sample's trajectory starting from `c_0`,
/// row-major `(N + 1) × r`.
pub fn rollout(sample: &FlowSample, xi: &FlowNetParams) -> Result<Vec<f64>> {
    let mut c = sample.states.coord(0).to_vec();
    let mut out = c.clone();
    for n in 0..sample.z.len() {
        c = xi.forward(&c, sample.z[n], sample.wind_step(n))?;
        out.extend_from_slice(&c);
    }
    Ok(out)
}

/// Composed multi-step loss: the raw sum over trajectories `i`, anchors `n`
/// and horizons `p ≤ min(P, N − n)` of squared prediction errors.
pub fn loss(data: &FlowDataset, xi: &FlowNetParams, horizon: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.samples {
        for n in 0..data.n_steps {
            let mut c = s.states.coord(n).to_vec();
            for p in 1..=horizon.min(data.n_steps - n) {
                c = xi.forward(&c, s.z[n + p - 1], s.wind_step(n + p - 1))?;
                total += linalg::norm_sq(&linalg::sub(&c, s.states.coord(n + p)));
            }
        }
    }
    Ok(total)
}

/// Loss and its exact gradient with respect to `ξ` (flattened order), by
/// batched backpropagation through the compositions.
pub fn loss_gradient(data: &FlowDataset, xi: &FlowNetParams, horizon: usize) -> Result<(f64, Vec<f64>)> {
    loss_gradient_anchors(data, xi, horizon, &data.anchors())
}

/// As `loss_gradient` restricted to the given anchors, which must be sorted
/// by `n`.
fn loss_gradient_anchors(
    data: &FlowDataset,
    xi: &FlowNetParams,
    horizon: usize,
    anchors: &[(usize, usize)],
) -> Result<(f64, Vec<f64>)> {
    let r = xi.r;
    let rw = xi.r_w;
    let n_layers = xi.weights.len();
    let n_steps = data.n_steps;
    // Anchors with n + p ≤ N are active at step p; sorting by n makes them a prefix.
    let active = |p: usize| anchors.partition_point(|&(_, n)| n + p <= n_steps);

    let mut state = DMatrix::zeros(r, anchors.len());
    for (col, &(i, n)) in anchors.iter().enumerate() {
        state.column_mut(col).copy_from_slice(data.samples[i].states.coord(n));
    }

    let horizon = horizon.min(n_steps);
    let mut caches: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(horizon);
    let mut outputs: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
    let mut total = 0.0;
    for p in 1..=horizon {
        let a = active(p);
        if a == 0 {
            break;
        }
        let mut x = DMatrix::zeros(xi.n_in(), a);
        for (col, &(i, n)) in anchors[..a].iter().enumerate() {
            let s = &data.samples[i];
            let mut xc = x.column_mut(col);
            xc.rows_mut(0, r).copy_from(&state.column(col));
            xc[r] = s.z[n + p - 1];
            xc.rows_mut(r + 1, rw).copy_from_slice(s.wind_step(n + p - 1));
        }
        xi.normalize_inputs(&mut x);
        let (e, acts) = xi.forward_layers(x);
        let mut next = state.columns(0, a).into_owned();
        let dt = xi.dt;
        next.zip_apply(&e, |v, d| *v += dt * d);
        for (col, &(i, n)) in anchors[..a].iter().enumerate() {
            let target = data.samples[i].states.coord(n + p);
            for k in 0..r {
                let d = next[(k, col)] - target[k];
                total += d * d;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("flow net loss"));
        }
        caches.push(acts);
        outputs.push(next.clone());
        state = next;
    }

    let mut grad_w: Vec<DMatrix<f64>> = xi.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut grad_b: Vec<DVector<f64>> = xi.biases.iter().map(|b| DVector::zeros(b.len())).collect();
    let mut carry: Option<DMatrix<f64>> = None;
    for p in (1..=caches.len()).rev() {
        let acts = &caches[p - 1];
        let out = &outputs[p - 1];
        let a = out.ncols();
        // g = dL/d(state after step p)
        let mut g = DMatrix::zeros(r, a);
        for (col, &(i, n)) in anchors[..a].iter().enumerate() {
            let target = data.samples[i].states.coord(n + p);
            for k in 0..r {
                g[(k, col)] = 2.0 * (out[(k, col)] - target[k]);
            }
        }
        if let Some(c) = carry.take() {
            let mut head = g.columns_mut(0, c.ncols());
            head += &c;
        }
        let mut delta = g.clone();
        for (k, s) in xi.norm.output_scale.iter().enumerate() {
            delta.row_mut(k).scale_mut(xi.dt * s);
        }
        for l in (0..n_layers).rev() {
            grad_w[l] += &delta * acts[l].transpose();
            for (gb, row) in grad_b[l].iter_mut().zip(delta.row_iter()) {
                *gb += row.sum();
            }
            if l == 0 && p == 1 {
                break;
            }
            let mut back = xi.weights[l].transpose() * &delta;
            if l > 0 {
                for (v, h) in back.iter_mut().zip(acts[l].iter()) {
                    *v *= xi.activation.derivative_from_output(*h);
                }
                delta = back;
            } else {
                let mut c = g;
                for k in 0..r {
                    let inv = 1.0 / xi.norm.input_scale[k];
                    for col in 0..a {
                        c[(k, col)] += back[(k, col)] * inv;
                    }
                }
                carry = Some(c);
                break;
            }
        }
    }

    let mut flat = Vec::with_capacity(xi.num_params());
    for (w, b) in grad_w.iter().zip(&grad_b) {
        flat.extend_from_slice(w.as_slice());
        flat.extend_from_slice(b.as_slice());
    }
    Ok((total, flat))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Composition horizon `P`.
    pub horizon: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative decay `lr·(1 − decay_rate)` applied every `decay_every` epochs.
    pub decay_rate: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub width: usize,
    pub depth: usize,
    /// Anchors `(i, n)` per step; `None` is full batch.
    pub batch_anchors: Option<usize>,
    /// Validation error is checked every this many epochs and after the last.
    pub validate_every: usize,
}

/// Desk-scale schedule: a narrower network trained harder for fewer epochs.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            width: 81,
            epochs: 1500,
            learning_rate: 0.003,
            ..Self::full_scale()
        }
    }
}

impl TrainConfig {
    /// Schedule for the 101101-node grid.
    pub fn full_scale() -> Self {
        Self {
            horizon: 25,
            epochs: 20_000,
            learning_rate: 0.0008,
            decay_rate: 0.04,
            decay_every: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            width: 200,
            depth: 2,
            batch_anchors: None,
            validate_every: 25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.decay_rate) {
            return bad("learning rate must be positive and decay rate in [0, 1)");
        }
        if self.decay_every == 0 || self.validate_every == 0 {
            return bad("decay_every and validate_every must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("invalid Adam constants");
        }
        if self.width == 0 {
            return bad("width must be positive");
        }
        if self.batch_anchors == Some(0) {
            return bad("batch_anchors must be positive");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * (1.0 - self.decay_rate).powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update of `xi` in place at the rate for `epoch`.
pub fn adam_step(xi: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &TrainConfig, epoch: usize) {
    state.t += 1;
    let lr = cfg.learning_rate_at(epoch);
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for k in 0..xi.len() {
        let g = grad[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        xi[k] -= lr * mh / (vh.sqrt() + cfg.epsilon);
    }
}

/// Mean squared relative full-state error of the `n`-fold compositions from
/// `c_0`, over `n = 1..N` and all samples. Full-state norms come from the
/// reduced trajectories, so the result equals the error of reconstructed
/// states against the original snapshots.
pub fn validation_error(data: &FlowDataset, xi: &FlowNetParams) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &data.samples {
        let pred = rollout(s, xi)?;
        for n in 1..=data.n_steps {
            count += 1;
            let denom = s.states.state_norm_sq[n];
            if denom == 0.0 {
                continue;
            }
            let c = &pred[n * data.r..(n + 1) * data.r];
            let num = linalg::norm_sq(&linalg::sub(c, s.states.coord(n))) + s.states.residual_norm_sq[n];
            total += num / denom;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    let v = total / count as f64;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("validation error"))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation error seen (the final ones
    /// when there is no validation set).
    pub params: FlowNetParams,
    /// `(epoch, loss)` before each update.
    pub history: Vec<(usize, f64)>,
    /// `(epoch, validation error)` after the update of that epoch.
    pub validation: Vec<(usize, f64)>,
    pub best_epoch: Option<usize>,
    pub best_validation: Option<f64>,
}

/// Adam on the composed loss from `init`.
pub fn train(
    data: &FlowDataset,
    validation: Option<&FlowDataset>,
    init: FlowNetParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init;
    let mut xi = params.flatten();
    let mut adam = AdamState::new(xi.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let all = data.anchors();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut val_hist = Vec::new();
    let mut best: Option<(usize, f64, FlowNetParams)> = None;

    for epoch in 0..cfg.epochs {
        let (value, grad) = match cfg.batch_anchors {
            Some(b) if b < all.len() => {
                let mut pick: Vec<usize> = index::sample(&mut rng, all.len(), b).into_vec();
                pick.sort_unstable();
                let chosen: Vec<(usize, usize)> = pick.iter().map(|&k| all[k]).collect();
                loss_gradient_anchors(data, &params, cfg.horizon, &chosen)
            }
            _ => loss_gradient_anchors(data, &params, cfg.horizon, &all),
        }
        .map_err(|_| Error::Diverged { epoch })?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        history.push((epoch, value));
        adam_step(&mut xi, &grad, &mut adam, cfg, epoch);
        params.set_flat(&xi)?;

        if let Some(val) = validation {
            if (epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs {
                // A diverging rollout is a bad candidate, not a failed run.
                let err = validation_error(val, &params).unwrap_or(f64::INFINITY);
                val_hist.push((epoch, err));
                if best.as_ref().map_or(true, |b| err < b.1) {
                    best = Some((epoch, err, params.clone()));
                }
            }
        }
    }

    Ok(match best {
        Some((epoch, err, p)) if err.is_finite() => TrainOutcome {
            params: p,
            history,
            validation: val_hist,
            best_epoch: Some(epoch),
            best_validation: Some(err),
        },
        _ => TrainOutcome {
            params,
            history,
            validation: val_hist,
            best_epoch: None,
            best_validation: None,
        },
    })
}
