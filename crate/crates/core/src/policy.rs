//! Diagonal Gaussian policy with a ReLU MLP mean and a state-independent
//! log-std vector, plus exact reverse-mode gradients of its log-density.
//!
//! # Parameter layout
//!
//! All parameters live in one flat `Vec<f64>`. For every layer (hidden layers
//! first, output layer last) the weight matrix is stored row-major as
//! `out × in`, immediately followed by its `out` biases. The `action_dim`
//! log-std entries come last. Optimizers and estimators only ever see the flat
//! vector.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower/upper clamp applied to log-std after every optimizer update.
pub const LOG_STD_BOUNDS: (f64, f64) = (-5.0, 2.0);

const CHECKPOINT_MAGIC: &[u8; 8] = b"RMXPOL01";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyLayout {
    pub state_dim: usize,
    pub hidden: Vec<usize>,
    pub action_dim: usize,
}

impl PolicyLayout {
    pub fn new(state_dim: usize, hidden: Vec<usize>, action_dim: usize) -> Self {
        Self {
            state_dim,
            hidden,
            action_dim,
        }
    }

    /// `(out, in)` for every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.state_dim;
        for &h in &self.hidden {
            shapes.push((h, fan_in));
            fan_in = h;
        }
        shapes.push((self.action_dim, fan_in));
        shapes
    }

    pub fn log_std_offset(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    pub fn param_count(&self) -> usize {
        self.log_std_offset() + self.action_dim
    }
}

/// Sampled action and its log-density under the policy that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    layout: PolicyLayout,
    flat: Vec<f64>,
}

/// Activations kept from a batched forward pass for the backward pass.
struct ForwardCache {
    /// inputs to each layer (index 0 is the state batch)
    inputs: Vec<Array2<f64>>,
    /// pre-activations of each hidden layer
    pre: Vec<Array2<f64>>,
    mean: Array2<f64>,
}

impl PolicyParams {
    pub fn zeros(layout: PolicyLayout) -> Self {
        let n = layout.param_count();
        Self {
            layout,
            flat: vec![0.0; n],
        }
    }

    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, log-std 0.
    pub fn init<R: Rng + ?Sized>(layout: PolicyLayout, rng: &mut R) -> Self {
        let mut p = Self::zeros(layout);
        let mut off = 0;
        for (out, fan_in) in p.layout.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut p.flat[off..off + out * fan_in] {
                *w = rng.random_range(-bound..bound);
            }
            off += out * fan_in + out;
        }
        p
    }

    pub fn from_flat(layout: PolicyLayout, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != layout.param_count() {
            return Err(Error::DimensionMismatch {
                expected: layout.param_count(),
                got: flat.len(),
            });
        }
        Ok(Self { layout, flat })
    }

    pub fn layout(&self) -> &PolicyLayout {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.layout.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.layout.action_dim
    }

    pub fn log_std(&self) -> &[f64] {
        &self.flat[self.layout.log_std_offset()..]
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        let off = self.layout.log_std_offset();
        &mut self.flat[off..]
    }

    pub fn clamp_log_std(&mut self) {
        let (lo, hi) = LOG_STD_BOUNDS;
        for v in self.log_std_mut() {
            *v = v.clamp(lo, hi);
        }
    }

    /// `self += step * direction`, then log-std clamping.
    pub fn apply_step(&mut self, direction: &[f64], step: f64) {
        debug_assert_eq!(direction.len(), self.flat.len());
        for (p, d) in self.flat.iter_mut().zip(direction) {
            *p += step * d;
        }
        self.clamp_log_std();
    }

    fn layers(&self) -> Vec<(ArrayView2<'_, f64>, ArrayView1<'_, f64>)> {
        let mut off = 0;
        self.layout
            .layer_shapes()
            .into_iter()
            .map(|(out, fan_in)| {
                let w = ArrayView2::from_shape((out, fan_in), &self.flat[off..off + out * fan_in])
                    .expect("layout matches flat vector");
                off += out * fan_in;
                let b = ArrayView1::from(&self.flat[off..off + out]);
                off += out;
                (w, b)
            })
            .collect()
    }

    fn check_states(&self, states: &[f64]) -> usize {
        let p = self.layout.state_dim;
        assert_eq!(states.len() % p, 0, "state buffer is not a multiple of state_dim");
        states.len() / p
    }

    /// Network mean for one state.
    pub fn forward_mean(&self, state: &[f64]) -> Vec<f64> {
        self.mean_batch(state).into_raw_vec_and_offset().0
    }

    /// Network means for a row-major batch of states (`n × state_dim`).
    pub fn mean_batch(&self, states: &[f64]) -> Array2<f64> {
        let n = self.check_states(states);
        let mut h = ArrayView2::from_shape((n, self.layout.state_dim), states)
            .expect("shape checked")
            .to_owned();
        let layers = self.layers();
        let last = layers.len() - 1;
        for (l, (w, b)) in layers.iter().enumerate() {
            let mut z = h.dot(&w.t());
            z += b;
            if l < last {
                z.mapv_inplace(relu);
            }
            h = z;
        }
        h
    }

    fn forward_cached(&self, states: &[f64]) -> ForwardCache {
        let n = self.check_states(states);
        let x = ArrayView2::from_shape((n, self.layout.state_dim), states)
            .expect("shape checked")
            .to_owned();
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut inputs = vec![x];
        let mut pre = Vec::with_capacity(last);
        let mut mean = None;
        for (l, (w, b)) in layers.iter().enumerate() {
            let mut z = inputs[l].dot(&w.t());
            z += b;
            if l < last {
                let h = z.mapv(relu);
                pre.push(z);
                inputs.push(h);
            } else {
                mean = Some(z);
            }
        }
        ForwardCache {
            inputs,
            pre,
            mean: mean.expect("at least one layer"),
        }
    }

    /// Backpropagate `d_mean` (`n × action_dim`, gradient w.r.t. the network
    /// output) into `grad` (flat layout; log-std entries untouched).
    fn backprop_mean(&self, cache: &ForwardCache, d_mean: Array2<f64>, grad: &mut [f64]) {
        let shapes = self.layout.layer_shapes();
        let layers = self.layers();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for (out, fan_in) in &shapes {
            offsets.push(off);
            off += out * fan_in + out;
        }
        let mut g = d_mean;
        for l in (0..layers.len()).rev() {
            let (out, fan_in) = shapes[l];
            let dw = g.t().dot(&cache.inputs[l]);
            let db = g.sum_axis(Axis(0));
            let o = offsets[l];
            for (dst, src) in grad[o..o + out * fan_in].iter_mut().zip(dw.iter()) {
                *dst += src;
            }
            for (dst, src) in grad[o + out * fan_in..o + out * fan_in + out]
                .iter_mut()
                .zip(db.iter())
            {
                *dst += src;
            }
            if l > 0 {
                let mut gin = g.dot(&layers[l].0);
                ndarray::Zip::from(&mut gin)
                    .and(&cache.pre[l - 1])
                    .for_each(|gi, &z| {
                        if z <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                g = gin;
            }
        }
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> ActionSample {
        let mean = self.forward_mean(state);
        self.sample_around(&mean, rng)
    }

    /// Draw `mean + exp(log_std) * z` and score it.
    pub fn sample_around<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> ActionSample {
        let log_std = self.log_std();
        let mut action = Vec::with_capacity(mean.len());
        let mut log_prob = 0.0;
        for (&mu, &ls) in mean.iter().zip(log_std) {
            let z: f64 = StandardNormal.sample(rng);
            let a = mu + ls.exp() * z;
            log_prob += gaussian_log_density(a, mu, ls);
            action.push(a);
        }
        ActionSample { action, log_prob }
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        let mean = self.forward_mean(state);
        mean.iter()
            .zip(action)
            .zip(self.log_std())
            .map(|((&mu, &a), &ls)| gaussian_log_density(a, mu, ls))
            .sum()
    }

    /// Log-densities of a batch of `(state, action)` rows.
    pub fn log_prob_batch(&self, states: &[f64], actions: &[f64]) -> Vec<f64> {
        let mean = self.mean_batch(states);
        self.log_prob_from_mean(mean.view(), actions)
    }

    pub fn log_prob_from_mean(&self, mean: ArrayView2<'_, f64>, actions: &[f64]) -> Vec<f64> {
        let q = self.layout.action_dim;
        let log_std = self.log_std();
        mean.outer_iter()
            .zip(actions.chunks_exact(q))
            .map(|(mu, a)| {
                mu.iter()
                    .zip(a)
                    .zip(log_std)
                    .map(|((&m, &x), &ls)| gaussian_log_density(x, m, ls))
                    .sum()
            })
            .collect()
    }

    /// Gradient of `log pi(action | state)` w.r.t. every parameter.
    pub fn log_prob_grad(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        self.weighted_log_prob_grad(state, action, &[1.0])
    }

    /// `sum_i coef[i] * grad log pi(a_i | s_i)` over a batch, in one backward pass.
    pub fn weighted_log_prob_grad(&self, states: &[f64], actions: &[f64], coef: &[f64]) -> Vec<f64> {
        let n = self.check_states(states);
        let q = self.layout.action_dim;
        assert_eq!(actions.len(), n * q);
        assert_eq!(coef.len(), n);
        let cache = self.forward_cached(states);
        let log_std = self.log_std().to_vec();
        let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
        let mut d_mean = Array2::<f64>::zeros((n, q));
        let mut d_log_std = vec![0.0; q];
        for i in 0..n {
            for j in 0..q {
                let resid = actions[i * q + j] - cache.mean[[i, j]];
                d_mean[[i, j]] = coef[i] * resid * inv_var[j];
                d_log_std[j] += coef[i] * (resid * resid * inv_var[j] - 1.0);
            }
        }
        let mut grad = vec![0.0; self.flat.len()];
        self.backprop_mean(&cache, d_mean, &mut grad);
        let off = self.layout.log_std_offset();
        grad[off..].copy_from_slice(&d_log_std);
        grad
    }

    /// Directional derivative of the network mean along `tangent` (flat layout,
    /// log-std entries ignored), for every state in the batch.
    pub fn mean_jvp(&self, states: &[f64], tangent: &[f64]) -> Array2<f64> {
        let n = self.check_states(states);
        assert_eq!(tangent.len(), self.flat.len());
        let tan = PolicyParams {
            layout: self.layout.clone(),
            flat: tangent.to_vec(),
        };
        let layers = self.layers();
        let tan_layers = tan.layers();
        let last = layers.len() - 1;
        let mut h = ArrayView2::from_shape((n, self.layout.state_dim), states)
            .expect("shape checked")
            .to_owned();
        let mut dh = Array2::<f64>::zeros(h.raw_dim());
        for l in 0..layers.len() {
            let (w, b) = &layers[l];
            let (dw, db) = &tan_layers[l];
            let mut z = h.dot(&w.t());
            z += b;
            let mut dz = dh.dot(&w.t()) + h.dot(&dw.t());
            dz += db;
            if l < last {
                ndarray::Zip::from(&mut dz).and(&z).for_each(|d, &zz| {
                    if zz <= 0.0 {
                        *d = 0.0;
                    }
                });
                z.mapv_inplace(relu);
            }
            h = z;
            dh = dz;
        }
        dh
    }

    /// `J^T cotangent` for the mean network (log-std block left at zero).
    pub fn mean_vjp(&self, states: &[f64], cotangent: Array2<f64>) -> Vec<f64> {
        let cache = self.forward_cached(states);
        let mut grad = vec![0.0; self.flat.len()];
        self.backprop_mean(&cache, cotangent, &mut grad);
        grad
    }

    /// Mean over `states` of KL(self(.|s) || other(.|s)), closed form.
    pub fn mean_kl(&self, other: &PolicyParams, states: &[f64]) -> f64 {
        let n = self.check_states(states);
        if n == 0 {
            return 0.0;
        }
        let mu_a = self.mean_batch(states);
        let mu_b = other.mean_batch(states);
        let (ls_a, ls_b) = (self.log_std(), other.log_std());
        let mut total = 0.0;
        for (ra, rb) in mu_a.outer_iter().zip(mu_b.outer_iter()) {
            for j in 0..ra.len() {
                let var_a = (2.0 * ls_a[j]).exp();
                let var_b = (2.0 * ls_b[j]).exp();
                let d = ra[j] - rb[j];
                total += ls_b[j] - ls_a[j] + (var_a + d * d) / (2.0 * var_b) - 0.5;
            }
        }
        total / n as f64
    }

    /// Serialize: magic, u32 layer count, u32 layer widths (state dim,
    /// hidden..., action dim), u64 parameter count, then f64 parameters.
    /// Everything little-endian.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut widths = vec![self.layout.state_dim];
        widths.extend(&self.layout.hidden);
        widths.push(self.layout.action_dim);
        let mut out = Vec::with_capacity(8 + 4 + 4 * widths.len() + 8 + 8 * self.flat.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
        for w in widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.flat.len() as u64).to_le_bytes());
        for v in &self.flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if !(2..=64).contains(&count) {
            return Err(bad("implausible layer count"));
        }
        let mut widths = Vec::with_capacity(count);
        for _ in 0..count {
            widths.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let layout = PolicyLayout::new(
            widths[0],
            widths[1..count - 1].to_vec(),
            widths[count - 1],
        );
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if n != layout.param_count() {
            return Err(bad("parameter count does not match layer sizes"));
        }
        let body = take(8 * n)?;
        if bytes.len() != 8 + 4 + 4 * count + 8 + 8 * n {
            return Err(bad("trailing bytes"));
        }
        let flat = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(layout, flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn gaussian_log_density(a: f64, mu: f64, log_std: f64) -> f64 {
    let z = (a - mu) * (-log_std).exp();
    -0.5 * z * z - log_std - 0.5 * LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64, hidden: Vec<usize>) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParams::init(PolicyLayout::new(2, hidden, 2), &mut rng);
        // nonzero biases and log-std so every parameter matters
        for v in p.flat_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        p
    }

    #[test]
    fn ln_2pi_constant() {
        assert!(((2.0 * PI).ln() - LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn zero_network_has_zero_mean() {
        let p = PolicyParams::zeros(PolicyLayout::new(3, vec![4, 5], 2));
        assert_eq!(p.forward_mean(&[1.0, -2.0, 7.5]), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_computed_one_one_one_net() {
        // x -> relu(2x + 0.5) -> 3h - 1
        let layout = PolicyLayout::new(1, vec![1], 1);
        let p = PolicyParams::from_flat(layout, vec![2.0, 0.5, 3.0, -1.0, 0.0]).unwrap();
        assert_eq!(p.forward_mean(&[1.0]), vec![6.5]);
        // inactive unit
        assert_eq!(p.forward_mean(&[-1.0]), vec![-1.0]);
    }

    #[test]
    fn hidden_unit_permutation_symmetry() {
        let p = small(3, vec![4]);
        let layout = p.layout().clone();
        let flat = p.flat().to_vec();
        // layer 0: W (4x2) at 0..8, b at 8..12; layer 1: W (2x4) at 12..20
        let mut q = flat.clone();
        for c in 0..2 {
            q.swap(c, 2 + c);
        }
        q.swap(8, 9);
        for r in 0..2 {
            q.swap(12 + r * 4, 12 + r * 4 + 1);
        }
        let q = PolicyParams::from_flat(layout, q).unwrap();
        let s = [0.3, -0.7];
        let (a, b) = (p.forward_mean(&s), q.forward_mean(&s));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn log_prob_at_mean_unit_sigma() {
        let p = PolicyParams::zeros(PolicyLayout::new(2, vec![3], 2));
        let lp = p.log_prob(&[0.1, 0.2], &[0.0, 0.0]);
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-14);
        let mut q = p.clone();
        for v in q.log_std_mut() {
            *v += 1.0;
        }
        assert!((q.log_prob(&[0.1, 0.2], &[0.0, 0.0]) - (lp - 2.0)).abs() < 1e-13);
    }

    #[test]
    fn log_prob_matches_density_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let p = small(seed, vec![5, 4]);
            let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let mu = p.forward_mean(&s);
            let mut density = 1.0;
            for j in 0..2 {
                let sigma = p.log_std()[j].exp();
                density *= (-(a[j] - mu[j]).powi(2) / (2.0 * sigma * sigma)).exp()
                    / (sigma * (2.0 * PI).sqrt());
            }
            assert!((p.log_prob(&s, &a) - density.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded_and_self_consistent() {
        let p = small(5, vec![6, 6]);
        let s = [0.4, 0.1];
        let a1 = p.sample_action(&s, &mut ChaCha8Rng::seed_from_u64(9));
        let a2 = p.sample_action(&s, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a1, a2);
        assert!((p.log_prob(&s, &a1.action) - a1.log_prob).abs() < 1e-12);
    }

    #[test]
    fn vanishing_variance_returns_mean() {
        let mut p = small(6, vec![3]);
        for v in p.log_std_mut() {
            *v = -30.0;
        }
        let s = [0.2, 0.9];
        let mu = p.forward_mean(&s);
        let a = p.sample_action(&s, &mut ChaCha8Rng::seed_from_u64(1));
        for (x, m) in a.action.iter().zip(&mu) {
            assert!((x - m).abs() < 1e-10);
        }
    }

    #[test]
    fn empirical_mean_within_clt_bound() {
        let p = small(8, vec![4]);
        let s = [0.5, -0.5];
        let mu = p.forward_mean(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let a = p.sample_around(&mu, &mut rng);
            acc[0] += a.action[0];
            acc[1] += a.action[1];
        }
        for j in 0..2 {
            let sigma = p.log_std()[j].exp();
            let tol = 4.0 * sigma / (n as f64).sqrt();
            assert!((acc[j] / n as f64 - mu[j]).abs() < tol);
        }
    }

    #[test]
    fn gradient_vanishes_on_mean_path_at_the_mean() {
        let p = small(4, vec![5, 5]);
        let s = [0.3, 0.3];
        let mu = p.forward_mean(&s);
        let g = p.log_prob_grad(&s, &mu);
        let off = p.layout().log_std_offset();
        assert!(g[..off].iter().all(|v| v.abs() < 1e-12));
        for v in &g[off..] {
            assert!((v + 1.0).abs() < 1e-12);
        }
    }

    fn central_difference(p: &PolicyParams, s: &[f64], a: &[f64], i: usize, h: f64) -> f64 {
        let mut plus = p.clone();
        plus.flat_mut()[i] += h;
        let mut minus = p.clone();
        minus.flat_mut()[i] -= h;
        (plus.log_prob(s, a) - minus.log_prob(s, a)) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences_small_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..30 {
            let p = small(100 + case, vec![8, 8]);
            let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let g = p.log_prob_grad(&s, &a);
            for (i, &gi) in g.iter().enumerate() {
                let fd = central_difference(&p, &s, &a, i, 1e-5);
                let scale = gi.abs().max(fd.abs()).max(1e-6);
                assert!((gi - fd).abs() / scale < 1e-4, "case {case} coord {i}: {gi} vs {fd}");
            }
        }
    }

    #[test]
    fn weighted_gradient_is_linear_in_coefficients() {
        let p = small(12, vec![5]);
        let states = [0.1, 0.2, -0.4, 0.9, 0.5, -0.5];
        let actions = [0.3, -0.1, 1.2, 0.0, -0.7, 0.4];
        let coef = [0.5, -2.0, 1.5];
        let g = p.weighted_log_prob_grad(&states, &actions, &coef);
        let mut manual = vec![0.0; p.len()];
        for i in 0..3 {
            let gi = p.log_prob_grad(&states[2 * i..2 * i + 2], &actions[2 * i..2 * i + 2]);
            for (m, v) in manual.iter_mut().zip(gi) {
                *m += coef[i] * v;
            }
        }
        for (x, y) in g.iter().zip(&manual) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn jvp_matches_finite_difference_of_mean() {
        let p = small(21, vec![6, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tangent: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let states = [0.2, -0.3, 0.7, 0.1];
        let jv = p.mean_jvp(&states, &tangent);
        let h = 1e-6;
        let mut plus = p.clone();
        plus.apply_step(&tangent, h);
        let mut minus = p.clone();
        minus.apply_step(&tangent, -h);
        let (mp, mm) = (plus.mean_batch(&states), minus.mean_batch(&states));
        for ((a, b), j) in mp.iter().zip(mm.iter()).zip(jv.iter()) {
            assert!(((a - b) / (2.0 * h) - j).abs() < 1e-6);
        }
    }

    #[test]
    fn vjp_is_adjoint_of_jvp() {
        let p = small(22, vec![7, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let jv = p.mean_jvp(&states, &v);
        let jtu = p.mean_vjp(&states, u.clone());
        let lhs: f64 = (&jv * &u).sum();
        let rhs: f64 = jtu.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn kl_zero_for_identical_and_positive_otherwise() {
        let p = small(30, vec![4]);
        let states = [0.0, 0.5, -0.5, 0.25];
        assert!(p.mean_kl(&p, &states).abs() < 1e-15);
        let mut q = p.clone();
        q.log_std_mut()[0] += 0.1;
        assert!(p.mean_kl(&q, &states) > 0.0);
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_garbage() {
        let p = small(40, vec![3, 2]);
        let bytes = p.to_checkpoint_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(PolicyParams::from_checkpoint_bytes(&bytes).unwrap(), p);
        assert!(PolicyParams::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PolicyParams::from_checkpoint_bytes(&bad).is_err());
    }
}
