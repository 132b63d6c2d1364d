//! Non-parametric k-NN estimators of differential entropy and KL divergence,
//! on-policy and importance-weighted.
//!
//! All entropy estimates use the bias-corrected form
//!
//! ```text
//! H = -sum_t c_t * ln( Gamma(p/2 + 1) * m_t / (r_t^p * pi^{p/2}) ) + ln k - psi(k)
//! ```
//!
//! where `r_t` is the distance from sample `t` to its k-th neighbor and
//! `(c_t, m_t)` is `(1/T, k/T)` on-policy and `(W_t/k, W_t)` with
//! `W_t = sum_{j in N_t} w_j` when importance weighted.

use crate::error::{Error, Result};
use crate::knn::NeighborTable;
use crate::policy::PolicyParams;
use crate::special::{digamma, ln_unit_ball_volume};
use crate::trajectory::Trajectory;

/// A `T × p` set of state samples drawn from one trajectory (or one pooled
/// mini-batch).
#[derive(Debug, Clone, PartialEq)]
pub struct StateSample {
    points: Vec<f64>,
    dim: usize,
    pub source_trajectory_id: usize,
}

impl StateSample {
    pub fn new(points: Vec<f64>, dim: usize, source_trajectory_id: usize) -> Result<Self> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return Err(Error::invalid("points do not form a T x p matrix"));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite coordinate at sample {}", i / dim)));
        }
        Ok(Self {
            points,
            dim,
            source_trajectory_id,
        })
    }

    pub fn from_trajectory(traj: &Trajectory, id: usize) -> Result<Self> {
        Self::new(traj.states.clone(), traj.state_dim, id)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn neighbor_table(&self, k: usize) -> Result<NeighborTable> {
        NeighborTable::build(&self.points, self.dim, k)
    }
}

/// Per-particle importance weights: raw likelihood ratios and their
/// self-normalized counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    raw: Vec<f64>,
    normalized: Vec<f64>,
    log_normalized: Vec<f64>,
}

impl ImportanceWeights {
    /// From per-particle log likelihood ratios `ln raw[t]`. Normalization
    /// happens in log space, so products over hundreds of steps neither
    /// overflow nor underflow before they are compared.
    pub fn from_log_raw(log_raw: &[f64]) -> Result<Self> {
        if log_raw.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(step) = log_raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteWeight { step });
        }
        let lse = log_sum_exp(log_raw);
        let log_normalized: Vec<f64> = log_raw.iter().map(|v| v - lse).collect();
        Ok(Self {
            raw: log_raw.iter().map(|v| v.exp()).collect(),
            normalized: log_normalized.iter().map(|v| v.exp()).collect(),
            log_normalized,
        })
    }

    /// All particles weighted `1/T`.
    pub fn uniform(len: usize) -> Result<Self> {
        Self::from_log_raw(&vec![0.0; len])
    }

    /// From nonnegative weights (need not sum to one).
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(step) = raw.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFiniteWeight { step });
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateWeights { index: 0 });
        }
        let normalized: Vec<f64> = raw.iter().map(|v| v / total).collect();
        Ok(Self {
            raw: raw.to_vec(),
            log_normalized: normalized.iter().map(|v| v.ln()).collect(),
            normalized,
        })
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn log_normalized(&self) -> &[f64] {
        &self.log_normalized
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyEstimate {
    pub value: f64,
    pub k: usize,
    pub sample_count: usize,
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cumulative log ratios `sum_{z<=t} (ln target(a_z|s_z) - ln behavior(a_z|s_z))`.
pub fn cumulative_log_ratios(target_log_probs: &[f64], behavior_log_probs: &[f64]) -> Result<Vec<f64>> {
    if target_log_probs.len() != behavior_log_probs.len() {
        return Err(Error::DimensionMismatch {
            expected: behavior_log_probs.len(),
            got: target_log_probs.len(),
        });
    }
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(target_log_probs.len());
    for (step, (t, b)) in target_log_probs.iter().zip(behavior_log_probs).enumerate() {
        let r = t - b;
        if !r.is_finite() {
            return Err(Error::NonFiniteWeight { step });
        }
        acc += r;
        out.push(acc);
    }
    Ok(out)
}

/// Importance weights of the particles of `trajectory` for `target` against
/// the `behavior` policy that generated it.
pub fn importance_weights(
    trajectory: &Trajectory,
    target: &PolicyParams,
    behavior: &PolicyParams,
) -> Result<ImportanceWeights> {
    if target.layout() != behavior.layout() {
        return Err(Error::invalid("target and behavior policies have different layouts"));
    }
    if trajectory.actions.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("trajectory actions must be finite"));
    }
    let lp_target = target.log_prob_batch(&trajectory.states, &trajectory.actions);
    let lp_behavior = behavior.log_prob_batch(&trajectory.states, &trajectory.actions);
    ImportanceWeights::from_log_raw(&cumulative_log_ratios(&lp_target, &lp_behavior)?)
}

fn check_geometry(table: &NeighborTable) -> Result<()> {
    match (0..table.len()).find(|&i| table.kth_distance(i) == 0.0) {
        Some(index) => Err(Error::DegenerateGeometry { index }),
        None => Ok(()),
    }
}

/// On-policy estimate from a prebuilt neighbor table over `dim`-dimensional points.
pub fn knn_entropy_from_table(table: &NeighborTable, dim: usize) -> Result<EntropyEstimate> {
    check_geometry(table)?;
    let (k, n) = (table.k(), table.len());
    let p = dim as f64;
    let ln_ball = ln_unit_ball_volume(dim);
    let ln_mass = (k as f64).ln() - (n as f64).ln();
    let sum: f64 = (0..n)
        .map(|t| ln_mass - p * table.kth_distance(t).ln() - ln_ball)
        .sum();
    Ok(EntropyEstimate {
        value: -sum / n as f64 + (k as f64).ln() - digamma(k as f64),
        k,
        sample_count: n,
    })
}

pub fn knn_entropy(sample: &StateSample, k: usize) -> Result<EntropyEstimate> {
    let table = sample.neighbor_table(k)?;
    knn_entropy_from_table(&table, sample.dim())
}

/// Importance-weighted estimate from log-normalized weights. Particles whose
/// neighborhood carries no weight contribute nothing.
pub fn iw_entropy_from_table(
    table: &NeighborTable,
    dim: usize,
    log_weights: &[f64],
) -> Result<EntropyEstimate> {
    if log_weights.len() != table.len() {
        return Err(Error::DimensionMismatch {
            expected: table.len(),
            got: log_weights.len(),
        });
    }
    check_geometry(table)?;
    let k = table.k();
    let p = dim as f64;
    let ln_ball = ln_unit_ball_volume(dim);
    let mut buf = vec![0.0; k];
    let mut sum = 0.0;
    for t in 0..table.len() {
        for (b, &j) in buf.iter_mut().zip(table.neighbors(t)) {
            *b = log_weights[j as usize];
        }
        let ln_mass = log_sum_exp(&buf);
        if ln_mass == f64::NEG_INFINITY {
            continue;
        }
        let mass = ln_mass.exp();
        sum += mass / k as f64 * (ln_mass - p * table.kth_distance(t).ln() - ln_ball);
    }
    Ok(EntropyEstimate {
        value: -sum + (k as f64).ln() - digamma(k as f64),
        k,
        sample_count: table.len(),
    })
}

pub fn iw_entropy(sample: &StateSample, weights: &ImportanceWeights, k: usize) -> Result<EntropyEstimate> {
    let table = sample.neighbor_table(k)?;
    iw_entropy_from_table(&table, sample.dim(), weights.log_normalized())
}

/// `(1/T) sum_t ln((k/T) / W_t)` with neighborhood masses summed in log space.
pub fn iw_kl_from_table(table: &NeighborTable, log_weights: &[f64]) -> Result<f64> {
    if log_weights.len() != table.len() {
        return Err(Error::DimensionMismatch {
            expected: table.len(),
            got: log_weights.len(),
        });
    }
    let (k, n) = (table.k(), table.len());
    let ln_uniform = (k as f64).ln() - (n as f64).ln();
    let mut buf = vec![0.0; k];
    let mut sum = 0.0;
    for t in 0..n {
        for (b, &j) in buf.iter_mut().zip(table.neighbors(t)) {
            *b = log_weights[j as usize];
        }
        let ln_mass = log_sum_exp(&buf);
        if ln_mass == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights { index: t });
        }
        sum += ln_uniform - ln_mass;
    }
    Ok(sum / n as f64)
}

pub fn iw_kl(sample: &StateSample, weights: &ImportanceWeights, k: usize) -> Result<f64> {
    let table = sample.neighbor_table(k)?;
    iw_kl_from_table(&table, weights.log_normalized())
}
