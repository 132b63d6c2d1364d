//! CVaR state-entropy pre-training with an importance-weighted off-policy
//! inner loop.
//!
//! Each epoch collects `N` trajectories grouped into `N/B` mini-batches, every
//! mini-batch drawn from a single environment sample. The inner loop then
//! repeatedly re-weights the fixed particles for the current parameters,
//! re-estimates each mini-batch entropy, and ascends the CVaR gradient until
//! the pooled KL estimate leaves the trust region.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::{
    cumulative_log_ratios, iw_entropy_from_table, iw_kl_from_table, knn_entropy_from_table,
    log_sum_exp,
};
use crate::env::EnvironmentClass;
use crate::error::{Error, Result};
use crate::knn::NeighborTable;
use crate::policy::{PolicyLayout, PolicyParams};
use crate::risk::{accumulate, cvar_selection, BatchScore, RiskConfig};
use crate::seeding::{self, tag};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    /// Trajectory length T.
    pub horizon: usize,
    /// Trajectories per epoch N.
    pub trajectories: usize,
    /// Trajectories per mini-batch B.
    pub batch_size: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    /// Trust-region radius on the pooled KL estimate.
    pub kl_threshold: f64,
    /// Neighbors of the k-NN estimators.
    pub k: usize,
    pub max_offpolicy_iters: usize,
    pub seed: u64,
    /// Subtract the VaR baseline (only the included batches move).
    pub baseline: bool,
    /// Hidden layer widths of the policy mean network.
    pub hidden: Vec<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            horizon: 400,
            trajectories: 200,
            batch_size: 5,
            alpha: 0.2,
            learning_rate: 1e-5,
            kl_threshold: 15.0,
            k: 30,
            max_offpolicy_iters: 30,
            seed: 0,
            baseline: true,
            hidden: vec![300, 300],
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon == 0 || self.trajectories == 0 || self.batch_size == 0 {
            return fail("horizon, trajectories and batch_size must be positive");
        }
        if !self.trajectories.is_multiple_of(self.batch_size) {
            return fail("trajectories must be divisible by batch_size");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail("alpha must lie in (0, 1]");
        }
        if !(self.kl_threshold > 0.0) {
            return fail("kl_threshold must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and nonnegative");
        }
        if self.k == 0 || self.batch_size * self.horizon <= self.k {
            return fail("k must be positive and smaller than batch_size * horizon");
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive");
        }
        Ok(())
    }

    pub fn batches(&self) -> usize {
        self.trajectories / self.batch_size
    }

    pub fn layout(&self) -> PolicyLayout {
        PolicyLayout::new(2, self.hidden.clone(), 2)
    }

    pub fn risk(&self) -> RiskConfig {
        RiskConfig {
            alpha: self.alpha,
            baseline_enabled: self.baseline,
        }
    }

    /// Initial parameters drawn from the config's seed.
    pub fn initial_params(&self) -> PolicyParams {
        PolicyParams::init(self.layout(), &mut seeding::stream(self.seed, &[tag::POLICY_INIT]))
    }
}

/// B trajectories from one environment draw.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub id: usize,
    pub config: usize,
    pub trajectories: Vec<Trajectory>,
}

/// One epoch's samples together with the policy that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectedBatch {
    pub behavior: PolicyParams,
    pub minibatches: Vec<MiniBatch>,
}

impl CollectedBatch {
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.minibatches.iter().flat_map(|m| &m.trajectories)
    }
}

/// Sample `N/B` mini-batches with `params`. `round` selects the random streams.
pub fn collect_batch(
    params: &PolicyParams,
    class: &EnvironmentClass,
    config: &TrainerConfig,
    round: u64,
) -> Result<CollectedBatch> {
    config.validate()?;
    let b = config.batch_size;
    let choices: Vec<usize> = (0..config.batches())
        .map(|i| {
            class.sample_environment(&mut seeding::stream(
                config.seed,
                &[tag::ENV_CHOICE, round, i as u64],
            ))
        })
        .collect();
    let trajectories: Vec<Trajectory> = (0..config.trajectories)
        .into_par_iter()
        .map(|j| {
            let env_idx = choices[j / b];
            let mut rng = seeding::stream(
                config.seed,
                &[tag::ROLLOUT, round, (j / b) as u64, (j % b) as u64],
            );
            Trajectory::rollout(
                &class.configs[env_idx],
                env_idx,
                params,
                config.horizon,
                true,
                &mut rng,
            )
        })
        .collect::<Result<_>>()?;
    let mut iter = trajectories.into_iter();
    let minibatches = choices
        .iter()
        .enumerate()
        .map(|(id, &cfg)| MiniBatch {
            id,
            config: cfg,
            trajectories: iter.by_ref().take(b).collect(),
        })
        .collect();
    Ok(CollectedBatch {
        behavior: params.clone(),
        minibatches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean mini-batch entropy per config; NaN for configs not drawn.
    pub per_config_entropy: Vec<f64>,
    pub mean_entropy: f64,
    pub cvar_entropy: f64,
    pub var: f64,
    pub offpolicy_steps: usize,
    /// Pooled KL estimate of the returned parameters.
    pub kl: f64,
}

/// Outcome of one gradient evaluation in the inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStep {
    pub entropies: Vec<f64>,
    pub var: f64,
    /// `(mini-batch index, coefficient)` of the included batches, by id.
    pub picked: Vec<(usize, f64)>,
    pub gradient: Vec<f64>,
}

/// Particles of one epoch with their neighbor tables, which stay fixed across
/// inner iterations since only the weights change.
pub struct EpochData {
    batch: CollectedBatch,
    states: Vec<f64>,
    actions: Vec<f64>,
    behavior_log_probs: Vec<f64>,
    horizon: usize,
    batch_size: usize,
    batch_tables: Vec<NeighborTable>,
    pooled_table: NeighborTable,
}

impl EpochData {
    pub fn new(batch: CollectedBatch, k: usize) -> Result<Self> {
        let first = batch
            .minibatches
            .first()
            .and_then(|m| m.trajectories.first())
            .ok_or(Error::EmptyBatch)?;
        let horizon = first.len();
        let batch_size = batch.minibatches[0].trajectories.len();
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut behavior_log_probs = Vec::new();
        for m in &batch.minibatches {
            if m.trajectories.len() != batch_size {
                return Err(Error::invalid("mini-batches differ in size"));
            }
            for t in &m.trajectories {
                if t.len() != horizon || t.state_dim != 2 {
                    return Err(Error::invalid("trajectories differ in shape"));
                }
                states.extend_from_slice(&t.states);
                actions.extend_from_slice(&t.actions);
                behavior_log_probs.extend_from_slice(&t.behavior_log_probs);
            }
        }
        let span = 2 * batch_size * horizon;
        let batch_tables = (0..batch.minibatches.len())
            .into_par_iter()
            .map(|i| NeighborTable::build(&states[i * span..(i + 1) * span], 2, k))
            .collect::<Result<Vec<_>>>()?;
        let pooled_table = NeighborTable::build(&states, 2, k)?;
        Ok(Self {
            batch,
            states,
            actions,
            behavior_log_probs,
            horizon,
            batch_size,
            batch_tables,
            pooled_table,
        })
    }

    pub fn batch(&self) -> &CollectedBatch {
        &self.batch
    }

    fn particles_per_batch(&self) -> usize {
        self.batch_size * self.horizon
    }

    fn batch_range(&self, i: usize) -> std::ops::Range<usize> {
        let n = self.particles_per_batch();
        i * n..(i + 1) * n
    }

    /// Per-particle cumulative log importance ratios of `theta` against the
    /// behavior policy (trajectory-wise products, in log space).
    pub fn log_ratios(&self, theta: &PolicyParams) -> Result<Vec<f64>> {
        let t = self.horizon;
        let chunks: Vec<Vec<f64>> = (0..self.behavior_log_probs.len() / t)
            .into_par_iter()
            .map(|j| {
                let lp = theta.log_prob_batch(
                    &self.states[2 * j * t..2 * (j + 1) * t],
                    &self.actions[2 * j * t..2 * (j + 1) * t],
                );
                cumulative_log_ratios(&lp, &self.behavior_log_probs[j * t..(j + 1) * t])
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }

    /// KL estimate over all particles pooled as one sample.
    pub fn pooled_kl(&self, log_raw: &[f64]) -> Result<f64> {
        let lse = log_sum_exp(log_raw);
        let log_w: Vec<f64> = log_raw.iter().map(|v| v - lse).collect();
        iw_kl_from_table(&self.pooled_table, &log_w)
    }

    /// Per-mini-batch entropy estimates; `None` means the behavior policy itself.
    pub fn entropies(&self, log_raw: Option<&[f64]>) -> Result<Vec<f64>> {
        (0..self.batch_tables.len())
            .into_par_iter()
            .map(|i| {
                let table = &self.batch_tables[i];
                let est = match log_raw {
                    None => knn_entropy_from_table(table, 2)?,
                    Some(lr) => {
                        let slice = &lr[self.batch_range(i)];
                        let lse = log_sum_exp(slice);
                        let log_w: Vec<f64> = slice.iter().map(|v| v - lse).collect();
                        iw_entropy_from_table(table, 2, &log_w)?
                    }
                };
                Ok(est.value)
            })
            .collect()
    }

    /// Score accumulator of mini-batch `i`: `sum_s (BT w_s) grad log theta(a_s|s_s)`
    /// with `w` normalized over the batch's particles. Uniform weights give
    /// multipliers of exactly one.
    pub fn score(&self, theta: &PolicyParams, i: usize, log_raw: Option<&[f64]>) -> Vec<f64> {
        let r = self.batch_range(i);
        let mult = match log_raw {
            None => vec![1.0; r.len()],
            Some(lr) => {
                let slice = &lr[r.clone()];
                let lse = log_sum_exp(slice);
                let ln_n = (r.len() as f64).ln();
                slice.iter().map(|v| ((v - lse) + ln_n).exp()).collect()
            }
        };
        theta.weighted_log_prob_grad(
            &self.states[2 * r.start..2 * r.end],
            &self.actions[2 * r.start..2 * r.end],
            &mult,
        )
    }

    /// Entropy and score of every mini-batch.
    pub fn batch_scores(&self, theta: &PolicyParams, log_raw: Option<&[f64]>) -> Result<Vec<BatchScore>> {
        let entropies = self.entropies(log_raw)?;
        Ok(entropies
            .into_iter()
            .enumerate()
            .map(|(i, entropy)| BatchScore {
                entropy,
                score: self.score(theta, i, log_raw),
                batch_id: self.batch.minibatches[i].id,
            })
            .collect())
    }

    /// CVaR gradient at `theta`; scores are only formed for included batches.
    pub fn gradient(
        &self,
        theta: &PolicyParams,
        log_raw: Option<&[f64]>,
        risk: RiskConfig,
    ) -> Result<GradientStep> {
        let entropies = self.entropies(log_raw)?;
        let ids: Vec<usize> = self.batch.minibatches.iter().map(|m| m.id).collect();
        let (var, picked) = cvar_selection(&entropies, &ids, risk)?;
        let scores: Vec<Vec<f64>> = picked
            .par_iter()
            .map(|&(i, _)| self.score(theta, i, log_raw))
            .collect();
        let gradient = accumulate(
            theta.len(),
            picked.iter().zip(&scores).map(|(&(_, c), s)| (c, s.as_slice())),
        );
        Ok(GradientStep {
            entropies,
            var,
            picked,
            gradient,
        })
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Inner trust-region loop over one epoch's samples.
///
/// Coincident states in a mini-batch make its entropy `-inf`; the epoch then
/// keeps the behavior parameters and reports NaN entropies.
pub fn offpolicy_update(
    data: &EpochData,
    config: &TrainerConfig,
    n_configs: usize,
    epoch: usize,
) -> Result<(PolicyParams, EpochReport)> {
    let risk = config.risk();
    let behavior = &data.batch.behavior;
    let mut theta = behavior.clone();

    let first = match data.gradient(&theta, None, risk) {
        Ok(step) => step,
        Err(Error::DegenerateGeometry { index }) => {
            log::warn!("epoch {epoch}: coincident states (particle {index}), update skipped");
            let report = EpochReport {
                epoch,
                per_config_entropy: vec![f64::NAN; n_configs],
                mean_entropy: f64::NAN,
                cvar_entropy: f64::NAN,
                var: f64::NAN,
                offpolicy_steps: 0,
                kl: 0.0,
            };
            return Ok((theta, report));
        }
        Err(e) => return Err(e),
    };
    let minibatches = &data.batch.minibatches;
    let per_config_entropy = (0..n_configs)
        .map(|c| {
            mean(
                minibatches
                    .iter()
                    .zip(&first.entropies)
                    .filter(|(m, _)| m.config == c)
                    .map(|(_, &h)| h),
            )
        })
        .collect();
    let mut report = EpochReport {
        epoch,
        per_config_entropy,
        mean_entropy: mean(first.entropies.iter().copied()),
        cvar_entropy: mean(first.picked.iter().map(|&(i, _)| first.entropies[i])),
        var: first.var,
        offpolicy_steps: 0,
        kl: 0.0,
    };

    let mut step = first;
    for h in 1..=config.max_offpolicy_iters {
        let mut next = theta.clone();
        next.apply_step(&step.gradient, config.learning_rate);
        let log_raw = match data.log_ratios(&next) {
            Ok(v) => v,
            Err(Error::NonFiniteWeight { .. }) => break,
            Err(e) => return Err(e),
        };
        let kl = match data.pooled_kl(&log_raw) {
            Ok(v) if v.is_finite() && v <= config.kl_threshold => v,
            Ok(_) | Err(Error::DegenerateWeights { .. }) => break,
            Err(e) => return Err(e),
        };
        theta = next;
        report.offpolicy_steps = h;
        report.kl = kl;
        if h == config.max_offpolicy_iters {
            break;
        }
        step = data.gradient(&theta, Some(&log_raw), risk)?;
    }
    Ok((theta, report))
}

/// Pre-train from `init`, calling `on_epoch` after every epoch with the report,
/// the updated parameters and the epoch's samples.
pub fn pretrain_from<F>(
    config: &TrainerConfig,
    class: &EnvironmentClass,
    init: PolicyParams,
    mut on_epoch: F,
) -> Result<(PolicyParams, Vec<EpochReport>)>
where
    F: FnMut(&EpochReport, &PolicyParams, &CollectedBatch) -> Result<()>,
{
    config.validate()?;
    class.validate()?;
    if init.layout() != &config.layout() {
        return Err(Error::invalid("initial parameters do not match the configured layout"));
    }
    let mut params = init;
    let mut reports = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batch = collect_batch(&params, class, config, epoch as u64)?;
        let data = EpochData::new(batch, config.k)?;
        let (next, report) = offpolicy_update(&data, config, class.len(), epoch)?;
        log::info!(
            "epoch {epoch}: mean {:.4} cvar {:.4} var {:.4} steps {} kl {:.3}",
            report.mean_entropy,
            report.cvar_entropy,
            report.var,
            report.offpolicy_steps,
            report.kl
        );
        params = next;
        on_epoch(&report, &params, data.batch())?;
        reports.push(report);
    }
    Ok((params, reports))
}

/// Pre-train from the seeded initialization.
pub fn pretrain(config: &TrainerConfig, class: &EnvironmentClass) -> Result<(PolicyParams, Vec<EpochReport>)> {
    pretrain_from(config, class, config.initial_params(), |_, _, _| Ok(()))
}

/// Mean on-policy entropy of `batches` mini-batches of `config.batch_size`
/// trajectories, all drawn in environment `env_index`.
pub fn evaluate_entropy(
    params: &PolicyParams,
    class: &EnvironmentClass,
    env_index: usize,
    config: &TrainerConfig,
    batches: usize,
    seed: u64,
) -> Result<f64> {
    let env = class
        .configs
        .get(env_index)
        .ok_or_else(|| Error::invalid(format!("no environment {env_index}")))?;
    let b = config.batch_size;
    let values = (0..batches)
        .into_par_iter()
        .map(|i| {
            let mut points = Vec::with_capacity(2 * b * config.horizon);
            for j in 0..b {
                let mut rng = seeding::stream(seed, &[tag::EVALUATION, env_index as u64, i as u64, j as u64]);
                let t = Trajectory::rollout(env, env_index, params, config.horizon, true, &mut rng)?;
                points.extend_from_slice(&t.states);
            }
            let table = NeighborTable::build(&points, 2, config.k)?;
            Ok(knn_entropy_from_table(&table, 2)?.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(values.into_iter()))
}
