//! Trust-region policy fine-tuning on sparse goal tasks.
//!
//! Critic-free: advantages are discounted rewards-to-go minus their batch
//! mean. The step direction solves `F x = g` by conjugate gradient with the
//! analytic Fisher matrix of the Gaussian policy, and a halving line search
//! enforces the sampled KL limit and a nonnegative surrogate improvement.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{GoalTask, GridworldConfig};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::seeding::{self, tag};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitSource {
    Random,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub horizon: usize,
    /// Environment steps collected per iteration (rounded up to whole trajectories).
    pub steps_per_iter: usize,
    pub kl_limit: f64,
    pub discount: f64,
    pub seed: u64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_steps: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            horizon: 400,
            steps_per_iter: 12_000,
            kl_limit: 1e-4,
            discount: 0.99,
            seed: 0,
            cg_iters: 10,
            cg_damping: 1e-2,
            backtrack_steps: 10,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon == 0 || self.steps_per_iter == 0 {
            return fail("horizon and steps_per_iter must be positive");
        }
        if !(self.kl_limit > 0.0) {
            return fail("kl_limit must be positive");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return fail("discount must lie in (0, 1]");
        }
        if !(self.cg_damping >= 0.0) {
            return fail("cg_damping must be nonnegative");
        }
        Ok(())
    }

    pub fn episodes_per_iter(&self) -> usize {
        self.steps_per_iter.div_ceil(self.horizon)
    }
}

/// Per-iteration statistics of a fine-tuning run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReturnCurve {
    /// Average undiscounted return of the trajectories collected at each iteration.
    pub returns: Vec<f64>,
    /// Sampled KL between the policies before and after each update (0 when rejected).
    pub kl: Vec<f64>,
    /// Whether the line search accepted a step.
    pub accepted: Vec<bool>,
}

impl ReturnCurve {
    pub fn final_return(&self) -> f64 {
        self.returns.last().copied().unwrap_or(f64::NAN)
    }

    /// Area under the curve (sum of per-iteration returns).
    pub fn auc(&self) -> f64 {
        self.returns.iter().sum()
    }
}

struct Rollouts {
    states: Vec<f64>,
    actions: Vec<f64>,
    advantages: Vec<f64>,
    mean_return: f64,
}

fn collect(
    params: &PolicyParams,
    env: &GridworldConfig,
    task: &GoalTask,
    config: &FinetuneConfig,
    iteration: usize,
) -> Result<Rollouts> {
    let trajs = (0..config.episodes_per_iter())
        .into_par_iter()
        .map(|j| {
            let mut rng = seeding::stream(config.seed, &[tag::FINETUNE, iteration as u64, j as u64]);
            Trajectory::rollout(env, task.config, params, config.horizon, true, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut to_go = Vec::new();
    let mut total = 0.0;
    for t in &trajs {
        states.extend_from_slice(&t.states);
        actions.extend_from_slice(&t.actions);
        let rewards: Vec<f64> = t.points().map(|s| task.reward(s)).collect();
        total += rewards.iter().sum::<f64>();
        let mut g = vec![0.0; rewards.len()];
        let mut acc = 0.0;
        for i in (0..rewards.len()).rev() {
            acc = rewards[i] + config.discount * acc;
            g[i] = acc;
        }
        to_go.extend(g);
    }
    let baseline = to_go.iter().sum::<f64>() / to_go.len() as f64;
    Ok(Rollouts {
        states,
        actions,
        advantages: to_go.into_iter().map(|g| g - baseline).collect(),
        mean_return: total / trajs.len() as f64,
    })
}

/// Fisher-vector product averaged over `states`, plus damping.
fn fisher_vector_product(params: &PolicyParams, states: &[f64], v: &[f64], damping: f64) -> Vec<f64> {
    let n = (states.len() / params.state_dim()) as f64;
    let inv_var: Vec<f64> = params.log_std().iter().map(|ls| (-2.0 * ls).exp()).collect();
    let mut jv = params.mean_jvp(states, v);
    for mut row in jv.rows_mut() {
        for (x, w) in row.iter_mut().zip(&inv_var) {
            *x *= w / n;
        }
    }
    let mut out = params.mean_vjp(states, jv);
    let off = params.layout().log_std_offset();
    for (o, x) in out[off..].iter_mut().zip(&v[off..]) {
        *o = 2.0 * x;
    }
    for (o, x) in out.iter_mut().zip(v) {
        *o += damping * x;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conjugate_gradient<F: Fn(&[f64]) -> Vec<f64>>(apply: F, b: &[f64], iters: usize) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    for _ in 0..iters {
        if rr < 1e-20 {
            break;
        }
        let ap = apply(&p);
        let alpha = rr / dot(&p, &ap);
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    x
}

fn surrogate(params: &PolicyParams, old_log_probs: &[f64], data: &Rollouts) -> f64 {
    let lp = params.log_prob_batch(&data.states, &data.actions);
    let n = lp.len() as f64;
    lp.iter()
        .zip(old_log_probs)
        .zip(&data.advantages)
        .map(|((l, o), a)| (l - o).exp() * a)
        .sum::<f64>()
        / n
}

/// Outcome of one update: new parameters, sampled KL, acceptance.
fn trpo_step(params: &PolicyParams, data: &Rollouts, config: &FinetuneConfig) -> (PolicyParams, f64, bool) {
    let n = data.advantages.len() as f64;
    let coef: Vec<f64> = data.advantages.iter().map(|a| a / n).collect();
    let g = params.weighted_log_prob_grad(&data.states, &data.actions, &coef);
    if g.iter().all(|&v| v == 0.0) {
        return (params.clone(), 0.0, false);
    }
    let fvp = |v: &[f64]| fisher_vector_product(params, &data.states, v, config.cg_damping);
    let x = conjugate_gradient(fvp, &g, config.cg_iters);
    let shs = dot(&x, &fisher_vector_product(params, &data.states, &x, config.cg_damping));
    if !(shs > 0.0 && shs.is_finite()) {
        return (params.clone(), 0.0, false);
    }
    let full = (2.0 * config.kl_limit / shs).sqrt();
    let old_lp = params.log_prob_batch(&data.states, &data.actions);
    let base = surrogate(params, &old_lp, data);
    let mut scale = full;
    for _ in 0..config.backtrack_steps {
        let mut candidate = params.clone();
        candidate.apply_step(&x, scale);
        let kl = params.mean_kl(&candidate, &data.states);
        let gain = surrogate(&candidate, &old_lp, data) - base;
        if kl.is_finite() && kl <= config.kl_limit && gain >= 0.0 {
            return (candidate, kl, true);
        }
        scale *= 0.5;
    }
    (params.clone(), 0.0, false)
}

/// Fine-tune `init` on `task` in `env`; returns the final parameters and the curve.
pub fn finetune(
    task: &GoalTask,
    env: &GridworldConfig,
    init: PolicyParams,
    config: &FinetuneConfig,
) -> Result<(PolicyParams, ReturnCurve)> {
    config.validate()?;
    let mut params = init;
    let mut curve = ReturnCurve::default();
    for it in 0..config.iterations {
        let data = collect(&params, env, task, config, it)?;
        curve.returns.push(data.mean_return);
        let (next, kl, accepted) = trpo_step(&params, &data, config);
        if !accepted {
            log::debug!("iteration {it}: line search found no acceptable step");
        }
        curve.kl.push(kl);
        curve.accepted.push(accepted);
        params = next;
    }
    Ok((params, curve))
}

/// Average undiscounted return of the mean-action policy over `episodes` rollouts.
pub fn evaluate_return(
    params: &PolicyParams,
    env: &GridworldConfig,
    task: &GoalTask,
    horizon: usize,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::invalid("episodes must be at least 1"));
    }
    let returns = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = seeding::stream(seed, &[tag::EVALUATION, e as u64]);
            let t = Trajectory::rollout(env, task.config, params, horizon, false, &mut rng)?;
            Ok(t.points().map(|s| task.reward(s)).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(returns.iter().sum::<f64>() / episodes as f64)
}
