//! Rollout records shared by the pre-training and fine-tuning loops.

use rand::Rng;

use crate::env::GridworldConfig;
use crate::error::Result;
use crate::policy::PolicyParams;

/// One length-T rollout in a single environment draw.
///
/// `states` and `actions` are row-major (`len × state_dim`, `len × action_dim`).
/// `actions` are the pre-clip Gaussian draws, so their log-probabilities are
/// exact densities of the behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub config: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    /// log pi_behavior(a_t | s_t) recorded at collection time.
    pub behavior_log_probs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.behavior_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.behavior_log_probs.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    /// Visited states as 2-D points.
    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.states.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    /// `horizon` steps of `params` in `env`, recording states `s_0..s_{T-1}`.
    ///
    /// With `stochastic = false` the mean action is taken and the recorded
    /// log-probabilities are those of the mean under the Gaussian.
    pub fn rollout<R: Rng + ?Sized>(
        env: &GridworldConfig,
        config: usize,
        params: &PolicyParams,
        horizon: usize,
        stochastic: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let q = params.action_dim();
        let mut states = Vec::with_capacity(2 * horizon);
        let mut actions = Vec::with_capacity(q * horizon);
        let mut logp = Vec::with_capacity(horizon);
        let mut s = env.reset(rng);
        for _ in 0..horizon {
            states.extend_from_slice(&s);
            let mean = params.forward_mean(&s);
            let (a, lp) = if stochastic {
                let sample = params.sample_around(&mean, rng);
                (sample.action, sample.log_prob)
            } else {
                let lp = params.log_prob(&s, &mean);
                (mean, lp)
            };
            s = env.step(s, &a, rng)?;
            actions.extend_from_slice(&a);
            logp.push(lp);
        }
        Ok(Self {
            config,
            state_dim: 2,
            action_dim: q,
            states,
            actions,
            behavior_log_probs: logp,
        })
    }
}
