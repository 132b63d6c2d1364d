//! Sparse goal-reaching tasks on top of a gridworld config.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gridworld::GridworldConfig;
use crate::error::{Error, Result};

pub const DEFAULT_GOAL_RADIUS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalTask {
    /// Index of the base config within its environment class.
    pub config: usize,
    pub goal: [f64; 2],
    pub radius: f64,
}

impl GoalTask {
    pub fn new(config: usize, goal: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::invalid("goal radius must be positive"));
        }
        if !(goal[0].is_finite() && goal[1].is_finite()) {
            return Err(Error::invalid("goal must be finite"));
        }
        Ok(Self {
            config,
            goal,
            radius,
        })
    }

    /// Goal drawn uniformly over the free space of `env` by rejection.
    pub fn random<R: Rng + ?Sized>(
        config: usize,
        env: &GridworldConfig,
        radius: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let h = env.half_side();
        loop {
            let p = [rng.random_range(-h..h), rng.random_range(-h..h)];
            if env.is_free(p) {
                return Self::new(config, p, radius);
            }
        }
    }

    /// 1 inside the closed goal disk, 0 elsewhere.
    pub fn reward(&self, state: [f64; 2]) -> f64 {
        let d = (state[0] - self.goal[0]).hypot(state[1] - self.goal[1]);
        if d <= self.radius {
            1.0
        } else {
            0.0
        }
    }
}

pub fn task_reward(task: &GoalTask, state: [f64; 2]) -> f64 {
    task.reward(state)
}
