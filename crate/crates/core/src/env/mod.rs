//! Reward-free environments: continuous gridworlds, classes over them,
//! finite tabular processes and sparse goal tasks.

pub mod class;
pub mod gridworld;
pub mod tabular;
pub mod task;

pub use class::EnvironmentClass;
pub use gridworld::{GridworldConfig, Rect, Slope, SlopeDirection, SlopeRegion};
pub use tabular::TabularCMP;
pub use task::{task_reward, GoalTask};
