//! Gamma-family helpers for the k-NN estimators.

use std::f64::consts::PI;

pub use statrs::function::gamma::{digamma, ln_gamma};

/// log of the volume of the unit p-ball, `ln(pi^{p/2} / Gamma(p/2 + 1))`.
pub fn ln_unit_ball_volume(p: usize) -> f64 {
    let half = p as f64 / 2.0;
    half * PI.ln() - ln_gamma(half + 1.0)
}
