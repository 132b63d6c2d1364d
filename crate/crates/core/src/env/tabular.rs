//! Finite controlled Markov processes with exact state-distribution recursions.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// `P[s, a, s']` together with the initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCMP {
    transitions: Array3<f64>,
    initial: Array1<f64>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::invalid(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// Row-normalized draw of independent exponentials (uniform on the simplex).
pub fn random_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Policy with independently random action distributions in every state.
pub fn random_policy<R: Rng + ?Sized>(states: usize, actions: usize, rng: &mut R) -> Array2<f64> {
    let mut pi = Array2::zeros((states, actions));
    for mut row in pi.rows_mut() {
        row.assign(&Array1::from(random_distribution(actions, rng)));
    }
    pi
}

impl TabularCMP {
    pub fn new(transitions: Array3<f64>, initial: Array1<f64>) -> Result<Self> {
        let (s, a, s2) = transitions.dim();
        if s == 0 || a == 0 {
            return Err(Error::invalid("CMP needs at least one state and action"));
        }
        if s2 != s || initial.len() != s {
            return Err(Error::DimensionMismatch {
                expected: s,
                got: if s2 != s { s2 } else { initial.len() },
            });
        }
        for (i, row) in transitions.lanes(Axis(2)).into_iter().enumerate() {
            check_distribution(
                &row.to_vec(),
                &format!("transition row ({}, {})", i / a, i % a),
            )?;
        }
        check_distribution(&initial.to_vec(), "initial distribution")?;
        Ok(Self {
            transitions,
            initial,
        })
    }

    /// Kernel with every `P(. | s, a)` drawn uniformly from the simplex.
    pub fn random<R: Rng + ?Sized>(
        states: usize,
        actions: usize,
        initial: Array1<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Array3::zeros((states, actions, states));
        for mut row in p.lanes_mut(Axis(2)) {
            row.assign(&Array1::from(random_distribution(states, rng)));
        }
        Self::new(p, initial)
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.dim().1
    }

    pub fn transitions(&self) -> &Array3<f64> {
        &self.transitions
    }

    pub fn initial(&self) -> &Array1<f64> {
        &self.initial
    }

    fn check_policy(&self, policy: &Array2<f64>) -> Result<()> {
        if policy.dim() != (self.n_states(), self.n_actions()) {
            return Err(Error::DimensionMismatch {
                expected: self.n_states() * self.n_actions(),
                got: policy.len(),
            });
        }
        for (s, row) in policy.rows().into_iter().enumerate() {
            check_distribution(&row.to_vec(), &format!("policy row {s}"))?;
        }
        Ok(())
    }

    /// State-to-state kernel `P^pi(s' | s) = sum_a pi(a | s) P(s' | s, a)`.
    pub fn policy_kernel(&self, policy: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_policy(policy)?;
        let n = self.n_states();
        let mut k = Array2::zeros((n, n));
        for s in 0..n {
            for a in 0..self.n_actions() {
                let w = policy[[s, a]];
                for s2 in 0..n {
                    k[[s, s2]] += w * self.transitions[[s, a, s2]];
                }
            }
        }
        Ok(k)
    }

    /// Average of the state distributions at steps `0..horizon`.
    pub fn exact_marginal(&self, policy: &Array2<f64>, horizon: usize) -> Result<Array1<f64>> {
        if horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        let kernel = self.policy_kernel(policy)?;
        let mut d = self.initial.clone();
        let mut total = d.clone();
        for _ in 1..horizon {
            d = d.dot(&kernel);
            total += &d;
        }
        Ok(total / horizon as f64)
    }
}
