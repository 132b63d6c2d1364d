//! Exact checks of the diameter, pi-diameter and entropy-gap bounds on small
//! tabular classes, under the discrete state metric.

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::env::tabular::{random_distribution, random_policy, TabularCMP};
use crate::error::{Error, Result};
use crate::seeding::{self, tag};

/// Absolute slack used when comparing an exact quantity with its bound.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// CMPs sharing state and action spaces and the initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularClass {
    cmps: Vec<TabularCMP>,
    horizon: usize,
}

impl TabularClass {
    pub fn new(cmps: Vec<TabularCMP>, horizon: usize) -> Result<Self> {
        let first = cmps.first().ok_or(Error::EmptyBatch)?;
        if horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        for m in &cmps[1..] {
            if m.n_states() != first.n_states() || m.n_actions() != first.n_actions() {
                return Err(Error::DimensionMismatch {
                    expected: first.n_states() * first.n_actions(),
                    got: m.n_states() * m.n_actions(),
                });
            }
            if m.initial() != first.initial() {
                return Err(Error::invalid("class members must share the initial distribution"));
            }
        }
        Ok(Self { cmps, horizon })
    }

    pub fn cmps(&self) -> &[TabularCMP] {
        &self.cmps
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn marginals(&self, policy: &Array2<f64>) -> Result<Vec<Array1<f64>>> {
        self.cmps
            .iter()
            .map(|m| m.exact_marginal(policy, self.horizon))
            .collect()
    }

    fn ordered_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.cmps.len();
        (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
    }
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Shannon entropy in nats (`0 ln 0 = 0`).
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Largest TV distance between the marginals one policy induces across the class.
pub fn exact_pi_diameter(class: &TabularClass, policy: &Array2<f64>) -> Result<f64> {
    let m = class.marginals(policy)?;
    Ok(class
        .ordered_pairs()
        .map(|(i, j)| tv(m[i].as_slice().unwrap(), m[j].as_slice().unwrap()))
        .fold(0.0, f64::max))
}

fn kernel_rows_tv(a: &TabularCMP, b: &TabularCMP, s: usize, act: usize) -> f64 {
    let pa = a.transitions();
    let pb = b.transitions();
    (0..a.n_states())
        .map(|s2| (pa[[s, act, s2]] - pb[[s, act, s2]]).abs())
        .sum::<f64>()
        * 0.5
}

/// `max_(M', M) T E_{s ~ d^M, a ~ pi} TV(P'(.|s,a), P(.|s,a))`.
pub fn pi_diameter_bound(class: &TabularClass, policy: &Array2<f64>) -> Result<f64> {
    let m = class.marginals(policy)?;
    let cmps = class.cmps();
    let t = class.horizon() as f64;
    Ok(class
        .ordered_pairs()
        .map(|(i, j)| {
            let (other, reference) = (&cmps[i], &cmps[j]);
            let mut e = 0.0;
            for s in 0..reference.n_states() {
                for a in 0..reference.n_actions() {
                    e += m[j][s] * policy[[s, a]] * kernel_rows_tv(other, reference, s, a);
                }
            }
            t * e
        })
        .fold(0.0, f64::max))
}

/// Largest TV distance between two members' transition rows over all `(s, a)`.
pub fn sup_kernel_tv(class: &TabularClass) -> f64 {
    let cmps = class.cmps();
    let (ns, na) = (cmps[0].n_states(), cmps[0].n_actions());
    class
        .ordered_pairs()
        .flat_map(|(i, j)| {
            (0..ns).flat_map(move |s| (0..na).map(move |a| kernel_rows_tv(&cmps[i], &cmps[j], s, a)))
        })
        .fold(0.0, f64::max)
}

/// `(1 - L^T)/(1 - L) * sup TV(P', P)` for a Lipschitz constant `0 <= L < 1`.
pub fn diameter_bound(class: &TabularClass, lipschitz: f64, horizon: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&lipschitz) {
        return Err(Error::InvalidLipschitz(lipschitz));
    }
    let geometric = (1.0 - lipschitz.powi(horizon as i32)) / (1.0 - lipschitz);
    Ok(geometric * sup_kernel_tv(class))
}

/// `D^2 / sigma + D ln(1 / sigma)`.
pub fn entropy_gap_bound(pi_diameter: f64, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::DegenerateSupport);
    }
    if pi_diameter < 0.0 {
        return Err(Error::invalid("pi-diameter must be nonnegative"));
    }
    Ok(pi_diameter * pi_diameter / sigma + pi_diameter * (1.0 / sigma).ln())
}

/// Largest entropy difference between marginals across the class.
pub fn exact_entropy_gap(class: &TabularClass, policy: &Array2<f64>) -> Result<f64> {
    let h: Vec<f64> = class
        .marginals(policy)?
        .iter()
        .map(|m| shannon_entropy(m.as_slice().unwrap()))
        .collect();
    let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(hi - lo)
}

/// Dobrushin coefficient of `P^pi`: the largest TV distance between two of its rows.
pub fn kernel_lipschitz_constant(cmp: &TabularCMP, policy: &Array2<f64>) -> Result<f64> {
    let k = cmp.policy_kernel(policy)?;
    let n = cmp.n_states();
    let mut best = 0.0f64;
    for s in 0..n {
        for s2 in s + 1..n {
            best = best.max(tv(
                k.row(s).as_slice().unwrap(),
                k.row(s2).as_slice().unwrap(),
            ));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundStatus {
    Satisfied,
    Violated,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub instance: usize,
    pub theorem: u8,
    pub policy: usize,
    pub exact: f64,
    pub bound: f64,
    pub status: BoundStatus,
}

impl BoundReport {
    fn compare(instance: usize, theorem: u8, policy: usize, exact: f64, bound: f64) -> Self {
        let status = if exact <= bound + BOUND_TOLERANCE {
            BoundStatus::Satisfied
        } else {
            BoundStatus::Violated
        };
        Self {
            instance,
            theorem,
            policy,
            exact,
            bound,
            status,
        }
    }

    fn excluded(instance: usize, theorem: u8, policy: usize, exact: f64) -> Self {
        Self {
            instance,
            theorem,
            policy,
            exact,
            bound: f64::NAN,
            status: BoundStatus::Excluded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteShape {
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
    pub max_members: usize,
    pub policies: usize,
}

impl Default for SuiteShape {
    fn default() -> Self {
        Self {
            max_states: 6,
            max_actions: 3,
            max_horizon: 5,
            max_members: 3,
            policies: 10,
        }
    }
}

/// Random class: shared initial distribution, independent kernels. About one
/// instance in five gets sparse transition rows so that some marginals lose
/// full support.
pub fn random_class<R: Rng + ?Sized>(shape: &SuiteShape, rng: &mut R) -> Result<TabularClass> {
    let ns = rng.random_range(2..=shape.max_states);
    let na = rng.random_range(1..=shape.max_actions);
    let horizon = rng.random_range(1..=shape.max_horizon);
    let members = rng.random_range(2..=shape.max_members);
    let sparse = rng.random_bool(0.2);
    let initial = if sparse {
        let mut d = vec![0.0; ns];
        d[rng.random_range(0..ns)] = 1.0;
        Array1::from(d)
    } else {
        Array1::from(random_distribution(ns, rng))
    };
    let cmps = (0..members)
        .map(|_| {
            let mut p = ndarray::Array3::zeros((ns, na, ns));
            for s in 0..ns {
                for a in 0..na {
                    let row = if sparse {
                        let mut r = vec![0.0; ns];
                        r[rng.random_range(0..ns)] = 1.0;
                        r
                    } else {
                        random_distribution(ns, rng)
                    };
                    for (s2, v) in row.into_iter().enumerate() {
                        p[[s, a, s2]] = v;
                    }
                }
            }
            TabularCMP::new(p, initial.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    TabularClass::new(cmps, horizon)
}

/// All three checks for one policy on one class.
pub fn check_policy(
    class: &TabularClass,
    policy: &Array2<f64>,
    instance: usize,
    policy_id: usize,
) -> Result<[BoundReport; 3]> {
    let diameter = exact_pi_diameter(class, policy)?;

    let lipschitz = class
        .cmps()
        .iter()
        .map(|m| kernel_lipschitz_constant(m, policy))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let thm1 = if lipschitz < 1.0 {
        let bound = diameter_bound(class, lipschitz, class.horizon())?;
        BoundReport::compare(instance, 1, policy_id, diameter, bound)
    } else {
        BoundReport::excluded(instance, 1, policy_id, diameter)
    };

    let thm2 = BoundReport::compare(instance, 2, policy_id, diameter, pi_diameter_bound(class, policy)?);

    let sigma = class
        .marginals(policy)?
        .iter()
        .flat_map(|m| m.iter().copied().collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min);
    let gap = exact_entropy_gap(class, policy)?;
    let thm3 = match entropy_gap_bound(diameter, sigma) {
        Ok(bound) => BoundReport::compare(instance, 3, policy_id, gap, bound),
        Err(Error::DegenerateSupport) => BoundReport::excluded(instance, 3, policy_id, gap),
        Err(e) => return Err(e),
    };
    Ok([thm1, thm2, thm3])
}

/// Rows for `instances` random classes with `shape.policies` random policies each,
/// ordered by (instance, policy, theorem).
pub fn run_suite(instances: usize, seed: u64, shape: &SuiteShape) -> Result<Vec<BoundReport>> {
    let rows = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::stream(seed, &[tag::THEORY, i as u64]);
            let class = random_class(shape, &mut rng)?;
            let (ns, na) = (class.cmps()[0].n_states(), class.cmps()[0].n_actions());
            let mut out = Vec::with_capacity(3 * shape.policies);
            for p in 0..shape.policies {
                let policy = random_policy(ns, na, &mut rng);
                out.extend(check_policy(&class, &policy, i, p)?);
            }
            Ok(out)
        })
        .collect::<Result<Vec<Vec<BoundReport>>>>()?;
    Ok(rows.concat())
}

/// Per-theorem (satisfied, violated, excluded) counts.
pub fn tally(rows: &[BoundReport]) -> [(usize, usize, usize); 3] {
    let mut out = [(0, 0, 0); 3];
    for r in rows {
        let slot = &mut out[(r.theorem - 1) as usize];
        match r.status {
            BoundStatus::Satisfied => slot.0 += 1,
            BoundStatus::Violated => slot.1 += 1,
            BoundStatus::Excluded => slot.2 += 1,
        }
    }
    out
}
