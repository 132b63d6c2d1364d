//! Order-statistic VaR estimation and the CVaR policy-gradient estimator.

use crate::error::{Error, Result};

/// Entropy estimate and score accumulator of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScore {
    pub entropy: f64,
    /// `f = sum_t grad log pi(a_t | s_t)` (importance weighted off-policy).
    pub score: Vec<f64>,
    pub batch_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskConfig {
    pub alpha: f64,
    /// Subtract `b = -VaR`, which cancels the VaR term of each included batch.
    pub baseline_enabled: bool,
}

impl RiskConfig {
    pub fn new(alpha: f64, baseline_enabled: bool) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            baseline_enabled,
        })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

/// Index (1-based) of the order statistic used as the VaR estimate.
pub fn var_rank(n: usize, alpha: f64) -> usize {
    // guard against 0.2 * 5 = 1.0000000000000002 style rounding
    let x = alpha * n as f64;
    let r = (x - 1e-9 * x.max(1.0)).ceil() as usize;
    r.clamp(1, n)
}

/// The `ceil(alpha N)`-th smallest entropy.
pub fn estimate_var(entropies: &[f64], alpha: f64) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_alpha(alpha)?;
    if entropies.iter().any(|h| h.is_nan()) {
        return Err(Error::invalid("entropy estimates must not be NaN"));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[var_rank(sorted.len(), alpha) - 1])
}

/// Batches entering the CVaR gradient with their scalar multipliers, in
/// ascending `batch_id` order: `(position in input, coefficient)`.
///
/// The gradient is `sum coefficient * score`; coefficients already include
/// the `1/(alpha N)` normalization. Batches at exactly the VaR are included.
pub fn cvar_selection(
    entropies: &[f64],
    batch_ids: &[usize],
    config: RiskConfig,
) -> Result<(f64, Vec<(usize, f64)>)> {
    check_alpha(config.alpha)?;
    let var = estimate_var(entropies, config.alpha)?;
    let norm = 1.0 / (config.alpha * entropies.len() as f64);
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by_key(|&i| batch_ids[i]);
    let picked = order
        .into_iter()
        .filter(|&i| entropies[i] <= var)
        .map(|i| {
            let h = entropies[i];
            let c = if config.baseline_enabled { h } else { h - var };
            (i, norm * c)
        })
        .collect();
    Ok((var, picked))
}

/// `sum_i coef_i * score_i`, accumulated in the given order.
pub(crate) fn accumulate<'a>(dim: usize, terms: impl Iterator<Item = (f64, &'a [f64])>) -> Vec<f64> {
    let mut grad = vec![0.0; dim];
    for (c, score) in terms {
        for (g, s) in grad.iter_mut().zip(score) {
            *g += c * s;
        }
    }
    grad
}

/// Monte Carlo CVaR policy gradient.
///
/// With the baseline: `(1/(alpha N)) sum_i f_i H_i 1(H_i <= VaR)`.
/// Without: `(1/(alpha N)) sum_i f_i (H_i - VaR) 1(H_i <= VaR)`.
/// The reduction runs in ascending `batch_id` order regardless of input order.
pub fn cvar_gradient(batches: &[BatchScore], config: RiskConfig) -> Result<Vec<f64>> {
    let first = batches.first().ok_or(Error::EmptyBatch)?;
    let dim = first.score.len();
    if let Some(b) = batches.iter().find(|b| b.score.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: b.score.len(),
        });
    }
    let entropies: Vec<f64> = batches.iter().map(|b| b.entropy).collect();
    let ids: Vec<usize> = batches.iter().map(|b| b.batch_id).collect();
    let (_, picked) = cvar_selection(&entropies, &ids, config)?;
    Ok(accumulate(
        dim,
        picked.iter().map(|&(i, c)| (c, batches[i].score.as_slice())),
    ))
}

/// Risk-neutral gradient `(1/N) sum_i f_i H_i`, summed in ascending `batch_id`.
pub fn mean_gradient(batches: &[BatchScore]) -> Result<Vec<f64>> {
    let first = batches.first().ok_or(Error::EmptyBatch)?;
    let dim = first.score.len();
    let mut order: Vec<&BatchScore> = batches.iter().collect();
    order.sort_by_key(|b| b.batch_id);
    let norm = 1.0 / batches.len() as f64;
    Ok(accumulate(
        dim,
        order.iter().map(|b| (norm * b.entropy, b.score.as_slice())),
    ))
}

/// Upper bound `U alpha b` on the bias the baseline introduces.
pub fn bias_bound(score_bound: f64, alpha: f64, baseline: f64) -> f64 {
    score_bound * alpha * baseline
}

/// Number of samples beyond which the unbaselined estimator's VaR error
/// drops below the baseline's bias bound with probability `1 - delta`:
/// `ln(2/delta) / (2 eta^2 min(U^2 alpha^2 b^2, width^2))`.
pub fn critical_sample_size(
    delta: f64,
    eta: f64,
    width: f64,
    score_bound: f64,
    alpha: f64,
    baseline: f64,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta must lie in (0, 1)"));
    }
    if eta <= 0.0 || width <= 0.0 {
        return Err(Error::invalid("eta and width must be positive"));
    }
    let bias = score_bound * alpha * baseline;
    let m = (bias * bias).min(width * width);
    if m == 0.0 {
        return Err(Error::DivergentBound);
    }
    Ok((2.0 / delta).ln() / (2.0 * eta * eta * m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const H: [f64; 5] = [5.0, 1.0, 3.0, 2.0, 4.0];

    #[test]
    fn var_order_statistics() {
        assert_eq!(estimate_var(&H, 0.4).unwrap(), 2.0);
        assert_eq!(estimate_var(&H, 1.0).unwrap(), 5.0);
        assert_eq!(estimate_var(&H, 0.2).unwrap(), 1.0);
        assert!(matches!(estimate_var(&[], 0.5), Err(Error::EmptyBatch)));
        assert!(estimate_var(&H, 0.0).is_err());
    }

    #[test]
    fn var_rank_is_ceiling() {
        assert_eq!(var_rank(40, 0.2), 8);
        assert_eq!(var_rank(40, 0.1), 4);
        assert_eq!(var_rank(3, 0.5), 2);
        assert_eq!(var_rank(7, 0.01), 1);
        assert_eq!(var_rank(10, 0.7), 7);
    }

    fn unit(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn two_lowest_of_four() {
        let batches: Vec<BatchScore> = (0..4)
            .map(|i| BatchScore {
                entropy: (i + 1) as f64,
                score: unit(i, 4),
                batch_id: i,
            })
            .collect();
        let g = cvar_gradient(&batches, RiskConfig::new(0.5, true).unwrap()).unwrap();
        assert_eq!(g, vec![0.5, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn alpha_one_is_the_mean_gradient() {
        let batches: Vec<BatchScore> = (0..6)
            .map(|i| BatchScore {
                entropy: 0.3 * i as f64 - 0.7,
                score: vec![i as f64, 1.0 - i as f64, 0.25],
                batch_id: i,
            })
            .collect();
        let g = cvar_gradient(&batches, RiskConfig::new(1.0, true).unwrap()).unwrap();
        let m = mean_gradient(&batches).unwrap();
        for (a, b) in g.iter().zip(&m) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn degenerate_entropies_without_baseline_vanish() {
        let batches: Vec<BatchScore> = (0..4)
            .map(|i| BatchScore {
                entropy: 2.5,
                score: vec![1.0 + i as f64, -3.0],
                batch_id: i,
            })
            .collect();
        let g = cvar_gradient(&batches, RiskConfig::new(0.5, false).unwrap()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_scores_rejected() {
        let batches = vec![
            BatchScore { entropy: 1.0, score: vec![1.0], batch_id: 0 },
            BatchScore { entropy: 2.0, score: vec![1.0, 2.0], batch_id: 1 },
        ];
        assert!(matches!(
            cvar_gradient(&batches, RiskConfig::new(1.0, true).unwrap()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bias_bound_products() {
        assert!((bias_bound(10.0, 0.2, 0.5) - 1.0).abs() < 1e-15);
        assert_eq!(bias_bound(7.0, 0.3, 0.0), 0.0);
        assert_eq!(bias_bound(1.0, 1.0, 2.0), 2.0);
    }

    #[test]
    fn critical_sample_size_values() {
        let delta = 2.0 * (-2.0f64).exp();
        let n = critical_sample_size(delta, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((n - 1.0).abs() < 1e-12);
        let n2 = critical_sample_size(delta, 2.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((n2 - 0.25).abs() < 1e-12);
        let n3 = critical_sample_size(0.05, 0.5, 10.0, 1.0, 0.2, 1.0).unwrap();
        assert!((n3 - 184.44).abs() < 0.01, "n* = {n3}");
        assert!(matches!(
            critical_sample_size(0.05, 0.5, 10.0, 1.0, 0.2, 0.0),
            Err(Error::DivergentBound)
        ));
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            hs in prop::collection::vec(-5.0f64..5.0, 1..30),
            alpha in 0.01f64..=1.0,
            baseline in any::<bool>(),
            rot in 0usize..30,
        ) {
            let batches: Vec<BatchScore> = hs.iter().enumerate().map(|(i, &h)| BatchScore {
                entropy: h,
                score: vec![(i as f64).sin(), (i as f64 * 0.37).cos()],
                batch_id: i,
            }).collect();
            let cfg = RiskConfig::new(alpha, baseline).unwrap();
            let g = cvar_gradient(&batches, cfg).unwrap();
            let mut shuffled = batches.clone();
            shuffled.rotate_left(rot % batches.len());
            shuffled.reverse();
            prop_assert_eq!(g, cvar_gradient(&shuffled, cfg).unwrap());
        }

        #[test]
        fn exactly_ceil_alpha_n_included_when_distinct(
            n in 1usize..60,
            alpha in 0.01f64..=1.0,
        ) {
            let hs: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1009) as f64 + i as f64 * 1e-3).collect();
            let ids: Vec<usize> = (0..n).collect();
            let (_, picked) = cvar_selection(&hs, &ids, RiskConfig::new(alpha, true).unwrap()).unwrap();
            prop_assert_eq!(picked.len(), var_rank(n, alpha));
        }
    }
}
