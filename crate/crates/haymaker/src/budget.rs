//! Compute-budget analysis: attempts affordable under a token budget,
//! best-of-N success per example, mean BoN curves over context length, and
//! the Pareto frontier across budgets. A Monte Carlo estimator serves as the
//! independent oracle for the closed-form math.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{BudgetCurve, CurvePoint, ParetoPoint, SuccessProfile};

/// N = floor(B / (P + L)). Zero means the budget cannot afford one attempt.
pub fn attempts_for_budget(budget: u64, prompt_tokens: u64, context_length: u64) -> u64 {
    assert!(prompt_tokens > 0, "prompt cost must be positive");
    budget / (prompt_tokens + context_length)
}

/// Probability that at least one of `n` independent attempts at per-attempt
/// success probability `p` succeeds: 1 - (1 - p)^n, evaluated in log space so
/// small p and large n stay accurate.
pub fn bon_asr(p: f64, n: u64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "p must be a probability, got {p}");
    if n == 0 || p == 0.0 {
        return 0.0;
    }
    if p == 1.0 {
        return 1.0;
    }
    -f64::exp_m1(n as f64 * f64::ln_1p(-p))
}

/// Monte Carlo estimate of best-of-N success with its binomial standard
/// error. Each trial draws up to `n` Bernoulli(p) outcomes with early exit.
pub fn monte_carlo_bon(p: f64, n: u64, trials: u64, seed: u64) -> (f64, f64) {
    assert!(trials >= 1);
    assert!((0.0..=1.0).contains(&p));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits: u64 = 0;
    for _ in 0..trials {
        for _ in 0..n {
            if rng.random::<f64>() < p {
                hits += 1;
                break;
            }
        }
    }
    let estimate = hits as f64 / trials as f64;
    let stderr = (estimate * (1.0 - estimate) / trials as f64).sqrt();
    (estimate, stderr)
}

/// Mean over the profile's behaviors of each one's best-of-N success, with
/// N set by the budget. The profile must describe the queried context length.
pub fn mean_bon(profile: &SuccessProfile, budget: u64, prompt_tokens: u64, context_length: u64) -> Result<f64> {
    if profile.condition.context_length != context_length {
        return Err(Error::ProfileMismatch {
            profile_length: profile.condition.context_length,
            requested_length: context_length,
        });
    }
    if profile.entries.is_empty() {
        return Err(Error::EmptyCondition(profile.condition.label()));
    }
    let n = attempts_for_budget(budget, prompt_tokens, context_length);
    let sum: f64 = profile
        .entries
        .values()
        .map(|entry| bon_asr(entry.p_example, n))
        .sum();
    Ok(sum / profile.entries.len() as f64)
}

/// One curve per budget over the profile grid: each point is
/// (L, N, mean BoN). All profiles must share target model and position.
pub fn sweep(
    profiles: &BTreeMap<u64, SuccessProfile>,
    budgets: &[u64],
    prompt_tokens: u64,
) -> Result<Vec<BudgetCurve>> {
    if profiles.is_empty() {
        return Err(Error::EmptyCondition("no success profiles".into()));
    }
    let first = profiles.values().next().expect("non-empty");
    for profile in profiles.values() {
        if profile.condition.target_model != first.condition.target_model {
            return Err(Error::InconsistentProfiles {
                field: "target_model",
                left: first.condition.target_model.clone(),
                right: profile.condition.target_model.clone(),
            });
        }
        if profile.condition.position != first.condition.position {
            return Err(Error::InconsistentProfiles {
                field: "position",
                left: first.condition.position.label(),
                right: profile.condition.position.label(),
            });
        }
    }
    let mut curves = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let mut points = Vec::with_capacity(profiles.len());
        for (&context_length, profile) in profiles {
            let attempts = attempts_for_budget(budget, prompt_tokens, context_length);
            let mean_bon_asr = mean_bon(profile, budget, prompt_tokens, context_length)?;
            points.push(CurvePoint {
                context_length,
                attempts,
                mean_bon_asr,
            });
        }
        curves.push(BudgetCurve { budget, points });
    }
    Ok(curves)
}

/// The optimal point of each curve (ties broken toward the smaller context
/// length), ordered by ascending budget.
pub fn pareto_frontier(curves: &[BudgetCurve]) -> Vec<ParetoPoint> {
    let mut frontier: Vec<ParetoPoint> = curves
        .iter()
        .filter(|curve| !curve.points.is_empty())
        .map(|curve| {
            let mut best = &curve.points[0];
            for point in &curve.points[1..] {
                if point.mean_bon_asr > best.mean_bon_asr {
                    best = point;
                }
            }
            ParetoPoint {
                budget: curve.budget,
                optimal_length: best.context_length,
                attempts: best.attempts,
                peak_mean_bon_asr: best.mean_bon_asr,
            }
        })
        .collect();
    frontier.sort_by_key(|p| p.budget);
    frontier
}
