//! zCDP accounting and the two noise mechanisms used by the engine.
//!
//! All queries handled here are dataset averages with sensitivity `1/n`.
//! A privacy parameter of `f64::INFINITY` is a no-noise sentinel: mechanisms
//! return exact values and the ledger records zero spend.

use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseSource;

/// Sentinel for noiseless (non-private) runs.
pub const NO_NOISE: f64 = f64::INFINITY;

fn log_inv_delta(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1], got {delta}")));
    }
    Ok((1.0 / delta).ln())
}

/// Largest `rho` with `rho + 2 sqrt(rho ln(1/delta)) = epsilon`.
pub fn rho_from_eps_delta(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let l = log_inv_delta(delta)?;
    if l == 0.0 {
        return Ok(epsilon);
    }
    // (sqrt(l + eps) - sqrt(l))², rewritten to avoid cancellation for large l
    let denom = (l + epsilon).sqrt() + l.sqrt();
    Ok(epsilon * epsilon / (denom * denom))
}

/// `(epsilon, delta)`-DP guarantee implied by `rho`-zCDP.
pub fn eps_from_rho_delta(rho: f64, delta: f64) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be non-negative, got {rho}")));
    }
    let l = log_inv_delta(delta)?;
    Ok(rho + 2.0 * (rho * l).sqrt())
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")))
    }
}

/// Standard deviation of the Gaussian mechanism, `sqrt(1 / (2 n² rho))`.
pub fn gaussian_sigma(n: usize, rho: f64) -> f64 {
    let n = n as f64;
    (1.0 / (2.0 * n * n * rho)).sqrt()
}

/// Adds `N(0, 1/(2 n² rho))` noise to an average over `n` rows.
pub fn gaussian_mechanism(true_answer: f64, n: usize, rho: f64, rng: &mut NoiseSource) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    check_rho(rho)?;
    if rho == NO_NOISE {
        return Ok(true_answer);
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(true_answer + gaussian_sigma(n, rho) * z)
}

/// Gumbel noise scale for report-noisy-max, `1 / (sqrt(2 rho) n)`.
pub fn gumbel_scale(n: usize, rho: f64) -> f64 {
    1.0 / ((2.0 * rho).sqrt() * n as f64)
}

/// Inverse-CDF transform of a uniform draw on (0,1).
pub fn gumbel_from_uniform(scale: f64, u: f64) -> f64 {
    -scale * (-u.ln()).ln()
}

pub fn gumbel_sample(scale: f64, rng: &mut NoiseSource) -> Result<f64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gumbel scale must be positive, got {scale}"
        )));
    }
    let u: f64 = rng.sample(Open01);
    Ok(gumbel_from_uniform(scale, u))
}

/// Index maximizing `|true_i - conjectured_i| + Z_i` with i.i.d. Gumbel noise.
///
/// Ties go to the smallest index. With [`NO_NOISE`] no draws are made.
pub fn report_noisy_max(
    true_answers: &[f64],
    conjectured: &[f64],
    n: usize,
    rho: f64,
    rng: &mut NoiseSource,
) -> Result<usize> {
    if true_answers.is_empty() {
        return Err(Error::InvalidArgument(
            "report-noisy-max needs at least one score".into(),
        ));
    }
    if true_answers.len() != conjectured.len() {
        return Err(Error::InvalidArgument(format!(
            "answer vectors differ in length: {} vs {}",
            true_answers.len(),
            conjectured.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    check_rho(rho)?;
    let noisy = rho != NO_NOISE;
    let scale = gumbel_scale(n, rho);
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (a, c)) in true_answers.iter().zip(conjectured).enumerate() {
        let mut score = (a - c).abs();
        if noisy {
            score += gumbel_sample(scale, rng)?;
        }
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    /// `None` for noiseless runs.
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub rho_total: Option<f64>,
    pub rho_spent: f64,
    pub private: bool,
}

/// `(epsilon, delta)` target, its zCDP equivalent, and an append-only ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
    rho_total: f64,
    ledger: Vec<LedgerEntry>,
}

impl PrivacyBudget {
    pub fn from_eps_delta(epsilon: f64, delta: f64) -> Result<Self> {
        Ok(PrivacyBudget {
            epsilon,
            delta,
            rho_total: rho_from_eps_delta(epsilon, delta)?,
            ledger: Vec::new(),
        })
    }

    /// Unlimited budget for noiseless runs. Every spend is recorded as zero.
    pub fn noiseless() -> Self {
        PrivacyBudget {
            epsilon: f64::INFINITY,
            delta: 0.0,
            rho_total: NO_NOISE,
            ledger: Vec::new(),
        }
    }

    pub fn is_private(&self) -> bool {
        self.rho_total.is_finite()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn rho_total(&self) -> f64 {
        self.rho_total
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    /// Sum of ledger entries in insertion order.
    pub fn rho_spent(&self) -> f64 {
        self.ledger.iter().map(|e| e.rho).sum()
    }

    pub fn remaining(&self) -> f64 {
        self.rho_total - self.rho_spent()
    }

    /// Records a mechanism call at `rho`. Fails if the call would overdraw.
    pub fn spend(&mut self, label: impl Into<String>, rho: f64) -> Result<()> {
        if !self.is_private() {
            self.ledger.push(LedgerEntry {
                label: label.into(),
                rho: 0.0,
            });
            return Ok(());
        }
        check_rho(rho)?;
        let spent = self.rho_spent();
        // float slack for allocations like m * (rho / m)
        if spent + rho > self.rho_total * (1.0 + 1e-12) {
            return Err(Error::BudgetExceeded {
                requested: rho,
                remaining: self.rho_total - spent,
            });
        }
        self.ledger.push(LedgerEntry {
            label: label.into(),
            rho,
        });
        Ok(())
    }

    pub fn summary(&self) -> BudgetSummary {
        if self.is_private() {
            BudgetSummary {
                epsilon: Some(self.epsilon),
                delta: Some(self.delta),
                rho_total: Some(self.rho_total),
                rho_spent: self.rho_spent(),
                private: true,
            }
        } else {
            BudgetSummary {
                epsilon: None,
                delta: None,
                rho_total: None,
                rho_spent: 0.0,
                private: false,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bisect_rho(epsilon: f64, delta: f64) -> f64 {
        let l = (1.0 / delta).ln();
        let f = |r: f64| r + 2.0 * (r * l).sqrt() - epsilon;
        let (mut lo, mut hi) = (0.0, epsilon);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn conversion_examples() {
        assert_eq!(rho_from_eps_delta(0.5, 1.0).unwrap(), 0.5);
        let rho = rho_from_eps_delta(1.0, (-1.0f64).exp()).unwrap();
        assert!((rho - (3.0 - 2.0 * 2f64.sqrt())).abs() < 1e-12);
        assert!((rho - 0.1715729).abs() < 1e-7);

        let delta = 1.0 / (48842.0f64 * 48842.0);
        let rho = rho_from_eps_delta(0.1, delta).unwrap();
        let oracle = bisect_rho(0.1, delta);
        assert!((rho - oracle).abs() < 1e-12 * oracle.max(1.0));
        // ≈ 1.14e-4 to two significant figures
        assert!((rho - 1.155126e-4).abs() < 1e-9, "{rho}");
    }

    #[test]
    fn eps_from_rho_examples() {
        assert_eq!(eps_from_rho_delta(0.0, 0.3).unwrap(), 0.0);
        let eps = eps_from_rho_delta(0.1715729, (-1.0f64).exp()).unwrap();
        assert!((eps - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conversion_round_trip() {
        let mut rng = NoiseSource::seeded(11);
        for _ in 0..100 {
            let eps: f64 = rng.gen_range(0.01..10.0);
            let delta: f64 = 10f64.powf(rng.gen_range(-12.0..0.0));
            let rho = rho_from_eps_delta(eps, delta).unwrap();
            assert!((eps_from_rho_delta(rho, delta).unwrap() - eps).abs() < 1e-9);
        }
    }

    #[test]
    fn conversion_errors() {
        assert!(rho_from_eps_delta(0.0, 0.5).is_err());
        assert!(rho_from_eps_delta(-1.0, 0.5).is_err());
        assert!(rho_from_eps_delta(1.0, 0.0).is_err());
        assert!(rho_from_eps_delta(1.0, 1.5).is_err());
        assert!(eps_from_rho_delta(-0.1, 0.5).is_err());
        assert!(eps_from_rho_delta(0.1, 2.0).is_err());
    }

    #[test]
    fn gaussian_sigma_matches_formula() {
        assert!((gaussian_sigma(10, 0.5) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn gaussian_sentinel_and_errors() {
        let mut rng = NoiseSource::seeded(0);
        assert_eq!(gaussian_mechanism(0.375, 10, NO_NOISE, &mut rng).unwrap(), 0.375);
        assert!(gaussian_mechanism(0.5, 10, 0.0, &mut rng).is_err());
        assert!(gaussian_mechanism(0.5, 10, -1.0, &mut rng).is_err());
        assert!(gaussian_mechanism(0.5, 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn gaussian_variance() {
        let mut rng = NoiseSource::seeded(5);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| gaussian_mechanism(0.0, 1, 0.5, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn gumbel_transform() {
        assert_eq!(gumbel_from_uniform(1.0, (-1.0f64).exp()), 0.0);
        for u in [0.1, 0.5, 0.93] {
            assert_eq!(gumbel_from_uniform(2.0, u), 2.0 * gumbel_from_uniform(1.0, u));
        }
        let mut rng = NoiseSource::seeded(0);
        assert!(gumbel_sample(0.0, &mut rng).is_err());
        assert!(gumbel_sample(-1.0, &mut rng).is_err());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        let mut rng = NoiseSource::seeded(9);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| gumbel_sample(1.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        // Var of standard Gumbel is pi^2 / 6
        let se = (std::f64::consts::PI.powi(2) / 6.0 / n as f64).sqrt();
        assert!((mean - EULER_GAMMA).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn rnm_noiseless_argmax() {
        let mut rng = NoiseSource::seeded(0);
        let idx = report_noisy_max(&[0.9, 0.1, 0.1], &[0.0; 3], 100, NO_NOISE, &mut rng).unwrap();
        assert_eq!(idx, 0);
        let idx = report_noisy_max(&[0.1, 0.5, 0.5], &[0.0; 3], 100, NO_NOISE, &mut rng).unwrap();
        assert_eq!(idx, 1);
    }

    #[test]
    fn rnm_errors() {
        let mut rng = NoiseSource::seeded(0);
        assert!(report_noisy_max(&[], &[], 1, 1.0, &mut rng).is_err());
        assert!(report_noisy_max(&[0.1], &[0.1, 0.2], 1, 1.0, &mut rng).is_err());
        assert!(report_noisy_max(&[0.1], &[0.1], 1, 0.0, &mut rng).is_err());
    }

    #[test]
    fn rnm_symmetric_scores_split_evenly() {
        let mut rng = NoiseSource::seeded(21);
        let trials = 100_000;
        let zeros = (0..trials)
            .filter(|_| report_noisy_max(&[0.3, 0.3], &[0.0, 0.0], 10, 0.5, &mut rng).unwrap() == 0)
            .count();
        let freq = zeros as f64 / trials as f64;
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    #[test]
    fn rnm_matches_logistic_probability() {
        let mut rng = NoiseSource::seeded(4);
        let trials = 100_000;
        let zeros = (0..trials)
            .filter(|_| report_noisy_max(&[0.2, 0.1], &[0.0, 0.0], 1, 0.5, &mut rng).unwrap() == 0)
            .count();
        let freq = zeros as f64 / trials as f64;
        let expected = 1.0 / (1.0 + (-0.1f64).exp());
        assert!((expected - 0.5250).abs() < 1e-4);
        assert!((freq - expected).abs() < 0.005, "{freq}");
    }

    #[test]
    fn budget_ledger() {
        let mut b = PrivacyBudget::from_eps_delta(1.0, 1e-6).unwrap();
        let rho = b.rho_total();
        let m = 26;
        for i in 0..m {
            b.spend(format!("gaussian:{i}"), rho / m as f64).unwrap();
        }
        assert!((b.rho_spent() - rho).abs() < 1e-12);
        assert!(matches!(b.spend("extra", rho / 2.0), Err(Error::BudgetExceeded { .. })));
        assert_eq!(b.ledger().len(), m);
        let s = b.summary();
        assert!(s.private);
        assert_eq!(s.rho_total, Some(rho));
    }

    #[test]
    fn noiseless_budget_records_zero() {
        let mut b = PrivacyBudget::noiseless();
        b.spend("gaussian:0", NO_NOISE).unwrap();
        assert_eq!(b.ledger()[0].rho, 0.0);
        let s = b.summary();
        assert!(!s.private);
        assert_eq!(s.epsilon, None);
        serde_json::to_string(&s).unwrap();
    }
}
