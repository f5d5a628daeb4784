//! Influence-function scores, asymptotic variance, and confidence intervals
//! (normal approximation and multiplier bootstrap).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimator::GroupWeights;
use crate::util::{derive_seed, neumaier_sum};

/// Per-observation scores `psi_i`, with `mean(psi) = delta_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub psi: Vec<f64>,
    /// Full-sample mean of `omega_ref`.
    pub pi_hat: f64,
    pub delta_hat: f64,
    /// `w(D_i; d) 1{T_i = t}` (repeated cross-sections) or `w(D_i; d)` (panels).
    pub omega_ref: Vec<f64>,
}

/// Scores for trimmed weight groups and their residuals.
///
/// Each group `k` enters as `s_k w_ki e_ki / Pi_k` with
/// `Pi_k = (1/n) sum_i w_ki` over retained rows, the normalized counterpart
/// of dividing by the density `Pi`. For the first group without trimming
/// `Pi_1 = pi_hat`.
pub fn compute_scores(
    weights: &GroupWeights,
    residuals: &[Vec<f64>],
    omega_ref: Vec<f64>,
    delta_hat: f64,
) -> Result<ScoreVector> {
    let n = omega_ref.len();
    if residuals.len() != weights.groups.len() {
        return Err(Error::InvalidParameter("one residual vector per weight group required".into()));
    }
    let nf = n as f64;
    let pi_hat = neumaier_sum(omega_ref.iter().copied()) / nf;
    if !(pi_hat >= 1e-12) {
        return Err(Error::DegenerateDensity(pi_hat));
    }
    let pis: Vec<f64> = weights.groups.iter().map(|g| g.total() / nf).collect();
    let psi = (0..n)
        .map(|i| {
            // Positive and negative terms are summed separately so mirrored
            // groups cancel exactly.
            let mut pos = 0.0;
            let mut neg = 0.0;
            for ((g, e), &pk) in weights.groups.iter().zip(residuals).zip(&pis) {
                let w = g.retained(i);
                if w == 0.0 {
                    continue;
                }
                let term = w * e[i] / pk;
                if g.sign > 0.0 {
                    pos += term;
                } else {
                    neg += term;
                }
            }
            pos - neg
        })
        .collect();
    Ok(ScoreVector { psi, pi_hat, delta_hat, omega_ref })
}

impl ScoreVector {
    /// Centred influence values
    /// `psi_i - delta - (delta / pi_hat) (omega_i - pi_hat)`.
    pub fn influence(&self) -> Vec<f64> {
        let ratio = self.delta_hat / self.pi_hat;
        self.psi
            .iter()
            .zip(&self.omega_ref)
            .map(|(&p, &w)| (p - self.delta_hat) - ratio * (w - self.pi_hat))
            .collect()
    }
}

/// `sigma_h^2 = (1/n) sum_i influence_i^2`.
pub fn variance_hat(scores: &ScoreVector) -> f64 {
    let inf = scores.influence();
    neumaier_sum(inf.iter().map(|v| v * v)) / inf.len() as f64
}

fn z_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// `delta_hat -/+ z_{1 - alpha/2} sigma_h / sqrt(n)`.
pub fn ci_asymptotic(delta_hat: f64, sigma2_hat: f64, n: usize, alpha: f64) -> Result<(f64, f64)> {
    let half = z_quantile(alpha)? * (sigma2_hat.max(0.0) / n as f64).sqrt();
    Ok((delta_hat - half, delta_hat + half))
}

/// Bootstrap multiplier distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierLaw {
    /// Exponential with rate 1: mean 1, variance 1.
    #[default]
    Exponential,
    /// Degenerate at 1.
    Constant,
}

/// `n` multipliers for replication stream `seed`.
pub fn draw_multipliers(law: MultiplierLaw, n: usize, seed: u64) -> Vec<f64> {
    match law {
        MultiplierLaw::Constant => vec![1.0; n],
        MultiplierLaw::Exponential => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| Exp1.sample(&mut rng)).collect()
        }
    }
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Multiplier-bootstrap interval `[delta - c_{1-alpha/2}, delta - c_{alpha/2}]`
/// where `c_q` are quantiles of the draws
/// `delta_b - delta = (1/n) sum_i (xi_i - 1) influence_i`.
pub fn multiplier_bootstrap(
    scores: &ScoreVector,
    reps: usize,
    alpha: f64,
    seed: u64,
    law: MultiplierLaw,
) -> Result<(f64, f64)> {
    if reps < 100 {
        return Err(Error::InvalidParameter(format!("bootstrap needs at least 100 replications, got {reps}")));
    }
    z_quantile(alpha)?;
    let inf = scores.influence();
    let n = inf.len() as f64;
    let mut draws: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let xi = draw_multipliers(law, inf.len(), derive_seed(seed, &[b as u64]));
            neumaier_sum(xi.iter().zip(&inf).map(|(x, v)| (x - 1.0) * v)) / n
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    let d = scores.delta_hat;
    Ok((d - quantile_sorted(&draws, 1.0 - alpha / 2.0), d - quantile_sorted(&draws, alpha / 2.0)))
}
