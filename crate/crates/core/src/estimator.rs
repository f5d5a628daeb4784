//! Normalized doubly robust ATET estimators with weight trimming, and the
//! end-to-end estimation pipeline.
//!
//! Repeated cross-sections use four weight groups,
//!
//! | group | dose | period | raw weight                                  |
//! |-------|------|--------|---------------------------------------------|
//! | g1    | d    | t      | `w(D; d)`                                   |
//! | g2    | d    | t - 1  | `w(D; d) rho(d, t) / rho(d, t - 1)`         |
//! | g3    | d'   | t      | `w(D; d') rho(d, t) / rho(d', t)`           |
//! | g4    | d'   | t - 1  | `w(D; d') rho(d, t) / rho(d', t - 1)`       |
//!
//! and panels two, `g1 = w(D; d)` and `g2 = w(D; d') p(d) / p(d')`. Each
//! group is normalized to sum to one over its retained observations.

use serde::{Deserialize, Serialize};

use crate::crossfit::{crossfit_nuisances_panel, crossfit_nuisances_rcs};
use crate::data::{EstimandSpec, EstimationConfig, PanelSample, RepeatedCrossSectionSample};
use crate::error::{Error, Result};
use crate::inference::{ci_asymptotic, compute_scores, variance_hat, ScoreVector};
use crate::kernel::KernelSpec;
use crate::nuisance::{PanelNuisanceSet, RcsNuisanceSet};
use crate::util::neumaier_sum;

/// One weight group: raw nonnegative weights, a retention mask and the sign
/// with which the group enters the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGroup {
    pub name: String,
    pub sign: f64,
    pub raw: Vec<f64>,
    pub keep: Vec<bool>,
}

impl WeightGroup {
    pub fn new(name: impl Into<String>, sign: f64, raw: Vec<f64>) -> Self {
        let keep = vec![true; raw.len()];
        Self { name: name.into(), sign, raw, keep }
    }

    /// Sum of retained raw weights.
    pub fn total(&self) -> f64 {
        neumaier_sum(self.raw.iter().zip(&self.keep).map(|(&w, &k)| if k { w } else { 0.0 }))
    }

    /// Retained weight of each observation (zero if trimmed).
    pub fn retained(&self, i: usize) -> f64 {
        if self.keep[i] {
            self.raw[i]
        } else {
            0.0
        }
    }

    /// Normalized retained weights.
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        (0..self.raw.len()).map(|i| self.retained(i) / total).collect()
    }

    /// Observations with positive raw weight removed by trimming.
    pub fn n_trimmed(&self) -> usize {
        self.raw.iter().zip(&self.keep).filter(|(&w, &k)| w > 0.0 && !k).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub groups: Vec<WeightGroup>,
}

impl GroupWeights {
    pub fn n_trimmed_per_group(&self) -> Vec<usize> {
        self.groups.iter().map(WeightGroup::n_trimmed).collect()
    }

    /// Rows carrying positive retained weight in at least one group.
    pub fn n_effective(&self) -> usize {
        let n = self.groups.first().map_or(0, |g| g.raw.len());
        (0..n).filter(|&i| self.groups.iter().any(|g| g.retained(i) > 0.0)).count()
    }

    fn check_nonempty(&self) -> Result<()> {
        for g in &self.groups {
            if !(g.total() > 0.0) {
                return Err(Error::EmptyGroup(g.name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtetEstimate {
    pub delta_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub h_used: f64,
    pub n_trimmed_per_group: Vec<usize>,
    pub n_effective: usize,
}

/// A point estimate with the ingredients inference needs.
#[derive(Debug, Clone)]
pub struct Fit {
    pub estimate: AtetEstimate,
    pub weights: GroupWeights,
    pub scores: ScoreVector,
}

pub(crate) const RCS_GROUPS: [&str; 4] = ["g1 (d, t)", "g2 (d, t-1)", "g3 (d', t)", "g4 (d', t-1)"];
pub(crate) const PANEL_GROUPS: [&str; 2] = ["g1 (d)", "g2 (d')"];

pub fn build_weights_rcs(
    sample: &RepeatedCrossSectionSample,
    nuisances: &RcsNuisanceSet,
    estimand: &EstimandSpec,
    kernel: &KernelSpec,
) -> Result<GroupWeights> {
    nuisances.check(sample.n())?;
    let (post, pre) = (estimand.t, estimand.t - 1);
    let n = sample.n();
    let mut g = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let nu = nuisances;
    for i in 0..n {
        let p = sample.period()[i];
        let wd = kernel.weight(sample.d()[i], estimand.d_treat);
        let wc = kernel.weight(sample.d()[i], estimand.d_control);
        // Ratios first, so equal doses give bit-identical groups.
        if p == post {
            g[0][i] = wd;
            g[2][i] = wc * (nu.rho_treat_post[i] / nu.rho_control_post[i]);
        } else if p == pre {
            g[1][i] = wd * (nu.rho_treat_post[i] / nu.rho_treat_pre[i]);
            g[3][i] = wc * (nu.rho_treat_post[i] / nu.rho_control_pre[i]);
        }
    }
    let signs = [1.0, -1.0, -1.0, 1.0];
    let weights = GroupWeights {
        groups: g.into_iter().zip(RCS_GROUPS).zip(signs).map(|((raw, name), s)| WeightGroup::new(name, s, raw)).collect(),
    };
    check_weights(&weights)?;
    weights.check_nonempty()?;
    Ok(weights)
}

pub fn build_weights_panel(
    sample: &PanelSample,
    nuisances: &PanelNuisanceSet,
    estimand: &EstimandSpec,
    kernel: &KernelSpec,
) -> Result<GroupWeights> {
    nuisances.check(sample.n())?;
    let g1 = kernel.weights(sample.d(), estimand.d_treat);
    let g2 = (0..sample.n())
        .map(|i| {
            kernel.weight(sample.d()[i], estimand.d_control) * (nuisances.p_treat[i] / nuisances.p_control[i])
        })
        .collect();
    let weights = GroupWeights {
        groups: vec![WeightGroup::new(PANEL_GROUPS[0], 1.0, g1), WeightGroup::new(PANEL_GROUPS[1], -1.0, g2)],
    };
    check_weights(&weights)?;
    weights.check_nonempty()?;
    Ok(weights)
}

fn check_weights(w: &GroupWeights) -> Result<()> {
    for g in &w.groups {
        if let Some(row) = g.raw.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite { what: "group weight", row });
        }
    }
    Ok(())
}

/// Drops, group by group, every observation whose normalized weight exceeds
/// `threshold`, renormalizes, and repeats until no retained weight exceeds
/// it.
pub fn apply_trimming(weights: &GroupWeights, threshold: f64) -> Result<GroupWeights> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!("trim threshold must lie in (0, 1], got {threshold}")));
    }
    let mut out = weights.clone();
    for g in &mut out.groups {
        loop {
            let total = g.total();
            if !(total > 0.0) {
                return Err(Error::GroupEmptiesUnderTrimming(g.name.clone()));
            }
            let mut dropped = false;
            for i in 0..g.raw.len() {
                if g.keep[i] && g.raw[i] / total > threshold {
                    g.keep[i] = false;
                    dropped = true;
                }
            }
            if !dropped {
                break;
            }
        }
    }
    Ok(out)
}

/// Per-group residuals `e_k`, aligned with the weight groups.
pub(crate) fn residuals_rcs(sample: &RepeatedCrossSectionSample, nu: &RcsNuisanceSet) -> Vec<Vec<f64>> {
    let y = sample.y();
    let n = sample.n();
    let (mu_a, mu_b, mu_c) = (&nu.mu_treat_pre, &nu.mu_control_pre, &nu.mu_control_post);
    vec![
        (0..n).map(|i| (y[i] - mu_c[i]) + (mu_b[i] - mu_a[i])).collect(),
        (0..n).map(|i| y[i] - mu_a[i]).collect(),
        (0..n).map(|i| y[i] - mu_c[i]).collect(),
        (0..n).map(|i| y[i] - mu_b[i]).collect(),
    ]
}

pub(crate) fn residuals_panel(sample: &PanelSample, nu: &PanelNuisanceSet) -> Vec<Vec<f64>> {
    let e: Vec<f64> = sample.delta_y().iter().zip(&nu.m_control).map(|(dy, m)| dy - m).collect();
    vec![e.clone(), e]
}

fn weighted_sum(w: &[f64], values: impl Fn(usize) -> f64) -> f64 {
    neumaier_sum(w.iter().enumerate().filter(|(_, &wi)| wi != 0.0).map(|(i, &wi)| wi * values(i)))
}

/// Point estimate from trimmed repeated cross-section weights.
pub fn point_estimate_rcs(sample: &RepeatedCrossSectionSample, nu: &RcsNuisanceSet, weights: &GroupWeights) -> f64 {
    let y = sample.y();
    let (mu_a, mu_b, mu_c) = (&nu.mu_treat_pre, &nu.mu_control_pre, &nu.mu_control_post);
    let g: Vec<Vec<f64>> = weights.groups.iter().map(WeightGroup::normalized).collect();
    // Paired terms cancel exactly when the two doses coincide.
    let post = weighted_sum(&g[0], |i| y[i] - mu_c[i]) - weighted_sum(&g[2], |i| y[i] - mu_c[i]);
    let shift = weighted_sum(&g[0], |i| mu_b[i] - mu_a[i]);
    let pre = weighted_sum(&g[1], |i| y[i] - mu_a[i]) - weighted_sum(&g[3], |i| y[i] - mu_b[i]);
    post + shift - pre
}

pub fn point_estimate_panel(sample: &PanelSample, nu: &PanelNuisanceSet, weights: &GroupWeights) -> f64 {
    let e = &residuals_panel(sample, nu)[0];
    let g1 = weights.groups[0].normalized();
    let g2 = weights.groups[1].normalized();
    weighted_sum(&g1, |i| e[i]) - weighted_sum(&g2, |i| e[i])
}

fn finish(
    delta_hat: f64,
    weights: GroupWeights,
    residuals: &[Vec<f64>],
    omega_ref: Vec<f64>,
    h: f64,
    config: &EstimationConfig,
) -> Result<Fit> {
    let scores = compute_scores(&weights, residuals, omega_ref, delta_hat)?;
    let n = scores.psi.len();
    let sigma2 = variance_hat(&scores);
    let (ci_low, ci_high) = ci_asymptotic(delta_hat, sigma2, n, config.alpha)?;
    let estimate = AtetEstimate {
        delta_hat,
        se: (sigma2 / n as f64).sqrt(),
        ci_low,
        ci_high,
        h_used: h,
        n_trimmed_per_group: weights.n_trimmed_per_group(),
        n_effective: weights.n_effective(),
    };
    Ok(Fit { estimate, weights, scores })
}

/// Repeated cross-section estimate from given nuisances: weights, trimming,
/// point estimate, scores and asymptotic interval.
pub fn atet_rcs(
    sample: &RepeatedCrossSectionSample,
    nuisances: &RcsNuisanceSet,
    estimand: &EstimandSpec,
    config: &EstimationConfig,
) -> Result<Fit> {
    config.validate()?;
    let h = config.bandwidth_for(sample.n());
    let kernel = KernelSpec::new(config.kernel, h)?;
    let weights = apply_trimming(&build_weights_rcs(sample, nuisances, estimand, &kernel)?, config.trim_threshold)?;
    let delta = point_estimate_rcs(sample, nuisances, &weights);
    let omega_ref = (0..sample.n())
        .map(|i| if sample.period()[i] == estimand.t { kernel.weight(sample.d()[i], estimand.d_treat) } else { 0.0 })
        .collect();
    finish(delta, weights, &residuals_rcs(sample, nuisances), omega_ref, h, config)
}

pub fn atet_panel(
    sample: &PanelSample,
    nuisances: &PanelNuisanceSet,
    estimand: &EstimandSpec,
    config: &EstimationConfig,
) -> Result<Fit> {
    config.validate()?;
    let h = config.bandwidth_for(sample.n());
    let kernel = KernelSpec::new(config.kernel, h)?;
    let weights = apply_trimming(&build_weights_panel(sample, nuisances, estimand, &kernel)?, config.trim_threshold)?;
    let delta = point_estimate_panel(sample, nuisances, &weights);
    let omega_ref = kernel.weights(sample.d(), estimand.d_treat);
    finish(delta, weights, &residuals_panel(sample, nuisances), omega_ref, h, config)
}

/// Full repeated cross-section pipeline: lag reduction, cross-fitting and
/// estimation.
pub fn estimate_rcs(
    sample: &RepeatedCrossSectionSample,
    estimand: &EstimandSpec,
    config: &EstimationConfig,
) -> Result<Fit> {
    config.validate()?;
    let (sample, estimand) = sample.relabel_lagged(estimand)?;
    config.check_sample_size(sample.n())?;
    let kernel = KernelSpec::new(config.kernel, config.bandwidth_for(sample.n()))?;
    let nuisances = crossfit_nuisances_rcs(&sample, &estimand, config, &kernel)?;
    atet_rcs(&sample, &nuisances, &estimand, config)
}

pub fn estimate_panel(sample: &PanelSample, estimand: &EstimandSpec, config: &EstimationConfig) -> Result<Fit> {
    config.validate()?;
    let (sample, estimand) = sample.relabel_lagged(estimand)?;
    config.check_sample_size(sample.n())?;
    let kernel = KernelSpec::new(config.kernel, config.bandwidth_for(sample.n()))?;
    let nuisances = crossfit_nuisances_panel(&sample, &estimand, config, &kernel)?;
    atet_panel(&sample, &nuisances, &estimand, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelFamily;
    use ndarray::Array2;

    fn group(raw: Vec<f64>) -> GroupWeights {
        GroupWeights { groups: vec![WeightGroup::new("g", 1.0, raw)] }
    }

    #[test]
    fn trimming_threshold_one_is_identity() {
        let w = group(vec![0.2, 5.0, 0.0, 1.0]);
        assert_eq!(apply_trimming(&w, 1.0).unwrap(), w);
    }

    #[test]
    fn trimming_cascade_empties_group() {
        let err = apply_trimming(&group(vec![0.5, 0.3, 0.2]), 0.4).unwrap_err();
        assert_eq!(err, Error::GroupEmptiesUnderTrimming("g".into()));
        assert!(err.to_string().contains("empties under trimming"));
        // One round only: (0.5, 0.3, 0.2) at 0.55 keeps everything.
        let w = apply_trimming(&group(vec![0.5, 0.3, 0.2]), 0.55).unwrap();
        assert_eq!(w.groups[0].keep, vec![true; 3]);
        // (0.5, 0.3, 0.2) at 0.45 -> (0.6, 0.4) -> 0.6 > 0.45 -> error.
        assert!(apply_trimming(&group(vec![0.5, 0.3, 0.2]), 0.45).is_err());
        // (0.4, 0.2, 0.2, 0.2) at 0.3 -> drop first -> thirds, kept.
        let w = apply_trimming(&group(vec![0.4, 0.2, 0.2, 0.2]), 0.34).unwrap();
        assert_eq!(w.groups[0].keep, vec![false, true, true, true]);
        assert_eq!(w.n_trimmed_per_group(), vec![1]);
        let g = w.groups[0].normalized();
        assert!((g[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn small_weights_untouched() {
        let w = group(vec![0.09; 11].into_iter().chain([0.01]).collect());
        assert_eq!(apply_trimming(&w, 0.1).unwrap(), w);
    }

    fn rcs_fixture() -> (RepeatedCrossSectionSample, RcsNuisanceSet) {
        let n = 8;
        let d = vec![2.9, 3.1, 2.0, 2.2, 3.0, 2.8, 1.9, 2.1];
        let t = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let y = vec![10.0, 11.0, 5.0, 6.0, 1.0, 2.0, 1.5, 0.5];
        let s = RepeatedCrossSectionSample::new(y, d, t, Array2::zeros((n, 0)), vec![], Array2::zeros((n, 0))).unwrap();
        let nu = RcsNuisanceSet {
            mu_treat_pre: vec![1.2, 1.1, 1.0, 0.9, 1.3, 1.4, 1.0, 0.8],
            mu_control_post: vec![5.5, 5.2, 5.1, 5.9, 5.0, 5.3, 5.4, 5.6],
            mu_control_pre: vec![1.0, 0.9, 1.1, 1.2, 0.7, 1.0, 1.2, 0.9],
            rho_treat_post: vec![0.3, 0.25, 0.2, 0.22, 0.28, 0.3, 0.18, 0.2],
            rho_treat_pre: vec![0.31, 0.2, 0.21, 0.25, 0.3, 0.27, 0.2, 0.22],
            rho_control_post: vec![0.4, 0.35, 0.38, 0.41, 0.37, 0.39, 0.36, 0.4],
            rho_control_pre: vec![0.33, 0.36, 0.4, 0.42, 0.35, 0.38, 0.41, 0.37],
        };
        (s, nu)
    }

    fn kernel() -> KernelSpec {
        KernelSpec::new(KernelFamily::Epanechnikov, 0.5).unwrap()
    }

    #[test]
    fn post_rows_carry_no_pre_weight() {
        let (s, nu) = rcs_fixture();
        let e = EstimandSpec::new(3.0, 2.0, 1, 0).unwrap();
        let w = build_weights_rcs(&s, &nu, &e, &kernel()).unwrap();
        for i in 0..4 {
            assert_eq!(w.groups[1].raw[i], 0.0);
            assert_eq!(w.groups[3].raw[i], 0.0);
        }
    }

    #[test]
    fn equal_doses_give_exact_zero() {
        let (s, mut nu) = rcs_fixture();
        nu.mu_control_pre = nu.mu_treat_pre.clone();
        nu.rho_control_post = nu.rho_treat_post.clone();
        nu.rho_control_pre = nu.rho_treat_pre.clone();
        let e = EstimandSpec::new(2.5, 2.5, 1, 0).unwrap();
        let cfg = EstimationConfig { bandwidth: Some(0.8), trim_threshold: 1.0, ..Default::default() };
        let fit = atet_rcs(&s, &nu, &e, &cfg).unwrap();
        assert_eq!(fit.estimate.delta_hat, 0.0);
        assert_eq!(fit.estimate.se, 0.0);
    }

    #[test]
    fn zero_residuals_give_zero() {
        let (s, mut nu) = rcs_fixture();
        // Y equals every outcome slot, so all residuals vanish.
        let y = s.y().to_vec();
        nu.mu_treat_pre = y.clone();
        nu.mu_control_post = y.clone();
        nu.mu_control_pre = y;
        let e = EstimandSpec::new(3.0, 2.0, 1, 0).unwrap();
        let cfg = EstimationConfig { bandwidth: Some(0.5), trim_threshold: 1.0, ..Default::default() };
        assert_eq!(atet_rcs(&s, &nu, &e, &cfg).unwrap().estimate.delta_hat, 0.0);
    }

    #[test]
    fn empty_group_is_named() {
        let (s, nu) = rcs_fixture();
        let e = EstimandSpec::new(9.0, 2.0, 1, 0).unwrap();
        let err = build_weights_rcs(&s, &nu, &e, &kernel()).unwrap_err();
        assert_eq!(err, Error::EmptyGroup(RCS_GROUPS[0].into()));
    }
}
