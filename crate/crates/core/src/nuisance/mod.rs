//! Nuisance estimation: kernel-weighted outcome regressions, generalized
//! propensity scores and period probabilities.
//!
//! Training and evaluation inputs are separate arguments; evaluation rows
//! contribute only their features.

pub mod density;
pub mod lasso;
pub mod logistic;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use density::{density_at, fit_cond_density, CondDensityModel, DensityFamily, DENSITY_FLOOR};
pub use lasso::{fit_lasso, LambdaGrid, LassoModel, LassoProblem};
pub use logistic::{fit_logistic_lasso, LogisticLassoModel};

use crate::data::{EstimandSpec, EstimationConfig, PanelSample, RepeatedCrossSectionSample};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::util::derive_seed;

const SLOT_OUTCOME: u64 = 1;
const SLOT_DENSITY: u64 = 2;
const SLOT_PERIOD: u64 = 3;

/// Per-observation nuisance predictions for repeated cross-sections.
/// `treat`/`control` refer to the doses `d` and `d'`, `post`/`pre` to the
/// periods `t` and `t - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcsNuisanceSet {
    pub mu_treat_pre: Vec<f64>,
    pub mu_control_post: Vec<f64>,
    pub mu_control_pre: Vec<f64>,
    pub rho_treat_post: Vec<f64>,
    pub rho_treat_pre: Vec<f64>,
    pub rho_control_post: Vec<f64>,
    pub rho_control_pre: Vec<f64>,
}

/// Per-observation nuisance predictions for panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelNuisanceSet {
    pub m_control: Vec<f64>,
    pub p_treat: Vec<f64>,
    pub p_control: Vec<f64>,
}

impl RcsNuisanceSet {
    pub(crate) fn with_len(n: usize) -> Self {
        let z = vec![0.0; n];
        Self {
            mu_treat_pre: z.clone(),
            mu_control_post: z.clone(),
            mu_control_pre: z.clone(),
            rho_treat_post: z.clone(),
            rho_treat_pre: z.clone(),
            rho_control_post: z.clone(),
            rho_control_pre: z,
        }
    }

    pub fn len(&self) -> usize {
        self.mu_treat_pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn slots(&self) -> [&Vec<f64>; 7] {
        [
            &self.mu_treat_pre,
            &self.mu_control_post,
            &self.mu_control_pre,
            &self.rho_treat_post,
            &self.rho_treat_pre,
            &self.rho_control_post,
            &self.rho_control_pre,
        ]
    }

    fn slots_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.mu_treat_pre,
            &mut self.mu_control_post,
            &mut self.mu_control_pre,
            &mut self.rho_treat_post,
            &mut self.rho_treat_pre,
            &mut self.rho_control_post,
            &mut self.rho_control_pre,
        ]
    }

    /// Writes `part`'s predictions into rows `rows`.
    pub(crate) fn scatter(&mut self, rows: &[usize], part: &RcsNuisanceSet) {
        for (dst, src) in self.slots_mut().into_iter().zip(part.slots()) {
            for (k, &i) in rows.iter().enumerate() {
                dst[i] = src[k];
            }
        }
    }

    pub(crate) fn check(&self, n: usize) -> Result<()> {
        check_slots(&self.slots(), n)
    }
}

impl PanelNuisanceSet {
    pub(crate) fn with_len(n: usize) -> Self {
        Self { m_control: vec![0.0; n], p_treat: vec![0.0; n], p_control: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.m_control.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn slots(&self) -> [&Vec<f64>; 3] {
        [&self.m_control, &self.p_treat, &self.p_control]
    }

    pub(crate) fn scatter(&mut self, rows: &[usize], part: &PanelNuisanceSet) {
        let dst = [&mut self.m_control, &mut self.p_treat, &mut self.p_control];
        for (dst, src) in dst.into_iter().zip(part.slots()) {
            for (k, &i) in rows.iter().enumerate() {
                dst[i] = src[k];
            }
        }
    }

    pub(crate) fn check(&self, n: usize) -> Result<()> {
        check_slots(&self.slots(), n)
    }
}

fn check_slots(slots: &[&Vec<f64>], n: usize) -> Result<()> {
    for s in slots {
        if s.len() != n {
            return Err(Error::LengthMismatch { column: "nuisance slot".into(), expected: n, found: s.len() });
        }
        if let Some(row) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "nuisance prediction", row });
        }
    }
    Ok(())
}

fn slot_seed(seed: u64, slot: u64, period: i64, dose: f64) -> u64 {
    derive_seed(seed, &[slot, period as u64, dose.to_bits()])
}

/// Kernel-weighted lasso of `y` at dose `dose`, predicted at `eval`.
#[allow(clippy::too_many_arguments)]
fn local_regression(
    features: ArrayView2<f64>,
    y: &[f64],
    d: &[f64],
    kernel: &KernelSpec,
    dose: f64,
    cell: String,
    eval: ArrayView2<f64>,
    config: &EstimationConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let w = kernel.weights(d, dose);
    if w.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyLocalCell { dose, period: cell });
    }
    let model = fit_lasso(features, y, &w, &LambdaGrid::default(), config.lasso_cv_folds, seed)?;
    Ok(model.predict(eval))
}

/// Fits the repeated cross-section nuisances on `train` and predicts them at
/// the feature rows `eval` (`[history | x]`, same column layout as `train`).
/// Expects an estimand already reduced to `lag = 0`.
pub fn estimate_nuisances_rcs(
    train: &RepeatedCrossSectionSample,
    eval: ArrayView2<f64>,
    estimand: &EstimandSpec,
    config: &EstimationConfig,
    kernel: &KernelSpec,
    seed: u64,
) -> Result<RcsNuisanceSet> {
    let post = estimand.t;
    let pre = estimand.t - 1;
    let (d, dc) = (estimand.d_treat, estimand.d_control);
    let features = train.features();
    let period_rows = |p: i64| -> Vec<usize> { (0..train.n()).filter(|&i| train.period()[i] == p).collect() };
    let grid = LambdaGrid::default();

    let outcome = |p: i64, dose: f64| -> Result<Vec<f64>> {
        let rows = period_rows(p);
        if rows.is_empty() {
            return Err(Error::EmptyLocalCell { dose, period: p.to_string() });
        }
        let y: Vec<f64> = rows.iter().map(|&i| train.y()[i]).collect();
        let dd: Vec<f64> = rows.iter().map(|&i| train.d()[i]).collect();
        let fx = features.select(Axis(0), &rows);
        local_regression(fx.view(), &y, &dd, kernel, dose, p.to_string(), eval, config, slot_seed(seed, SLOT_OUTCOME, p, dose))
    };
    let mu_treat_pre = outcome(pre, d)?;
    let mu_control_post = outcome(post, dc)?;
    let mu_control_pre = outcome(pre, dc)?;

    let density = |p: i64| -> Result<CondDensityModel> {
        let rows = period_rows(p);
        let dd: Vec<f64> = rows.iter().map(|&i| train.d()[i]).collect();
        let fx = features.select(Axis(0), &rows);
        fit_cond_density(fx.view(), &dd, config.ps_family, &grid, config.lasso_cv_folds, slot_seed(seed, SLOT_DENSITY, p, 0.0))
    };
    let dens_post = density(post)?;
    let dens_pre = density(pre)?;

    let labels: Vec<bool> = train.period().iter().map(|&p| p == post).collect();
    let period_model = fit_logistic_lasso(
        features.view(),
        &labels,
        &grid,
        config.lasso_cv_folds,
        slot_seed(seed, SLOT_PERIOD, post, 0.0),
    )?;
    let pr_post = period_model.predict_proba(eval);

    let rho = |model: &CondDensityModel, dose: f64, post_period: bool| -> Vec<f64> {
        eval.outer_iter()
            .zip(&pr_post)
            .map(|(row, &pp)| density_at(model, row, dose) * if post_period { pp } else { 1.0 - pp })
            .collect()
    };
    Ok(RcsNuisanceSet {
        mu_treat_pre,
        mu_control_post,
        mu_control_pre,
        rho_treat_post: rho(&dens_post, d, true),
        rho_treat_pre: rho(&dens_pre, d, false),
        rho_control_post: rho(&dens_post, dc, true),
        rho_control_pre: rho(&dens_pre, dc, false),
    })
}

/// Fits the panel nuisances on `train` and predicts them at `eval`.
pub fn estimate_nuisances_panel(
    train: &PanelSample,
    eval: ArrayView2<f64>,
    estimand: &EstimandSpec,
    config: &EstimationConfig,
    kernel: &KernelSpec,
    seed: u64,
) -> Result<PanelNuisanceSet> {
    let features = train.features();
    let dy = train.delta_y();
    let m_control = local_regression(
        features.view(),
        &dy,
        train.d(),
        kernel,
        estimand.d_control,
        estimand.t.to_string(),
        eval,
        config,
        slot_seed(seed, SLOT_OUTCOME, estimand.t, estimand.d_control),
    )?;
    let dens = fit_cond_density(
        features.view(),
        train.d(),
        config.ps_family,
        &LambdaGrid::default(),
        config.lasso_cv_folds,
        slot_seed(seed, SLOT_DENSITY, estimand.t, 0.0),
    )?;
    let at = |dose: f64| -> Vec<f64> { eval.outer_iter().map(|row| density_at(&dens, row, dose)).collect() };
    Ok(PanelNuisanceSet { m_control, p_treat: at(estimand.d_treat), p_control: at(estimand.d_control) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelFamily;
    use ndarray::Array2;

    fn kernel() -> KernelSpec {
        KernelSpec::new(KernelFamily::Epanechnikov, 0.5).unwrap()
    }

    fn rcs_train(n: usize) -> RepeatedCrossSectionSample {
        let x = Array2::from_shape_fn((n, 2), |(i, j)| ((i * 7 + j * 5) % 11) as f64 / 11.0);
        let d: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 3) % 13) as f64 / 6.0).collect();
        let t: Vec<i64> = (0..n).map(|i| (i % 2) as i64).collect();
        let y: Vec<f64> = (0..n).map(|i| if t[i] == 1 { 7.0 } else { 1.0 + x[[i, 0]] }).collect();
        RepeatedCrossSectionSample::new(y, d, t, Array2::zeros((n, 0)), vec![], x).unwrap()
    }

    #[test]
    fn constant_post_outcome_is_reproduced() {
        let train = rcs_train(80);
        let eval = Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64 / 7.0);
        let e = EstimandSpec::new(2.0, 1.5, 1, 0).unwrap();
        let n = estimate_nuisances_rcs(&train, eval.view(), &e, &EstimationConfig::default(), &kernel(), 3).unwrap();
        for v in &n.mu_control_post {
            assert!((v - 7.0).abs() < 1e-12);
        }
        assert_eq!(n.len(), 5);
    }

    #[test]
    fn balanced_covariate_free_periods_give_half() {
        let n = 40;
        // Each dose appears once per period, so both period density models agree.
        let d: Vec<f64> = (0..n).map(|i| 1.0 + ((i / 2) % 13) as f64 / 6.0).collect();
        let t: Vec<i64> = (0..n).map(|i| (i % 2) as i64).collect();
        let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let none = || Array2::zeros((n, 0));
        let train = RepeatedCrossSectionSample::new(y, d.clone(), t, none(), vec![], none()).unwrap();
        let eval = Array2::zeros((3, 0));
        let e = EstimandSpec::new(2.0, 1.5, 1, 0).unwrap();
        let nu = estimate_nuisances_rcs(&train, eval.view(), &e, &EstimationConfig::default(), &kernel(), 0).unwrap();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let dens = (-0.5 * ((2.0 - mean) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        for i in 0..3 {
            assert!((nu.rho_treat_post[i] - 0.5 * dens).abs() < 1e-9);
            assert!((nu.rho_treat_pre[i] - 0.5 * dens).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_local_cell_is_named() {
        let train = rcs_train(40);
        let eval = Array2::zeros((2, 2));
        let e = EstimandSpec::new(50.0, 1.5, 1, 0).unwrap();
        let err = estimate_nuisances_rcs(&train, eval.view(), &e, &EstimationConfig::default(), &kernel(), 0).unwrap_err();
        assert_eq!(err, Error::EmptyLocalCell { dose: 50.0, period: "0".into() });
        assert!(err.to_string().contains("empty local cell"));
    }

    fn panel_train(n: usize, shift: f64) -> PanelSample {
        let x = Array2::from_shape_fn((n, 2), |(i, j)| ((i * 7 + j * 5) % 11) as f64 / 11.0);
        let d: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 3) % 13) as f64 / 6.0).collect();
        let pre: Vec<f64> = (0..n).map(|i| (i % 5) as f64).collect();
        let post: Vec<f64> = pre.iter().map(|v| v + shift).collect();
        PanelSample::new(post, pre, d, Array2::zeros((n, 0)), vec![], x).unwrap()
    }

    #[test]
    fn panel_constant_change_and_shared_density() {
        let train = panel_train(60, 3.0);
        let eval = Array2::from_shape_fn((4, 2), |(i, j)| (i * j) as f64 / 5.0);
        let e = EstimandSpec::new(2.0, 2.0, 1, 0).unwrap();
        let n = estimate_nuisances_panel(&train, eval.view(), &e, &EstimationConfig::default(), &kernel(), 0).unwrap();
        assert!(n.m_control.iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert_eq!(n.p_treat, n.p_control);
    }
}
