//! Simulation designs and the Monte Carlo harness.
//!
//! Repeated cross-sections (one period draw per unit, `T ~ Bernoulli(0.5)`):
//!
//! ```text
//! X_j = 0.5 T + Q_j,   D = X b + 0.5 U + V,   Y = X b + (1 + D^2) T + U + W
//! ```
//!
//! Panels (both periods per unit):
//!
//! ```text
//! D = X b + 0.5 U + V,   Y_0 = U + W_0,   Y_1 = 1 + D^2 + X b + U + W_1
//! ```
//!
//! with `Q_j, X_j, U, V, W ~ Uniform(0, 2)` independent and `b_j = 0.4 / j^2`.
//! The transitory error `W` is drawn afresh in each panel period; the fixed
//! effect `U` is shared.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EstimandSpec, EstimationConfig, PanelSample, RepeatedCrossSectionSample};
use crate::error::{Error, Result};
use crate::estimator::{estimate_panel, estimate_rcs, Fit};
use crate::inference::{multiplier_bootstrap, MultiplierLaw};
use crate::nuisance::DensityFamily;
use crate::util::derive_seed;

const STREAM_DATA: u64 = 1;
const STREAM_ESTIMATION: u64 = 2;
const STREAM_BOOTSTRAP: u64 = 3;
/// Largest tolerated share of failed replications.
const MAX_FAILURE_SHARE: f64 = 0.05;

/// `b_j = 0.4 / j^2`, `j = 1..=p`.
pub fn coefficients(p: usize) -> Vec<f64> {
    (1..=p).map(|j| 0.4 / (j * j) as f64).collect()
}

fn unif02() -> Uniform<f64> {
    Uniform::new(0.0, 2.0).expect("valid bounds")
}

pub fn gen_rcs_dgp(n: usize, p: usize, seed: u64) -> RepeatedCrossSectionSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u02 = unif02();
    let beta = coefficients(p);
    let mut x = Array2::zeros((n, p));
    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut period = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_bool(0.5) as i64;
        let mut index = 0.0;
        for j in 0..p {
            let v = 0.5 * t as f64 + rng.sample(u02);
            x[[i, j]] = v;
            index += beta[j] * v;
        }
        let (u, v, w) = (rng.sample(u02), rng.sample(u02), rng.sample(u02));
        let dose = index + 0.5 * u + v;
        y.push(index + (1.0 + dose * dose) * t as f64 + u + w);
        d.push(dose);
        period.push(t);
    }
    if period.iter().all(|&t| t == period[0]) {
        // Vanishingly rare for realistic n; keep the two-period invariant.
        let flip = 1 - period[0];
        period[0] = flip;
    }
    RepeatedCrossSectionSample::new(y, d, period, Array2::zeros((n, 0)), vec![], x)
        .expect("simulated data are finite and nonnegative")
}

pub fn gen_panel_dgp(n: usize, p: usize, seed: u64) -> PanelSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u02 = unif02();
    let beta = coefficients(p);
    let mut x = Array2::zeros((n, p));
    let mut y_pre = Vec::with_capacity(n);
    let mut y_post = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let mut index = 0.0;
        for j in 0..p {
            let v = rng.sample(u02);
            x[[i, j]] = v;
            index += beta[j] * v;
        }
        let (u, v) = (rng.sample(u02), rng.sample(u02));
        let (w0, w1) = (rng.sample(u02), rng.sample(u02));
        let dose = index + 0.5 * u + v;
        y_pre.push(u + w0);
        y_post.push(1.0 + dose * dose + index + u + w1);
        d.push(dose);
    }
    PanelSample::new(y_post, y_pre, d, Array2::zeros((n, 0)), vec![], x)
        .expect("simulated data are finite and nonnegative")
}

/// ATET of dose `d` versus `d_prime` in both designs: `d^2 - d'^2`.
pub fn true_atet(d: f64, d_prime: f64) -> f64 {
    d * d - d_prime * d_prime
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Rcs,
    Panel,
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Design::Rcs => "rcs",
            Design::Panel => "panel",
        })
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rcs" => Ok(Design::Rcs),
            "panel" => Ok(Design::Panel),
            other => Err(Error::InvalidParameter(format!("unknown design `{other}`"))),
        }
    }
}

/// Estimator variants: rule-of-thumb or halved bandwidth, crossed with the
/// linear or loglinear density model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMethod {
    Lasso,
    Lnorm,
    Under,
    LnUnder,
}

impl McMethod {
    pub const ALL: [McMethod; 4] = [McMethod::Lasso, McMethod::Lnorm, McMethod::Under, McMethod::LnUnder];

    /// `base` with the bandwidth factor and density family of this method.
    pub fn apply(self, base: &EstimationConfig) -> EstimationConfig {
        let (undersmooth_factor, ps_family) = match self {
            McMethod::Lasso => (1.0, DensityFamily::LinearNormal),
            McMethod::Lnorm => (1.0, DensityFamily::LoglinearNormal),
            McMethod::Under => (2.0, DensityFamily::LinearNormal),
            McMethod::LnUnder => (2.0, DensityFamily::LoglinearNormal),
        };
        EstimationConfig { undersmooth_factor, ps_family, bandwidth: None, ..*base }
    }
}

impl fmt::Display for McMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            McMethod::Lasso => "lasso",
            McMethod::Lnorm => "lnorm",
            McMethod::Under => "under",
            McMethod::LnUnder => "ln_under",
        })
    }
}

impl FromStr for McMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lasso" => Ok(McMethod::Lasso),
            "lnorm" => Ok(McMethod::Lnorm),
            "under" => Ok(McMethod::Under),
            "ln_under" | "ln-under" | "lnunder" => Ok(McMethod::LnUnder),
            other => Err(Error::InvalidParameter(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummaryRow {
    pub design: Design,
    pub method: McMethod,
    pub n: usize,
    pub p: usize,
    /// Successful replications entering the summary.
    pub reps: usize,
    pub failures: usize,
    pub bias: f64,
    pub std: f64,
    pub rmse: f64,
    pub avse: f64,
    pub cover: f64,
    /// Coverage of the multiplier-bootstrap interval, when requested.
    pub boot_cover: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub index: usize,
    pub delta_hat: f64,
    pub se: f64,
    pub covered: bool,
    pub boot_covered: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSpec {
    pub design: Design,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub method: McMethod,
    /// Bootstrap replications per Monte Carlo draw; none skips the bootstrap.
    pub bootstrap: Option<usize>,
    /// Worker threads, 0 for one per core.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub row: McSummaryRow,
    pub replications: Vec<Replication>,
    pub seconds: f64,
}

const D_TREAT: f64 = 3.0;
const D_CONTROL: f64 = 2.0;

/// The estimand targeted by the harness: dose 3 versus 2 in period 1.
pub fn mc_estimand() -> EstimandSpec {
    EstimandSpec { d_treat: D_TREAT, d_control: D_CONTROL, t: 1, lag: 0 }
}

/// Seed of the dataset drawn in replication `index` under master `seed`.
pub fn data_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[STREAM_DATA, index as u64])
}

fn replicate(spec: &McSpec, config: &EstimationConfig, index: usize) -> Result<Replication> {
    let r = index as u64;
    let data_seed = data_seed(config.seed, index);
    let cfg = EstimationConfig { seed: derive_seed(config.seed, &[STREAM_ESTIMATION, r]), ..*config };
    let estimand = mc_estimand();
    let fit: Fit = match spec.design {
        Design::Rcs => estimate_rcs(&gen_rcs_dgp(spec.n, spec.p, data_seed), &estimand, &cfg)?,
        Design::Panel => estimate_panel(&gen_panel_dgp(spec.n, spec.p, data_seed), &estimand, &cfg)?,
    };
    let truth = true_atet(D_TREAT, D_CONTROL);
    let est = &fit.estimate;
    let boot_covered = match spec.bootstrap {
        Some(b) => {
            let seed = derive_seed(config.seed, &[STREAM_BOOTSTRAP, r]);
            let (lo, hi) = multiplier_bootstrap(&fit.scores, b, cfg.alpha, seed, MultiplierLaw::Exponential)?;
            Some(lo <= truth && truth <= hi)
        }
        None => None,
    };
    Ok(Replication {
        index,
        delta_hat: est.delta_hat,
        se: est.se,
        covered: est.ci_low <= truth && truth <= est.ci_high,
        boot_covered,
    })
}

/// Summary statistics of successful replications against `truth`. The
/// standard deviation uses the `1/m` convention so that
/// `rmse^2 = bias^2 + std^2`.
pub fn summarize(spec: &McSpec, reps: &[Replication], failures: usize, truth: f64) -> McSummaryRow {
    let m = reps.len() as f64;
    let mean = reps.iter().map(|r| r.delta_hat).sum::<f64>() / m;
    let std = (reps.iter().map(|r| (r.delta_hat - mean).powi(2)).sum::<f64>() / m).sqrt();
    let rmse = (reps.iter().map(|r| (r.delta_hat - truth).powi(2)).sum::<f64>() / m).sqrt();
    let share = |f: &dyn Fn(&Replication) -> bool| reps.iter().filter(|r| f(r)).count() as f64 / m;
    McSummaryRow {
        design: spec.design,
        method: spec.method,
        n: spec.n,
        p: spec.p,
        reps: reps.len(),
        failures,
        bias: mean - truth,
        std,
        rmse,
        avse: reps.iter().map(|r| r.se).sum::<f64>() / m,
        cover: share(&|r| r.covered),
        boot_cover: spec.bootstrap.map(|_| share(&|r| r.boot_covered == Some(true))),
    }
}

/// Runs `spec.reps` independent replications of simulate, cross-fit,
/// estimate and infer. Replication `r` draws its data and estimation seeds
/// from `(config.seed, r)`, so the summary does not depend on scheduling.
pub fn monte_carlo(spec: &McSpec, config: &EstimationConfig) -> Result<McReport> {
    if spec.reps < 2 {
        return Err(Error::InvalidParameter(format!("reps must be >= 2, got {}", spec.reps)));
    }
    if spec.n == 0 || spec.p == 0 {
        return Err(Error::InvalidParameter("n and p must be positive".into()));
    }
    let cfg = spec.method.apply(config);
    cfg.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<Replication>> =
        pool.install(|| (0..spec.reps).into_par_iter().map(|r| replicate(spec, &cfg, r)).collect());
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    if failures as f64 > MAX_FAILURE_SHARE * spec.reps as f64 || failures == spec.reps {
        return Err(Error::TooManyFailures { failed: failures, reps: spec.reps });
    }
    let replications: Vec<Replication> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    let row = summarize(spec, &replications, failures, true_atet(D_TREAT, D_CONTROL));
    Ok(McReport { row, replications, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_examples() {
        let b = coefficients(100);
        assert_eq!(b[0], 0.4);
        assert_eq!(b[1], 0.1);
        assert!((b[9] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn true_atet_examples() {
        assert_eq!(true_atet(3.0, 2.0), 5.0);
        assert_eq!(true_atet(2.5, 2.5), 0.0);
        assert_eq!(true_atet(2.0, 3.0), -5.0);
    }

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(gen_panel_dgp(50, 3, 9), gen_panel_dgp(50, 3, 9));
        assert_ne!(gen_panel_dgp(50, 3, 9), gen_panel_dgp(50, 3, 10));
        assert_eq!(gen_rcs_dgp(50, 3, 9), gen_rcs_dgp(50, 3, 9));
    }

    #[test]
    fn method_configs() {
        let base = EstimationConfig::default();
        assert_eq!(McMethod::Under.apply(&base).undersmooth_factor, 2.0);
        assert_eq!(McMethod::Lnorm.apply(&base).ps_family, DensityFamily::LoglinearNormal);
        assert_eq!("ln_under".parse::<McMethod>().unwrap(), McMethod::LnUnder);
        assert_eq!(McMethod::LnUnder.to_string(), "ln_under");
    }

    #[test]
    fn summary_identity() {
        let spec = McSpec { design: Design::Panel, n: 10, p: 1, reps: 3, method: McMethod::Under, bootstrap: None, threads: 1 };
        let reps: Vec<Replication> = [4.8, 5.3, 5.1]
            .iter()
            .enumerate()
            .map(|(index, &d)| Replication { index, delta_hat: d, se: 0.2, covered: (d - 5.0f64).abs() < 0.25, boot_covered: None })
            .collect();
        let row = summarize(&spec, &reps, 0, 5.0);
        assert!((row.rmse.powi(2) - row.bias.powi(2) - row.std.powi(2)).abs() < 1e-12);
        assert!((row.cover - 2.0 / 3.0).abs() < 1e-15);
        assert!((row.avse - 0.2).abs() < 1e-15);
    }

    #[test]
    fn reps_must_exceed_one() {
        let spec = McSpec { design: Design::Panel, n: 200, p: 2, reps: 1, method: McMethod::Under, bootstrap: None, threads: 1 };
        assert!(matches!(monte_carlo(&spec, &EstimationConfig::default()), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn two_replications_differ() {
        let spec = McSpec { design: Design::Panel, n: 400, p: 5, reps: 2, method: McMethod::Lasso, bootstrap: None, threads: 1 };
        let report = monte_carlo(&spec, &EstimationConfig::default()).unwrap();
        assert_eq!(report.row.reps, 2);
        assert!(report.row.std > 0.0);
        let again = monte_carlo(&spec, &EstimationConfig::default()).unwrap();
        assert_eq!(report.replications, again.replications);
    }
}
