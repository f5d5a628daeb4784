//! Normal conditional-density models for the dose.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Normal};

use super::lasso::{fit_lasso, LambdaGrid, LassoModel};
use crate::error::{Error, Result};

/// Lower bound applied to every density prediction.
pub const DENSITY_FLOOR: f64 = 1e-4;
/// Lower bound on the residual standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityFamily {
    /// `D | X ~ N(mu(X), sigma^2)`.
    #[default]
    LinearNormal,
    /// `ln D | X ~ N(mu(X), sigma^2)`, a lognormal dose density.
    LoglinearNormal,
}

impl fmt::Display for DensityFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensityFamily::LinearNormal => "linear_normal",
            DensityFamily::LoglinearNormal => "loglinear_normal",
        })
    }
}

impl FromStr for DensityFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "linear_normal" => Ok(DensityFamily::LinearNormal),
            "loglinear" | "loglinear_normal" | "log" => Ok(DensityFamily::LoglinearNormal),
            other => Err(Error::InvalidParameter(format!("unknown density family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondDensityModel {
    pub family: DensityFamily,
    pub mean_model: LassoModel,
    pub sigma: f64,
}

fn std_normal_pdf(z: f64) -> f64 {
    Normal::standard().pdf(z)
}

/// Fits the mean of `D` (or `ln D`) by lasso and the residual standard
/// deviation by the in-sample root mean squared residual.
pub fn fit_cond_density(
    features: ArrayView2<f64>,
    doses: &[f64],
    family: DensityFamily,
    grid: &LambdaGrid,
    cv_folds: usize,
    seed: u64,
) -> Result<CondDensityModel> {
    let target: Vec<f64> = match family {
        DensityFamily::LinearNormal => doses.to_vec(),
        DensityFamily::LoglinearNormal => {
            if let Some(row) = doses.iter().position(|&d| d <= 0.0) {
                return Err(Error::NonPositiveDose { value: doses[row], row });
            }
            doses.iter().map(|d| d.ln()).collect()
        }
    };
    let weights = vec![1.0; target.len()];
    let mean_model = fit_lasso(features, &target, &weights, grid, cv_folds, seed)?;
    let mse = features
        .outer_iter()
        .zip(&target)
        .map(|(row, &t)| (t - mean_model.predict_row(row)).powi(2))
        .sum::<f64>()
        / target.len() as f64;
    Ok(CondDensityModel { family, mean_model, sigma: mse.sqrt().max(SIGMA_FLOOR) })
}

impl CondDensityModel {
    /// Density without the floor, for diagnostics.
    pub fn raw_density(&self, row: ArrayView1<f64>, d: f64) -> f64 {
        let mu = self.mean_model.predict_row(row);
        match self.family {
            DensityFamily::LinearNormal => std_normal_pdf((d - mu) / self.sigma) / self.sigma,
            DensityFamily::LoglinearNormal => {
                if d <= 0.0 {
                    0.0
                } else {
                    std_normal_pdf((d.ln() - mu) / self.sigma) / (d * self.sigma)
                }
            }
        }
    }
}

/// Conditional density of dose `d` at a feature row, floored at
/// [`DENSITY_FLOOR`].
pub fn density_at(model: &CondDensityModel, row: ArrayView1<f64>, d: f64) -> f64 {
    model.raw_density(row, d).max(DENSITY_FLOOR)
}
