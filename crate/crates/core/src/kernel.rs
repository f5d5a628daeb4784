//! Kernel functions, the dose-weighting function and bandwidth selection.
//!
//! A dose `D` is weighted towards a reference dose `d` by
//! `omega(D; d, h) = K((D - d) / h) / h`, which replaces the indicator
//! `1{D = d}` of a discrete treatment as `h` shrinks.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian moments are integrated over `[-8, 8]`.
const GAUSSIAN_RANGE: f64 = 8.0;
const SIMPSON_PANELS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// Second-order Epanechnikov kernel, `0.75 (1 - u^2)` on `[-1, 1]`.
    #[default]
    Epanechnikov,
    /// Standard normal density.
    Gaussian,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 2] = [KernelFamily::Epanechnikov, KernelFamily::Gaussian];

    /// Integration range covering the kernel's support.
    pub fn support(self) -> (f64, f64) {
        match self {
            KernelFamily::Epanechnikov => (-1.0, 1.0),
            KernelFamily::Gaussian => (-GAUSSIAN_RANGE, GAUSSIAN_RANGE),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Gaussian => "gaussian",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" | "epa" => Ok(KernelFamily::Epanechnikov),
            "gaussian" | "normal" => Ok(KernelFamily::Gaussian),
            other => Err(Error::InvalidParameter(format!("unknown kernel `{other}`"))),
        }
    }
}

pub fn kernel_value(family: KernelFamily, u: f64) -> f64 {
    match family {
        KernelFamily::Epanechnikov => {
            if u.abs() <= 1.0 {
                0.75 * (1.0 - u * u)
            } else {
                0.0
            }
        }
        KernelFamily::Gaussian => (-0.5 * u * u).exp() / (2.0 * PI).sqrt(),
    }
}

/// `omega(D; d, h) = K((D - d) / h) / h`.
pub fn omega(dose: f64, reference: f64, h: f64, family: KernelFamily) -> Result<f64> {
    Ok(KernelSpec::new(family, h)?.weight(dose, reference))
}

/// `2.34 n^(-1/4) / undersmooth_factor`.
pub fn rule_of_thumb_bandwidth(n: usize, undersmooth_factor: f64) -> f64 {
    2.34 * (n as f64).powf(-0.25) / undersmooth_factor
}

/// `int u^order K(u) du` by composite Simpson quadrature over the support.
pub fn kernel_moment(family: KernelFamily, order: u32) -> f64 {
    let (lo, hi) = family.support();
    simpson(|u| u.powi(order as i32) * kernel_value(family, u), lo, hi, SIMPSON_PANELS)
}

pub(crate) fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, panels: usize) -> f64 {
    let panels = panels + panels % 2;
    let step = (hi - lo) / panels as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..panels {
        let coef = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += coef * f(lo + step * i as f64);
    }
    acc * step / 3.0
}

/// A kernel family with a validated bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    h: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")));
        }
        Ok(Self { family, h })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    #[inline]
    pub fn weight(&self, dose: f64, reference: f64) -> f64 {
        kernel_value(self.family, (dose - reference) / self.h) / self.h
    }

    pub fn weights(&self, doses: &[f64], reference: f64) -> Vec<f64> {
        doses.iter().map(|&d| self.weight(d, reference)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPA: KernelFamily = KernelFamily::Epanechnikov;

    #[test]
    fn epanechnikov_values() {
        assert_eq!(kernel_value(EPA, 0.0), 0.75);
        assert_eq!(kernel_value(EPA, 1.0), 0.0);
        assert_eq!(kernel_value(EPA, -1.0), 0.0);
        assert_eq!(kernel_value(EPA, 0.5), 0.5625);
        assert_eq!(kernel_value(EPA, 1.5), 0.0);
    }

    #[test]
    fn gaussian_peak() {
        let v = kernel_value(KernelFamily::Gaussian, 0.0);
        assert!((v - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn omega_examples() {
        assert!((omega(3.0, 3.0, 0.5, EPA).unwrap() - 1.5).abs() < 1e-15);
        assert!((omega(3.2, 3.0, 0.5, EPA).unwrap() - 1.26).abs() < 1e-12);
        assert_eq!(omega(4.0, 3.0, 0.5, EPA).unwrap(), 0.0);
    }

    #[test]
    fn omega_rejects_nonpositive_bandwidth() {
        assert!(matches!(omega(1.0, 1.0, 0.0, EPA), Err(Error::InvalidParameter(_))));
        assert!(matches!(omega(1.0, 1.0, -0.3, EPA), Err(Error::InvalidParameter(_))));
        assert!(KernelSpec::new(EPA, f64::NAN).is_err());
    }

    #[test]
    fn rule_of_thumb_examples() {
        assert!((rule_of_thumb_bandwidth(2000, 1.0) - 0.3499116).abs() < 1e-6);
        assert!((rule_of_thumb_bandwidth(2000, 2.0) - 0.17496).abs() < 1e-5);
        assert_eq!(rule_of_thumb_bandwidth(1, 1.0), 2.34);
    }

    #[test]
    fn epanechnikov_moments() {
        assert!((kernel_moment(EPA, 0) - 1.0).abs() < 1e-6);
        assert!(kernel_moment(EPA, 1).abs() < 1e-8);
        // 0.75 * (2/3 - 2/5)
        assert!((kernel_moment(EPA, 2) - 0.2).abs() < 1e-6);
    }

    #[test]
    fn gaussian_moments() {
        let g = KernelFamily::Gaussian;
        assert!((kernel_moment(g, 0) - 1.0).abs() < 1e-6);
        assert!(kernel_moment(g, 1).abs() < 1e-8);
        assert!((kernel_moment(g, 2) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn parse_family() {
        assert_eq!("Epanechnikov".parse::<KernelFamily>().unwrap(), EPA);
        assert_eq!("gaussian".parse::<KernelFamily>().unwrap(), KernelFamily::Gaussian);
        assert!("triangular".parse::<KernelFamily>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn family() -> impl Strategy<Value = KernelFamily> {
            prop_oneof![Just(KernelFamily::Epanechnikov), Just(KernelFamily::Gaussian)]
        }

        proptest! {
            #[test]
            fn omega_is_symmetric(f in family(), a in -5.0..5.0f64, b in -5.0..5.0f64, h in 0.01..3.0f64) {
                let k = KernelSpec::new(f, h).unwrap();
                prop_assert_eq!(k.weight(a, b), k.weight(b, a));
            }

            #[test]
            fn omega_scales_with_bandwidth(f in family(), a in -5.0..5.0f64, b in -5.0..5.0f64, h in 0.01..3.0f64) {
                let lhs = omega(a, b, h, f).unwrap();
                let rhs = omega((a - b) / h, 0.0, 1.0, f).unwrap() / h;
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
                prop_assert!(lhs >= 0.0);
            }
        }
    }
}
