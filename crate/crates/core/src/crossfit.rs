//! Fold construction and cross-fitted nuisance estimation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EstimandSpec, EstimationConfig, PanelSample, RepeatedCrossSectionSample};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::nuisance::{estimate_nuisances_panel, estimate_nuisances_rcs, PanelNuisanceSet, RcsNuisanceSet};
use crate::util::derive_seed;

const FOLD_SPLIT: u64 = 0xF01D;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    k: usize,
}

impl FoldAssignment {
    /// Wraps an explicit assignment; every label must lie in `[0, k)` and
    /// every fold must be non-empty.
    pub fn from_labels(fold_of: Vec<usize>, k: usize) -> Result<Self> {
        let mut sizes = vec![0usize; k];
        for &f in &fold_of {
            if f >= k {
                return Err(Error::InvalidParameter(format!("fold label {f} outside [0, {k})")));
            }
            sizes[f] += 1;
        }
        if k < 2 || sizes.contains(&0) {
            return Err(Error::InvalidParameter("every one of at least two folds needs a row".into()));
        }
        Ok(Self { fold_of, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn rows_in(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn rows_outside(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.fold_of.iter().filter(|&&g| g == f).count()).collect()
    }
}

/// Uniform random partition of `n` rows into `k` folds of near-equal size.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidParameter(format!("cannot split {n} rows into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k })
}

/// The fold split used by the estimation pipeline for a given config.
pub fn default_folds(n: usize, config: &EstimationConfig) -> Result<FoldAssignment> {
    split_folds(n, config.folds, derive_seed(config.seed, &[FOLD_SPLIT]))
}

fn fold_seed(config: &EstimationConfig, fold: usize) -> u64 {
    derive_seed(config.seed, &[fold as u64])
}

pub fn crossfit_nuisances_rcs(
    sample: &RepeatedCrossSectionSample,
    estimand: &EstimandSpec,
    config: &EstimationConfig,
    kernel: &KernelSpec,
) -> Result<RcsNuisanceSet> {
    let folds = default_folds(sample.n(), config)?;
    crossfit_rcs_with_folds(sample, &folds, estimand, config, kernel)
}

/// Cross-fits on an explicit fold assignment: fold `k` is predicted by
/// models trained on every other fold.
pub fn crossfit_rcs_with_folds(
    sample: &RepeatedCrossSectionSample,
    folds: &FoldAssignment,
    estimand: &EstimandSpec,
    config: &EstimationConfig,
    kernel: &KernelSpec,
) -> Result<RcsNuisanceSet> {
    check_folds(folds, sample.n())?;
    let features = sample.features();
    let parts: Vec<Result<(Vec<usize>, RcsNuisanceSet)>> = (0..folds.k())
        .into_par_iter()
        .map(|k| {
            let eval_rows = folds.rows_in(k);
            let train = sample.select_rows(&folds.rows_outside(k));
            let eval = features.select(ndarray::Axis(0), &eval_rows);
            estimate_nuisances_rcs(&train, eval.view(), estimand, config, kernel, fold_seed(config, k))
                .map(|part| (eval_rows, part))
                .map_err(|e| e.in_fold(k))
        })
        .collect();
    let mut out = RcsNuisanceSet::with_len(sample.n());
    for part in parts {
        let (rows, part) = part?;
        out.scatter(&rows, &part);
    }
    out.check(sample.n())?;
    Ok(out)
}

pub fn crossfit_nuisances_panel(
    sample: &PanelSample,
    estimand: &EstimandSpec,
    config: &EstimationConfig,
    kernel: &KernelSpec,
) -> Result<PanelNuisanceSet> {
    let folds = default_folds(sample.n(), config)?;
    crossfit_panel_with_folds(sample, &folds, estimand, config, kernel)
}

pub fn crossfit_panel_with_folds(
    sample: &PanelSample,
    folds: &FoldAssignment,
    estimand: &EstimandSpec,
    config: &EstimationConfig,
    kernel: &KernelSpec,
) -> Result<PanelNuisanceSet> {
    check_folds(folds, sample.n())?;
    let features = sample.features();
    let parts: Vec<Result<(Vec<usize>, PanelNuisanceSet)>> = (0..folds.k())
        .into_par_iter()
        .map(|k| {
            let eval_rows = folds.rows_in(k);
            let train = sample.select_rows(&folds.rows_outside(k));
            let eval = features.select(ndarray::Axis(0), &eval_rows);
            estimate_nuisances_panel(&train, eval.view(), estimand, config, kernel, fold_seed(config, k))
                .map(|part| (eval_rows, part))
                .map_err(|e| e.in_fold(k))
        })
        .collect();
    let mut out = PanelNuisanceSet::with_len(sample.n());
    for part in parts {
        let (rows, part) = part?;
        out.scatter(&rows, &part);
    }
    out.check(sample.n())?;
    Ok(out)
}

fn check_folds(folds: &FoldAssignment, n: usize) -> Result<()> {
    if folds.fold_of().len() != n {
        return Err(Error::LengthMismatch { column: "fold assignment".into(), expected: n, found: folds.fold_of().len() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelFamily;
    use crate::simulation::{gen_panel_dgp, gen_rcs_dgp};

    #[test]
    fn fold_sizes() {
        let mut s = split_folds(10, 3, 1).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![3, 3, 4]);
        assert_eq!(split_folds(9, 3, 1).unwrap().sizes(), vec![3, 3, 3]);
        assert_eq!(split_folds(50, 3, 9).unwrap(), split_folds(50, 3, 9).unwrap());
        assert_ne!(split_folds(50, 3, 9).unwrap(), split_folds(50, 3, 10).unwrap());
        assert!(split_folds(2, 3, 0).is_err());
    }

    fn kernel() -> KernelSpec {
        KernelSpec::new(KernelFamily::Epanechnikov, 0.5).unwrap()
    }

    #[test]
    fn constant_outcome_panel_stacks_constant() {
        let s = gen_panel_dgp(120, 3, 4);
        let s = PanelSample::new(vec![4.0; 120], vec![1.0; 120], s.d().to_vec(), s.history().clone(), vec![], s.x().clone())
            .unwrap();
        let e = EstimandSpec::new(3.0, 2.0, 1, 0).unwrap();
        let cfg = EstimationConfig { folds: 2, ..Default::default() };
        let nu = crossfit_nuisances_panel(&s, &e, &cfg, &kernel()).unwrap();
        assert_eq!(nu.len(), 120);
        assert!(nu.m_control.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn own_row_never_informs_own_prediction() {
        let s = gen_panel_dgp(150, 4, 5);
        let e = EstimandSpec::new(3.0, 2.0, 1, 0).unwrap();
        let cfg = EstimationConfig::default();
        let folds = default_folds(150, &cfg).unwrap();
        let base = crossfit_panel_with_folds(&s, &folds, &e, &cfg, &kernel()).unwrap();
        let row = folds.rows_in(1)[0];
        let mut y_post = s.y_post().to_vec();
        y_post[row] += 100.0;
        let mut d = s.d().to_vec();
        d[row] = 2.1;
        let moved = PanelSample::new(y_post, s.y_pre().to_vec(), d, s.history().clone(), vec![], s.x().clone()).unwrap();
        let other = crossfit_panel_with_folds(&moved, &folds, &e, &cfg, &kernel()).unwrap();
        for i in folds.rows_in(1) {
            assert_eq!(base.m_control[i], other.m_control[i]);
            assert_eq!(base.p_treat[i], other.p_treat[i]);
        }
        assert_ne!(base.m_control[folds.rows_in(0)[0]], other.m_control[folds.rows_in(0)[0]]);
    }

    #[test]
    fn row_permutation_equivariance_rcs() {
        let s = gen_rcs_dgp(240, 3, 6);
        let e = EstimandSpec::new(3.0, 2.0, 1, 0).unwrap();
        let cfg = EstimationConfig::default();
        let folds = default_folds(240, &cfg).unwrap();
        let base = crossfit_rcs_with_folds(&s, &folds, &e, &cfg, &KernelSpec::new(KernelFamily::Epanechnikov, 0.8).unwrap())
            .unwrap();
        // perm[k] = original row placed at position k.
        let perm: Vec<usize> = (0..240).map(|k| (k * 7 + 3) % 240).collect();
        let permuted = s.select_rows(&perm);
        let pf = FoldAssignment::from_labels(perm.iter().map(|&i| folds.fold_of()[i]).collect(), 3).unwrap();
        let out = crossfit_rcs_with_folds(&permuted, &pf, &e, &cfg, &KernelSpec::new(KernelFamily::Epanechnikov, 0.8).unwrap())
            .unwrap();
        for (slot, (a, b)) in base.slots().iter().zip(out.slots()).enumerate() {
            for (k, &i) in perm.iter().enumerate() {
                assert!((a[i] - b[k]).abs() <= 1e-9 * (1.0 + a[i].abs()), "slot {slot}: {} vs {}", a[i], b[k]);
            }
        }
    }

    #[test]
    fn fold_errors_are_annotated() {
        let s = gen_panel_dgp(60, 2, 1);
        let e = EstimandSpec::new(3.0, 40.0, 1, 0).unwrap();
        let err = crossfit_nuisances_panel(&s, &e, &EstimationConfig::default(), &kernel()).unwrap_err();
        assert!(matches!(err, Error::Fold { .. }));
        assert!(err.to_string().starts_with("fold "));
        assert!(err.to_string().contains("empty local cell"));
    }
}
