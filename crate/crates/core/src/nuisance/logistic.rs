//! L1-penalized logistic regression for period probabilities.
//!
//! Minimizes `-(1/n) loglik + lambda |b|_1` on standardized features by
//! coordinate descent on successive quadratic (IRLS) approximations.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, ShapeBuilder};
use serde::{Deserialize, Serialize};

use super::lasso::{folds_by_key, row_hash, LambdaGrid, MAX_DEV_EXPLAINED, MIN_DEV_GAIN, TOLERANCE};
use crate::error::{Error, Result};
use crate::util::derive_seed;

const PROB_CLIP: f64 = 1e-5;
const MAX_IRLS: usize = 100;
const MAX_SWEEPS: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticLassoModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl LogisticLassoModel {
    pub fn linear_predictor(&self, row: ArrayView1<f64>) -> f64 {
        let mut eta = self.intercept;
        for (j, &b) in self.coefficients.iter().enumerate() {
            if b != 0.0 {
                eta += b * (row[j] - self.feature_means[j]) / self.feature_scales[j];
            }
        }
        eta
    }

    /// Predicted probability of the positive class, clipped to
    /// `[1e-5, 1 - 1e-5]`.
    pub fn predict_proba_row(&self, row: ArrayView1<f64>) -> f64 {
        sigmoid(self.linear_predictor(row)).clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.outer_iter().map(|row| self.predict_proba_row(row)).collect()
    }
}

/// Standardized column-major copy of a design; zero-variance columns are
/// left at zero and never updated.
struct Design {
    z: Array2<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    usable: Vec<bool>,
}

impl Design {
    fn new(x: ArrayView2<f64>) -> Self {
        let n = x.nrows() as f64;
        let r = x.ncols();
        let mut z = Array2::zeros((x.nrows(), r).f());
        z.assign(&x);
        let mut means = vec![0.0; r];
        let mut scales = vec![1.0; r];
        let mut usable = vec![false; r];
        for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
            let mean = col.sum() / n;
            let second = col.iter().map(|v| v * v).sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            means[j] = mean;
            if var > 1e-13 * second + 1e-300 {
                scales[j] = var.sqrt();
                usable[j] = true;
                col.mapv_inplace(|v| (v - mean) / scales[j]);
            } else {
                col.fill(0.0);
            }
        }
        Self { z, means, scales, usable }
    }

    fn col(&self, j: usize) -> &[f64] {
        self.z.column(j).to_slice().expect("columns are contiguous")
    }
}

fn deviance(y: &[f64], eta: &[f64]) -> f64 {
    -2.0 * y
        .iter()
        .zip(eta)
        .map(|(&yi, &e)| {
            let p = sigmoid(e).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            yi * p.ln() + (1.0 - yi) * (1.0 - p).ln()
        })
        .sum::<f64>()
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    (z.abs() - lambda).max(0.0) * z.signum()
}

/// Dot product with four partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Bound on the weighted squared coordinate change `(x'Wx / n) delta^2`
/// along the path. The selected penalty is refit to `TOLERANCE^2`, i.e. an
/// unsquared weighted change below [`TOLERANCE`].
const PATH_TOLERANCE: f64 = 1e-7;
const FINAL_TOLERANCE: f64 = TOLERANCE * TOLERANCE;

#[derive(Debug, Clone)]
struct PathState {
    b0: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
}

struct Solver<'a> {
    design: &'a Design,
    y: &'a [f64],
}

impl Solver<'_> {
    fn null_state(&self) -> PathState {
        let n = self.y.len();
        let b0 = logit(self.y.iter().sum::<f64>() / n as f64);
        PathState { b0, beta: vec![0.0; self.design.usable.len()], eta: vec![b0; n] }
    }

    fn state_of(&self, model: &LogisticLassoModel) -> PathState {
        let mut st = PathState { b0: model.intercept, beta: model.coefficients.clone(), eta: vec![] };
        self.refresh_eta(&mut st);
        st
    }

    fn refresh_eta(&self, st: &mut PathState) {
        st.eta.clear();
        st.eta.resize(self.y.len(), st.b0);
        for (j, &b) in st.beta.iter().enumerate() {
            if b != 0.0 {
                axpy(b, self.design.col(j), &mut st.eta);
            }
        }
    }

    fn model(&self, st: &PathState, lambda: f64) -> LogisticLassoModel {
        LogisticLassoModel {
            intercept: st.b0,
            coefficients: st.beta.clone(),
            lambda,
            feature_means: self.design.means.clone(),
            feature_scales: self.design.scales.clone(),
        }
    }

    /// IRLS at one penalty from the warm start `st`.
    fn solve(&self, st: &mut PathState, lambda: f64, tol: f64) {
        let (design, y) = (self.design, self.y);
        let n = y.len();
        let nf = n as f64;
        let r = st.beta.len();
        let mut w = vec![0.0; n];
        let mut res = vec![0.0; n];
        let mut xw2 = vec![0.0; r];
        let mut wz = vec![0.0; n * r];
        for _ in 0..MAX_IRLS {
            for i in 0..n {
                let p = sigmoid(st.eta[i]).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                w[i] = p * (1.0 - p);
                res[i] = (y[i] - p) / w[i];
            }
            let sw = w.iter().sum::<f64>();
            for j in (0..r).filter(|&j| design.usable[j]) {
                let col = design.col(j);
                let wzj = &mut wz[j * n..(j + 1) * n];
                for ((o, &wi), &zi) in wzj.iter_mut().zip(&w).zip(col) {
                    *o = wi * zi;
                }
                xw2[j] = dot(wzj, col) / nf;
            }
            let b0_before = st.b0;
            let beta_before = st.beta.clone();

            let update = |j: usize, beta: &mut [f64], res: &mut [f64]| -> f64 {
                let grad = dot(&wz[j * n..(j + 1) * n], res) / nf;
                let old = beta[j];
                let new = soft_threshold(grad + xw2[j] * old, lambda) / xw2[j];
                let delta = new - old;
                if delta != 0.0 {
                    beta[j] = new;
                    axpy(-delta, design.col(j), res);
                }
                xw2[j] * delta * delta
            };
            let intercept = |b0: &mut f64, res: &mut [f64]| -> f64 {
                let delta = dot(res, &w) / sw;
                *b0 += delta;
                for ri in res.iter_mut() {
                    *ri -= delta;
                }
                (sw / nf) * delta * delta
            };

            let mut sweeps = 0;
            loop {
                sweeps += 1;
                let mut change = intercept(&mut st.b0, &mut res);
                for j in (0..r).filter(|&j| design.usable[j]) {
                    change = change.max(update(j, &mut st.beta, &mut res));
                }
                if change < tol || sweeps >= MAX_SWEEPS {
                    break;
                }
                let active: Vec<usize> = (0..r).filter(|&j| st.beta[j] != 0.0).collect();
                while sweeps < MAX_SWEEPS {
                    sweeps += 1;
                    let mut change = intercept(&mut st.b0, &mut res);
                    for &j in &active {
                        change = change.max(update(j, &mut st.beta, &mut res));
                    }
                    if change < tol {
                        break;
                    }
                }
            }

            self.refresh_eta(st);
            let moved = (0..r)
                .map(|j| xw2[j] * (st.beta[j] - beta_before[j]).powi(2))
                .fold((sw / nf) * (st.b0 - b0_before).powi(2), f64::max);
            if moved < tol {
                break;
            }
        }
    }

    /// Fits the path along `lambdas` (descending) with warm starts, ending
    /// early under the same rules as the squared-error path.
    fn path(&self, lambdas: &[f64]) -> Vec<LogisticLassoModel> {
        let mut st = self.null_state();
        let null_dev = deviance(self.y, &st.eta);
        let mut out = Vec::with_capacity(lambdas.len());
        let mut last = 0.0;
        for &lambda in lambdas {
            self.solve(&mut st, lambda, PATH_TOLERANCE);
            out.push(self.model(&st, lambda));
            let explained = if null_dev > 0.0 { 1.0 - deviance(self.y, &st.eta) / null_dev } else { 0.0 };
            if out.len() > 1 && (explained > MAX_DEV_EXPLAINED || explained - last < MIN_DEV_GAIN * explained) {
                break;
            }
            last = explained;
        }
        out
    }
}

/// Fits an L1-penalized logistic regression of `labels` on `features`,
/// choosing the penalty by cross-validated deviance when the grid has
/// several values.
pub fn fit_logistic_lasso(
    features: ArrayView2<f64>,
    labels: &[bool],
    grid: &LambdaGrid,
    cv_folds: usize,
    seed: u64,
) -> Result<LogisticLassoModel> {
    grid.validate()?;
    let n = labels.len();
    if features.nrows() != n {
        return Err(Error::LengthMismatch { column: "labels".into(), expected: features.nrows(), found: n });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();

    let design = Design::new(features);
    let ybar = positives as f64 / n as f64;
    let lambda_max = (0..features.ncols())
        .filter(|&j| design.usable[j])
        .map(|j| design.col(j).iter().zip(&y).map(|(z, yi)| z * (yi - ybar)).sum::<f64>().abs() / n as f64)
        .fold(0.0, f64::max);
    let lambdas = grid.resolve(lambda_max);
    let solver = Solver { design: &design, y: &y };
    let path = solver.path(&lambdas);
    let polish = |model: &LogisticLassoModel| {
        let mut st = solver.state_of(model);
        solver.solve(&mut st, model.lambda, FINAL_TOLERANCE);
        solver.model(&st, model.lambda)
    };

    let k = cv_folds.min(n);
    if path.len() == 1 || k < 2 {
        return Ok(polish(&path[0]));
    }
    let keys: Vec<u64> = (0..n).map(|i| derive_seed(seed, &[labels[i] as u64, row_hash(features.row(i))])).collect();
    let fold = folds_by_key(&keys, k);
    let mut prefix = path.len();
    let mut dev = vec![0.0; path.len()];
    for f in 0..k {
        let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let held: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        if ytr.iter().all(|&v| v == ytr[0]) {
            continue;
        }
        let train_design = Design::new(features.select(Axis(0), &train).view());
        let models = Solver { design: &train_design, y: &ytr }.path(&lambdas[..prefix]);
        prefix = prefix.min(models.len());
        for (l, model) in models.iter().take(prefix).enumerate() {
            dev[l] += held
                .iter()
                .map(|&i| {
                    let p = model.predict_proba_row(features.row(i));
                    -2.0 * (y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln())
                })
                .sum::<f64>();
        }
    }
    let mut best = 0;
    for l in 1..prefix {
        if dev[l] < dev[best] {
            best = l;
        }
    }
    Ok(polish(&path[best]))
}
