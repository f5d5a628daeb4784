//! Weighted, cross-validated lasso.
//!
//! Fits minimize `(1 / 2 sum w) sum_i w_i (y_i - b0 - x~_i b)^2 + lambda |b|_1`
//! over features standardized by their weighted mean and standard deviation.
//! Coordinate descent runs on the weighted Gram matrix, so every fit,
//! including the cross-validation folds, only touches the data once to
//! accumulate sufficient statistics.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;

/// A path stops once this share of the null deviance is explained.
pub const MAX_DEV_EXPLAINED: f64 = 0.999;
/// A path stops once the explained share grows by less than this fraction.
pub const MIN_DEV_GAIN: f64 = 1e-5;
/// Coordinate descent stops once no coefficient moves by more than this.
pub const TOLERANCE: f64 = 1e-7;
const MAX_SWEEPS: usize = 10_000;

/// Penalty values to fit.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaGrid {
    /// `len` log-spaced values from `lambda_max` down to `ratio * lambda_max`.
    Path { len: usize, ratio: f64 },
    /// Explicit values. A single value skips cross-validation.
    Values(Vec<f64>),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Path { len: 100, ratio: 1e-3 }
    }
}

impl LambdaGrid {
    /// Resolves to a descending list of penalties.
    pub(crate) fn resolve(&self, lambda_max: f64) -> Vec<f64> {
        let mut out = match self {
            LambdaGrid::Path { len, ratio } => {
                let len = (*len).max(1);
                if len == 1 {
                    vec![lambda_max]
                } else {
                    (0..len)
                        .map(|k| lambda_max * ratio.powf(k as f64 / (len - 1) as f64))
                        .collect()
                }
            }
            LambdaGrid::Values(v) => v.clone(),
        };
        out.sort_by(|a, b| b.total_cmp(a));
        out
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            LambdaGrid::Path { len, ratio } if *len == 0 || !(*ratio > 0.0 && *ratio <= 1.0) => {
                Err(Error::InvalidParameter(format!("bad lambda path (len {len}, ratio {ratio})")))
            }
            LambdaGrid::Values(v) if v.is_empty() || v.iter().any(|l| !(l.is_finite() && *l >= 0.0)) => {
                Err(Error::InvalidParameter("lambda values must be finite and >= 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A fitted linear model on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    pub intercept: f64,
    /// Coefficients on the standardized scale.
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
}

impl LassoModel {
    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        let mut acc = self.intercept;
        for (j, &b) in self.coefficients.iter().enumerate() {
            if b != 0.0 {
                acc += b * (row[j] - self.feature_means[j]) / self.feature_scales[j];
            }
        }
        acc
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.outer_iter().map(|row| self.predict_row(row)).collect()
    }

    pub fn n_nonzero(&self) -> usize {
        self.coefficients.iter().filter(|&&b| b != 0.0).count()
    }
}

/// Weighted sums over a set of rows: `sum w`, `sum w x`, `sum w y`,
/// `sum w x x'`, `sum w x y`, `sum w y^2`.
#[derive(Debug, Clone)]
struct Moments {
    rows: usize,
    sw: f64,
    sx: Array1<f64>,
    sy: f64,
    sxx: Array2<f64>,
    sxy: Array1<f64>,
    syy: f64,
}

impl Moments {
    fn from_rows(x: ArrayView2<f64>, y: &[f64], w: &[f64]) -> Self {
        let wv = ArrayView1::from(w);
        let yv = ArrayView1::from(y);
        let mut xw = x.to_owned();
        for (mut row, &wi) in xw.outer_iter_mut().zip(w) {
            row *= wi;
        }
        let wy: Array1<f64> = &wv * &yv;
        Self {
            rows: w.len(),
            sw: wv.sum(),
            sx: xw.sum_axis(Axis(0)),
            sy: wy.sum(),
            sxx: xw.t().dot(&x),
            sxy: xw.t().dot(&yv),
            syy: wy.dot(&yv),
        }
    }

    fn minus(&self, other: &Moments) -> Moments {
        Moments {
            rows: self.rows - other.rows,
            sw: self.sw - other.sw,
            sx: &self.sx - &other.sx,
            sy: self.sy - other.sy,
            sxx: &self.sxx - &other.sxx,
            sxy: &self.sxy - &other.sxy,
            syy: self.syy - other.syy,
        }
    }
}

/// Standardized least-squares problem built from moments.
#[derive(Debug, Clone)]
struct Standardized {
    mean_x: Vec<f64>,
    scale: Vec<f64>,
    usable: Vec<bool>,
    mean_y: f64,
    var_y: f64,
    gram: Array2<f64>,
    c: Vec<f64>,
    rows: usize,
}

fn is_degenerate(var: f64, second_moment: f64) -> bool {
    var <= 1e-13 * second_moment.abs() + 1e-300
}

impl Standardized {
    fn from_moments(m: &Moments) -> Self {
        let r = m.sx.len();
        let mean_x: Vec<f64> = m.sx.iter().map(|s| s / m.sw).collect();
        let mean_y = m.sy / m.sw;
        let mut scale = vec![1.0; r];
        let mut usable = vec![false; r];
        for j in 0..r {
            let second = m.sxx[[j, j]] / m.sw;
            let var = second - mean_x[j] * mean_x[j];
            if !is_degenerate(var, second) {
                scale[j] = var.sqrt();
                usable[j] = true;
            }
        }
        let mut gram = Array2::zeros((r, r));
        let mut c = vec![0.0; r];
        for j in 0..r {
            if !usable[j] {
                continue;
            }
            c[j] = (m.sxy[j] / m.sw - mean_x[j] * mean_y) / scale[j];
            for k in 0..r {
                if usable[k] {
                    gram[[j, k]] = (m.sxx[[j, k]] / m.sw - mean_x[j] * mean_x[k]) / (scale[j] * scale[k]);
                }
            }
        }
        let second_y = m.syy / m.sw;
        let var_y = (second_y - mean_y * mean_y).max(0.0);
        Self { mean_x, scale, usable, mean_y, var_y, gram, c, rows: m.rows }
    }

    fn target_degenerate(&self) -> bool {
        is_degenerate(self.var_y, self.var_y + self.mean_y * self.mean_y)
    }

    fn lambda_max(&self) -> f64 {
        self.c.iter().zip(&self.usable).filter(|(_, &u)| u).map(|(c, _)| c.abs()).fold(0.0, f64::max)
    }
}

/// Coordinate-descent state on a standardized problem: coefficients and the
/// gradient `c - G b`.
#[derive(Debug, Clone)]
pub struct CdState {
    pub beta: Vec<f64>,
    grad: Vec<f64>,
}

/// Tolerated excess of an inactive gradient over the penalty when accepting
/// a direct solve, relative to `1 + lambda`.
const KKT_SLACK: f64 = 1e-10;

/// Solves `a x = b` for a symmetric positive definite `k x k` matrix `a`
/// stored row-major; `None` when a pivot is not clearly positive.
fn cholesky_solve(mut a: Vec<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let k = b.len();
    let max_diag = (0..k).map(|i| a[i * k + i]).fold(0.0, f64::max);
    // Lower factor overwrites the lower triangle row by row.
    for i in 0..k {
        for j in 0..=i {
            let (ri, rj) = (&a[i * k..i * k + j], &a[j * k..j * k + j]);
            let v = a[i * k + j] - ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>();
            if i == j {
                if !(v > 1e-14 * max_diag) {
                    return None;
                }
                a[i * k + i] = v.sqrt();
            } else {
                a[i * k + j] = v / a[j * k + j];
            }
        }
    }
    let mut x = b.to_vec();
    for i in 0..k {
        let v = x[i] - a[i * k..i * k + i].iter().zip(&x[..i]).map(|(l, y)| l * y).sum::<f64>();
        x[i] = v / a[i * k + i];
    }
    for i in (0..k).rev() {
        let mut v = x[i];
        for l in i + 1..k {
            v -= a[l * k + i] * x[l];
        }
        x[i] = v / a[i * k + i];
    }
    Some(x)
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// A weighted least-squares problem on standardized features, exposed for
/// diagnostics: objective evaluation and single coordinate sweeps.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    std: Standardized,
}

impl LassoProblem {
    /// Builds the problem; zero-weight rows are ignored.
    pub fn new(x: ArrayView2<f64>, y: &[f64], w: &[f64]) -> Result<Self> {
        let data = WeightedData::new(x, y, w)?;
        Ok(Self { std: Standardized::from_moments(&data.total_moments()) })
    }

    fn from_std(std: Standardized) -> Self {
        Self { std }
    }

    pub fn n_features(&self) -> usize {
        self.std.c.len()
    }

    /// Smallest penalty whose solution is all zero.
    pub fn lambda_max(&self) -> f64 {
        self.std.lambda_max()
    }

    pub fn start(&self) -> CdState {
        CdState { beta: vec![0.0; self.n_features()], grad: self.std.c.clone() }
    }

    /// `(1/2) E_w[(y - ybar - x~ b)^2] + lambda |b|_1`.
    pub fn objective(&self, beta: &[f64], lambda: f64) -> f64 {
        let g = &self.std.gram;
        let r = beta.len();
        let mut quad = 0.0;
        let mut lin = 0.0;
        for j in 0..r {
            if beta[j] == 0.0 {
                continue;
            }
            lin += self.std.c[j] * beta[j];
            for k in 0..r {
                quad += beta[j] * g[[j, k]] * beta[k];
            }
        }
        0.5 * (self.std.var_y - 2.0 * lin + quad) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Weighted covariance `x~_j' (w * residual) / sum w` at the state.
    pub fn gradient(&self, state: &CdState) -> Vec<f64> {
        state.grad.clone()
    }

    fn update(&self, state: &mut CdState, j: usize, lambda: f64) -> f64 {
        let gjj = self.std.gram[[j, j]];
        let old = state.beta[j];
        let new = soft_threshold(state.grad[j] + gjj * old, lambda) / gjj;
        let delta = new - old;
        if delta != 0.0 {
            state.beta[j] = new;
            let col = self.std.gram.column(j);
            for (g, &gk) in state.grad.iter_mut().zip(col.iter()) {
                *g -= gk * delta;
            }
        }
        delta.abs()
    }

    /// One pass over every usable coordinate; returns the largest change.
    pub fn sweep(&self, state: &mut CdState, lambda: f64) -> f64 {
        let mut max = 0.0f64;
        for j in 0..self.n_features() {
            if self.std.usable[j] {
                max = max.max(self.update(state, j, lambda));
            }
        }
        max
    }

    fn sweep_active(&self, state: &mut CdState, lambda: f64, active: &[usize]) -> f64 {
        let mut max = 0.0f64;
        for &j in active {
            max = max.max(self.update(state, j, lambda));
        }
        max
    }

    /// Runs to convergence from `state`, alternating full sweeps with sweeps
    /// restricted to the nonzero coefficients. After each full sweep an
    /// active-set refinement is attempted from the current iterate; its
    /// result is kept only when it satisfies every optimality condition.
    /// Returns whether the iterate converged within the sweep budget.
    pub fn solve(&self, state: &mut CdState, lambda: f64) -> bool {
        let mut sweeps = 0;
        let mut inner_budget = 8;
        while sweeps < MAX_SWEEPS {
            sweeps += 1;
            let change = self.sweep(state, lambda);
            if self.refine(state, lambda) || change < TOLERANCE {
                return true;
            }
            let active: Vec<usize> = (0..self.n_features()).filter(|&j| state.beta[j] != 0.0).collect();
            for _ in 0..inner_budget {
                sweeps += 1;
                if self.sweep_active(state, lambda, &active) < TOLERANCE || sweeps >= MAX_SWEEPS {
                    break;
                }
            }
            inner_budget = (inner_budget * 2).min(MAX_SWEEPS);
        }
        false
    }

    /// Primal active-set iterations from `state`: solve the stationarity
    /// equations `G_AA b = c_A - lambda s_A` on the support, step back to the
    /// first sign change and drop that coordinate, or admit the inactive
    /// coordinate with the largest gradient violation. Returns whether an
    /// exact optimum was reached; `state` is untouched otherwise.
    fn refine(&self, state: &mut CdState, lambda: f64) -> bool {
        let g = &self.std.gram;
        let r = self.n_features();
        let mut beta = state.beta.clone();
        let mut sign: Vec<f64> = beta.iter().map(|b| if *b == 0.0 { 0.0 } else { b.signum() }).collect();
        let mut active: Vec<usize> = (0..r).filter(|&j| beta[j] != 0.0).collect();
        let slack = KKT_SLACK * (lambda + 1.0);
        for _ in 0..4 * r + 8 {
            let k = active.len();
            let mut a = vec![0.0; k * k];
            let mut rhs = vec![0.0; k];
            for (p, &j) in active.iter().enumerate() {
                rhs[p] = self.std.c[j] - lambda * sign[j];
                let row = g.row(j);
                for (q, &l) in active.iter().enumerate() {
                    a[p * k + q] = row[l];
                }
            }
            let Some(b) = cholesky_solve(a, &rhs) else {
                return false;
            };
            let mut step = 1.0;
            let mut blocking = None;
            for (p, &j) in active.iter().enumerate() {
                if b[p] * sign[j] <= 0.0 {
                    let t = beta[j] / (beta[j] - b[p]);
                    if t < step {
                        step = t;
                        blocking = Some(p);
                    }
                }
            }
            for (p, &j) in active.iter().enumerate() {
                beta[j] += step * (b[p] - beta[j]);
            }
            if let Some(p) = blocking {
                let j = active.remove(p);
                beta[j] = 0.0;
                sign[j] = 0.0;
                continue;
            }
            let grad: Vec<f64> = (0..r)
                .map(|j| self.std.c[j] - active.iter().map(|&l| g[[j, l]] * beta[l]).sum::<f64>())
                .collect();
            let worst = (0..r)
                .filter(|&j| self.std.usable[j] && sign[j] == 0.0)
                .map(|j| (j, grad[j].abs() - lambda))
                .filter(|&(_, excess)| excess > slack)
                .max_by(|x, y| x.1.total_cmp(&y.1));
            match worst {
                None => {
                    state.beta = beta;
                    state.grad = grad;
                    return true;
                }
                Some((j, _)) => {
                    sign[j] = grad[j].signum();
                    active.push(j);
                }
            }
        }
        false
    }

    /// Share of the target variance explained by `beta`.
    fn r_squared(&self, beta: &[f64]) -> f64 {
        if self.std.var_y <= 0.0 {
            return 0.0;
        }
        1.0 - 2.0 * self.objective(beta, 0.0) / self.std.var_y
    }

    /// Warm-started fits along `lambdas` (descending). The path ends early
    /// once the explained share exceeds [`MAX_DEV_EXPLAINED`] or grows by
    /// less than a relative [`MIN_DEV_GAIN`], once the support is saturated
    /// (as many nonzeros as rows less one), or when a fit fails to converge.
    fn solve_path(&self, lambdas: &[f64]) -> Vec<Vec<f64>> {
        let mut state = self.start();
        let mut out = Vec::with_capacity(lambdas.len());
        let mut last = 0.0;
        let saturation = self.std.rows.saturating_sub(1).max(1);
        for &l in lambdas {
            let converged = self.solve(&mut state, l);
            out.push(state.beta.clone());
            let nnz = state.beta.iter().filter(|b| **b != 0.0).count();
            if !converged || nnz >= saturation {
                break;
            }
            let r2 = self.r_squared(&state.beta);
            if out.len() > 1 && (r2 > MAX_DEV_EXPLAINED || r2 - last < MIN_DEV_GAIN * r2) {
                break;
            }
            last = r2;
        }
        out
    }
}

/// Rows with positive weight, centred by their weighted means so that the
/// accumulated moments stay well conditioned.
struct WeightedData {
    x: Array2<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    shift_x: Vec<f64>,
    shift_y: f64,
    /// Content hashes of the uncentred rows, for fold assignment.
    content: Vec<(u64, u64, u64)>,
}

impl WeightedData {
    fn new(x: ArrayView2<f64>, y: &[f64], w: &[f64]) -> Result<Self> {
        if x.nrows() != y.len() || w.len() != y.len() {
            return Err(Error::LengthMismatch { column: "lasso input".into(), expected: x.nrows(), found: y.len().min(w.len()) });
        }
        if let Some(row) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("weight {} at row {row} is negative or non-finite", w[row])));
        }
        let rows: Vec<usize> = (0..y.len()).filter(|&i| w[i] > 0.0).collect();
        if rows.is_empty() {
            return Err(Error::ZeroWeights);
        }
        let content = rows.iter().map(|&i| (y[i].to_bits(), w[i].to_bits(), row_hash(x.row(i)))).collect();
        let mut xs = x.select(Axis(0), &rows);
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let ws: Vec<f64> = rows.iter().map(|&i| w[i]).collect();
        let sw: f64 = ws.iter().sum();
        let shift_y = ys.iter().zip(&ws).map(|(a, b)| a * b).sum::<f64>() / sw;
        let shift_x: Vec<f64> = xs
            .axis_iter(Axis(1))
            .map(|col| col.iter().zip(&ws).map(|(a, b)| a * b).sum::<f64>() / sw)
            .collect();
        for mut row in xs.outer_iter_mut() {
            for (v, s) in row.iter_mut().zip(&shift_x) {
                *v -= s;
            }
        }
        let y = ys.iter().map(|v| v - shift_y).collect();
        Ok(Self { x: xs, y, w: ws, shift_x, shift_y, content })
    }

    fn total_moments(&self) -> Moments {
        Moments::from_rows(self.x.view(), &self.y, &self.w)
    }

    fn moments_of(&self, rows: &[usize]) -> Moments {
        let y: Vec<f64> = rows.iter().map(|&i| self.y[i]).collect();
        let w: Vec<f64> = rows.iter().map(|&i| self.w[i]).collect();
        Moments::from_rows(self.x.select(Axis(0), rows).view(), &y, &w)
    }

    fn model(&self, std: &Standardized, beta: Vec<f64>, lambda: f64) -> LassoModel {
        LassoModel {
            intercept: self.shift_y + std.mean_y,
            coefficients: beta,
            lambda,
            feature_means: std.mean_x.iter().zip(&self.shift_x).map(|(m, s)| m + s).collect(),
            feature_scales: std.scale.clone(),
        }
    }
}

/// Assigns `k` cross-validation folds by ranking rows on a content key, so
/// assignments follow the rows under any reordering.
pub(crate) fn folds_by_key<K: Ord>(keys: &[K], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
    let mut fold = vec![0; keys.len()];
    for (rank, &i) in order.iter().enumerate() {
        fold[i] = rank % k;
    }
    fold
}

pub(crate) fn row_hash(row: ArrayView1<f64>) -> u64 {
    row.iter().fold(0u64, |acc, v| crate::util::splitmix(acc ^ v.to_bits()))
}

/// Held-out weighted sum of squares of the model `a + b'x` from moments.
fn held_out_sse(m: &Moments, std: &Standardized, beta: &[f64]) -> f64 {
    let nz: Vec<(usize, f64)> =
        beta.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(j, &b)| (j, b / std.scale[j])).collect();
    let a = std.mean_y - nz.iter().map(|&(j, b)| b * std.mean_x[j]).sum::<f64>();
    let mut bsxy = 0.0;
    let mut bsx = 0.0;
    let mut quad = 0.0;
    for &(j, bj) in &nz {
        bsxy += bj * m.sxy[j];
        bsx += bj * m.sx[j];
        for &(k, bk) in &nz {
            quad += bj * m.sxx[[j, k]] * bk;
        }
    }
    (m.syy - 2.0 * a * m.sy - 2.0 * bsxy + a * a * m.sw + 2.0 * a * bsx + quad).max(0.0)
}

/// Fits a weighted lasso, choosing the penalty by `cv_folds`-fold
/// cross-validated mean squared error when the grid has several values.
pub fn fit_lasso(
    features: ArrayView2<f64>,
    targets: &[f64],
    weights: &[f64],
    grid: &LambdaGrid,
    cv_folds: usize,
    seed: u64,
) -> Result<LassoModel> {
    grid.validate()?;
    if let Some(row) = targets.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "lasso target", row });
    }
    let data = WeightedData::new(features, targets, weights)?;
    let r = features.ncols();
    let total = data.total_moments();
    let std = Standardized::from_moments(&total);
    if std.target_degenerate() || std.usable.iter().all(|u| !u) {
        return Ok(data.model(&std, vec![0.0; r], 0.0));
    }
    let problem = LassoProblem::from_std(std);
    let lambdas = grid.resolve(problem.lambda_max());
    let path = problem.solve_path(&lambdas);

    let m = data.y.len();
    let k = cv_folds.min(m);
    let best = if path.len() == 1 || k < 2 {
        0
    } else {
        let keys: Vec<(u64, u64)> =
            data.content.iter().map(|&(y, w, row)| (derive_seed(seed, &[y, w]), row)).collect();
        let fold = folds_by_key(&keys, k);
        let mut prefix = path.len();
        let mut sse = vec![0.0; path.len()];
        for f in 0..k {
            let rows: Vec<usize> = (0..m).filter(|&i| fold[i] == f).collect();
            let held = data.moments_of(&rows);
            let train = total.minus(&held);
            let train_std = Standardized::from_moments(&train);
            let train_problem = LassoProblem::from_std(train_std);
            let fold_path = train_problem.solve_path(&lambdas[..prefix]);
            prefix = fold_path.len();
            for (l, beta) in fold_path.iter().enumerate() {
                sse[l] += held_out_sse(&held, &train_problem.std, beta);
            }
        }
        // Ties resolve towards the larger penalty.
        let mut best = 0;
        for l in 1..prefix {
            if sse[l] < sse[best] {
                best = l;
            }
        }
        best
    };
    Ok(data.model(&problem.std, path[best].clone(), lambdas[best]))
}
