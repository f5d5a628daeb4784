//! Validated datasets, estimand and configuration types.
//!
//! Column conventions for raw tables:
//!
//! | design | required            | optional               |
//! |--------|---------------------|------------------------|
//! | rcs    | `y`, `d`, `t`       | `d_lag1..`, `x<name>`  |
//! | panel  | `y_pre`, `y_post`, `d` | `d_lag1..`, `x<name>` |
//!
//! `d_lagK` holds the dose received `K` periods before the outcome period.
//! Nuisance models see treatment histories and covariates side by side, as
//! the concatenated feature matrix `[history | x]`.

use std::collections::BTreeSet;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::nuisance::DensityFamily;
use crate::error::{Error, Result};
use crate::kernel::KernelFamily;

/// A column-labelled table of reals, as read from a CSV file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTable {
    columns: Vec<(String, Vec<f64>)>,
}

impl RawTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_column(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.push_column(name, values);
        self
    }

    /// Appends a column, replacing any existing column of the same name.
    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) {
        let name = name.into();
        if let Some(slot) = self.columns.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = values;
        } else {
            self.columns.push((name, values));
        }
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn columns(&self) -> &[(String, Vec<f64>)] {
        &self.columns
    }

    /// Row count of the first column (0 for an empty table).
    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, |(_, v)| v.len())
    }
}

/// Which ATET is targeted: dose `d_treat` versus `d_control` in the outcome
/// period `t`, with the dose received `lag` periods before `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub d_treat: f64,
    pub d_control: f64,
    pub t: i64,
    pub lag: u32,
}

impl EstimandSpec {
    pub fn new(d_treat: f64, d_control: f64, t: i64, lag: u32) -> Result<Self> {
        if !(d_treat.is_finite() && d_treat > 0.0) {
            return Err(Error::InvalidParameter(format!("treatment dose must be > 0, got {d_treat}")));
        }
        if !(d_control.is_finite() && d_control >= 0.0) {
            return Err(Error::InvalidParameter(format!("control dose must be >= 0, got {d_control}")));
        }
        Ok(Self { d_treat, d_control, t, lag })
    }

    /// The comparison ("pre") period `t - lag - 1`.
    pub fn pre_period(&self) -> i64 {
        self.t - self.lag as i64 - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub folds: usize,
    pub kernel: KernelFamily,
    /// Explicit bandwidth; the rule of thumb is used when absent.
    pub bandwidth: Option<f64>,
    /// Divides the rule-of-thumb bandwidth.
    pub undersmooth_factor: f64,
    pub trim_threshold: f64,
    pub ps_family: DensityFamily,
    pub lasso_cv_folds: usize,
    /// Miscoverage level of the reported confidence interval.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            kernel: KernelFamily::Epanechnikov,
            bandwidth: None,
            undersmooth_factor: 1.0,
            trim_threshold: 0.1,
            ps_family: DensityFamily::LinearNormal,
            lasso_cv_folds: 10,
            alpha: 0.05,
            seed: 0,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        if let Some(h) = self.bandwidth {
            if !(h.is_finite() && h > 0.0) {
                return bad(format!("bandwidth must be > 0, got {h}"));
            }
        }
        if !(self.undersmooth_factor.is_finite() && self.undersmooth_factor > 0.0) {
            return bad(format!("undersmooth factor must be > 0, got {}", self.undersmooth_factor));
        }
        if !(self.trim_threshold > 0.0 && self.trim_threshold <= 1.0) {
            return bad(format!("trim threshold must lie in (0, 1], got {}", self.trim_threshold));
        }
        if self.lasso_cv_folds < 2 {
            return bad(format!("lasso CV folds must be >= 2, got {}", self.lasso_cv_folds));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        Ok(())
    }

    /// Bandwidth for a sample of `n` observations.
    pub fn bandwidth_for(&self, n: usize) -> f64 {
        self.bandwidth
            .unwrap_or_else(|| crate::kernel::rule_of_thumb_bandwidth(n, self.undersmooth_factor))
    }

    pub(crate) fn check_sample_size(&self, n: usize) -> Result<()> {
        if n < 4 * self.folds {
            return Err(Error::InvalidParameter(format!(
                "sample has {n} rows, need at least {} for {} folds",
                4 * self.folds,
                self.folds
            )));
        }
        Ok(())
    }
}

/// Repeated cross-sections: each unit is observed once, in period `period`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedCrossSectionSample {
    y: Vec<f64>,
    d: Vec<f64>,
    period: Vec<i64>,
    history: Array2<f64>,
    history_lags: Vec<u32>,
    x: Array2<f64>,
    x_names: Vec<String>,
}

/// Panel data: each unit is observed in the pre and post period.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSample {
    y_post: Vec<f64>,
    y_pre: Vec<f64>,
    d: Vec<f64>,
    history: Array2<f64>,
    history_lags: Vec<u32>,
    x: Array2<f64>,
    x_names: Vec<String>,
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(row) => Err(Error::NonFinite { what, row }),
        None => Ok(()),
    }
}

fn check_doses(values: &[f64]) -> Result<()> {
    match values.iter().position(|&v| v < 0.0) {
        Some(row) => Err(Error::NegativeDose { value: values[row], row }),
        None => Ok(()),
    }
}

fn check_matrix(m: &Array2<f64>, n: usize, what: &'static str) -> Result<()> {
    if m.nrows() != n {
        return Err(Error::LengthMismatch { column: what.to_string(), expected: n, found: m.nrows() });
    }
    for (row, r) in m.outer_iter().enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what, row });
        }
    }
    Ok(())
}

fn check_len(column: &str, values: &[f64], n: usize) -> Result<()> {
    if values.len() != n {
        return Err(Error::LengthMismatch { column: column.to_string(), expected: n, found: values.len() });
    }
    Ok(())
}

fn check_history(history: &Array2<f64>, lags: &[u32], n: usize) -> Result<()> {
    if lags.len() != history.ncols() {
        return Err(Error::InvalidParameter(format!(
            "{} history lags given for {} history columns",
            lags.len(),
            history.ncols()
        )));
    }
    if let Some(&lag) = lags.iter().find(|&&l| l == 0) {
        return Err(Error::InvalidParameter(format!("history lag must be >= 1, got {lag}")));
    }
    check_matrix(history, n, "history")?;
    if let Some(row) = history.outer_iter().position(|r| r.iter().any(|&v| v < 0.0)) {
        let value = history.row(row).iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::NegativeDose { value, row });
    }
    Ok(())
}

/// Columns shared by both designs: `d_lagK` histories and `x*` covariates.
struct Extras {
    history: Array2<f64>,
    history_lags: Vec<u32>,
    x: Array2<f64>,
    x_names: Vec<String>,
}

fn parse_lag(name: &str) -> Option<u32> {
    name.strip_prefix("d_lag").and_then(|s| s.parse::<u32>().ok()).filter(|&l| l >= 1)
}

fn collect_extras(raw: &RawTable, required: &[&str], n: usize) -> Result<Extras> {
    let mut hist_cols = Vec::new();
    let mut lags = Vec::new();
    let mut x_cols = Vec::new();
    let mut x_names = Vec::new();
    for (name, values) in raw.columns() {
        if required.contains(&name.as_str()) {
            continue;
        }
        check_len(name, values, n)?;
        if let Some(lag) = parse_lag(name) {
            lags.push(lag);
            hist_cols.push(values.as_slice());
        } else if name.starts_with('x') && name.len() > 1 {
            x_names.push(name.clone());
            x_cols.push(values.as_slice());
        } else {
            return Err(Error::InvalidParameter(format!("unrecognized column `{name}`")));
        }
    }
    let unique: BTreeSet<_> = lags.iter().collect();
    if unique.len() != lags.len() {
        return Err(Error::InvalidParameter("duplicate history lag columns".into()));
    }
    Ok(Extras {
        history: columns_to_matrix(&hist_cols, n),
        history_lags: lags,
        x: columns_to_matrix(&x_cols, n),
        x_names,
    })
}

fn columns_to_matrix(cols: &[&[f64]], n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, cols.len()), |(i, j)| cols[j][i])
}

fn required<'a>(raw: &'a RawTable, name: &str) -> Result<&'a [f64]> {
    raw.column(name).ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn default_x_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

fn features_of(history: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[history.view(), x.view()]).expect("row counts agree by construction")
}

fn select(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

fn push_extras(mut table: RawTable, history: &Array2<f64>, lags: &[u32], x: &Array2<f64>, names: &[String]) -> RawTable {
    for (j, lag) in lags.iter().enumerate() {
        table.push_column(format!("d_lag{lag}"), history.column(j).to_vec());
    }
    for (j, name) in names.iter().enumerate() {
        table.push_column(name.clone(), x.column(j).to_vec());
    }
    table
}

fn check_lags_for(lags: &[u32], estimand: &EstimandSpec) -> Result<()> {
    let min_allowed = estimand.lag + 1;
    match lags.iter().copied().filter(|&l| l < min_allowed).min() {
        Some(lag) => Err(Error::HistoryLeak { lag, min_allowed }),
        None => Ok(()),
    }
}

impl RepeatedCrossSectionSample {
    /// Builds a sample from parts; `history_lags[j]` labels history column `j`.
    pub fn new(
        y: Vec<f64>,
        d: Vec<f64>,
        period: Vec<i64>,
        history: Array2<f64>,
        history_lags: Vec<u32>,
        x: Array2<f64>,
    ) -> Result<Self> {
        let names = default_x_names(x.ncols());
        Self::with_names(y, d, period, history, history_lags, x, names)
    }

    fn with_names(
        y: Vec<f64>,
        d: Vec<f64>,
        period: Vec<i64>,
        history: Array2<f64>,
        history_lags: Vec<u32>,
        x: Array2<f64>,
        x_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        check_len("d", &d, n)?;
        if period.len() != n {
            return Err(Error::LengthMismatch { column: "t".into(), expected: n, found: period.len() });
        }
        check_finite(&y, "outcome")?;
        check_finite(&d, "dose")?;
        check_doses(&d)?;
        check_history(&history, &history_lags, n)?;
        check_matrix(&x, n, "covariate")?;
        let distinct: BTreeSet<_> = period.iter().collect();
        if distinct.len() < 2 {
            return Err(Error::NeedsTwoPeriods { found: distinct.len() });
        }
        Ok(Self { y, d, period, history, history_lags, x, x_names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn d(&self) -> &[f64] {
        &self.d
    }
    pub fn period(&self) -> &[i64] {
        &self.period
    }
    pub fn history(&self) -> &Array2<f64> {
        &self.history
    }
    pub fn history_lags(&self) -> &[u32] {
        &self.history_lags
    }
    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    /// Distinct period labels in ascending order.
    pub fn periods(&self) -> Vec<i64> {
        self.period.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Nuisance-model inputs `[history | x]`.
    pub fn features(&self) -> Array2<f64> {
        features_of(&self.history, &self.x)
    }

    /// Rows `rows` in the given order. May hold fewer than two periods, so
    /// the result is only used internally (training subsets).
    pub(crate) fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            d: rows.iter().map(|&i| self.d[i]).collect(),
            period: rows.iter().map(|&i| self.period[i]).collect(),
            history: select(&self.history, rows),
            history_lags: self.history_lags.clone(),
            x: select(&self.x, rows),
            x_names: self.x_names.clone(),
        }
    }

    pub fn to_raw_table(&self) -> RawTable {
        let table = RawTable::new()
            .with_column("y", self.y.clone())
            .with_column("d", self.d.clone())
            .with_column("t", self.period.iter().map(|&t| t as f64).collect());
        push_extras(table, &self.history, &self.history_lags, &self.x, &self.x_names)
    }

    /// Resolves the estimand to a same-period comparison: keeps the rows of
    /// periods `t` and `t - lag - 1`, relabels the latter as `t - 1` and
    /// re-expresses history lags relative to the treatment period.
    pub fn relabel_lagged(&self, estimand: &EstimandSpec) -> Result<(Self, EstimandSpec)> {
        check_lags_for(&self.history_lags, estimand)?;
        let post = estimand.t;
        let pre = estimand.pre_period();
        for p in [post, pre] {
            if !self.period.contains(&p) {
                return Err(Error::PeriodAbsent(p));
            }
        }
        let rows: Vec<usize> = (0..self.n()).filter(|&i| self.period[i] == post || self.period[i] == pre).collect();
        let mut out = if rows.len() == self.n() { self.clone() } else { self.select_rows(&rows) };
        for p in out.period.iter_mut() {
            if *p == pre {
                *p = post - 1;
            }
        }
        for lag in out.history_lags.iter_mut() {
            *lag -= estimand.lag;
        }
        Ok((out, EstimandSpec { lag: 0, ..*estimand }))
    }
}

impl PanelSample {
    pub fn new(
        y_post: Vec<f64>,
        y_pre: Vec<f64>,
        d: Vec<f64>,
        history: Array2<f64>,
        history_lags: Vec<u32>,
        x: Array2<f64>,
    ) -> Result<Self> {
        let names = default_x_names(x.ncols());
        Self::with_names(y_post, y_pre, d, history, history_lags, x, names)
    }

    fn with_names(
        y_post: Vec<f64>,
        y_pre: Vec<f64>,
        d: Vec<f64>,
        history: Array2<f64>,
        history_lags: Vec<u32>,
        x: Array2<f64>,
        x_names: Vec<String>,
    ) -> Result<Self> {
        let n = y_post.len();
        check_len("y_pre", &y_pre, n)?;
        check_len("d", &d, n)?;
        check_finite(&y_post, "outcome")?;
        check_finite(&y_pre, "pre-period outcome")?;
        check_finite(&d, "dose")?;
        check_doses(&d)?;
        check_history(&history, &history_lags, n)?;
        check_matrix(&x, n, "covariate")?;
        Ok(Self { y_post, y_pre, d, history, history_lags, x, x_names })
    }

    pub fn n(&self) -> usize {
        self.y_post.len()
    }
    pub fn y_post(&self) -> &[f64] {
        &self.y_post
    }
    pub fn y_pre(&self) -> &[f64] {
        &self.y_pre
    }
    pub fn d(&self) -> &[f64] {
        &self.d
    }
    pub fn history(&self) -> &Array2<f64> {
        &self.history
    }
    pub fn history_lags(&self) -> &[u32] {
        &self.history_lags
    }
    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    /// Within-unit outcome change `y_post - y_pre`.
    pub fn delta_y(&self) -> Vec<f64> {
        self.y_post.iter().zip(&self.y_pre).map(|(a, b)| a - b).collect()
    }

    pub fn features(&self) -> Array2<f64> {
        features_of(&self.history, &self.x)
    }

    pub(crate) fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            y_post: rows.iter().map(|&i| self.y_post[i]).collect(),
            y_pre: rows.iter().map(|&i| self.y_pre[i]).collect(),
            d: rows.iter().map(|&i| self.d[i]).collect(),
            history: select(&self.history, rows),
            history_lags: self.history_lags.clone(),
            x: select(&self.x, rows),
            x_names: self.x_names.clone(),
        }
    }

    pub fn to_raw_table(&self) -> RawTable {
        let table = RawTable::new()
            .with_column("y_pre", self.y_pre.clone())
            .with_column("y_post", self.y_post.clone())
            .with_column("d", self.d.clone());
        push_extras(table, &self.history, &self.history_lags, &self.x, &self.x_names)
    }

    /// For panels `y_pre` already holds `Y_{t-lag-1}`; only the history is
    /// checked for post-treatment doses and its lags re-expressed relative to
    /// the treatment period.
    pub fn relabel_lagged(&self, estimand: &EstimandSpec) -> Result<(Self, EstimandSpec)> {
        check_lags_for(&self.history_lags, estimand)?;
        let mut out = self.clone();
        for lag in out.history_lags.iter_mut() {
            *lag -= estimand.lag;
        }
        Ok((out, EstimandSpec { lag: 0, ..*estimand }))
    }
}

pub fn validate_rcs(raw: &RawTable) -> Result<RepeatedCrossSectionSample> {
    let y = required(raw, "y")?;
    let n = y.len();
    let d = required(raw, "d")?;
    let t = required(raw, "t")?;
    check_len("d", d, n)?;
    check_len("t", t, n)?;
    check_finite(y, "outcome")?;
    check_finite(d, "dose")?;
    check_finite(t, "period")?;
    if let Some(row) = t.iter().position(|v| v.fract() != 0.0) {
        return Err(Error::InvalidParameter(format!("period label {} at row {row} is not an integer", t[row])));
    }
    let extras = collect_extras(raw, &["y", "d", "t"], n)?;
    RepeatedCrossSectionSample::with_names(
        y.to_vec(),
        d.to_vec(),
        t.iter().map(|&v| v as i64).collect(),
        extras.history,
        extras.history_lags,
        extras.x,
        extras.x_names,
    )
}

pub fn validate_panel(raw: &RawTable) -> Result<PanelSample> {
    let y_pre = required(raw, "y_pre")?;
    let n = y_pre.len();
    let y_post = required(raw, "y_post")?;
    let d = required(raw, "d")?;
    check_len("y_post", y_post, n)?;
    check_len("d", d, n)?;
    let extras = collect_extras(raw, &["y_pre", "y_post", "d"], n)?;
    PanelSample::with_names(
        y_post.to_vec(),
        y_pre.to_vec(),
        d.to_vec(),
        extras.history,
        extras.history_lags,
        extras.x,
        extras.x_names,
    )
}
