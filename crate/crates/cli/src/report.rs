//! Run records and their table, JSON and CSV renderings.

use std::fmt::Write as _;

use didcont::simulation::{Design, McSummaryRow};
use didcont::{AtetEstimate, EstimandSpec, EstimationConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrim {
    pub name: String,
    pub n_trimmed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub reps: usize,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Everything needed to rerun and audit one estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub design: Design,
    pub n: usize,
    pub estimand: EstimandSpec,
    pub config: EstimationConfig,
    pub estimate: AtetEstimate,
    pub groups: Vec<GroupTrim>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapCi>,
    /// Wall-clock seconds; left out of machine output unless requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_seconds: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields are finite or serializable")
    }

    pub fn to_table(&self) -> String {
        let e = &self.estimate;
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k:<18}{v}").unwrap();
        line("design", self.design.to_string());
        line("n", self.n.to_string());
        line(
            "estimand",
            format!(
                "d={} vs d'={} at t={} (lag {})",
                self.estimand.d_treat, self.estimand.d_control, self.estimand.t, self.estimand.lag
            ),
        );
        line("bandwidth", format!("{:.6}", e.h_used));
        line("estimate", format!("{:.6}", e.delta_hat));
        line("std. error", format!("{:.6}", e.se));
        let level = 100.0 * (1.0 - self.config.alpha);
        line(&format!("{level}% CI"), format!("[{:.6}, {:.6}]", e.ci_low, e.ci_high));
        if let Some(b) = &self.bootstrap {
            line("bootstrap CI", format!("[{:.6}, {:.6}] ({} draws)", b.ci_low, b.ci_high, b.reps));
        }
        line("effective n", e.n_effective.to_string());
        let trims: Vec<String> = self.groups.iter().map(|g| format!("{}={}", g.name, g.n_trimmed)).collect();
        line("trimmed", trims.join(" "));
        if let Some(s) = self.duration_seconds {
            line("seconds", format!("{s:.3}"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let e = &self.estimate;
        let mut header: Vec<String> = ["design", "n", "d", "dprime", "t", "lag", "delta_hat", "se", "ci_low", "ci_high"]
            .map(String::from)
            .to_vec();
        let mut row = vec![
            self.design.to_string(),
            self.n.to_string(),
            self.estimand.d_treat.to_string(),
            self.estimand.d_control.to_string(),
            self.estimand.t.to_string(),
            self.estimand.lag.to_string(),
            e.delta_hat.to_string(),
            e.se.to_string(),
            e.ci_low.to_string(),
            e.ci_high.to_string(),
        ];
        header.extend(["alpha", "h_used", "n_effective"].map(String::from));
        row.extend([self.config.alpha.to_string(), e.h_used.to_string(), e.n_effective.to_string()]);
        for g in &self.groups {
            header.push(format!("trimmed_{}", g.name.split_whitespace().next().unwrap_or("group")));
            row.push(g.n_trimmed.to_string());
        }
        if let Some(b) = &self.bootstrap {
            header.extend(["boot_reps", "boot_ci_low", "boot_ci_high"].map(String::from));
            row.extend([b.reps.to_string(), b.ci_low.to_string(), b.ci_high.to_string()]);
        }
        if let Some(s) = self.duration_seconds {
            header.push("seconds".into());
            row.push(s.to_string());
        }
        csv_lines(&[header, row])
    }
}

pub fn summary_table(rows: &[McSummaryRow]) -> String {
    let boot = rows.iter().any(|r| r.boot_cover.is_some());
    let mut out = format!(
        "{:<6}{:<10}{:>7}{:>5}{:>6}{:>6}{:>9}{:>8}{:>8}{:>8}{:>8}",
        "design", "method", "n", "p", "reps", "fail", "bias", "std", "rmse", "avse", "cover"
    );
    if boot {
        write!(out, "{:>8}", "boot").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(
            out,
            "{:<6}{:<10}{:>7}{:>5}{:>6}{:>6}{:>9.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}",
            r.design.to_string(),
            r.method.to_string(),
            r.n,
            r.p,
            r.reps,
            r.failures,
            r.bias,
            r.std,
            r.rmse,
            r.avse,
            r.cover
        )
        .unwrap();
        if boot {
            match r.boot_cover {
                Some(c) => write!(out, "{c:>8.3}").unwrap(),
                None => write!(out, "{:>8}", "-").unwrap(),
            }
        }
        out.push('\n');
    }
    out
}

pub fn summary_json(rows: &[McSummaryRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("summary rows are serializable") + "\n")
        .collect()
}

pub fn summary_csv(rows: &[McSummaryRow]) -> String {
    let header = ["design", "method", "n", "p", "reps", "failures", "bias", "std", "rmse", "avse", "cover", "boot_cover"]
        .map(String::from)
        .to_vec();
    let mut records = vec![header];
    for r in rows {
        records.push(vec![
            r.design.to_string(),
            r.method.to_string(),
            r.n.to_string(),
            r.p.to_string(),
            r.reps.to_string(),
            r.failures.to_string(),
            r.bias.to_string(),
            r.std.to_string(),
            r.rmse.to_string(),
            r.avse.to_string(),
            r.cover.to_string(),
            r.boot_cover.map_or(String::new(), |c| c.to_string()),
        ]);
    }
    csv_lines(&records)
}

fn csv_lines(records: &[Vec<String>]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for record in records {
        writer.write_record(record).expect("writing to memory");
    }
    String::from_utf8(writer.into_inner().expect("flushing to memory")).expect("fields are UTF-8")
}
