//! Side-by-side comparison of two run reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::CliError;
use crate::experiment::{load_report, RunReport};

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub metric: &'static str,
    pub a: f64,
    pub b: f64,
}

impl ComparisonRow {
    /// `b - a`.
    pub fn delta(&self) -> f64 {
        self.b - self.a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub scenario_a: String,
    pub scenario_b: String,
    pub rows: Vec<ComparisonRow>,
    /// Set when the two runs used different waveform settings.
    pub waveform_mismatch: bool,
}

impl Comparison {
    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,a,b,delta\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.metric, r.a, r.b, r.delta());
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<26} {:>14} {:>14} {:>10}", "metric", self.scenario_a, self.scenario_b, "delta");
        for r in &self.rows {
            let _ = writeln!(s, "{:<26} {:>14.3} {:>14.3} {:>10.3}", r.metric, r.a, r.b, r.delta());
        }
        if self.waveform_mismatch {
            s.push_str("warning: the runs used different waveform settings\n");
        }
        s
    }
}

pub fn compare_reports(a: &RunReport, b: &RunReport) -> Comparison {
    let pick = |r: &RunReport| {
        let s = &r.summary;
        [
            ("baseline_nmse_db", s.baseline_nmse_db),
            ("final_nmse_db", s.final_nmse_db),
            ("nmse_improvement_db", s.nmse_improvement_db),
            ("lut_nmse_db", s.lut_nmse_db),
            ("shoulder_input_db", s.shoulder_input_db),
            ("shoulder_without_dpd_db", s.shoulder_without_dpd_db),
            ("shoulder_with_dpd_db", s.shoulder_with_dpd_db),
            ("adaptation_iterations", s.adaptation_iterations as f64),
        ]
    };
    let rows = pick(a)
        .into_iter()
        .zip(pick(b))
        .map(|((metric, va), (_, vb))| ComparisonRow { metric, a: va, b: vb })
        .collect();
    Comparison {
        scenario_a: a.scenario_name.clone(),
        scenario_b: b.scenario_name.clone(),
        rows,
        waveform_mismatch: a.waveform != b.waveform,
    }
}

/// Loads and compares two `report.toml` files.
pub fn compare_runs(a: &Path, b: &Path) -> Result<Comparison, CliError> {
    Ok(compare_reports(&load_report(a)?, &load_report(b)?))
}
