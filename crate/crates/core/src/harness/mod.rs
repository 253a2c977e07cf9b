//! Configuration-driven experiments: sweeps, verification reports and output.

mod config;
mod output;
mod selection;
mod sweep;
mod theorems;
mod toy;

pub use config::{
    default_grid, DataConfig, EnvironmentConfig, ExperimentConfig, OutputConfig, OutputFormat,
    PolicyConfig, PolicyRecipe, SweepAxis, SweepConfig,
};
pub use output::{emit_outputs, render_csv, render_svg, CSV_HEADER};
pub use selection::{run_selection, SelectionRow};
pub use sweep::{
    deterministic_user_fraction, prepare_grid_point, run_sweep, runs_stream, AxisNote,
    GridFingerprint, GridPoint, ResultRow, RunManifest, SweepPoint, SweepReport,
};
pub use theorems::{verify_theorems, TheoremScale, TheoremWorld};
pub use toy::{toy_world, verify_toy, ToyWorld};

use serde::{Deserialize, Serialize};

/// Outcome of one verification check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// A precondition of the check does not hold in the configured world.
    NotApplicable,
    /// Informational entry (e.g. a documented discrepancy); never fails.
    Noted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub expected: f64,
    pub actual: f64,
    pub gap: f64,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl CheckResult {
    pub fn compare(name: impl Into<String>, expected: f64, actual: f64, tolerance: f64) -> Self {
        let gap = (expected - actual).abs();
        Self {
            name: name.into(),
            status: if gap < tolerance {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            expected,
            actual,
            gap,
            tolerance,
            note: String::new(),
        }
    }

    pub fn not_applicable(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status: CheckStatus::NotApplicable,
            expected: f64::NAN,
            actual: f64::NAN,
            gap: f64::NAN,
            tolerance: f64::NAN,
            note: reason.into(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

/// A list of checks; passes when none failed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub title: String,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, check: CheckResult) {
        self.checks.push(check);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Human-readable table, one line per check.
    pub fn render(&self) -> String {
        let mut out = format!("{}\n", self.title);
        for c in &self.checks {
            let status = match c.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Fail => "FAIL",
                CheckStatus::NotApplicable => "N/A ",
                CheckStatus::Noted => "NOTE",
            };
            if c.status == CheckStatus::NotApplicable {
                out.push_str(&format!("  [{status}] {:<44} {}\n", c.name, c.note));
                continue;
            }
            out.push_str(&format!(
                "  [{status}] {:<44} expected {:>16.12} actual {:>16.12} gap {:.2e}",
                c.name, c.expected, c.actual, c.gap
            ));
            if !c.note.is_empty() {
                out.push_str(&format!("  ({})", c.note));
            }
            out.push('\n');
        }
        out.push_str(if self.passed() {
            "result: PASS\n"
        } else {
            "result: FAIL\n"
        });
        out
    }
}
