//! Run reports, rebuilt from the files a run leaves behind.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{learning_gain, StepRecord, TrajectoryLog};
use crate::gateway::{token_totals, ResponseLog, TokenTotals};
use crate::jsonl::read_jsonl;

/// Result of final selection, as written to `final.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalOutcome {
    pub steps: u64,
    pub selected_index: usize,
    pub selected_fingerprint: String,
    /// Validation accuracy of each beam member, in beam order.
    pub validation_accuracies: Vec<f64>,
    pub test_accuracy: Option<f64>,
}

impl FinalOutcome {
    pub fn validation_accuracy(&self) -> f64 {
        self.validation_accuracies[self.selected_index]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: u64,
    pub window_accuracy: f64,
    pub delta_s: i64,
    pub divergence: usize,
    pub candidates: usize,
    pub local_violations: usize,
    pub global_violations: usize,
    pub prompt_chars: usize,
}

impl From<&StepRecord> for StepSummary {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            window_accuracy: r.window_accuracy,
            delta_s: r.delta_s,
            divergence: r.divergence,
            candidates: r.candidates,
            local_violations: r.local_violations,
            global_violations: r.global_violations,
            prompt_chars: r.prompt_chars,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: Vec<StepSummary>,
    /// Absent until at least one step has run.
    pub learning_gain: Option<f64>,
    pub tokens: TokenTotals,
    #[serde(rename = "final")]
    pub final_outcome: Option<FinalOutcome>,
}

/// Reads `trajectory.jsonl`, `responses.jsonl` and `final.json` from a run
/// directory. Missing files count as empty; no model is called.
pub fn build_report(dir: &Path) -> Result<RunReport> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a run directory", dir.display())));
    }
    let trajectory_path = dir.join("trajectory.jsonl");
    let mut trajectory = TrajectoryLog::default();
    if trajectory_path.exists() {
        for rec in read_jsonl::<StepRecord>(&trajectory_path)? {
            trajectory.push(rec)?;
        }
    }
    let responses_path = dir.join("responses.jsonl");
    let responses = if responses_path.exists() {
        ResponseLog::read(&responses_path)?
    } else {
        Vec::new()
    };
    let final_path = dir.join("final.json");
    let final_outcome = if final_path.exists() {
        let text = fs::read_to_string(&final_path).map_err(|e| Error::io(&final_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", final_path.display())))?)
    } else {
        None
    };
    Ok(RunReport {
        steps: trajectory.steps.iter().map(StepSummary::from).collect(),
        learning_gain: if trajectory.is_empty() {
            None
        } else {
            Some(learning_gain(&trajectory)?)
        },
        tokens: token_totals(&responses),
        final_outcome,
    })
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "steps: {}", self.steps.len());
        if !self.steps.is_empty() {
            let _ = writeln!(
                out,
                "\n{:>5} {:>8} {:>4} {:>4} {:>6} {:>6} {:>6} {:>7}",
                "step", "acc@K", "dS", "D", "cands", "local", "global", "chars"
            );
            for s in &self.steps {
                let _ = writeln!(
                    out,
                    "{:>5} {:>8.3} {:>4} {:>4} {:>6} {:>6} {:>6} {:>7}",
                    s.step,
                    s.window_accuracy,
                    s.delta_s,
                    s.divergence,
                    s.candidates,
                    s.local_violations,
                    s.global_violations,
                    s.prompt_chars
                );
            }
            out.push('\n');
        }
        match self.learning_gain {
            Some(g) => {
                let _ = writeln!(out, "learning gain: {g:.4}");
            }
            None => out.push_str("learning gain: n/a\n"),
        }
        let _ = writeln!(
            out,
            "tokens: optimizer {}, target {}",
            self.tokens.optimizer, self.tokens.target
        );
        match &self.final_outcome {
            Some(f) => {
                let _ = writeln!(
                    out,
                    "final: beam member {} of {} ({}), validation accuracy {:.4}",
                    f.selected_index + 1,
                    f.validation_accuracies.len(),
                    f.selected_fingerprint,
                    f.validation_accuracy()
                );
                match f.test_accuracy {
                    Some(t) => {
                        let _ = writeln!(out, "test accuracy: {t:.4}");
                    }
                    None => out.push_str("test accuracy: n/a\n"),
                }
            }
            None => out.push_str("final: not selected yet\n"),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_reports_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let r = build_report(dir.path()).unwrap();
        assert!(r.steps.is_empty());
        assert_eq!(r.learning_gain, None);
        assert_eq!(r.tokens, TokenTotals::default());
        assert!(r.to_text().contains("not selected yet"));
    }

    #[test]
    fn missing_dir_is_an_error() {
        assert!(build_report(Path::new("/nonexistent/run")).is_err());
    }
}
