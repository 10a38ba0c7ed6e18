//! Dual-objective candidate filtering and trajectory metrics.
//!
//! Candidates are compared with their parent on the recent window `Q_K`:
//!
//! ```text
//! A(p', p, x) = f(p', x) - f(p, x)
//! ΔS(p', p)   = sum of A over Q_K
//! D(p', p)    = number of instances in Q_K where f(p', x) != f(p, x)
//! ```
//!
//! Only candidates with `ΔS > 0` are kept, ranked by larger `ΔS` first and
//! smaller `D` second, with insertion order breaking any remaining ties.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::PromptDocument;
use crate::task::CorrectnessVector;

/// Per-instance advantage of the new prompt over the old one.
pub fn advantage(bit_new: u8, bit_old: u8) -> i8 {
    bit_new as i8 - bit_old as i8
}

fn check_aligned(new: &CorrectnessVector, old: &CorrectnessVector) -> Result<()> {
    if new.instance_ids != old.instance_ids {
        return Err(Error::Contract(format!(
            "correctness vectors cover different instances ({} vs {})",
            new.len(),
            old.len()
        )));
    }
    Ok(())
}

pub fn delta_score(new: &CorrectnessVector, old: &CorrectnessVector) -> Result<i64> {
    check_aligned(new, old)?;
    Ok(new
        .bits
        .iter()
        .zip(&old.bits)
        .map(|(n, o)| advantage(*n, *o) as i64)
        .sum())
}

pub fn divergence(new: &CorrectnessVector, old: &CorrectnessVector) -> Result<usize> {
    check_aligned(new, old)?;
    Ok(new.bits.iter().zip(&old.bits).filter(|(n, o)| n != o).count())
}

#[derive(Debug, Clone)]
pub struct CandidatePair {
    pub candidate: PromptDocument,
    pub parent: PromptDocument,
    pub delta_s: i64,
    pub divergence: usize,
}

impl CandidatePair {
    /// Pair scored from the two prompts' vectors over the same window.
    pub fn scored(
        candidate: PromptDocument,
        parent: PromptDocument,
        cand_bits: &CorrectnessVector,
        parent_bits: &CorrectnessVector,
    ) -> Result<Self> {
        Ok(Self {
            candidate,
            parent,
            delta_s: delta_score(cand_bits, parent_bits)?,
            divergence: divergence(cand_bits, parent_bits)?,
        })
    }

    /// The parent carried through unchanged.
    pub fn identity(parent: PromptDocument) -> Self {
        Self {
            candidate: parent.clone(),
            parent,
            delta_s: 0,
            divergence: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.candidate == self.parent
    }
}

/// Score summary used for ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairScore {
    pub delta_s: i64,
    pub divergence: usize,
    pub identity: bool,
}

impl From<&CandidatePair> for PairScore {
    fn from(p: &CandidatePair) -> Self {
        Self {
            delta_s: p.delta_s,
            divergence: p.divergence,
            identity: p.is_identity(),
        }
    }
}

/// Orders by larger gain first, then smaller divergence.
pub fn compare_scores(a: &PairScore, b: &PairScore) -> Ordering {
    b.delta_s.cmp(&a.delta_s).then(a.divergence.cmp(&b.divergence))
}

/// Indices of the selected pairs, best first. When fewer than `width` pairs
/// improve on their parent, identity pairs fill the remaining slots in
/// input order.
pub fn select_indices(scores: &[PairScore], width: usize) -> Result<Vec<usize>> {
    if width < 1 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut ranked: Vec<usize> = (0..scores.len()).filter(|i| scores[*i].delta_s > 0).collect();
    // stable: equal keys keep insertion order
    ranked.sort_by(|a, b| compare_scores(&scores[*a], &scores[*b]));
    ranked.truncate(width);
    if ranked.len() < width {
        let fill = (0..scores.len())
            .filter(|i| scores[*i].identity && scores[*i].delta_s <= 0)
            .take(width - ranked.len());
        ranked.extend(fill);
    }
    Ok(ranked)
}

/// The next beam.
pub fn filter_candidates(cands: &[CandidatePair], width: usize) -> Result<Vec<PromptDocument>> {
    let scores: Vec<PairScore> = cands.iter().map(PairScore::from).collect();
    Ok(select_indices(&scores, width)?
        .into_iter()
        .map(|i| cands[i].candidate.clone())
        .collect())
}

/// One optimization step as logged for later analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub batch_ids: Vec<String>,
    pub selected_fingerprint: String,
    /// Batch bits of the best prompt before the step.
    pub previous_bits: Vec<u8>,
    /// Batch bits of the best prompt after the step.
    pub selected_bits: Vec<u8>,
    #[serde(default)]
    pub window_accuracy: f64,
    #[serde(default)]
    pub delta_s: i64,
    #[serde(default)]
    pub divergence: usize,
    #[serde(default)]
    pub candidates: usize,
    #[serde(default)]
    pub local_violations: usize,
    #[serde(default)]
    pub global_violations: usize,
    #[serde(default)]
    pub prompt_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub steps: Vec<StepRecord>,
}

impl TrajectoryLog {
    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if record.step <= last.step {
                return Err(Error::Contract(format!(
                    "step {} logged after step {}",
                    record.step, last.step
                )));
            }
        }
        self.steps.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Mean over steps of the per-batch mean improvement
/// `f(p_i, x) - f(p_{i-1}, x)`, from logged bits only.
pub fn learning_gain(log: &TrajectoryLog) -> Result<f64> {
    if log.steps.is_empty() {
        return Err(Error::Metric("learning gain of an empty trajectory".into()));
    }
    let mut total = 0.0;
    for s in &log.steps {
        let n = s.batch_ids.len();
        if n == 0 || s.previous_bits.len() != n || s.selected_bits.len() != n {
            return Err(Error::Contract(format!(
                "step {}: bits not aligned with a nonempty batch",
                s.step
            )));
        }
        let diff: i64 = s
            .selected_bits
            .iter()
            .zip(&s.previous_bits)
            .map(|(new, old)| advantage(*new, *old) as i64)
            .sum();
        total += diff as f64 / n as f64;
    }
    Ok(total / log.steps.len() as f64)
}
