//! Structural audit of the knowledge hierarchy: out-degree, subtree
//! branching factor, balance ratio, and constraint violations.
//!
//! For a topic `v` with subtree `T_v`:
//!
//! ```text
//! bf(T_v) = sum(outdeg(u) for topic u in T_v) / |topics in T_v|
//! beta(v) = outdeg(v) / bf(T_v)        (0 when bf(T_v) = 0)
//! ```
//!
//! A topic is a local violation when `outdeg(v) > C` and a global
//! violation when `beta(v) > F`.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::tree::{KnowledgeTree, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningLimits {
    /// Maximum children of a topic node (C).
    pub max_children: usize,
    /// Maximum balance factor (F).
    pub max_balance: f64,
}

impl Default for PruningLimits {
    fn default() -> Self {
        Self {
            max_children: 16,
            max_balance: 8.0,
        }
    }
}

impl PruningLimits {
    pub fn new(max_children: usize, max_balance: f64) -> Result<Self> {
        let limits = Self {
            max_children,
            max_balance,
        };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_children < 1 {
            return Err(Error::Config("max_children must be at least 1".into()));
        }
        if !(self.max_balance.is_finite() && self.max_balance > 0.0) {
            return Err(Error::Config("max_balance must be a positive number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalViolation {
    pub node: NodeId,
    pub path: String,
    pub outdeg: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalViolation {
    pub node: NodeId,
    pub path: String,
    pub outdeg: usize,
    pub beta: f64,
    pub branching_factor: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationReport {
    pub local_violations: Vec<LocalViolation>,
    pub global_violations: Vec<GlobalViolation>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.local_violations.is_empty() && self.global_violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.local_violations.len() + self.global_violations.len()
    }
}

/// Per-topic structure figures, all exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopicStats {
    pub outdeg: usize,
    pub subtree_outdeg_sum: usize,
    pub subtree_topics: usize,
}

impl TopicStats {
    pub fn branching_factor(&self) -> Ratio<usize> {
        Ratio::new(self.subtree_outdeg_sum, self.subtree_topics)
    }

    pub fn balance(&self) -> Ratio<usize> {
        if self.subtree_outdeg_sum == 0 {
            return Ratio::from_integer(0);
        }
        // outdeg / (sum / count) = outdeg * count / sum
        Ratio::new(self.outdeg * self.subtree_topics, self.subtree_outdeg_sum)
    }
}

pub fn ratio_to_f64(r: Ratio<usize>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn topic_stats_for(tree: &KnowledgeTree, v: NodeId) -> Result<TopicStats> {
    let node = tree
        .node(v)
        .ok_or_else(|| Error::Domain(format!("node {v} does not exist")))?;
    if node.is_note() {
        return Err(Error::Domain(format!(
            "{} is a note node; branching metrics are defined on topics",
            tree.path_label(v)
        )));
    }
    let mut sum = 0;
    let mut count = 0;
    let mut stack = vec![v];
    while let Some(id) = stack.pop() {
        let n = tree.node(id).expect("children are live ids");
        if n.is_topic() {
            sum += n.children.len();
            count += 1;
            stack.extend(n.children.iter().copied());
        }
    }
    Ok(TopicStats {
        outdeg: node.children.len(),
        subtree_outdeg_sum: sum,
        subtree_topics: count,
    })
}

/// Mean out-degree over the topic nodes of the subtree rooted at `v`.
pub fn branching_factor(tree: &KnowledgeTree, v: NodeId) -> Result<Ratio<usize>> {
    Ok(topic_stats_for(tree, v)?.branching_factor())
}

/// `outdeg(v) / bf(T_v)`, defined as 0 at topics whose subtree has no edges.
pub fn balance_ratio(tree: &KnowledgeTree, v: NodeId) -> Result<Ratio<usize>> {
    Ok(topic_stats_for(tree, v)?.balance())
}

/// Stats for every topic in one bottom-up pass, in pre-order.
pub fn all_topic_stats(tree: &KnowledgeTree) -> Vec<(NodeId, TopicStats)> {
    let order = tree.preorder();
    let mut sums = vec![0usize; tree.len()];
    let mut counts = vec![0usize; tree.len()];
    for id in order.iter().rev() {
        let n = tree.node(*id).expect("live id");
        if !n.is_topic() {
            continue;
        }
        let i = id.0 as usize;
        sums[i] += n.children.len();
        counts[i] += 1;
        if let Some(p) = n.parent {
            sums[p.0 as usize] += sums[i];
            counts[p.0 as usize] += counts[i];
        }
    }
    order
        .into_iter()
        .filter(|id| tree.node(*id).is_some_and(|n| n.is_topic()))
        .map(|id| {
            let i = id.0 as usize;
            (
                id,
                TopicStats {
                    outdeg: tree.outdeg(id),
                    subtree_outdeg_sum: sums[i],
                    subtree_topics: counts[i],
                },
            )
        })
        .collect()
}

/// `beta > F` without going through floating point division.
fn exceeds(beta: Ratio<usize>, limit: f64) -> bool {
    (*beta.numer() as f64) > limit * (*beta.denom() as f64)
}

/// Visits topics in pre-order and reports degree and balance violations.
pub fn detect_violations(tree: &KnowledgeTree, limits: &PruningLimits) -> Result<ViolationReport> {
    limits.validate()?;
    let mut report = ViolationReport::default();
    for (id, stats) in all_topic_stats(tree) {
        if stats.outdeg > limits.max_children {
            report.local_violations.push(LocalViolation {
                node: id,
                path: tree.path_label(id),
                outdeg: stats.outdeg,
                limit: limits.max_children,
            });
        }
        let beta = stats.balance();
        if exceeds(beta, limits.max_balance) {
            report.global_violations.push(GlobalViolation {
                node: id,
                path: tree.path_label(id),
                outdeg: stats.outdeg,
                beta: ratio_to_f64(beta),
                branching_factor: ratio_to_f64(stats.branching_factor()),
                limit: limits.max_balance,
            });
        }
    }
    Ok(report)
}
