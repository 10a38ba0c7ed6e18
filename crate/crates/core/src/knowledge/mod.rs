//! The knowledge hierarchy carried inside a system prompt.

mod audit;
mod outline;
mod tree;

pub use audit::{
    all_topic_stats, balance_ratio, branching_factor, detect_violations, ratio_to_f64,
    GlobalViolation, LocalViolation, PruningLimits, TopicStats, ViolationReport,
};
pub use outline::{parse_prompt, render_prompt, render_tree, PromptDocument, MAX_HEADING_LEVEL};
pub use tree::{KnowledgeTree, Node, NodeId, NodeKind, ROOT_TITLE};
