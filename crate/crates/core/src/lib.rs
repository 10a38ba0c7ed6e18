//! Knowledge-provision prompt optimization.
//!
//! A system prompt carries a topic/note knowledge hierarchy. Each step
//! samples a training batch, asks an optimizer model to explain the target
//! model's failures and to write candidate prompts that supply the missing
//! knowledge, keeps candidates that fix more recent instances than they
//! break (preferring the least disruptive), and optionally steers the
//! optimizer to prune over-branched parts of the hierarchy.

pub mod dataset;
pub mod error;
pub mod filter;
pub mod gateway;
pub mod jsonl;
pub mod knowledge;
pub mod optimizer;
pub mod report;
pub mod sim;
pub mod task;
pub mod template;

pub use error::{Error, Result};
