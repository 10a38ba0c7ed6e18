//! The search loop: batches, failure analysis, candidate generation,
//! filtering, pruning guidance and final selection.

mod config;
mod prompts;
mod sampler;
mod session;
mod step;

pub use config::{AdapterChoice, DataConfig, ModelConfig, OutputConfig, RunConfig, SearchConfig};
pub use prompts::{
    extract_prompt_text, parse_candidate, parse_gradient, Failure, Gradient, PromptTemplates,
};
pub use sampler::{BatchSampler, EpochSampler};
pub use session::{check_credentials, Checkpoint, Prepared, RunOutcome, RunPaths, Session};
pub use step::{Engine, OptimizerSampling, RunState, Selection};
