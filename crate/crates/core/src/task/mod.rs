//! Task execution and the correctness function.

mod eval;
mod extract;
mod instance;

pub use eval::{
    build_messages, fingerprint_doc, prompt_fingerprint, CorrectnessVector, EvalCache, EvalRecord,
    Evaluator, Outcome, TargetSampling,
};
pub use extract::{extract_answer, Extracted};
pub use instance::{AnswerOption, Instance, Split, TaskInstruction, DEFAULT_ANSWER_MARKER, DEFAULT_INSTRUCTION};
