use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Dataset("instance id is empty".into()));
        }
        let mut seen = HashSet::new();
        for opt in &self.options {
            if opt.label.trim().is_empty() {
                return Err(Error::Dataset(format!("instance {}: empty option label", self.id)));
            }
            if !seen.insert(opt.label.as_str()) {
                return Err(Error::Dataset(format!(
                    "instance {}: duplicate option label {:?}",
                    self.id, opt.label
                )));
            }
        }
        if !seen.contains(self.gold.as_str()) {
            return Err(Error::Dataset(format!(
                "instance {}: gold label {:?} is not one of the options",
                self.id, self.gold
            )));
        }
        Ok(())
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.options.iter().map(|o| o.label.as_str())
    }

    /// `A. text` lines in option order.
    pub fn render_options(&self) -> String {
        self.options
            .iter()
            .map(|o| format!("{}. {}", o.label, o.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub const DEFAULT_ANSWER_MARKER: &str = "Final Answer:";

pub const DEFAULT_INSTRUCTION: &str = include_str!("../../templates/task_instruction.txt");

/// Fixed per-task instruction wrapped around every question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub template: String,
    pub answer_marker: String,
}

impl Default for TaskInstruction {
    fn default() -> Self {
        Self {
            template: DEFAULT_INSTRUCTION.to_string(),
            answer_marker: DEFAULT_ANSWER_MARKER.to_string(),
        }
    }
}

impl TaskInstruction {
    pub fn new(template: impl Into<String>, answer_marker: impl Into<String>) -> Result<Self> {
        let instr = Self {
            template: template.into(),
            answer_marker: answer_marker.into(),
        };
        instr.validate()?;
        Ok(instr)
    }

    pub fn validate(&self) -> Result<()> {
        for name in ["question", "options"] {
            let n = template::count(&self.template, name);
            if n != 1 {
                return Err(Error::Config(format!(
                    "task instruction must contain {{{name}}} exactly once (found {n})"
                )));
            }
        }
        if self.answer_marker.trim().is_empty() {
            return Err(Error::Config("answer marker is empty".into()));
        }
        Ok(())
    }

    /// Fills the template. Templates that do not mention `{answer_marker}`
    /// get the answer directive appended.
    pub fn user_message(&self, inst: &Instance) -> Result<String> {
        self.validate()?;
        let options = inst.render_options();
        let mut text = template::fill(
            &self.template,
            &[
                ("question", inst.question.as_str()),
                ("options", options.as_str()),
                ("answer_marker", self.answer_marker.as_str()),
            ],
        );
        if template::count(&self.template, "answer_marker") == 0 {
            text.push_str(&format!(
                "\n\nEnd your reply with \"{} <label>\".",
                self.answer_marker
            ));
        }
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn mcq() -> Instance {
        Instance {
            id: "q1".into(),
            question: "Which bone is medial?".into(),
            options: ["A", "B", "C", "D"]
                .iter()
                .map(|l| AnswerOption {
                    label: l.to_string(),
                    text: format!("option {l}"),
                })
                .collect(),
            gold: "A".into(),
            split: None,
        }
    }

    #[test]
    fn gold_must_be_an_option() {
        let mut i = mcq();
        i.gold = "E".into();
        assert!(matches!(i.validate(), Err(Error::Dataset(_))));
    }

    #[test]
    fn labels_unique() {
        let mut i = mcq();
        i.options[1].label = "A".into();
        assert!(i.validate().is_err());
    }

    #[test]
    fn placeholders_exactly_once() {
        assert!(TaskInstruction::new("{question}", "X:").is_err());
        assert!(TaskInstruction::new("{question}{options}{options}", "X:").is_err());
        assert!(TaskInstruction::new("{question}{options}", "X:").is_ok());
        TaskInstruction::default().validate().unwrap();
    }

    #[test]
    fn directive_appended_when_template_omits_marker() {
        let t = TaskInstruction::new("{question}\n{options}", "Answer:").unwrap();
        let msg = t.user_message(&mcq()).unwrap();
        assert!(msg.ends_with("End your reply with \"Answer: <label>\"."));
        assert!(msg.contains("A. option A\nB. option B\nC. option C\nD. option D"));
    }
}
