//! Optimizer-side templates: request rendering and reply parsing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{parse_prompt, PromptDocument, ViolationReport};
use crate::task::Instance;
use crate::template;

/// A failed instance together with what the target model said.
#[derive(Debug, Clone)]
pub struct Failure {
    pub instance: Instance,
    pub output: String,
}

/// Optimizer analysis of a set of failures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gradient {
    pub explanation: String,
    pub gap_analysis: String,
    pub modification: String,
    pub source_failures: Vec<String>,
}

struct TemplateDef {
    name: &'static str,
    builtin: &'static str,
    required: &'static [&'static str],
}

const TEMPLATE_DEFS: [TemplateDef; 7] = [
    TemplateDef {
        name: "failure_case",
        builtin: include_str!("../../templates/failure_case.txt"),
        required: &["question", "options", "output", "gold"],
    },
    TemplateDef {
        name: "gradient",
        builtin: include_str!("../../templates/gradient.txt"),
        required: &["prompt", "failures"],
    },
    TemplateDef {
        name: "failure_with_gradient",
        builtin: include_str!("../../templates/failure_with_gradient.txt"),
        required: &["failures", "explanation", "gap_analysis", "modification"],
    },
    TemplateDef {
        name: "candidate",
        builtin: include_str!("../../templates/candidate.txt"),
        required: &["prompt", "analysis"],
    },
    TemplateDef {
        name: "pruning_candidate",
        builtin: include_str!("../../templates/pruning_candidate.txt"),
        required: &["prompt", "analysis", "violations"],
    },
    TemplateDef {
        name: "degree_violation",
        builtin: include_str!("../../templates/degree_violation.txt"),
        required: &["path", "outdeg", "limit"],
    },
    TemplateDef {
        name: "balance_violation",
        builtin: include_str!("../../templates/balance_violation.txt"),
        required: &["path", "outdeg", "beta", "limit"],
    },
];

/// The optimizer templates. Built-in texts can be replaced per run by
/// `<name>.txt` files in a directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub failure_case: String,
    pub gradient: String,
    pub failure_with_gradient: String,
    pub candidate: String,
    pub pruning_candidate: String,
    pub degree_violation: String,
    pub balance_violation: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::from_lookup(|def| Ok(def.builtin.to_string())).expect("built-in templates are valid")
    }
}

impl PromptTemplates {
    pub fn load(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self::default());
        };
        if !dir.is_dir() {
            return Err(Error::Config(format!("template directory {} does not exist", dir.display())));
        }
        Self::from_lookup(|def| {
            let path = dir.join(format!("{}.txt", def.name));
            if path.exists() {
                fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
            } else {
                Ok(def.builtin.to_string())
            }
        })
    }

    fn from_lookup(mut get: impl FnMut(&TemplateDef) -> Result<String>) -> Result<Self> {
        let mut texts = Vec::with_capacity(TEMPLATE_DEFS.len());
        for def in &TEMPLATE_DEFS {
            let text = get(def)?;
            for name in def.required {
                if template::count(&text, name) == 0 {
                    return Err(Error::Config(format!(
                        "template {} is missing the {{{name}}} placeholder",
                        def.name
                    )));
                }
            }
            texts.push(text);
        }
        let mut it = texts.into_iter();
        let mut next = || it.next().expect("one text per template");
        Ok(Self {
            failure_case: next(),
            gradient: next(),
            failure_with_gradient: next(),
            candidate: next(),
            pruning_candidate: next(),
            degree_violation: next(),
            balance_violation: next(),
        })
    }

    pub fn render_failures(&self, failures: &[Failure]) -> String {
        failures
            .iter()
            .map(|f| {
                let options = f.instance.render_options();
                template::fill(
                    &self.failure_case,
                    &[
                        ("id", f.instance.id.as_str()),
                        ("question", f.instance.question.as_str()),
                        ("options", options.as_str()),
                        ("output", f.output.trim()),
                        ("gold", f.instance.gold.as_str()),
                    ],
                )
                .trim_end()
                .to_string()
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn gradient_request(&self, prompt: &str, failures: &[Failure]) -> String {
        let rendered = self.render_failures(failures);
        let count = failures.len().to_string();
        template::fill(
            &self.gradient,
            &[
                ("prompt", prompt),
                ("failures", rendered.as_str()),
                ("count", count.as_str()),
            ],
        )
    }

    /// One line per violation, local ones first.
    pub fn render_violations(&self, report: &ViolationReport) -> String {
        let mut lines = Vec::with_capacity(report.len());
        for v in &report.local_violations {
            let outdeg = v.outdeg.to_string();
            let limit = v.limit.to_string();
            lines.push(template::fill(
                &self.degree_violation,
                &[("path", v.path.as_str()), ("outdeg", &outdeg), ("limit", &limit)],
            ));
        }
        for v in &report.global_violations {
            let outdeg = v.outdeg.to_string();
            let branching = format!("{:.3}", v.branching_factor);
            let beta = format!("{:.3}", v.beta);
            let limit = format!("{}", v.limit);
            lines.push(template::fill(
                &self.balance_violation,
                &[
                    ("path", v.path.as_str()),
                    ("outdeg", &outdeg),
                    ("branching", &branching),
                    ("beta", &beta),
                    ("limit", &limit),
                ],
            ));
        }
        lines.iter().map(|l| l.trim_end()).collect::<Vec<_>>().join("\n")
    }

    /// The candidate request; uses the pruning variant when `issues` is
    /// nonempty.
    pub fn candidate_request(
        &self,
        prompt: &str,
        failures: &[Failure],
        gradient: &Gradient,
        issues: &ViolationReport,
        budget: usize,
    ) -> String {
        let rendered = self.render_failures(failures);
        let analysis = template::fill(
            &self.failure_with_gradient,
            &[
                ("failures", rendered.as_str()),
                ("explanation", gradient.explanation.as_str()),
                ("gap_analysis", gradient.gap_analysis.as_str()),
                ("modification", gradient.modification.as_str()),
            ],
        );
        let analysis = analysis.trim_end();
        let budget = budget.to_string();
        if issues.is_empty() {
            template::fill(
                &self.candidate,
                &[("prompt", prompt), ("analysis", analysis), ("budget", &budget)],
            )
        } else {
            let violations = self.render_violations(issues);
            template::fill(
                &self.pruning_candidate,
                &[
                    ("prompt", prompt),
                    ("analysis", analysis),
                    ("violations", violations.as_str()),
                    ("budget", &budget),
                ],
            )
        }
    }
}

pub const GRADIENT_RETRY: &str = "Your reply could not be used. Answer again with exactly three sections labeled \"Error Explanation:\", \"Knowledge Gap Analysis:\" and \"Modification:\", each followed by nonempty text.";

pub fn shorten_instruction(len: usize, budget: usize) -> String {
    format!(
        "Your prompt has {len} characters, over the limit of {budget}. Rewrite it to fit within {budget} characters: merge overlapping items and drop the least useful ones, keeping the knowledge needed for the failure cases. Reply with the new prompt only, between <prompt> and </prompt>."
    )
}

const LABELS: [&str; 3] = ["error explanation", "knowledge gap analysis", "modification"];

/// Finds a section label at the start of `line`, after list or emphasis
/// markup. Returns the label index and the text after the colon.
fn label_line(line: &str) -> Option<(usize, &str)> {
    let body = line.trim_start_matches(|c: char| c.is_whitespace() || "#*-_>0123456789.)".contains(c));
    for (i, label) in LABELS.iter().enumerate() {
        let Some(head) = body.get(..label.len()) else {
            continue;
        };
        if !head.eq_ignore_ascii_case(label) {
            continue;
        }
        let rest = body[label.len()..].trim_start_matches(['*', '_', ' ']);
        if let Some(after) = rest.strip_prefix(':') {
            return Some((i, after.trim_start_matches(['*', '_']).trim()));
        }
    }
    None
}

/// Splits an optimizer reply into its three labeled sections. The first
/// occurrence of each label wins; sections may come in any order.
pub fn parse_gradient(reply: &str, source_failures: Vec<String>) -> Result<Gradient> {
    let mut sections: [Option<Vec<&str>>; 3] = [None, None, None];
    let mut current: Option<usize> = None;
    for line in reply.lines() {
        if let Some((i, first)) = label_line(line) {
            if sections[i].is_none() {
                sections[i] = Some(vec![first]);
                current = Some(i);
                continue;
            }
        }
        if let Some(i) = current {
            if let Some(buf) = sections[i].as_mut() {
                buf.push(line);
            }
        }
    }
    let mut texts = Vec::with_capacity(3);
    for (i, sec) in sections.into_iter().enumerate() {
        let text = sec.map(|lines| lines.join("\n").trim().to_string()).unwrap_or_default();
        if text.is_empty() {
            return Err(Error::Gradient(format!("missing or empty section {:?}", LABELS[i])));
        }
        texts.push(text);
    }
    let mut it = texts.into_iter();
    Ok(Gradient {
        explanation: it.next().unwrap_or_default(),
        gap_analysis: it.next().unwrap_or_default(),
        modification: it.next().unwrap_or_default(),
        source_failures,
    })
}

/// The prompt text inside a candidate reply: the `<prompt>` block when
/// present, otherwise the whole reply minus an enclosing code fence.
pub fn extract_prompt_text(reply: &str) -> &str {
    if let Some(start) = reply.find("<prompt>") {
        let body = &reply[start + "<prompt>".len()..];
        let end = body.rfind("</prompt>").unwrap_or(body.len());
        return body[..end].trim_matches('\n');
    }
    let trimmed = reply.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        if let Some(inner) = rest.strip_suffix("```") {
            // drop the info string line
            return inner.split_once('\n').map_or("", |(_, body)| body);
        }
    }
    trimmed
}

/// Parses a candidate reply; blank prompts are rejected.
pub fn parse_candidate(reply: &str) -> Result<PromptDocument> {
    let doc = parse_prompt(extract_prompt_text(reply));
    if doc.is_blank() {
        return Err(Error::Candidate("reply holds no prompt text".into()));
    }
    Ok(doc)
}
