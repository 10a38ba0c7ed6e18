//! Offline stand-ins for both models, and a small synthetic task to drive
//! them.
//!
//! The target answers an instance correctly exactly when its system prompt
//! contains the fact that instance depends on. The optimizer reads the
//! failure cases it is shown, names one missing fact per gradient, and
//! writes candidates that add that fact. When the request lists structural
//! violations it also trims the flagged topics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, MessageRole, ScriptedAdapter};
use crate::optimizer::{AdapterChoice, DataConfig, ModelConfig, OutputConfig, RunConfig, SearchConfig};
use crate::knowledge::{balance_ratio, parse_prompt, render_prompt, KnowledgeTree, NodeId, PromptDocument, ROOT_TITLE};
use crate::task::{AnswerOption, Instance, Split};

/// A fact and the tag word that marks the questions depending on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub tag: String,
    pub fact: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FactSheet {
    pub facts: Vec<Fact>,
}

impl FactSheet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sheet: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if sheet.facts.iter().any(|f| f.tag.trim().is_empty() || f.fact.trim().is_empty()) {
            return Err(Error::Config(format!("{}: empty tag or fact", path.display())));
        }
        Ok(sheet)
    }

    /// The fact a question depends on: the first whose tag it mentions.
    pub fn required_by(&self, question: &str) -> Option<&Fact> {
        let q = question.to_lowercase();
        self.facts.iter().find(|f| q.contains(&f.tag.to_lowercase()))
    }
}

/// Heading under which the optimizer files new facts.
pub const FACT_TOPIC: &str = "Key Facts";

fn first_user(req: &ChatRequest) -> &str {
    req.messages
        .iter()
        .find(|m| m.role == MessageRole::User)
        .map_or("", |m| m.content.as_str())
}

fn between<'t>(text: &'t str, open: &str, close: &str) -> Option<&'t str> {
    let start = text.find(open)? + open.len();
    let len = text[start..].find(close)?;
    Some(&text[start..start + len])
}

/// Target that knows nothing beyond its system prompt.
pub fn fact_gated_target(sheet: FactSheet, instances: &[Instance], answer_marker: &str) -> ScriptedAdapter {
    struct Known {
        question: String,
        fact: Option<String>,
        gold: String,
        wrong: String,
    }
    let known: Vec<Known> = instances
        .iter()
        .map(|inst| Known {
            question: inst.question.clone(),
            fact: sheet.required_by(&inst.question).map(|f| f.fact.clone()),
            gold: inst.gold.clone(),
            wrong: inst
                .labels()
                .find(|l| *l != inst.gold)
                .unwrap_or(inst.gold.as_str())
                .to_string(),
        })
        .collect();
    let marker = answer_marker.to_string();
    ScriptedAdapter::from_rule(move |req| {
        let user = first_user(req);
        let item = known.iter().find(|k| user.contains(&k.question))?;
        let system = req.system_text();
        Some(match &item.fact {
            Some(fact) if !system.contains(fact.as_str()) => {
                format!("The instructions do not cover this, so I will guess.\n{marker} {}", item.wrong)
            }
            Some(fact) => format!("The instructions state: {fact}\n{marker} {}", item.gold),
            None => format!("This needs no special knowledge.\n{marker} {}", item.gold),
        })
    })
}

/// Optimizer that supplies one missing fact per gradient.
pub fn fact_oracle_optimizer(sheet: FactSheet) -> ScriptedAdapter {
    ScriptedAdapter::from_rule(move |req| {
        let text = first_user(req);
        if text.contains("<gradient>") {
            Some(oracle_candidate(&sheet, text))
        } else if text.contains("<failure_cases>") {
            Some(oracle_gradient(&sheet, text, req.seed.unwrap_or(0)))
        } else {
            None
        }
    })
}

fn oracle_gradient(sheet: &FactSheet, text: &str, seed: u64) -> String {
    let current = between(text, "<current_prompt>", "</current_prompt>").unwrap_or("");
    let cases = between(text, "<failure_cases>", "</failure_cases>").unwrap_or("");
    let mut counts = vec![0usize; sheet.facts.len()];
    for case in cases.split("<case").skip(1) {
        if let Some(fact) = sheet.required_by(case) {
            let i = sheet.facts.iter().position(|f| f == fact).expect("fact from this sheet");
            counts[i] += 1;
        }
    }
    let mut ranked: Vec<usize> = (0..sheet.facts.len())
        .filter(|i| counts[*i] > 0 && !current.contains(sheet.facts[*i].fact.as_str()))
        .collect();
    // most frequent first; sheet order breaks ties
    ranked.sort_by(|a, b| counts[*b].cmp(&counts[*a]).then(a.cmp(b)));
    if ranked.is_empty() {
        return "Error Explanation: The failures do not point to any missing knowledge.\n\
                Knowledge Gap Analysis: No gap identified.\n\
                Modification: Keep the prompt unchanged."
            .to_string();
    }
    let fact = &sheet.facts[ranked[seed as usize % ranked.len()]];
    format!(
        "Error Explanation: The prompt says nothing about {tag}, so the model guessed on {n} case(s).\n\
         Knowledge Gap Analysis: These cases require knowing that {lower}\n\
         Modification: Add the note \"{fact}\" under the topic \"{FACT_TOPIC}\".",
        tag = fact.tag,
        n = counts[sheet.facts.iter().position(|f| f == fact).expect("fact from this sheet")],
        lower = fact.fact,
        fact = fact.fact,
    )
}

fn oracle_candidate(sheet: &FactSheet, text: &str) -> String {
    let current = between(text, "<current_prompt>", "</current_prompt>").unwrap_or("");
    let gradient = between(text, "<gradient>", "</gradient>").unwrap_or("");
    let mut doc = parse_prompt(current);
    let new_fact = sheet
        .facts
        .iter()
        .find(|f| gradient.contains(f.fact.as_str()) && !current.contains(f.fact.as_str()));
    if let Some(fact) = new_fact {
        let topic = match doc.tree.find_topic(&[FACT_TOPIC]) {
            Some(t) => t,
            None => doc.tree.add_topic(doc.tree.root(), FACT_TOPIC).expect("root is a topic"),
        };
        doc.tree.add_note(topic, fact.fact.clone()).expect("topic accepts notes");
    }
    if let Some(block) = between(text, "<violations>", "</violations>") {
        for line in block.lines().filter(|l| l.contains('"')) {
            doc.tree = prune_flagged(&doc.tree, sheet, line);
        }
    }
    let doc = PromptDocument::new(doc.preamble, doc.tree, doc.epilogue);
    let rendered = render_prompt(&doc).unwrap_or_default();
    format!("<prompt>\n{}</prompt>", rendered)
}

/// Drops trailing non-fact children of the topic named in a violation
/// line until it meets the limit stated on that line.
fn prune_flagged(tree: &KnowledgeTree, sheet: &FactSheet, line: &str) -> KnowledgeTree {
    let Some(path) = between(line, "\"", "\"") else {
        return tree.clone();
    };
    let limit = line.match_indices("limit").find_map(|(i, _)| {
        let rest = line[i + "limit".len()..].trim_start();
        let rest = rest.strip_prefix("of").unwrap_or(rest).trim_start();
        let end = rest
            .find(|c: char| !(c.is_ascii_digit() || c == '.'))
            .unwrap_or(rest.len());
        rest[..end].trim_end_matches('.').parse::<f64>().ok()
    });
    let Some(limit) = limit else {
        return tree.clone();
    };
    let titles: Vec<&str> = path
        .split(" > ")
        .skip_while(|p| *p == ROOT_TITLE)
        .collect();
    let balance = line.contains("balance ratio");
    let mut tree = tree.clone();
    loop {
        let Some(node) = tree.find_topic(&titles) else {
            return tree;
        };
        let flagged = if balance {
            balance_ratio(&tree, node).is_ok_and(|b| *b.numer() as f64 > limit * *b.denom() as f64)
        } else {
            tree.outdeg(node) as f64 > limit
        };
        if !flagged {
            return tree;
        }
        let Some(victim) = removable_child(&tree, sheet, node) else {
            return tree;
        };
        tree = tree.filtered(|_, n| n.id != victim);
    }
}

fn removable_child(tree: &KnowledgeTree, sheet: &FactSheet, node: NodeId) -> Option<NodeId> {
    let children = &tree.node(node)?.children;
    children.iter().rev().copied().find(|c| {
        let n = tree.node(*c).expect("child exists");
        n.is_note() && !sheet.facts.iter().any(|f| f.fact == n.text)
    })
}

struct Topic {
    tag: &'static str,
    fact: &'static str,
    stem: &'static str,
    answer: &'static str,
    distractors: [&'static str; 3],
}

const TOPICS: [Topic; 5] = [
    Topic {
        tag: "zorblax",
        fact: "Zorblax crystals dissolve only in cold brine.",
        stem: "In what do zorblax crystals dissolve?",
        answer: "cold brine",
        distractors: ["warm water", "pure alcohol", "direct sunlight"],
    },
    Topic {
        tag: "quenthil",
        fact: "Quenthil moths migrate north every ninth winter.",
        stem: "How often do quenthil moths migrate north?",
        answer: "every ninth winter",
        distractors: ["every spring", "never", "every second summer"],
    },
    Topic {
        tag: "mirovane",
        fact: "Mirovane alloys turn brittle above 400 kelvin.",
        stem: "Above what temperature do mirovane alloys turn brittle?",
        answer: "400 kelvin",
        distractors: ["100 kelvin", "900 kelvin", "20 kelvin"],
    },
    Topic {
        tag: "talsic",
        fact: "The talsic tribunal is chaired by the eldest archivist.",
        stem: "Who chairs the talsic tribunal?",
        answer: "the eldest archivist",
        distractors: ["the youngest judge", "a rotating merchant", "the harbour master"],
    },
    Topic {
        tag: "brevimor",
        fact: "Brevimor syrup is brewed from fermented lichen.",
        stem: "From what is brevimor syrup brewed?",
        answer: "fermented lichen",
        distractors: ["pine resin", "sea salt", "wild honey"],
    },
];

const LABELS: [&str; 4] = ["A", "B", "C", "D"];

/// Synthetic task whose every instance depends on one of a few facts.
#[derive(Debug, Clone, PartialEq)]
pub struct FactFixture {
    pub sheet: FactSheet,
    pub instances: Vec<Instance>,
}

impl FactFixture {
    /// `facts` topics (at most 5), each with `train_per_fact` training and
    /// `val_per_fact` validation instances. Splits are tagged.
    pub fn new(facts: usize, train_per_fact: usize, val_per_fact: usize) -> Self {
        let topics = &TOPICS[..facts.min(TOPICS.len())];
        let sheet = FactSheet {
            facts: topics
                .iter()
                .map(|t| Fact {
                    tag: t.tag.into(),
                    fact: t.fact.into(),
                })
                .collect(),
        };
        let mut instances = Vec::new();
        for (j, t) in topics.iter().enumerate() {
            for k in 0..train_per_fact + val_per_fact {
                let (split, prefix) = if k < train_per_fact {
                    (Split::Train, "t")
                } else {
                    (Split::Val, "v")
                };
                let id = format!("{prefix}{j}{k}");
                let gold = (j + k) % LABELS.len();
                let mut distractors = t.distractors.iter();
                let options = LABELS
                    .iter()
                    .enumerate()
                    .map(|(i, label)| AnswerOption {
                        label: (*label).into(),
                        text: if i == gold {
                            t.answer.into()
                        } else {
                            (*distractors.next().expect("three distractors")).into()
                        },
                    })
                    .collect();
                instances.push(Instance {
                    question: format!("Item {id}: {}", t.stem),
                    id,
                    options,
                    gold: LABELS[gold].into(),
                    split: Some(split),
                });
            }
        }
        Self { sheet, instances }
    }

    /// Five facts, 25 training and 10 validation instances.
    pub fn standard() -> Self {
        Self::new(5, 5, 2)
    }

    pub fn train(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.split == Some(Split::Train))
    }

    pub fn validation(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.split == Some(Split::Val))
    }

    /// Writes `facts.json`, `data.jsonl` and `task.json` into `dir` and
    /// returns the task file path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let facts = dir.join("facts.json");
        fs::write(&facts, serde_json::to_vec_pretty(&self.sheet)?).map_err(|e| Error::io(&facts, e))?;
        let data = dir.join("data.jsonl");
        let mut lines = Vec::new();
        for inst in &self.instances {
            serde_json::to_writer(&mut lines, inst)?;
            lines.push(b'\n');
        }
        fs::write(&data, lines).map_err(|e| Error::io(&data, e))?;
        let task = dir.join("task.json");
        let body = serde_json::json!({
            "name": "fact-recall",
            "instruction_template": crate::task::DEFAULT_INSTRUCTION,
            "answer_marker": crate::task::DEFAULT_ANSWER_MARKER,
            "data": "data.jsonl",
        });
        fs::write(&task, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&task, e))?;
        Ok(task)
    }
}

/// Writes the fixture, an initial prompt and a `config.toml` wired to the
/// offline adapters into `dir`. The run directory is `dir/run`. Returns the
/// config path.
pub fn write_fixture_config(dir: &Path, fixture: &FactFixture, initial_prompt: &str, search: SearchConfig) -> Result<PathBuf> {
    fixture.write_to(dir)?;
    let prompt = dir.join("initial_prompt.md");
    fs::write(&prompt, initial_prompt).map_err(|e| Error::io(&prompt, e))?;
    let offline = |adapter: AdapterChoice, base: ModelConfig| ModelConfig {
        adapter,
        facts: Some("facts.json".into()),
        ..base
    };
    let config = RunConfig {
        search,
        data: DataConfig {
            task: "task.json".into(),
            initial_prompt: Some("initial_prompt.md".into()),
            split_seed: 0,
            train: 0,
            val: 0,
            test: 0,
            val_as_test: true,
        },
        target: offline(AdapterChoice::FactGated, ModelConfig::target_default()),
        optimizer: offline(AdapterChoice::FactOracle, ModelConfig::optimizer_default()),
        output: OutputConfig {
            dir: "run".into(),
            templates: None,
        },
    };
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub const PLAIN_PROMPT: &str = "You are a careful assistant answering multiple-choice questions.\n";

/// The plain prompt plus one topic holding `tips` generic notes.
pub fn over_branched_prompt(tips: usize) -> String {
    let mut text = format!("{PLAIN_PROMPT}\n# General Guidance\n");
    for i in 1..=tips {
        text.push_str(&format!("- Tip {i}: read every option carefully before answering.\n"));
    }
    text
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::{ChatMessage, Gateway, ModelRole};
    use crate::knowledge::{detect_violations, PruningLimits};
    use crate::task::{EvalCache, Evaluator, TargetSampling, TaskInstruction};

    fn target_gateway(fx: &FactFixture) -> Gateway {
        let t = Arc::new(fact_gated_target(fx.sheet.clone(), &fx.instances, "Final Answer:"));
        let o = Arc::new(fact_oracle_optimizer(fx.sheet.clone()));
        Gateway::builder(o, t).build()
    }

    fn prompt_with(facts: &[&Fact]) -> PromptDocument {
        let mut text = PLAIN_PROMPT.to_string();
        text.push_str("\n# Key Facts\n");
        for f in facts {
            text.push_str(&format!("- {}\n", f.fact));
        }
        parse_prompt(&text)
    }

    #[test]
    fn standard_fixture_shape() {
        let fx = FactFixture::standard();
        assert_eq!(fx.train().count(), 25);
        assert_eq!(fx.validation().count(), 10);
        for inst in &fx.instances {
            inst.validate().unwrap();
            assert!(fx.sheet.required_by(&inst.question).is_some());
        }
    }

    #[test]
    fn failures_are_exactly_the_missing_facts() {
        let fx = FactFixture::standard();
        let gw = target_gateway(&fx);
        let instr = TaskInstruction::default();
        let cache = EvalCache::in_memory();
        let ev = Evaluator {
            gateway: &gw,
            instruction: &instr,
            sampling: TargetSampling::default(),
            cache: &cache,
            parallelism: 3,
        };
        // one instance per fact, prompt knows facts 0, 2, 4
        let batch: Vec<Instance> = (0..5).map(|j| fx.instances[j * 7].clone()).collect();
        let known: Vec<&Fact> = [0, 2, 4].iter().map(|i| &fx.sheet.facts[*i]).collect();
        let v = ev.evaluate_prompt(&prompt_with(&known), &batch).unwrap();
        assert_eq!(v.bits, vec![1, 0, 1, 0, 1]);
    }

    #[test]
    fn oracle_adds_the_named_fact_and_prunes() {
        let fx = FactFixture::standard();
        let parent = parse_prompt(&over_branched_prompt(20));
        let issues = detect_violations(&parent.tree, &PruningLimits::default()).unwrap();
        assert_eq!(issues.local_violations.len(), 1);
        let templates = crate::optimizer::PromptTemplates::default();
        let gradient = crate::optimizer::Gradient {
            explanation: "x".into(),
            gap_analysis: "y".into(),
            modification: format!("Add the note \"{}\"", fx.sheet.facts[3].fact),
            source_failures: vec![],
        };
        let rendered = render_prompt(&parent).unwrap();
        let request = templates.candidate_request(&rendered, &[], &gradient, &issues, 8000);
        let reply = oracle_candidate(&fx.sheet, &request);
        let doc = crate::optimizer::parse_candidate(&reply).unwrap();
        assert!(render_prompt(&doc).unwrap().contains(&fx.sheet.facts[3].fact));
        assert!(detect_violations(&doc.tree, &PruningLimits::default()).unwrap().is_empty());
        let tips = doc.tree.find_topic(&["General Guidance"]).unwrap();
        assert_eq!(doc.tree.outdeg(tips), 16);
    }

    #[test]
    fn gradient_ranks_by_failure_count_and_rotates_by_seed() {
        let fx = FactFixture::standard();
        let failures: Vec<crate::optimizer::Failure> = ["t00", "t01", "t30"]
            .iter()
            .map(|id| crate::optimizer::Failure {
                instance: fx.instances.iter().find(|i| i.id == *id).unwrap().clone(),
                output: "Final Answer: A".into(),
            })
            .collect();
        let text = crate::optimizer::PromptTemplates::default().gradient_request(PLAIN_PROMPT, &failures);
        assert!(oracle_gradient(&fx.sheet, &text, 0).contains(&fx.sheet.facts[0].fact));
        assert!(oracle_gradient(&fx.sheet, &text, 1).contains(&fx.sheet.facts[3].fact));
        let gw = target_gateway(&fx);
        let req = ChatRequest {
            model_role: ModelRole::Optimizer,
            messages: vec![ChatMessage::user(text)],
            temperature: 0.7,
            seed: Some(0),
            max_output: 100,
        };
        let g = crate::optimizer::parse_gradient(&gw.complete(&req).unwrap().text, vec![]).unwrap();
        assert!(g.modification.contains(&fx.sheet.facts[0].fact));
    }
}
