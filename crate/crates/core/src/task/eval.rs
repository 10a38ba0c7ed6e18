//! The correctness function: run a prompt on instances through the target
//! model and score each answer 0/1.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::extract::extract_answer;
use super::instance::{Instance, TaskInstruction};
use crate::error::{Error, Result};
use crate::gateway::{sha256_hex, ChatMessage, ChatRequest, Gateway, ModelRole};
use crate::jsonl::read_jsonl;
use crate::knowledge::{render_prompt, PromptDocument};

/// Content hash of the rendered prompt.
pub fn prompt_fingerprint(rendered: &str) -> String {
    sha256_hex(rendered.as_bytes())[..32].to_string()
}

pub fn fingerprint_doc(doc: &PromptDocument) -> Result<String> {
    Ok(prompt_fingerprint(&render_prompt(doc)?))
}

/// System message is the rendered prompt; user message is the filled
/// task instruction.
pub fn build_messages(doc: &PromptDocument, inst: &Instance, instr: &TaskInstruction) -> Result<Vec<ChatMessage>> {
    Ok(vec![
        ChatMessage::system(render_prompt(doc)?),
        ChatMessage::user(instr.user_message(inst)?),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessVector {
    pub instance_ids: Vec<String>,
    pub bits: Vec<u8>,
    pub prompt_fingerprint: String,
}

impl CorrectnessVector {
    pub fn new(prompt_fingerprint: impl Into<String>, instance_ids: Vec<String>, bits: Vec<u8>) -> Result<Self> {
        if instance_ids.len() != bits.len() {
            return Err(Error::Contract(format!(
                "{} instance ids but {} bits",
                instance_ids.len(),
                bits.len()
            )));
        }
        if bits.iter().any(|b| *b > 1) {
            return Err(Error::Contract("correctness bits must be 0 or 1".into()));
        }
        Ok(Self {
            instance_ids,
            bits,
            prompt_fingerprint: prompt_fingerprint.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn correct(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    /// Mean of the bits; 0 for an empty vector.
    pub fn accuracy(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.correct() as f64 / self.bits.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub prompt_fingerprint: String,
    pub instance_id: String,
    pub bit: u8,
    pub raw_output_digest: String,
}

#[derive(Debug, Clone)]
struct CachedOutcome {
    bit: u8,
    raw: Option<Arc<str>>,
}

/// (prompt fingerprint, instance id) -> bit, with an append-only JSONL mirror.
///
/// Raw outputs are kept in memory only; after a reload they are fetched
/// again through the gateway (which serves them from its own cache).
#[derive(Debug, Default)]
pub struct EvalCache {
    entries: Mutex<HashMap<(String, String), CachedOutcome>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl EvalCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            for rec in read_jsonl::<EvalRecord>(&path)? {
                entries.insert(
                    (rec.prompt_fingerprint, rec.instance_id),
                    CachedOutcome { bit: rec.bit, raw: None },
                );
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
        read_jsonl(path)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<(String, String), CachedOutcome>> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn bit(&self, fingerprint: &str, instance_id: &str) -> Option<u8> {
        self.lock()
            .get(&(fingerprint.to_string(), instance_id.to_string()))
            .map(|o| o.bit)
    }

    fn get(&self, fingerprint: &str, instance_id: &str) -> Option<CachedOutcome> {
        self.lock()
            .get(&(fingerprint.to_string(), instance_id.to_string()))
            .cloned()
    }

    fn put(&self, fingerprint: &str, instance_id: &str, bit: u8, raw: Arc<str>) -> Result<()> {
        let key = (fingerprint.to_string(), instance_id.to_string());
        let fresh = {
            let mut entries = self.lock();
            let fresh = !entries.contains_key(&key);
            entries.insert(key, CachedOutcome { bit, raw: Some(raw.clone()) });
            fresh
        };
        if let (true, Some(file)) = (fresh, &self.file) {
            let rec = EvalRecord {
                prompt_fingerprint: fingerprint.to_string(),
                instance_id: instance_id.to_string(),
                bit,
                raw_output_digest: sha256_hex(raw.as_bytes()),
            };
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
            f.write_all(&line)
                .map_err(|e| Error::io(self.path.clone().unwrap_or_default(), e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sampling parameters for target-model calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSampling {
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_output: u32,
}

impl Default for TargetSampling {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            seed: Some(0),
            max_output: 512,
        }
    }
}

/// One scored instance.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub bit: u8,
    /// Raw completion; present whenever it was requested.
    pub raw: Option<Arc<str>>,
}

/// Runs prompts on instances through the target model.
pub struct Evaluator<'a> {
    pub gateway: &'a Gateway,
    pub instruction: &'a TaskInstruction,
    pub sampling: TargetSampling,
    pub cache: &'a EvalCache,
    pub parallelism: usize,
}

impl Evaluator<'_> {
    fn evaluate_one(&self, system: &str, fingerprint: &str, inst: &Instance, need_raw: bool) -> Result<Outcome> {
        if let Some(hit) = self.cache.get(fingerprint, &inst.id) {
            if hit.raw.is_some() || !need_raw {
                return Ok(Outcome { bit: hit.bit, raw: hit.raw });
            }
        }
        let req = ChatRequest {
            model_role: ModelRole::Target,
            messages: vec![
                ChatMessage::system(system),
                ChatMessage::user(self.instruction.user_message(inst)?),
            ],
            temperature: self.sampling.temperature,
            seed: self.sampling.seed,
            max_output: self.sampling.max_output,
        };
        let resp = self.gateway.complete(&req)?;
        let labels: Vec<&str> = inst.labels().collect();
        let answer = extract_answer(&resp.text, &labels, &self.instruction.answer_marker);
        let bit = u8::from(answer.as_deref() == Some(inst.gold.as_str()));
        let raw: Arc<str> = Arc::from(resp.text);
        self.cache.put(fingerprint, &inst.id, bit, raw.clone())?;
        Ok(Outcome { bit, raw: Some(raw) })
    }

    /// Scores every instance, in input order. Failures abort with the
    /// position of the first instance that could not be scored.
    pub fn evaluate_detailed(&self, doc: &PromptDocument, instances: &[Instance], need_raw: bool) -> Result<Vec<Outcome>> {
        let system = render_prompt(doc)?;
        let fingerprint = prompt_fingerprint(&system);
        let workers = self.parallelism.clamp(1, instances.len().max(1));

        let run = |idx: usize| -> Result<Outcome> {
            self.evaluate_one(&system, &fingerprint, &instances[idx], need_raw)
                .map_err(|e| Error::Evaluation {
                    position: idx,
                    source: Box::new(e),
                })
        };

        let mut results: Vec<(usize, Result<Outcome>)> = if workers == 1 {
            let mut out = Vec::with_capacity(instances.len());
            for idx in 0..instances.len() {
                let r = run(idx);
                let failed = r.is_err();
                out.push((idx, r));
                if failed {
                    break;
                }
            }
            out
        } else {
            let next = AtomicUsize::new(0);
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|_| {
                        scope.spawn(|| {
                            let mut local = Vec::new();
                            loop {
                                let idx = next.fetch_add(1, Ordering::SeqCst);
                                if idx >= instances.len() {
                                    break;
                                }
                                local.push((idx, run(idx)));
                            }
                            local
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("evaluation worker panicked"))
                    .collect()
            })
        };
        results.sort_by_key(|(idx, _)| *idx);
        results.into_iter().map(|(_, r)| r).collect()
    }

    pub fn evaluate_prompt(&self, doc: &PromptDocument, instances: &[Instance]) -> Result<CorrectnessVector> {
        if instances.is_empty() {
            return Err(Error::Contract("evaluate_prompt needs at least one instance".into()));
        }
        let outcomes = self.evaluate_detailed(doc, instances, false)?;
        CorrectnessVector::new(
            fingerprint_doc(doc)?,
            instances.iter().map(|i| i.id.clone()).collect(),
            outcomes.into_iter().map(|o| o.bit).collect(),
        )
    }
}
