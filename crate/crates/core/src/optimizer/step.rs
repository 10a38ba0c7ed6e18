//! One search iteration and the final beam selection.

use std::collections::{HashMap, HashSet};

use tracing::{debug, info, warn};

use super::config::SearchConfig;
use super::prompts::{
    parse_candidate, parse_gradient, shorten_instruction, Failure, Gradient, PromptTemplates, GRADIENT_RETRY,
};
use super::sampler::{BatchSampler, EpochSampler};
use crate::error::{Error, Result};
use crate::filter::{select_indices, CandidatePair, PairScore, StepRecord, TrajectoryLog};
use crate::gateway::{ChatMessage, ChatRequest, Gateway, ModelRole};
use crate::knowledge::{detect_violations, render_prompt, PromptDocument, ViolationReport};
use crate::task::{fingerprint_doc, prompt_fingerprint, Evaluator, Instance};

/// Everything that changes from one step to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Completed steps.
    pub step: u64,
    pub beam: Vec<PromptDocument>,
    /// Ids of every sampled training instance, in sampling order.
    pub bank: Vec<String>,
    pub trajectory: TrajectoryLog,
    pub sampler: EpochSampler,
}

impl RunState {
    pub fn initial(prompt: PromptDocument, seed: u64) -> Self {
        Self {
            step: 0,
            beam: vec![prompt],
            bank: Vec::new(),
            trajectory: TrajectoryLog::default(),
            sampler: EpochSampler::new(seed),
        }
    }
}

/// Sampling parameters for optimizer calls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSampling {
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_output: u32,
}

/// Beam member chosen on the validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub accuracies: Vec<f64>,
}

pub struct Engine<'a> {
    search: &'a SearchConfig,
    gateway: &'a Gateway,
    evaluator: Evaluator<'a>,
    templates: &'a PromptTemplates,
    sampling: OptimizerSampling,
    train: &'a [Instance],
    by_id: HashMap<&'a str, usize>,
}

impl<'a> Engine<'a> {
    pub fn new(
        search: &'a SearchConfig,
        gateway: &'a Gateway,
        evaluator: Evaluator<'a>,
        templates: &'a PromptTemplates,
        sampling: OptimizerSampling,
        train: &'a [Instance],
    ) -> Result<Self> {
        search.validate()?;
        if train.is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        let by_id = train.iter().enumerate().map(|(i, inst)| (inst.id.as_str(), i)).collect();
        Ok(Self {
            search,
            gateway,
            evaluator,
            templates,
            sampling,
            train,
            by_id,
        })
    }

    pub fn evaluator(&self) -> &Evaluator<'a> {
        &self.evaluator
    }

    /// Draws the next batch and appends it to the bank.
    pub fn sample_batch(&self, state: &mut RunState) -> Result<Vec<Instance>> {
        let picks = state.sampler.next_batch(self.train.len(), self.search.batch_size)?;
        let batch: Vec<Instance> = picks.iter().map(|i| self.train[*i].clone()).collect();
        state.bank.extend(batch.iter().map(|i| i.id.clone()));
        Ok(batch)
    }

    /// The last `K` bank entries.
    pub fn window(&self, bank: &[String]) -> Result<Vec<Instance>> {
        let start = bank.len().saturating_sub(self.search.window);
        bank[start..]
            .iter()
            .map(|id| {
                self.by_id
                    .get(id.as_str())
                    .map(|i| self.train[*i].clone())
                    .ok_or_else(|| Error::Checkpoint(format!("bank holds unknown instance {id:?}")))
            })
            .collect()
    }

    /// Instances of `batch` the prompt gets wrong, with the raw outputs.
    pub fn collect_failures(&self, doc: &PromptDocument, batch: &[Instance]) -> Result<Vec<Failure>> {
        let outcomes = self.evaluator.evaluate_detailed(doc, batch, true)?;
        Ok(batch
            .iter()
            .zip(outcomes)
            .filter(|(_, o)| o.bit == 0)
            .map(|(inst, o)| Failure {
                instance: inst.clone(),
                output: o.raw.as_deref().unwrap_or_default().to_string(),
            })
            .collect())
    }

    fn ask(&self, messages: Vec<ChatMessage>, slot: usize) -> Result<String> {
        let req = ChatRequest {
            model_role: ModelRole::Optimizer,
            messages,
            temperature: self.sampling.temperature,
            seed: self.sampling.seed.map(|s| s.wrapping_add(slot as u64)),
            max_output: self.sampling.max_output,
        };
        Ok(self.gateway.complete(&req)?.text)
    }

    /// One gradient; an unusable reply is asked for again once.
    pub fn generate_gradient(&self, prompt: &str, failures: &[Failure], slot: usize) -> Result<Gradient> {
        if failures.is_empty() {
            return Err(Error::Contract("gradient requested without failures".into()));
        }
        let ids: Vec<String> = failures.iter().map(|f| f.instance.id.clone()).collect();
        let request = ChatMessage::user(self.templates.gradient_request(prompt, failures));
        let reply = self.ask(vec![request.clone()], slot)?;
        match parse_gradient(&reply, ids.clone()) {
            Ok(g) => Ok(g),
            Err(Error::Gradient(why)) => {
                debug!(slot, "gradient unusable ({why}), asking again");
                let retry = vec![request, ChatMessage::assistant(reply), ChatMessage::user(GRADIENT_RETRY)];
                parse_gradient(&self.ask(retry, slot)?, ids)
            }
            Err(e) => Err(e),
        }
    }

    /// One candidate prompt; an over-budget reply is asked to shrink once.
    pub fn generate_candidate(
        &self,
        prompt: &str,
        failures: &[Failure],
        gradient: &Gradient,
        issues: &ViolationReport,
        slot: usize,
    ) -> Result<PromptDocument> {
        let budget = self.search.prompt_char_budget;
        let request = ChatMessage::user(self.templates.candidate_request(prompt, failures, gradient, issues, budget));
        let reply = self.ask(vec![request.clone()], slot)?;
        let doc = parse_candidate(&reply)?;
        let len = render_prompt(&doc)?.chars().count();
        if len <= budget {
            return Ok(doc);
        }
        debug!(slot, len, budget, "candidate over budget, asking to shorten");
        let retry = vec![
            request,
            ChatMessage::assistant(reply),
            ChatMessage::user(shorten_instruction(len, budget)),
        ];
        let doc = parse_candidate(&self.ask(retry, slot)?)?;
        let len = render_prompt(&doc)?.chars().count();
        if len > budget {
            return Err(Error::Candidate(format!("{len} characters after shortening, budget {budget}")));
        }
        Ok(doc)
    }

    fn generate_slot(
        &self,
        prompt: &str,
        failures: &[Failure],
        issues: &ViolationReport,
        slot: usize,
    ) -> Result<PromptDocument> {
        let gradient = self.generate_gradient(prompt, failures, slot)?;
        self.generate_candidate(prompt, failures, &gradient, issues, slot)
    }

    /// Up to `M` candidates for one parent, in slot order. Slots whose
    /// gradient or candidate was rejected are dropped.
    fn expand(&self, parent: &PromptDocument, failures: &[Failure], issues: &ViolationReport) -> Result<Vec<PromptDocument>> {
        let prompt = render_prompt(parent)?;
        let m = self.search.candidates_per_parent;
        let results: Vec<Result<PromptDocument>> = if self.search.parallelism > 1 && m > 1 {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..m)
                    .map(|slot| {
                        let prompt = &prompt;
                        scope.spawn(move || self.generate_slot(prompt, failures, issues, slot))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("candidate worker panicked"))
                    .collect()
            })
        } else {
            (0..m).map(|slot| self.generate_slot(&prompt, failures, issues, slot)).collect()
        };
        let mut out = Vec::with_capacity(m);
        for (slot, r) in results.into_iter().enumerate() {
            match r {
                Ok(doc) => out.push(doc),
                Err(e) if e.is_slot_local() => warn!(slot, "slot skipped: {e}"),
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Runs one iteration on a copy of `state`. On error the caller still
    /// holds the untouched pre-step state.
    pub fn run_step(&self, state: &RunState) -> Result<RunState> {
        let mut next = state.clone();
        next.step += 1;
        let batch = self.sample_batch(&mut next)?;
        let window = self.window(&next.bank)?;
        let limits = self.search.limits();

        // (candidate, parent index); identity pairs first for each parent
        let mut pairs: Vec<(PromptDocument, usize)> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for parent in &state.beam {
            seen.insert(fingerprint_doc(parent)?);
        }
        for (j, parent) in state.beam.iter().enumerate() {
            pairs.push((parent.clone(), j));
            let failures = self.collect_failures(parent, &batch)?;
            if failures.is_empty() {
                debug!(step = next.step, parent = j, "no failures on the batch");
                continue;
            }
            let issues = if self.search.pruning {
                detect_violations(&parent.tree, &limits)?
            } else {
                ViolationReport::default()
            };
            for cand in self.expand(parent, &failures, &issues)? {
                if seen.insert(fingerprint_doc(&cand)?) {
                    pairs.push((cand, j));
                } else {
                    debug!(step = next.step, parent = j, "duplicate candidate dropped");
                }
            }
        }

        let parent_bits = state
            .beam
            .iter()
            .map(|p| self.evaluator.evaluate_prompt(p, &window))
            .collect::<Result<Vec<_>>>()?;
        let mut scored = Vec::with_capacity(pairs.len());
        for (cand, j) in pairs {
            let parent = state.beam[j].clone();
            let pair = if cand == parent {
                CandidatePair::identity(parent)
            } else {
                let bits = self.evaluator.evaluate_prompt(&cand, &window)?;
                CandidatePair::scored(cand, parent, &bits, &parent_bits[j])?
            };
            scored.push(pair);
        }
        let scores: Vec<PairScore> = scored.iter().map(PairScore::from).collect();
        let chosen = select_indices(&scores, self.search.beam_width)?;
        let top = &scored[chosen[0]];
        next.beam = chosen.iter().map(|i| scored[*i].candidate.clone()).collect();

        let best = &next.beam[0];
        let rendered = render_prompt(best)?;
        let previous = self.evaluator.evaluate_prompt(&state.beam[0], &batch)?;
        let selected = self.evaluator.evaluate_prompt(best, &batch)?;
        let window_bits = self.evaluator.evaluate_prompt(best, &window)?;
        let violations = detect_violations(&best.tree, &limits)?;
        let record = StepRecord {
            step: next.step,
            batch_ids: batch.iter().map(|i| i.id.clone()).collect(),
            selected_fingerprint: prompt_fingerprint(&rendered),
            previous_bits: previous.bits,
            selected_bits: selected.bits,
            window_accuracy: window_bits.accuracy(),
            delta_s: top.delta_s,
            divergence: top.divergence,
            candidates: scored.len(),
            local_violations: violations.local_violations.len(),
            global_violations: violations.global_violations.len(),
            prompt_chars: rendered.chars().count(),
        };
        info!(
            step = record.step,
            candidates = record.candidates,
            delta_s = record.delta_s,
            divergence = record.divergence,
            window_accuracy = record.window_accuracy,
            "step done"
        );
        next.trajectory.push(record)?;
        Ok(next)
    }

    /// Highest validation accuracy wins; ties go to the earlier member.
    pub fn final_select(&self, beam: &[PromptDocument], validation: &[Instance]) -> Result<Selection> {
        if beam.is_empty() {
            return Err(Error::Contract("final selection over an empty beam".into()));
        }
        if validation.is_empty() {
            return Err(Error::Config("the validation split is empty".into()));
        }
        let accuracies = beam
            .iter()
            .map(|p| Ok(self.evaluator.evaluate_prompt(p, validation)?.accuracy()))
            .collect::<Result<Vec<f64>>>()?;
        let mut index = 0;
        for (i, acc) in accuracies.iter().enumerate() {
            if *acc > accuracies[index] {
                index = i;
            }
        }
        Ok(Selection { index, accuracies })
    }
}
