//! A run on disk: setup from a config, checkpoints, resume, final
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::info;

use super::config::{AdapterChoice, ModelConfig, RunConfig};
use super::prompts::PromptTemplates;
use super::sampler::EpochSampler;
use super::step::{Engine, OptimizerSampling, RunState};
use crate::dataset::{load_jsonl, load_task, resolve_splits, Dataset, Splits};
use crate::error::{Error, Result};
use crate::filter::{StepRecord, TrajectoryLog};
use crate::gateway::{
    ChatAdapter, Gateway, HttpAdapter, HttpSettings, ResponseCache, ResponseLog, RetryPolicy,
    ScriptedAdapter,
};
use crate::jsonl::write_atomic;
use crate::knowledge::{parse_prompt, render_prompt, PromptDocument};
use crate::report::{build_report, FinalOutcome};
use crate::sim::{fact_gated_target, fact_oracle_optimizer, FactSheet};
use crate::task::{fingerprint_doc, EvalCache, Evaluator, TargetSampling};

/// File layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
    pub fn trajectory(&self) -> PathBuf {
        self.dir.join("trajectory.jsonl")
    }
    pub fn responses(&self) -> PathBuf {
        self.dir.join("responses.jsonl")
    }
    pub fn response_cache(&self) -> PathBuf {
        self.dir.join("response_cache.jsonl")
    }
    pub fn eval_cache(&self) -> PathBuf {
        self.dir.join("eval_cache.jsonl")
    }
    pub fn final_prompt(&self) -> PathBuf {
        self.dir.join("final_prompt.md")
    }
    pub fn final_json(&self) -> PathBuf {
        self.dir.join("final.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.dir.join("report.txt")
    }
    pub fn report_json(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

const CHECKPOINT_VERSION: u32 = 1;

/// Serialized [`RunState`]. The beam is stored as rendered prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: String,
    pub step: u64,
    pub beam: Vec<String>,
    pub bank: Vec<String>,
    pub trajectory: Vec<StepRecord>,
    pub sampler: EpochSampler,
}

impl Checkpoint {
    pub fn from_state(state: &RunState, config_digest: &str) -> Result<Self> {
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config_digest: config_digest.to_string(),
            step: state.step,
            beam: state.beam.iter().map(render_prompt).collect::<Result<_>>()?,
            bank: state.bank.clone(),
            trajectory: state.trajectory.steps.clone(),
            sampler: state.sampler,
        })
    }

    pub fn into_state(self) -> Result<RunState> {
        if self.beam.is_empty() {
            return Err(Error::Checkpoint("checkpoint beam is empty".into()));
        }
        let mut trajectory = TrajectoryLog::default();
        for rec in self.trajectory {
            trajectory.push(rec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(RunState {
            step: self.step,
            beam: self.beam.iter().map(|t| parse_prompt(t)).collect(),
            bank: self.bank,
            trajectory,
            sampler: self.sampler,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cp: Self = serde_json::from_str(&text).map_err(|e| {
            Error::Checkpoint(format!(
                "{}: line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                cp.version
            )));
        }
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

/// Everything a run needs except model access.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub splits: Splits,
    pub templates: PromptTemplates,
    pub initial: PromptDocument,
}

impl Prepared {
    /// Loads and checks the dataset, splits, templates and initial prompt.
    /// Makes no model calls.
    pub fn load(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let task = &config.data.task;
        let dataset = match task.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => load_jsonl(task)?,
            _ => load_task(task)?,
        };
        let splits = resolve_splits(&dataset, config.data.split_seed, config.data.sizes(), config.data.val_as_test)?;
        if splits.train.len() < config.search.batch_size {
            return Err(Error::Config(format!(
                "batch size {} exceeds the {} training instances",
                config.search.batch_size,
                splits.train.len()
            )));
        }
        if splits.val.is_empty() {
            return Err(Error::Config("the validation split is empty".into()));
        }
        let templates = PromptTemplates::load(config.output.templates.as_deref())?;
        let initial = match &config.data.initial_prompt {
            Some(path) => parse_prompt(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?),
            None => PromptDocument::default(),
        };
        render_prompt(&initial)?;
        check_credentials(&config)?;
        Ok(Self {
            config,
            dataset,
            splits,
            templates,
            initial,
        })
    }
}

/// Fails when an http model's API key variable is unset.
pub fn check_credentials(config: &RunConfig) -> Result<()> {
    for (section, m) in [("target", &config.target), ("optimizer", &config.optimizer)] {
        if m.adapter == AdapterChoice::Http && std::env::var(&m.api_key_env).map_or(true, |k| k.is_empty()) {
            return Err(Error::Config(format!(
                "{section} uses the http adapter but the environment variable {} is not set",
                m.api_key_env
            )));
        }
    }
    Ok(())
}

fn build_adapter(m: &ModelConfig, dataset: &Dataset) -> Result<Arc<dyn ChatAdapter>> {
    let sheet = || -> Result<FactSheet> {
        FactSheet::load(m.facts.as_deref().ok_or_else(|| Error::Config("facts file missing".into()))?)
    };
    Ok(match m.adapter {
        AdapterChoice::Http => {
            let api_key = std::env::var(&m.api_key_env).ok().filter(|k| !k.is_empty());
            if api_key.is_none() {
                return Err(Error::Config(format!("environment variable {} is not set", m.api_key_env)));
            }
            Arc::new(HttpAdapter::new(HttpSettings {
                base_url: m.base_url.clone().unwrap_or_default(),
                model: m.model.clone().unwrap_or_default(),
                api_key,
                timeout: m.timeout(),
            })?)
        }
        AdapterChoice::Scripted => Arc::new(ScriptedAdapter::from_jsonl(
            m.script.as_deref().ok_or_else(|| Error::Config("script file missing".into()))?,
        )?),
        AdapterChoice::FactGated => Arc::new(fact_gated_target(
            sheet()?,
            &dataset.instances,
            &dataset.instruction.answer_marker,
        )),
        AdapterChoice::FactOracle => Arc::new(fact_oracle_optimizer(sheet()?)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    /// Stopped early at this completed step; resumable.
    Stopped { step: u64 },
    Finished(FinalOutcome),
}

/// A prepared run bound to its directory and models.
pub struct Session {
    pub prepared: Prepared,
    pub paths: RunPaths,
    gateway: Gateway,
    eval_cache: EvalCache,
}

impl Session {
    pub fn open(prepared: Prepared) -> Result<Self> {
        let cfg = &prepared.config;
        let optimizer = build_adapter(&cfg.optimizer, &prepared.dataset)?;
        let target = build_adapter(&cfg.target, &prepared.dataset)?;
        Self::with_adapters(prepared, optimizer, target)
    }

    /// Like [`Session::open`] with caller-supplied model adapters.
    pub fn with_adapters(
        prepared: Prepared,
        optimizer: Arc<dyn ChatAdapter>,
        target: Arc<dyn ChatAdapter>,
    ) -> Result<Self> {
        let paths = RunPaths::new(&prepared.config.output.dir);
        fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
        let cfg = &prepared.config;
        let retry = RetryPolicy {
            max_attempts: cfg.target.max_attempts.max(cfg.optimizer.max_attempts),
            ..RetryPolicy::default()
        };
        let gateway = Gateway::builder(optimizer, target)
            .concurrency(cfg.optimizer.concurrency, cfg.target.concurrency)
            .retry(retry)
            .cache(ResponseCache::open(paths.response_cache())?)
            .log(ResponseLog::open(paths.responses())?)
            .build();
        let eval_cache = EvalCache::open(paths.eval_cache())?;
        Ok(Self {
            prepared,
            paths,
            gateway,
            eval_cache,
        })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn engine(&self) -> Result<Engine<'_>> {
        let cfg = &self.prepared.config;
        let evaluator = Evaluator {
            gateway: &self.gateway,
            instruction: &self.prepared.dataset.instruction,
            sampling: TargetSampling {
                temperature: cfg.target.temperature,
                seed: cfg.target.seed,
                max_output: cfg.target.max_output,
            },
            cache: &self.eval_cache,
            parallelism: cfg.search.parallelism,
        };
        Engine::new(
            &cfg.search,
            &self.gateway,
            evaluator,
            &self.prepared.templates,
            OptimizerSampling {
                temperature: cfg.optimizer.temperature,
                seed: cfg.optimizer.seed,
                max_output: cfg.optimizer.max_output,
            },
            &self.prepared.splits.train,
        )
    }

    pub fn initial_state(&self) -> RunState {
        RunState::initial(self.prepared.initial.clone(), self.prepared.config.search.seed)
    }

    /// Reads a checkpoint written under the same configuration.
    pub fn load_checkpoint(&self, path: &Path) -> Result<RunState> {
        let cp = Checkpoint::load(path)?;
        let digest = self.prepared.config.digest();
        if cp.config_digest != digest {
            return Err(Error::Config(format!(
                "checkpoint {} was written under a different configuration (digest {} vs {}); \
                 resume with the original config or start a new run",
                path.display(),
                &cp.config_digest[..12.min(cp.config_digest.len())],
                &digest[..12]
            )));
        }
        cp.into_state()
    }

    fn persist(&self, state: &RunState) -> Result<()> {
        Checkpoint::from_state(state, &self.prepared.config.digest())?.save(&self.paths.checkpoint())?;
        let mut lines = Vec::new();
        for rec in &state.trajectory.steps {
            serde_json::to_writer(&mut lines, rec)?;
            lines.push(b'\n');
        }
        write_atomic(&self.paths.trajectory(), &lines)?;
        self.gateway.flush()
    }

    /// Runs until `T` steps are complete (or `stop_after` steps, counted
    /// from the start of the run), then selects and reports.
    pub fn run(&self, mut state: RunState, stop_after: Option<u64>) -> Result<RunOutcome> {
        let engine = self.engine()?;
        let total = self.prepared.config.search.iterations;
        self.persist(&state)?;
        while state.step < total {
            if stop_after.is_some_and(|n| state.step >= n) {
                info!(step = state.step, "stopping early");
                return Ok(RunOutcome::Stopped { step: state.step });
            }
            match engine.run_step(&state) {
                Ok(next) => {
                    state = next;
                    self.persist(&state)?;
                }
                Err(e) => {
                    self.persist(&state)?;
                    return Err(e);
                }
            }
        }
        let outcome = self.finish(&engine, &state)?;
        self.gateway.flush()?;
        Ok(RunOutcome::Finished(outcome))
    }

    fn finish(&self, engine: &Engine<'_>, state: &RunState) -> Result<FinalOutcome> {
        let splits = &self.prepared.splits;
        let selection = engine.final_select(&state.beam, &splits.val)?;
        let winner = &state.beam[selection.index];
        let test_accuracy = if splits.test.is_empty() {
            None
        } else {
            Some(engine.evaluator().evaluate_prompt(winner, &splits.test)?.accuracy())
        };
        let outcome = FinalOutcome {
            steps: state.step,
            selected_index: selection.index,
            selected_fingerprint: fingerprint_doc(winner)?,
            validation_accuracies: selection.accuracies,
            test_accuracy,
        };
        write_atomic(&self.paths.final_prompt(), render_prompt(winner)?.as_bytes())?;
        let mut json = serde_json::to_vec_pretty(&outcome)?;
        json.push(b'\n');
        write_atomic(&self.paths.final_json(), &json)?;
        self.gateway.flush()?;
        let report = build_report(&self.paths.dir)?;
        write_atomic(&self.paths.report_text(), report.to_text().as_bytes())?;
        write_atomic(&self.paths.report_json(), report.to_json()?.as_bytes())?;
        Ok(outcome)
    }
}
