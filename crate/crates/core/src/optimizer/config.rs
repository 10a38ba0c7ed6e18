//! Run configuration, read from a TOML file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::dataset::SplitSizes;
use crate::error::{Error, Result};
use crate::gateway::{sha256_hex, RetryPolicy};
use crate::knowledge::PruningLimits;

/// Search hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// B
    pub batch_size: usize,
    /// K
    pub window: usize,
    /// T
    pub iterations: u64,
    /// M
    pub candidates_per_parent: usize,
    /// W
    pub beam_width: usize,
    /// C
    pub max_children: usize,
    /// F
    pub max_balance: f64,
    pub pruning: bool,
    /// Upper bound on the rendered length of a candidate prompt.
    pub prompt_char_budget: usize,
    /// Drives batch sampling.
    pub seed: u64,
    /// Worker threads for evaluation and candidate generation.
    pub parallelism: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            window: 10,
            iterations: 60,
            candidates_per_parent: 4,
            beam_width: 2,
            max_children: 16,
            max_balance: 8.0,
            pruning: false,
            prompt_char_budget: 8000,
            seed: 0,
            parallelism: 4,
        }
    }
}

impl SearchConfig {
    pub fn limits(&self) -> PruningLimits {
        PruningLimits {
            max_children: self.max_children,
            max_balance: self.max_balance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("window", self.window),
            ("candidates_per_parent", self.candidates_per_parent),
            ("beam_width", self.beam_width),
            ("max_children", self.max_children),
            ("prompt_char_budget", self.prompt_char_budget),
            ("parallelism", self.parallelism),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("search.{name} must be at least 1")));
            }
        }
        self.limits().validate()?;
        if self.window < self.batch_size {
            warn!(
                window = self.window,
                batch_size = self.batch_size,
                "window is smaller than the batch; candidates are scored on part of the batch only"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterChoice {
    /// OpenAI-compatible endpoint.
    Http,
    /// Replies from a `{digest, text}` JSONL table.
    Scripted,
    /// Offline target that answers correctly iff the prompt holds the
    /// fact an instance needs.
    FactGated,
    /// Offline optimizer that supplies one missing fact per gradient.
    FactOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub adapter: AdapterChoice,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    pub max_output: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Script table for the scripted adapter.
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Fact sheet for the offline fact adapters.
    #[serde(default)]
    pub facts: Option<PathBuf>,
}

fn default_api_key_env() -> String {
    "KPPO_API_KEY".into()
}

fn default_concurrency() -> usize {
    4
}

fn default_attempts() -> u32 {
    RetryPolicy::default().max_attempts
}

fn default_timeout() -> u64 {
    120
}

impl ModelConfig {
    pub fn target_default() -> Self {
        Self {
            adapter: AdapterChoice::Http,
            base_url: None,
            model: None,
            api_key_env: default_api_key_env(),
            temperature: 0.0,
            seed: Some(0),
            max_output: 512,
            concurrency: 8,
            max_attempts: default_attempts(),
            timeout_secs: default_timeout(),
            script: None,
            facts: None,
        }
    }

    pub fn optimizer_default() -> Self {
        Self {
            temperature: 0.7,
            seed: Some(0),
            max_output: 4096,
            concurrency: 4,
            ..Self::target_default()
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    fn validate(&self, section: &str) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("{section}.temperature must be >= 0")));
        }
        if self.concurrency < 1 || self.max_attempts < 1 || self.max_output < 1 {
            return Err(Error::Config(format!(
                "{section}: concurrency, max_attempts and max_output must be at least 1"
            )));
        }
        match self.adapter {
            AdapterChoice::Http => {
                if self.base_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
                    return Err(Error::Config(format!("{section}.base_url is required for the http adapter")));
                }
                if self.model.as_deref().is_none_or(|m| m.trim().is_empty()) {
                    return Err(Error::Config(format!("{section}.model is required for the http adapter")));
                }
            }
            AdapterChoice::Scripted if self.script.is_none() => {
                return Err(Error::Config(format!("{section}.script is required for the scripted adapter")));
            }
            AdapterChoice::FactGated | AdapterChoice::FactOracle if self.facts.is_none() => {
                return Err(Error::Config(format!("{section}.facts is required for the {:?} adapter", self.adapter)));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Task file (`.json`) or bare instance file (`.jsonl`).
    pub task: PathBuf,
    /// Starting system prompt; an empty prompt when absent.
    #[serde(default)]
    pub initial_prompt: Option<PathBuf>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default = "default_val")]
    pub val: usize,
    #[serde(default = "default_test")]
    pub test: usize,
    #[serde(default = "default_true")]
    pub val_as_test: bool,
}

fn default_train() -> usize {
    SplitSizes::default().train
}
fn default_val() -> usize {
    SplitSizes::default().val
}
fn default_test() -> usize {
    SplitSizes::default().test
}
fn default_true() -> bool {
    true
}

impl DataConfig {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Directory whose `<name>.txt` files override the built-in templates.
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub search: SearchConfig,
    pub data: DataConfig,
    #[serde(default = "ModelConfig::target_default", deserialize_with = "target_section")]
    pub target: ModelConfig,
    #[serde(default = "ModelConfig::optimizer_default", deserialize_with = "optimizer_section")]
    pub optimizer: ModelConfig,
    pub output: OutputConfig,
}

// Keys missing from a model section take that role's defaults.
fn with_defaults<'de, D: serde::Deserializer<'de>>(d: D, base: ModelConfig) -> Result<ModelConfig, D::Error> {
    use serde::de::Error as _;
    let given = toml::Table::deserialize(d)?;
    let mut merged = toml::Table::try_from(&base).map_err(D::Error::custom)?;
    merged.extend(given);
    toml::Value::Table(merged).try_into().map_err(D::Error::custom)
}

fn target_section<'de, D: serde::Deserializer<'de>>(d: D) -> Result<ModelConfig, D::Error> {
    with_defaults(d, ModelConfig::target_default())
}

fn optimizer_section<'de, D: serde::Deserializer<'de>>(d: D) -> Result<ModelConfig, D::Error> {
    with_defaults(d, ModelConfig::optimizer_default())
}

/// The part of a config that determines run behaviour. Paths are left out
/// so that a run directory can be moved without invalidating checkpoints.
#[derive(Serialize)]
struct DigestView<'a> {
    search: &'a SearchConfig,
    split_seed: u64,
    sizes: SplitSizes,
    val_as_test: bool,
    target: ModelView<'a>,
    optimizer: ModelView<'a>,
}

#[derive(Serialize)]
struct ModelView<'a> {
    adapter: AdapterChoice,
    model: Option<&'a str>,
    temperature: f64,
    seed: Option<u64>,
    max_output: u32,
}

impl<'a> From<&'a ModelConfig> for ModelView<'a> {
    fn from(m: &'a ModelConfig) -> Self {
        Self {
            adapter: m.adapter,
            model: m.model.as_deref(),
            temperature: m.temperature,
            seed: m.seed,
            max_output: m.max_output,
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            cfg.resolve_relative(dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.target.validate("target")?;
        self.optimizer.validate("optimizer")?;
        if self.target.adapter == AdapterChoice::FactOracle {
            return Err(Error::Config("the fact-oracle adapter plays the optimizer, not the target".into()));
        }
        if self.optimizer.adapter == AdapterChoice::FactGated {
            return Err(Error::Config("the fact-gated adapter plays the target, not the optimizer".into()));
        }
        Ok(())
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.task);
        fix(&mut self.output.dir);
        for p in [&mut self.data.initial_prompt, &mut self.output.templates] {
            if let Some(p) = p {
                fix(p);
            }
        }
        for m in [&mut self.target, &mut self.optimizer] {
            for p in [&mut m.script, &mut m.facts] {
                if let Some(p) = p {
                    fix(p);
                }
            }
        }
    }

    /// Fingerprint of the behaviour-relevant settings, stored in checkpoints.
    pub fn digest(&self) -> String {
        let view = DigestView {
            search: &self.search,
            split_seed: self.data.split_seed,
            sizes: self.data.sizes(),
            val_as_test: self.data.val_as_test,
            target: (&self.target).into(),
            optimizer: (&self.optimizer).into(),
        };
        let json = serde_json::to_vec(&view).expect("config view serializes");
        sha256_hex(&json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
task = "task.json"

[target]
adapter = "http"
base_url = "http://localhost:8000"
model = "small"
temperature = 0.0
max_output = 512

[optimizer]
adapter = "http"
base_url = "http://localhost:8000"
model = "large"
temperature = 0.7
max_output = 4096

[output]
dir = "runs/a"
"#;

    #[test]
    fn partial_model_sections_take_role_defaults() {
        let text = "[data]\ntask = \"t.json\"\n\
                    [target]\nbase_url = \"http://a\"\nmodel = \"small\"\n\
                    [optimizer]\nbase_url = \"http://b\"\nmodel = \"large\"\n\
                    [output]\ndir = \"r\"\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.optimizer.model.as_deref(), Some("large"));
        assert_eq!((cfg.optimizer.temperature, cfg.optimizer.max_output), (0.7, 4096));
        assert_eq!(cfg.target.base_url.as_deref(), Some("http://a"));
        assert_eq!((cfg.target.temperature, cfg.target.max_output, cfg.target.concurrency), (0.0, 512, 8));
        assert!(RunConfig::from_toml(&text.replace("model = ", "modle = ")).is_err());
    }

    #[test]
    fn search_defaults() {
        let s = SearchConfig::default();
        assert_eq!(
            (s.batch_size, s.window, s.iterations, s.candidates_per_parent, s.beam_width, s.max_children),
            (5, 10, 60, 4, 2, 16)
        );
        assert_eq!(s.max_balance, 8.0);
        assert_eq!(s.prompt_char_budget, 8000);
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.search, SearchConfig::default());
        assert_eq!(cfg.target.api_key_env, "KPPO_API_KEY");
        assert_eq!(cfg.data.sizes(), SplitSizes::default());
    }

    #[test]
    fn zero_counts_rejected() {
        let text = format!("[search]\nbeam_width = 0\n{MINIMAL}");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("[search]\nbeam = 2\n{MINIMAL}");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn http_needs_endpoint() {
        let text = MINIMAL.replacen("base_url = \"http://localhost:8000\"\n", "", 1);
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn digest_ignores_paths_but_not_search() {
        let a = RunConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.search.window = 12;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn toml_round_trip() {
        let a = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml(&a.to_toml().unwrap()).unwrap(), a);
    }
}
