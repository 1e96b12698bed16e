//! Gateway configuration: parsing, validation and the config hash.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use fleetroute_core::domain::{Domain, Paradigm, LambdaOverride, ModelProfile, PreferenceMode, PreferenceTable, ProfileKind};
use fleetroute_core::eval::{PipelineConfig, RunMode};
use fleetroute_core::rng::sha256_hex;
use fleetroute_core::sim::{CalibrationParams, SimModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::GatewayError;

/// One real backend: its profile plus how to reach it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendEntry {
    pub id: String,
    pub price_prompt: f64,
    pub price_completion: f64,
    pub ttft_ms: f64,
    pub tokens_per_second: f64,
    pub max_context: u64,
    #[serde(default)]
    pub preferred_domains: Vec<Domain>,
    pub endpoint: String,
    /// Model name sent upstream; defaults to `id`.
    #[serde(default)]
    pub model_name: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl BackendEntry {
    pub fn profile(&self) -> ModelProfile {
        ModelProfile {
            id: self.id.clone(),
            kind: ProfileKind::Model,
            price_prompt: self.price_prompt,
            price_completion: self.price_completion,
            ttft_ms: self.ttft_ms,
            tokens_per_second: self.tokens_per_second,
            max_context: self.max_context,
            preferred_domains: self.preferred_domains.clone(),
        }
    }
}

/// Where the simulated fleet comes from. Exactly one source is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Calibrate against the bundled reference table.
    #[serde(default)]
    pub calibrated: bool,
    #[serde(default)]
    pub calibration: Option<CalibrationParams>,
    /// A scenario file (JSON or TOML).
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    /// Inline models.
    #[serde(default)]
    pub models: Vec<SimModelConfig>,
    #[serde(default)]
    pub tools: Vec<String>,
    #[serde(default)]
    pub cost_scale: Option<f64>,
    /// Restricts routing to these paradigms.
    #[serde(default)]
    pub paradigms: Option<Vec<Paradigm>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default)]
    pub fleet: Vec<BackendEntry>,
    #[serde(default)]
    pub sim: Option<SimSection>,
    #[serde(default = "default_preference")]
    pub default_preference: PreferenceMode,
    #[serde(default)]
    pub preferences: BTreeMap<PreferenceMode, LambdaOverride>,
    pub trace_dir: PathBuf,
    pub prior_store: PathBuf,
    pub policy_checkpoint: PathBuf,
    #[serde(default = "default_report_dir")]
    pub report_dir: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Model that writes plans for tasks without a fixture decomposition.
    #[serde(default)]
    pub planner: Option<String>,
    #[serde(default = "default_eval_seeds")]
    pub eval_seeds: Vec<u64>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn default_mode() -> RunMode {
    RunMode::Sim
}

fn default_preference() -> PreferenceMode {
    PreferenceMode::Auto
}

fn default_report_dir() -> PathBuf {
    PathBuf::from("reports")
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_eval_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

/// A validated config with its paths resolved against the file location.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: GatewayConfig,
    pub base_dir: PathBuf,
    pub hash: String,
    pub preferences: PreferenceTable,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn trace_dir(&self) -> PathBuf {
        self.resolve(&self.config.trace_dir)
    }

    pub fn prior_store(&self) -> PathBuf {
        self.resolve(&self.config.prior_store)
    }

    pub fn policy_checkpoint(&self) -> PathBuf {
        self.resolve(&self.config.policy_checkpoint)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.resolve(&self.config.report_dir)
    }
}

/// Hash of the canonical JSON form of the config as written.
pub fn config_hash(config: &GatewayConfig) -> String {
    let canonical = serde_json::to_value(config).expect("config serializes");
    sha256_hex(canonical.to_string().as_bytes())
}

fn check_writable(field: &str, path: &Path) -> Result<(), GatewayError> {
    let dir = if path.extension().is_some() {
        path.parent().unwrap_or(Path::new("."))
    } else {
        path
    };
    std::fs::create_dir_all(dir).map_err(|e| GatewayError::Config(format!("{field}: cannot create {}: {e}", dir.display())))?;
    let meta = std::fs::metadata(dir).map_err(|e| GatewayError::Config(format!("{field}: {e}")))?;
    if meta.permissions().readonly() {
        return Err(GatewayError::Config(format!("{field}: {} is not writable", dir.display())));
    }
    Ok(())
}

impl GatewayConfig {
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))
    }

    /// Checks everything except filesystem state.
    pub fn validate(&self) -> Result<PreferenceTable, GatewayError> {
        let mut ids = BTreeSet::new();
        let sim_ids = self.sim.iter().flat_map(|s| s.models.iter().map(|m| &m.profile.id));
        for id in self.fleet.iter().map(|b| &b.id).chain(sim_ids) {
            if !ids.insert(id.clone()) {
                return Err(GatewayError::Config(format!("fleet: duplicate model id `{id}`")));
            }
        }
        for b in &self.fleet {
            b.profile().validate().map_err(|e| GatewayError::Config(format!("fleet.{}: {e}", b.id)))?;
            if b.endpoint.is_empty() {
                return Err(GatewayError::Config(format!("fleet.{}.endpoint is empty", b.id)));
            }
        }
        match self.mode {
            RunMode::Sim => {
                let sim = self
                    .sim
                    .as_ref()
                    .ok_or_else(|| GatewayError::Config("mode = \"sim\" requires a [sim] section".into()))?;
                let sources = sim.calibrated as usize + sim.scenario.is_some() as usize + (!sim.models.is_empty()) as usize;
                if sources != 1 {
                    return Err(GatewayError::Config(
                        "sim: set exactly one of `calibrated`, `scenario` or `models`".into(),
                    ));
                }
                if let Some(c) = sim.cost_scale {
                    if !(c > 0.0) {
                        return Err(GatewayError::Config("sim.cost_scale must be > 0".into()));
                    }
                }
            }
            RunMode::Real => {
                if self.fleet.is_empty() {
                    return Err(GatewayError::Config("mode = \"real\" requires at least one [[fleet]] entry".into()));
                }
            }
        }
        if self.eval_seeds.is_empty() {
            return Err(GatewayError::Config("eval_seeds must be non-empty".into()));
        }
        self.pipeline.policy.validate().map_err(|e| GatewayError::Config(format!("pipeline.policy: {e}")))?;
        let mut prefs = PreferenceTable::default();
        for (mode, o) in &self.preferences {
            prefs.apply_override(*mode, *o);
        }
        prefs.validate().map_err(|e| GatewayError::Config(format!("preferences: {e}")))?;
        Ok(prefs)
    }
}

/// Reads, validates and hashes a config file.
pub fn load_config(path: &Path) -> Result<LoadedConfig, GatewayError> {
    let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
    let config = GatewayConfig::parse(&text)?;
    let preferences = config.validate()?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = LoadedConfig {
        hash: config_hash(&config),
        config,
        base_dir,
        preferences,
    };
    check_writable("trace_dir", &loaded.trace_dir())?;
    check_writable("prior_store", &loaded.prior_store())?;
    check_writable("policy_checkpoint", &loaded.policy_checkpoint())?;
    check_writable("report_dir", &loaded.report_dir())?;
    Ok(loaded)
}
