//! The fleet, backends and artifacts a config describes.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use fleetroute_core::capability::CapabilityPriorTable;
use fleetroute_core::eval::{pipeline_data, PipelineData, RunMode};
use fleetroute_core::execution::{Backends, HttpChatBackend, Orchestrator, ToolRegistry, DEFAULT_MAX_STEPS};
use fleetroute_core::policy::{Fleet, KeywordClassifier, RoutePolicy};
use fleetroute_core::reward::DEFAULT_BETA;
use fleetroute_core::sim::{calibrated_scenario, load_scenario, SimScenario, SimWorld};
use fleetroute_core::store::{load_pinned, save_pinned};
use fleetroute_core::trace::TraceSink;
use fleetroute_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::LoadedConfig;
use crate::error::GatewayError;

/// Expected completion size used for real backends' cost predictions.
const REAL_COMPLETION_TOKENS: u64 = 1024;

pub enum Engine {
    Sim(Box<SimWorld>),
    Real {
        fleet: Fleet,
        backends: Backends,
        tools: ToolRegistry,
    },
}

pub struct Runtime {
    pub loaded: LoadedConfig,
    pub engine: Engine,
    /// Synthetic training split and evaluation suites (sim mode).
    pub data: Option<PipelineData>,
}

static KEYWORDS: KeywordClassifier = KeywordClassifier;

fn sim_scenario(loaded: &LoadedConfig) -> Result<SimScenario, GatewayError> {
    let sim = loaded.config.sim.clone().unwrap_or_default();
    let mut scn = if sim.calibrated {
        calibrated_scenario(&sim.calibration.clone().unwrap_or_default())?
    } else if let Some(p) = &sim.scenario {
        load_scenario(&loaded.resolve(p))?
    } else {
        SimScenario {
            models: sim.models.clone(),
            tools: vec![],
            lookup_store: Default::default(),
            cost_scale: 1.0,
            paradigms: None,
        }
    };
    if !sim.tools.is_empty() {
        scn.tools = sim.tools.clone();
    }
    if let Some(c) = sim.cost_scale {
        scn.cost_scale = c;
    }
    if sim.paradigms.is_some() {
        scn.paradigms = sim.paradigms.clone();
    }
    Ok(scn)
}

impl Runtime {
    pub fn build(loaded: LoadedConfig) -> Result<Self, GatewayError> {
        match loaded.config.mode {
            RunMode::Sim => {
                let mut world = SimWorld::new(sim_scenario(&loaded)?)?;
                world.preferences = loaded.preferences.clone();
                let data = pipeline_data(&loaded.config.pipeline);
                world.extend_lookup(data.lookup.clone());
                Ok(Runtime {
                    loaded,
                    engine: Engine::Sim(Box::new(world)),
                    data: Some(data),
                })
            }
            RunMode::Real => {
                let mut backends = Backends::new();
                for b in &loaded.config.fleet {
                    backends.insert(Arc::new(HttpChatBackend::new(
                        b.id.clone(),
                        b.endpoint.clone(),
                        b.model_name.clone().unwrap_or_else(|| b.id.clone()),
                        b.auth_env.clone(),
                        Duration::from_secs(b.timeout_secs),
                    )));
                }
                let profiles = loaded.config.fleet.iter().map(|b| b.profile()).collect();
                let fleet = Fleet::new(profiles, vec!["calculator".into()], REAL_COMPLETION_TOKENS);
                Ok(Runtime {
                    loaded,
                    engine: Engine::Real {
                        fleet,
                        backends,
                        tools: ToolRegistry::with_defaults(Default::default()),
                    },
                    data: None,
                })
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        Self::build(crate::config::load_config(path)?)
    }

    pub fn mode(&self) -> RunMode {
        self.loaded.config.mode
    }

    pub fn world(&self) -> Result<&SimWorld, GatewayError> {
        match &self.engine {
            Engine::Sim(w) => Ok(w),
            Engine::Real { .. } => Err(Error::UnsupportedMode("this command needs mode = \"sim\"".into()).into()),
        }
    }

    pub fn data(&self) -> Result<&PipelineData, GatewayError> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::UnsupportedMode("synthetic suites exist only in sim mode".into()).into())
    }

    pub fn fleet(&self) -> &Fleet {
        match &self.engine {
            Engine::Sim(w) => &w.fleet,
            Engine::Real { fleet, .. } => fleet,
        }
    }

    pub fn orchestrator<'a>(
        &'a self,
        priors: &'a CapabilityPriorTable,
        policy: &'a RoutePolicy,
        sink: Option<Arc<dyn TraceSink>>,
    ) -> Orchestrator<'a> {
        let (fleet, backends, tools, sim_mode) = match &self.engine {
            Engine::Sim(w) => (&w.fleet, &w.backends, &w.tools, true),
            Engine::Real { fleet, backends, tools } => (fleet, backends, tools, false),
        };
        Orchestrator {
            fleet,
            backends,
            tools,
            priors,
            policy,
            classifier: &KEYWORDS,
            beta: DEFAULT_BETA,
            max_steps: DEFAULT_MAX_STEPS,
            sim_mode,
            planner: self.loaded.config.planner.clone(),
            sink,
        }
    }

    fn load_artifact<T: DeserializeOwned>(&self, what: &str, path: &Path, command: &str) -> Result<T, GatewayError> {
        match load_pinned(path, &self.loaded.hash) {
            Ok(v) => Ok(v),
            Err(Error::NotFound(_)) => Err(GatewayError::MissingArtifact {
                what: what.into(),
                path: path.display().to_string(),
                hint: format!("run `fleetroute {command} --config <config>` first"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn load_priors(&self) -> Result<CapabilityPriorTable, GatewayError> {
        self.load_artifact("prior store", &self.loaded.prior_store(), "discover")
    }

    pub fn load_policy(&self) -> Result<RoutePolicy, GatewayError> {
        self.load_artifact("policy checkpoint", &self.loaded.policy_checkpoint(), "train")
    }

    pub fn save_priors(&self, priors: &CapabilityPriorTable) -> Result<(), GatewayError> {
        save(&self.loaded.prior_store(), &self.loaded.hash, priors)
    }

    pub fn save_policy(&self, policy: &RoutePolicy) -> Result<(), GatewayError> {
        save(&self.loaded.policy_checkpoint(), &self.loaded.hash, policy)
    }
}

fn save<T: Serialize>(path: &Path, hash: &str, body: &T) -> Result<(), GatewayError> {
    Ok(save_pinned(path, hash, body)?)
}
