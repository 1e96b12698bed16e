//! Deterministic simulated fleet: ground-truth capability surfaces,
//! calibrated pricing and latency, an episode runner, and an analytic
//! expectation model of the same semantics used as an oracle.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{call_cost, call_latency, estimate_tokens, Usage};
use crate::capability::{agent_profile, evaluate_fleet, CapabilityPriorTable, PerformanceMatrix};
use crate::domain::{Difficulty, Domain, ModelProfile, Paradigm, Preference, PreferenceMode, PreferenceTable, ProfileKind, SubtaskSpec, TaskSpec, ValidatorSpec};
use crate::error::{Error, Result};
use crate::execution::{
    fallback_decomposition, render_action, run_single_agent, run_single_model, ActionBlock, BackendClient,
    BackendError, Backends, CallKind, ComposeMode, CompletionRequest, CompletionResponse, Episode, EpisodeOutcome,
    EpisodeRequest, Orchestrator, Plan, SimHints, ToolRegistry, DEFAULT_MAX_STEPS,
};
use crate::par;
use crate::policy::{policy_update, stage_assignment, EpisodeSample, Fleet, KeywordClassifier, PolicyConfig, RouteMode, RoutePolicy};
use crate::reward::{parse_number, TaskOutcome, DEFAULT_BETA};
use crate::rng::{derive_seed, keyed_rng};
use crate::trace::{TraceBuilder, TraceMeta};

/// Completion-size model of a simulated backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenModel {
    pub completion_mean: u64,
    /// Relative half-width of the uniform spread around the mean.
    pub completion_spread: f64,
    /// Completion size of a tool-call step relative to an answer.
    pub action_fraction: f64,
}

impl Default for TokenModel {
    fn default() -> Self {
        TokenModel {
            completion_mean: 6000,
            completion_spread: 0.05,
            action_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimModelConfig {
    pub profile: ModelProfile,
    /// Success probability per difficulty level 1..=5, by domain. Domains
    /// absent here have probability 0.
    pub truth_surface: BTreeMap<Domain, [f64; 5]>,
    #[serde(default)]
    pub token_model: TokenModel,
    #[serde(default)]
    pub tool_competence: BTreeMap<String, f64>,
}

impl SimModelConfig {
    pub fn truth(&self, domain: &Domain, level: Difficulty) -> f64 {
        self.truth_surface
            .get(domain)
            .map_or(0.0, |row| row[level.level() as usize - 1])
    }

    pub fn competence(&self, tool: &str) -> f64 {
        self.tool_competence.get(tool).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        let probs = self
            .truth_surface
            .values()
            .flatten()
            .chain(self.tool_competence.values());
        for p in probs {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Config(format!(
                    "sim model `{}`: probability {p} outside [0,1]",
                    self.profile.id
                )));
            }
        }
        let t = &self.token_model;
        if !(0.0..1.0).contains(&t.completion_spread) || !(t.action_fraction > 0.0) {
            return Err(Error::Config(format!("sim model `{}`: bad token model", self.profile.id)));
        }
        Ok(())
    }

    fn completion_tokens(&self, fraction: f64, rng: &mut impl Rng) -> u64 {
        let t = &self.token_model;
        let u: f64 = rng.random_range(-1.0..=1.0);
        (t.completion_mean as f64 * fraction * (1.0 + t.completion_spread * u)).round().max(0.0) as u64
    }

    fn mean_completion(&self, fraction: f64) -> u64 {
        (self.token_model.completion_mean as f64 * fraction).round() as u64
    }
}

fn wrong_answer(hints: &SimHints, rng: &mut impl Rng) -> String {
    if hints.numeric {
        if let Some(v) = hints.expected.as_deref().and_then(parse_number) {
            // large answers need a proportional miss to clear the validator's tolerance
            let off = rng.random_range(1..=9) as f64 * v.abs().div_euclid(100.0).max(1.0);
            return format!("Answer: {}", v + off);
        }
    }
    format!("Answer: unsure-{:08x}", rng.random::<u32>())
}

fn malformed_action(tool: &str) -> String {
    format!("```action\ntool {tool}\n```")
}

/// One simulated completion. Outcomes are drawn from a generator keyed by
/// (seed, model, task, call index), never by call order.
pub fn sim_call(config: &SimModelConfig, request: &CompletionRequest) -> CompletionResponse {
    let meta = &request.meta;
    let mut rng = keyed_rng(&[
        &meta.seed.to_string(),
        &config.profile.id,
        &meta.task_id,
        &meta.call_index.to_string(),
    ]);
    let success: f64 = rng.random();
    let prompt: String = request.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
    let last_user = request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == "user")
        .map(|m| m.content.clone())
        .unwrap_or_default();
    let mut fraction = 1.0;
    let text = match (&meta.hints, meta.kind) {
        (_, CallKind::Plan) => format!("1. {last_user}"),
        (_, CallKind::Mutate) => last_user,
        (None, _) => "Answer: simulated response".to_string(),
        (Some(h), CallKind::Aggregate) => match (h.subtasks_ok, &h.expected) {
            (Some(true), Some(e)) => format!("Answer: {e}"),
            _ => wrong_answer(h, &mut rng),
        },
        (Some(h), kind) => {
            let gated_tool = h
                .tool
                .as_ref()
                .filter(|t| kind == CallKind::AgentStep && h.tool_dependency && h.tools_offered.contains(t));
            if let (Some(obs), CallKind::AgentStep) = (&h.observation, kind) {
                format!("Answer: {obs}")
            } else if let Some(tool) = gated_tool {
                fraction = config.token_model.action_fraction;
                if success < config.competence(tool) {
                    render_action(&ActionBlock {
                        tool: tool.clone(),
                        args: h.tool_args.clone(),
                    })
                } else {
                    malformed_action(tool)
                }
            } else {
                let (Some(d), Some(l)) = (&h.domain, h.difficulty) else {
                    return respond(config, &prompt, "Answer: simulated response".into(), 1.0, &mut rng);
                };
                if success < config.truth(d, l) {
                    match &h.expected {
                        Some(e) => format!("Answer: {e}"),
                        None => "Answer: done".to_string(),
                    }
                } else if h.expected.is_none() {
                    String::new()
                } else {
                    wrong_answer(h, &mut rng)
                }
            }
        }
    };
    respond(config, &prompt, text, fraction, &mut rng)
}

fn respond(config: &SimModelConfig, prompt: &str, text: String, fraction: f64, rng: &mut impl Rng) -> CompletionResponse {
    let usage = Usage::new(estimate_tokens(prompt), config.completion_tokens(fraction, rng));
    CompletionResponse {
        text,
        usage: Some(usage),
        elapsed_ms: Some(call_latency(usage, &config.profile) * 1000.0),
    }
}

/// A simulated backend. Never fails, never retries.
pub struct SimBackend {
    pub config: SimModelConfig,
}

impl BackendClient for SimBackend {
    fn model_id(&self) -> &str {
        &self.config.profile.id
    }

    fn complete(&self, request: &CompletionRequest) -> std::result::Result<CompletionResponse, BackendError> {
        Ok(sim_call(&self.config, request))
    }
}

/// A scenario file: the simulated fleet plus its environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub models: Vec<SimModelConfig>,
    #[serde(default)]
    pub tools: Vec<String>,
    #[serde(default)]
    pub lookup_store: BTreeMap<String, String>,
    /// Dollars per cost-index unit per task.
    pub cost_scale: f64,
    /// Restricts routing to these paradigms; all are allowed when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paradigms: Option<Vec<Paradigm>>,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("scenario has no models".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for m in &self.models {
            m.validate()?;
            if !ids.insert(m.profile.id.as_str()) {
                return Err(Error::Config(format!("duplicate model id `{}`", m.profile.id)));
            }
        }
        if !(self.cost_scale > 0.0) {
            return Err(Error::Config("cost_scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn model(&self, id: &str) -> Result<&SimModelConfig> {
        self.models
            .iter()
            .find(|m| m.profile.id == id)
            .ok_or_else(|| Error::lookup("model", id))
    }

    pub fn fleet(&self) -> Fleet {
        let completion = self.models.first().map_or(0, |m| m.token_model.completion_mean);
        let mut fleet = Fleet::new(self.models.iter().map(|m| m.profile.clone()).collect(), self.tools.clone(), completion);
        if let Some(p) = &self.paradigms {
            fleet.enabled = Paradigm::ALL.map(|x| p.contains(&x));
        }
        fleet
    }
}

/// One row of the reference score/cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub system: String,
    #[serde(default)]
    pub model_id: Option<String>,
    pub kind: ReferenceKind,
    #[serde(default)]
    pub preference: Option<PreferenceMode>,
    pub scores: Vec<Option<f64>>,
    pub average: Option<f64>,
    pub cost: f64,
    #[serde(default)]
    pub preferred_domains: Vec<Domain>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    SingleModel,
    Router,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSuite {
    pub name: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub suites: Vec<ReferenceSuite>,
    pub rows: Vec<ReferenceRow>,
}

impl ReferenceTable {
    /// The checked-in reference values.
    pub fn bundled() -> Self {
        serde_json::from_str(include_str!("../data/reference_table.json")).expect("bundled reference table parses")
    }

    pub fn row(&self, system: &str) -> Option<&ReferenceRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    pub fn router_row(&self, mode: PreferenceMode) -> Option<&ReferenceRow> {
        self.rows
            .iter()
            .find(|r| r.kind == ReferenceKind::Router && r.preference == Some(mode))
    }

    pub fn single_models(&self) -> impl Iterator<Item = &ReferenceRow> {
        self.rows.iter().filter(|r| r.kind == ReferenceKind::SingleModel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyParams {
    pub ttft_ms: f64,
    pub tokens_per_second: f64,
}

/// Knobs of the calibration that the reference table does not fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationParams {
    pub cost_scale: f64,
    pub prompt_ref: u64,
    pub completion_ref: u64,
    /// Completion price as a multiple of prompt price.
    pub completion_price_ratio: f64,
    pub latency: BTreeMap<String, LatencyParams>,
    pub default_latency: LatencyParams,
    pub tool_competence: BTreeMap<String, BTreeMap<String, f64>>,
    pub default_tool_competence: BTreeMap<String, f64>,
    pub token_model: TokenModel,
    /// Spread each suite score across levels instead of uniformly.
    pub graded: bool,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        let lat = |ttft_ms: f64, tokens_per_second: f64| LatencyParams {
            ttft_ms,
            tokens_per_second,
        };
        let latency = BTreeMap::from([
            ("deepseek-r1".to_string(), lat(1500.0, 20.0)),
            ("deepseek-v3".to_string(), lat(800.0, 40.0)),
            ("qwen3-32b".to_string(), lat(800.0, 25.0)),
            ("qwen3-235b-a22b".to_string(), lat(1200.0, 25.0)),
            ("jt-math-8b".to_string(), lat(200.0, 150.0)),
            ("jt-code-8b".to_string(), lat(200.0, 150.0)),
        ]);
        let comp = |c: f64, l: f64| BTreeMap::from([("calculator".to_string(), c), ("lookup".to_string(), l)]);
        CalibrationParams {
            cost_scale: 0.3,
            prompt_ref: 400,
            completion_ref: 6000,
            completion_price_ratio: 4.0,
            latency,
            default_latency: lat(1000.0, 30.0),
            tool_competence: BTreeMap::from([("jt-code-8b".to_string(), comp(0.6, 0.6))]),
            default_tool_competence: comp(0.85, 0.8),
            token_model: TokenModel::default(),
            graded: false,
        }
    }
}

impl CalibrationParams {
    /// Dollar cost of the reference workload for one task.
    pub fn reference_workload(&self) -> Usage {
        Usage::new(self.prompt_ref, self.completion_ref)
    }
}

/// Builds one simulated model per single-model reference row: suite scores
/// become the truth surface, and prices are scaled so the reference
/// workload costs `cost * cost_scale` dollars.
pub fn calibrate_fleet(reference: &ReferenceTable, params: &CalibrationParams) -> Result<Vec<SimModelConfig>> {
    if !(params.cost_scale > 0.0) || !(params.completion_price_ratio >= 0.0) {
        return Err(Error::Calibration("cost_scale and price ratio must be positive".into()));
    }
    let denom = params.prompt_ref as f64 + params.completion_price_ratio * params.completion_ref as f64;
    if !(denom > 0.0) {
        return Err(Error::Calibration("reference workload is empty".into()));
    }
    let mut out = Vec::new();
    for row in reference.single_models() {
        if row.cost < 0.0 || !row.cost.is_finite() {
            return Err(Error::Calibration(format!("`{}` has negative cost {}", row.system, row.cost)));
        }
        if row.scores.len() != reference.suites.len() {
            return Err(Error::Calibration(format!("`{}` has {} scores", row.system, row.scores.len())));
        }
        let id = row
            .model_id
            .clone()
            .ok_or_else(|| Error::Calibration(format!("`{}` has no model id", row.system)))?;
        let mut surface = BTreeMap::new();
        for (suite, score) in reference.suites.iter().zip(&row.scores) {
            let s = score.unwrap_or(0.0);
            if !(0.0..=100.0).contains(&s) {
                return Err(Error::Calibration(format!("`{}` score {s} outside [0,100]", row.system)));
            }
            let p = s / 100.0;
            let levels = if params.graded {
                std::array::from_fn(|i| (p * (1.0 + 0.1 * (2.0 - i as f64))).clamp(0.0, 1.0))
            } else {
                [p; 5]
            };
            surface.insert(suite.domain.clone(), levels);
        }
        let price_prompt = row.cost * params.cost_scale * 1e6 / denom;
        let lat = params.latency.get(&id).copied().unwrap_or(params.default_latency);
        out.push(SimModelConfig {
            profile: ModelProfile {
                id: id.clone(),
                kind: ProfileKind::Model,
                price_prompt,
                price_completion: price_prompt * params.completion_price_ratio,
                ttft_ms: lat.ttft_ms,
                tokens_per_second: lat.tokens_per_second,
                max_context: 128_000,
                preferred_domains: row.preferred_domains.clone(),
            },
            truth_surface: surface,
            token_model: params.token_model.clone(),
            tool_competence: params
                .tool_competence
                .get(&id)
                .cloned()
                .unwrap_or_else(|| params.default_tool_competence.clone()),
        });
    }
    if out.is_empty() {
        return Err(Error::Calibration("reference has no single-model rows".into()));
    }
    Ok(out)
}

/// Cost index of the reference workload under `profile`.
pub fn reference_cost_index(profile: &ModelProfile, params: &CalibrationParams) -> f64 {
    call_cost(params.reference_workload(), profile) / params.cost_scale
}

/// The calibrated scenario with the default tools.
pub fn calibrated_scenario(params: &CalibrationParams) -> Result<SimScenario> {
    Ok(SimScenario {
        models: calibrate_fleet(&ReferenceTable::bundled(), params)?,
        tools: vec!["calculator".into(), "lookup".into()],
        lookup_store: BTreeMap::new(),
        cost_scale: params.cost_scale,
        paradigms: None,
    })
}

/// Spec-level summary of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub paradigm: Paradigm,
    pub reward: crate::reward::RewardBreakdown,
    pub trace_id: String,
    pub seed: u64,
}

impl From<&EpisodeOutcome> for EpisodeResult {
    fn from(o: &EpisodeOutcome) -> Self {
        EpisodeResult {
            task_id: o.task_id.clone(),
            paradigm: o.paradigm(),
            reward: o.reward.clone(),
            trace_id: o.trace.trace_id.clone(),
            seed: o.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub preferences: Vec<PreferenceMode>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            preferences: PreferenceMode::ALL.to_vec(),
        }
    }
}

/// A scenario wired up for execution.
pub struct SimWorld {
    pub scenario: SimScenario,
    pub fleet: Fleet,
    pub backends: Backends,
    pub tools: ToolRegistry,
    pub preferences: PreferenceTable,
    pub beta: f64,
}

static KEYWORDS: KeywordClassifier = KeywordClassifier;

pub fn trace_id(prefix: &str, task_id: &str, seed: u64) -> String {
    format!("{prefix}-{task_id}-{seed}")
}

impl SimWorld {
    pub fn new(scenario: SimScenario) -> Result<Self> {
        scenario.validate()?;
        let mut backends = Backends::new();
        for m in &scenario.models {
            backends.insert(Arc::new(SimBackend { config: m.clone() }));
        }
        let tools = ToolRegistry::with_defaults(scenario.lookup_store.clone());
        Ok(SimWorld {
            fleet: scenario.fleet(),
            scenario,
            backends,
            tools,
            preferences: PreferenceTable::default(),
            beta: DEFAULT_BETA,
        })
    }

    /// Adds lookup-tool entries, e.g. those a synthetic suite needs.
    pub fn extend_lookup(&mut self, entries: BTreeMap<String, String>) {
        self.scenario.lookup_store.extend(entries);
        self.tools = ToolRegistry::with_defaults(self.scenario.lookup_store.clone());
    }

    pub fn preference(&self, mode: PreferenceMode) -> Preference {
        self.preferences.preference(mode)
    }

    pub fn orchestrator<'a>(&'a self, priors: &'a CapabilityPriorTable, policy: &'a RoutePolicy) -> Orchestrator<'a> {
        self.orchestrator_on(&self.fleet, priors, policy)
    }

    pub fn orchestrator_on<'a>(&'a self, fleet: &'a Fleet, priors: &'a CapabilityPriorTable, policy: &'a RoutePolicy) -> Orchestrator<'a> {
        Orchestrator {
            fleet,
            backends: &self.backends,
            tools: &self.tools,
            priors,
            policy,
            classifier: &KEYWORDS,
            beta: self.beta,
            max_steps: DEFAULT_MAX_STEPS,
            sim_mode: true,
            planner: None,
            sink: None,
        }
    }

    /// classify, route, compose, execute, validate, reward.
    pub fn run_episode(
        &self,
        task: &TaskSpec,
        policy: &RoutePolicy,
        priors: &CapabilityPriorTable,
        preference: &Preference,
        seed: u64,
        route: RouteMode,
        compose: ComposeMode,
    ) -> Result<EpisodeOutcome> {
        if self.fleet.models.is_empty() {
            return Err(Error::Precondition("fleet is empty".into()));
        }
        self.orchestrator(priors, policy).run(&EpisodeRequest {
            task: task.clone(),
            preference: preference.clone(),
            seed,
            route,
            compose,
            force_paradigm: None,
            trace_id: trace_id(preference.mode.as_str(), &task.id, seed),
        })
    }

    /// Agents profiled by discovery: every model, plus every model bound
    /// to each scenario tool.
    pub fn discovery_agents(&self) -> Vec<ModelProfile> {
        let mut out: Vec<ModelProfile> = self.fleet.models.clone();
        for m in &self.fleet.models {
            for t in &self.scenario.tools {
                out.push(agent_profile(m, t));
            }
        }
        out
    }

    /// Runs one trial of an agent on a task and validates the answer.
    pub fn trial(&self, agent: &ModelProfile, task: &TaskSpec, seed: u64) -> Result<TaskOutcome> {
        let trace = TraceBuilder::new(
            trace_id("trial", &task.id, seed),
            TraceMeta {
                task_id: task.id.clone(),
                seed,
                mode: "sim".into(),
                ..Default::default()
            },
        );
        let mut ep = Episode::new(task, seed, &self.fleet, &self.backends, trace, true);
        match agent.kind {
            ProfileKind::Agent => {
                let (model, tool) = agent
                    .id
                    .split_once('+')
                    .ok_or_else(|| Error::lookup("agent", &agent.id))?;
                run_single_agent(&mut ep, model, &self.tools, &[tool.to_string()], DEFAULT_MAX_STEPS, 0)
            }
            _ => Ok(run_single_model(&mut ep, &agent.id, 0)),
        }
    }

    /// Profiles `agents` on `tasks` and folds the matrix into fresh priors.
    pub fn discover(
        &self,
        agents: &[ModelProfile],
        tasks: &[TaskSpec],
        trials: u32,
        seed: u64,
    ) -> Result<(PerformanceMatrix, CapabilityPriorTable)> {
        let matrix = evaluate_fleet(
            agents,
            tasks,
            |agent, task, trial| self.trial(agent, task, derive_seed(&[&seed.to_string(), "trial", &trial.to_string()])),
            trials,
        )?;
        let mut priors = CapabilityPriorTable::new();
        priors.absorb_matrix(&matrix, tasks)?;
        Ok((matrix, priors))
    }

    /// REINFORCE training over `tasks` under each preference. Episodes of a
    /// batch run in parallel against the same policy snapshot and are
    /// applied in task order.
    pub fn train(
        &self,
        priors: &CapabilityPriorTable,
        tasks: &[TaskSpec],
        policy_config: PolicyConfig,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<RoutePolicy> {
        self.train_with(priors, tasks, policy_config, config, seed, |_, _| Ok(()))
    }

    /// As [`SimWorld::train`], calling `on_epoch` with each finished epoch.
    pub fn train_with<F>(
        &self,
        priors: &CapabilityPriorTable,
        tasks: &[TaskSpec],
        policy_config: PolicyConfig,
        config: &TrainConfig,
        seed: u64,
        mut on_epoch: F,
    ) -> Result<RoutePolicy>
    where
        F: FnMut(u32, &RoutePolicy) -> Result<()>,
    {
        policy_config.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        let mut policy = RoutePolicy::new(policy_config);
        let mut jobs: Vec<(&TaskSpec, PreferenceMode)> = tasks
            .iter()
            .flat_map(|t| config.preferences.iter().map(move |p| (t, *p)))
            .collect();
        for epoch in 0..config.epochs {
            let mut rng = keyed_rng(&[&seed.to_string(), "shuffle", &epoch.to_string()]);
            jobs.shuffle(&mut rng);
            for batch in jobs.chunks(config.batch_size) {
                let snapshot = &policy;
                let results = par::map(batch, |(task, mode)| {
                    let ep_seed = derive_seed(&[&seed.to_string(), "train", &epoch.to_string(), &task.id, mode.as_str()]);
                    self.run_episode(
                        task,
                        snapshot,
                        priors,
                        &self.preference(*mode),
                        ep_seed,
                        RouteMode::Sampled { seed: ep_seed },
                        ComposeMode::Policy,
                    )
                });
                let mut samples = Vec::with_capacity(batch.len());
                for r in results {
                    let o = r?;
                    if let Some(plan) = &o.plan {
                        samples.push(EpisodeSample {
                            bucket: plan.bucket.clone(),
                            paradigm: plan.paradigm,
                            reward: o.reward.total,
                        });
                    }
                }
                if !samples.is_empty() {
                    policy = policy_update(&policy, &samples)?;
                }
            }
            on_epoch(epoch + 1, &policy)?;
        }
        Ok(policy)
    }
}

/// A concrete assignment whose expected reward can be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "paradigm", rename_all = "snake_case")]
pub enum Assignment {
    SingleModel { model: String },
    SingleAgent { model: String, tool: String },
    /// One model per subtask, aligned with the decomposition order.
    MultiAgent { steps: Vec<String>, aggregator: String },
}

impl Assignment {
    pub fn paradigm(&self) -> Paradigm {
        match self {
            Assignment::SingleModel { .. } => Paradigm::SingleModel,
            Assignment::SingleAgent { .. } => Paradigm::SingleAgent,
            Assignment::MultiAgent { .. } => Paradigm::MultiAgent,
        }
    }

    /// Reads the assignment off an executed or dry-run plan.
    pub fn from_plan(plan: &Plan, task: &TaskSpec) -> Result<Self> {
        let first = plan
            .composition
            .first()
            .ok_or_else(|| Error::Contract("plan has no composition".into()))?;
        Ok(match plan.paradigm {
            Paradigm::SingleModel => Assignment::SingleModel {
                model: first.model_id.clone(),
            },
            Paradigm::SingleAgent => Assignment::SingleAgent {
                model: first.model_id.clone(),
                tool: first.tool.clone().unwrap_or_default(),
            },
            Paradigm::MultiAgent => {
                let wf = plan
                    .workflow
                    .as_ref()
                    .ok_or_else(|| Error::Contract("multi-agent plan without workflow".into()))?;
                let steps = decomposition(task)
                    .iter()
                    .map(|s| {
                        wf.steps
                            .iter()
                            .find(|w| w.subtask_index == s.index)
                            .map(|w| w.action.model_id.clone())
                            .ok_or_else(|| Error::Contract(format!("no step for subtask {}", s.index)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Assignment::MultiAgent {
                    steps,
                    aggregator: wf.aggregator.model_id.clone(),
                }
            }
        })
    }
}

/// Expected task reward, cost and latency of an assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Expected {
    pub success: f64,
    pub r_task: f64,
    pub cost: f64,
    pub latency: f64,
}

impl Expected {
    pub fn total(&self, preference: &Preference) -> f64 {
        self.r_task - preference.lambda_c * self.cost - preference.lambda_l * self.latency
    }
}

/// The decomposition the simulator uses for `task`.
pub fn decomposition(task: &TaskSpec) -> Vec<SubtaskSpec> {
    match &task.subtasks {
        Some(s) if !s.is_empty() => s.clone(),
        _ => fallback_decomposition(task),
    }
}

const EXPECTED_PROMPT_OVERHEAD: u64 = 64;

fn mean_call(m: &SimModelConfig, text: &str, fraction: f64) -> (f64, f64) {
    let usage = Usage::new(estimate_tokens(text) + EXPECTED_PROMPT_OVERHEAD, m.mean_completion(fraction));
    (call_cost(usage, &m.profile), call_latency(usage, &m.profile))
}

/// Closed-form expectation of the simulator's semantics. Prompt sizes are
/// approximated from the task text, so costs match runs to within the
/// prompt share of the bill.
pub fn expected(scenario: &SimScenario, task: &TaskSpec, assignment: &Assignment, beta: f64) -> Result<Expected> {
    let (d, l) = (&task.domain, task.difficulty);
    Ok(match assignment {
        Assignment::SingleModel { model } => {
            let m = scenario.model(model)?;
            let (cost, latency) = mean_call(m, &task.text, 1.0);
            let p = m.truth(d, l);
            Expected {
                success: p,
                r_task: p,
                cost,
                latency,
            }
        }
        Assignment::SingleAgent { model, tool } => {
            let m = scenario.model(model)?;
            let gated = task.tool_dependency && task.metadata.get("tool") == Some(tool);
            if !gated {
                return expected(scenario, task, &Assignment::SingleModel { model: model.clone() }, beta);
            }
            let tc = m.competence(tool);
            let p = 1.0 - (1.0 - tc) * (1.0 - tc);
            let action_calls = 1.0 + (1.0 - tc);
            let (ca, la) = mean_call(m, &task.text, m.token_model.action_fraction);
            let (cf, lf) = mean_call(m, &task.text, 1.0);
            Expected {
                success: p,
                r_task: p,
                cost: ca * action_calls + cf * p,
                latency: la * action_calls + lf * p,
            }
        }
        Assignment::MultiAgent { steps, aggregator } => {
            let subs = decomposition(task);
            if steps.len() != subs.len() {
                return Err(Error::Contract(format!("{} models for {} subtasks", steps.len(), subs.len())));
            }
            let stages = stage_assignment(&subs)?;
            let mut all_ok = 1.0;
            let mut sum = 0.0;
            let mut cost = 0.0;
            let mut latency = 0.0;
            let mut per = Vec::with_capacity(subs.len());
            for (s, model) in subs.iter().zip(steps) {
                let m = scenario.model(model)?;
                let p = m.truth(s.domain.as_ref().unwrap_or(d), s.difficulty.unwrap_or(l));
                let (c, lat) = mean_call(m, &s.description, 1.0);
                all_ok *= p;
                sum += p;
                cost += c;
                per.push(lat);
            }
            for stage in &stages {
                latency += stage.iter().map(|&p| per[p]).fold(0.0, f64::max);
            }
            let agg = scenario.model(aggregator)?;
            let (c, lat) = mean_call(agg, &task.text, 1.0);
            Expected {
                success: all_ok,
                r_task: all_ok + beta * sum,
                cost: cost + c,
                latency: latency + lat,
            }
        }
    })
}

fn multi_assignments(models: &[String], k: usize) -> Vec<Assignment> {
    let mut out = Vec::new();
    let total = models.len().pow(k as u32 + 1);
    for mut code in 0..total {
        let mut picks = Vec::with_capacity(k + 1);
        for _ in 0..=k {
            picks.push(models[code % models.len()].clone());
            code /= models.len();
        }
        let aggregator = picks.pop().expect("k + 1 picks");
        out.push(Assignment::MultiAgent { steps: picks, aggregator });
    }
    out
}

/// Every assignment available for `task`, grouped by paradigm.
pub fn assignments(scenario: &SimScenario, task: &TaskSpec) -> [Vec<Assignment>; 3] {
    let models: Vec<String> = scenario.models.iter().map(|m| m.profile.id.clone()).collect();
    let sm = models
        .iter()
        .map(|m| Assignment::SingleModel { model: m.clone() })
        .collect();
    let sa = models
        .iter()
        .flat_map(|m| {
            scenario.tools.iter().map(move |t| Assignment::SingleAgent {
                model: m.clone(),
                tool: t.clone(),
            })
        })
        .collect();
    let ma = multi_assignments(&models, decomposition(task).len());
    let mut groups = [sm, sa, ma];
    for (g, ok) in groups.iter_mut().zip(scenario.fleet().allowed_paradigms()) {
        if !ok {
            g.clear();
        }
    }
    groups
}

/// Best expected unified reward over every paradigm and assignment.
pub fn oracle_best(scenario: &SimScenario, task: &TaskSpec, preference: &Preference, beta: f64) -> Result<(Assignment, f64)> {
    let mut best: Option<(Assignment, f64)> = None;
    for group in assignments(scenario, task) {
        for a in group {
            let v = expected(scenario, task, &a, beta)?.total(preference);
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((a, v));
            }
        }
    }
    best.ok_or_else(|| Error::EmptyResult("no assignment available".into()))
}

/// Best expected reward within one paradigm.
pub fn paradigm_best(scenario: &SimScenario, task: &TaskSpec, paradigm: Paradigm, preference: &Preference, beta: f64) -> Result<Option<f64>> {
    let group = &assignments(scenario, task)[paradigm.index()];
    let mut best: Option<f64> = None;
    for a in group {
        let v = expected(scenario, task, a, beta)?.total(preference);
        best = Some(best.map_or(v, |b| b.max(v)));
    }
    Ok(best)
}

/// Expected reward of uniform routing: a uniform paradigm among those the
/// fleet supports, then uniform choices within it.
pub fn random_expected(scenario: &SimScenario, task: &TaskSpec, preference: &Preference, beta: f64) -> Result<f64> {
    let groups = assignments(scenario, task);
    let non_empty: Vec<&Vec<Assignment>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let mut total = 0.0;
    for g in &non_empty {
        let mut s = 0.0;
        for a in g.iter() {
            s += expected(scenario, task, a, beta)?.total(preference);
        }
        total += s / g.len() as f64;
    }
    Ok(total / non_empty.len() as f64)
}

/// Two buckets with different dominant paradigms. Document tasks carry a
/// two-part decomposition onto domains the fleet is strong in, while both
/// models are weak on documents directly, so multi-agent wins there.
/// Creative tasks have no useful decomposition and long completions, so
/// the extra aggregation latency makes single-model the better choice.
/// The fleet has no tools.
pub fn dominant_paradigm_fixture(per_bucket: usize) -> (SimScenario, Vec<TaskSpec>) {
    let domain = |n: &str| Domain::new(n).expect("canonical");
    let level = Difficulty::new(3).expect("in range");
    let model = |id: &str, creative: f64, knowledge: f64| SimModelConfig {
        profile: ModelProfile {
            id: id.into(),
            kind: ProfileKind::Model,
            price_prompt: 1.0,
            price_completion: 4.0,
            ttft_ms: 1000.0,
            tokens_per_second: 25.0,
            max_context: 32_000,
            preferred_domains: vec![],
        },
        truth_surface: BTreeMap::from([
            (domain("creative"), [creative; 5]),
            (domain("knowledge"), [knowledge; 5]),
            (domain("document"), [0.2; 5]),
        ]),
        token_model: TokenModel {
            completion_mean: 3000,
            completion_spread: 0.05,
            action_fraction: 0.25,
        },
        tool_competence: BTreeMap::new(),
    };
    let scenario = SimScenario {
        models: vec![model("alpha", 0.9, 0.95), model("beta", 0.8, 0.6)],
        tools: vec![],
        lookup_store: BTreeMap::new(),
        cost_scale: 1.0,
        paradigms: None,
    };
    let exact = |e: String| ValidatorSpec::Exact { expected: e };
    let mut tasks = Vec::with_capacity(2 * per_bucket);
    for i in 0..per_bucket {
        let mut t = TaskSpec::new(
            format!("doc-{i:03}"),
            format!("Assemble briefing {i} from a drafted summary and the verified reference facts."),
            domain("document"),
            level,
        )
        .with_validator(exact(format!("briefing-{i}")));
        let part = |index: usize, d: &str, what: &str| SubtaskSpec {
            index,
            description: format!("Produce the {what} for briefing {i}."),
            depends_on: vec![],
            validator: Some(exact(format!("{what}-{i}"))),
            domain: Some(domain(d)),
            difficulty: Some(level),
        };
        t.subtasks = Some(vec![part(1, "creative", "summary"), part(2, "knowledge", "facts")]);
        tasks.push(t);
        tasks.push(
            TaskSpec::new(
                format!("story-{i:03}"),
                format!("Write the closing paragraph of story {i}."),
                domain("creative"),
                level,
            )
            .with_validator(exact(format!("story-{i}"))),
        );
    }
    (scenario, tasks)
}

/// Parses a scenario document (JSON or TOML by extension).
pub fn load_scenario(path: &std::path::Path) -> Result<SimScenario> {
    let text = std::fs::read_to_string(path)?;
    let scn: SimScenario = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text)?
    };
    scn.validate()?;
    Ok(scn)
}
