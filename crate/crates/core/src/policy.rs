//! The hierarchical orchestrator: a tabular softmax router over paradigms
//! (trained with REINFORCE) and greedy-in-utility composition of
//! (role, model, tool) assignments.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{estimate_tokens, predict_call, ResourceLedger, Usage};
use crate::capability::{agent_id, CapabilityPriorTable};
use crate::domain::{
    table1_prior, Difficulty, Domain, ModelProfile, Paradigm, Preference, PreferenceMode, SubtaskSpec, TaskSpec,
};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Planner,
    Solver,
    Critic,
    ToolOperator,
}

impl Role {
    pub const REGISTRY: [Role; 4] = [Role::Planner, Role::Solver, Role::Critic, Role::ToolOperator];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Planner => "planner",
            Role::Solver => "solver",
            Role::Critic => "critic",
            Role::ToolOperator => "tool-operator",
        }
    }
}

/// a_t = (agent role, model, tool).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeAction {
    pub role: Role,
    pub model_id: String,
    #[serde(default)]
    pub tool: Option<String>,
}

impl ComposeAction {
    pub fn agent_id(&self) -> String {
        agent_id(&self.model_id, self.tool.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum OrchestrationAction {
    Route { paradigm: Paradigm },
    Compose(ComposeAction),
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HistoryEvent {
    Action(OrchestrationAction),
    Reasoning { model_id: String, text: String },
    ToolInvocation { tool: String, observation: String },
}

/// s_t = (x, h_t, r_t, c).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestrationState {
    pub task: TaskSpec,
    pub history: Vec<HistoryEvent>,
    pub ledger: ResourceLedger,
    pub priors_version: u64,
    pub paradigm: Option<Paradigm>,
    pub finished: bool,
}

impl OrchestrationState {
    pub fn new(task: TaskSpec, priors_version: u64) -> Self {
        OrchestrationState {
            task,
            history: Vec::new(),
            ledger: ResourceLedger::new(),
            priors_version,
            paradigm: None,
            finished: false,
        }
    }

    /// Records an action, enforcing the legal action sequence.
    pub fn apply(&mut self, action: OrchestrationAction) -> Result<()> {
        if self.finished {
            return Err(Error::Contract("episode already finished".into()));
        }
        match &action {
            OrchestrationAction::Route { paradigm } => {
                if self.paradigm.is_some() {
                    return Err(Error::Contract("paradigm already routed".into()));
                }
                self.paradigm = Some(*paradigm);
            }
            OrchestrationAction::Compose(c) => match self.paradigm {
                Some(Paradigm::MultiAgent) | Some(Paradigm::SingleAgent) => {}
                // single-model episodes record their model choice too
                Some(Paradigm::SingleModel) if c.tool.is_none() => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "compose action illegal under {:?}",
                        self.paradigm
                    )))
                }
            },
            OrchestrationAction::Finish => self.finished = true,
        }
        self.history.push(HistoryEvent::Action(action));
        Ok(())
    }

    pub fn observe(&mut self, event: HistoryEvent) {
        self.history.push(event);
    }
}

/// (domain, difficulty, preference mode).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Bucket {
    pub domain: Domain,
    pub difficulty: Difficulty,
    pub mode: PreferenceMode,
}

impl Bucket {
    pub fn new(domain: Domain, difficulty: Difficulty, mode: PreferenceMode) -> Self {
        Bucket {
            domain,
            difficulty,
            mode,
        }
    }

    pub fn key(&self) -> String {
        format!("{}|{}|{}", self.domain, self.difficulty, self.mode)
    }
}

/// The fleet as seen by the router: profiles, available tools and the
/// expected call sizes used for cost/latency predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    pub models: Vec<ModelProfile>,
    #[serde(default)]
    pub tools: Vec<String>,
    pub expected_completion_tokens: u64,
    #[serde(default = "default_prompt_overhead")]
    pub prompt_overhead_tokens: u64,
    /// Paradigms the operator allows, in SM, SA, MA order.
    #[serde(default = "all_enabled")]
    pub enabled: [bool; 3],
}

fn all_enabled() -> [bool; 3] {
    [true; 3]
}

fn default_prompt_overhead() -> u64 {
    64
}

impl Fleet {
    pub fn new(models: Vec<ModelProfile>, tools: Vec<String>, expected_completion_tokens: u64) -> Self {
        Fleet {
            models,
            tools,
            expected_completion_tokens,
            prompt_overhead_tokens: default_prompt_overhead(),
            enabled: all_enabled(),
        }
    }

    pub fn profile(&self, id: &str) -> Result<&ModelProfile> {
        self.models
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::lookup("model", id))
    }

    pub fn expected_usage(&self, text: &str) -> Usage {
        Usage::new(
            estimate_tokens(text) + self.prompt_overhead_tokens,
            self.expected_completion_tokens,
        )
    }

    /// Paradigms this fleet can execute at all.
    pub fn allowed_paradigms(&self) -> [bool; 3] {
        let any = !self.models.is_empty();
        let e = self.enabled;
        [any && e[0], any && e[1] && !self.tools.is_empty(), any && e[2]]
    }
}

/// What a paradigm can achieve according to the priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParadigmFeatures {
    pub best_capability: f64,
    pub cheapest_cost: f64,
    pub cheapest_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub bucket: Bucket,
    pub per_paradigm: [ParadigmFeatures; 3],
}

fn candidates(paradigm: Paradigm, role: Role, domain: &Domain, fleet: &Fleet) -> Vec<ComposeAction> {
    let ordered = table1_prior(domain, &fleet.models);
    let mut out = Vec::new();
    for m in ordered {
        if paradigm == Paradigm::SingleAgent && !fleet.tools.is_empty() {
            for t in &fleet.tools {
                out.push(ComposeAction {
                    role: Role::ToolOperator,
                    model_id: m.id.clone(),
                    tool: Some(t.clone()),
                });
            }
        } else {
            out.push(ComposeAction {
                role,
                model_id: m.id.clone(),
                tool: None,
            });
        }
    }
    out
}

/// Reduces the state to the policy bucket plus per-paradigm summaries.
pub fn featurize(state: &OrchestrationState, priors: &CapabilityPriorTable, preference: &Preference, fleet: &Fleet) -> Features {
    let t = &state.task;
    let usage = fleet.expected_usage(&t.text);
    let per_paradigm = Paradigm::ALL.map(|p| {
        let cands = candidates(p, Role::Solver, &t.domain, fleet);
        let mut f = ParadigmFeatures {
            best_capability: 0.0,
            cheapest_cost: f64::INFINITY,
            cheapest_latency: f64::INFINITY,
        };
        for c in &cands {
            f.best_capability = f.best_capability.max(priors.estimate(&c.agent_id(), &t.domain, t.difficulty));
            if let Ok(profile) = fleet.profile(&c.model_id) {
                let (cost, lat) = predict_call(profile, usage);
                if cost < f.cheapest_cost {
                    f.cheapest_cost = cost;
                    f.cheapest_latency = lat;
                }
            }
        }
        if cands.is_empty() {
            f.cheapest_cost = 0.0;
            f.cheapest_latency = 0.0;
        }
        f
    });
    Features {
        bucket: Bucket::new(t.domain.clone(), t.difficulty, preference.mode),
        per_paradigm,
    }
}

/// Pluggable (domain, difficulty) labeler; `None` means abstain.
pub trait Classifier: Sync {
    fn classify(&self, text: &str) -> Option<(Domain, Difficulty)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub domain: Domain,
    pub difficulty: Difficulty,
    pub unclassified: bool,
}

/// Labels `text`; an abstaining classifier yields (knowledge, 3) flagged
/// as unclassified.
pub fn classify_task(text: &str, classifier: &dyn Classifier) -> Result<Classification> {
    if text.trim().is_empty() {
        return Err(Error::Precondition("task text is empty".into()));
    }
    Ok(match classifier.classify(text) {
        Some((domain, difficulty)) => Classification {
            domain,
            difficulty,
            unclassified: false,
        },
        None => Classification {
            domain: Domain::knowledge(),
            difficulty: Difficulty::new(3).expect("3 is a valid level"),
            unclassified: true,
        },
    })
}

/// Passes through labels already carried by a task.
pub struct GroundTruth<'a>(pub &'a TaskSpec);

impl Classifier for GroundTruth<'_> {
    fn classify(&self, _text: &str) -> Option<(Domain, Difficulty)> {
        Some((self.0.domain.clone(), self.0.difficulty))
    }
}

/// Keyword rules over the canonical domains; difficulty from length and
/// a few marker words.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordClassifier;

const FRONTEND: &[&str] = &[
    "html", "css", "react", "vue", "svelte", "button", "component", "layout", "frontend", "front-end",
    "web page", "webpage", "ui ", "dom",
];
const CODE: &[&str] = &[
    "function", "implement", "class ", "api", "endpoint", "database", "sql", "server", "backend",
    "compile", "python", "rust", "java", "algorithm", "bug",
];
const MATH: &[&str] = &[
    "compute", "calculate", "solve", "equation", "integral", "derivative", "prove", "theorem",
    "sum of", "probability", "how many", "remainder", "prime",
];
const MEDIA: &[&str] = &["music", "song", "melody", "video", "clip", "image", "audio", "soundtrack"];
const DOCUMENT: &[&str] = &[
    "document", "spreadsheet", "excel", "slides", "presentation", "docx", "pdf", "memo", "report",
    "table of contents",
];
const CREATIVE: &[&str] = &["story", "poem", "novel", "lyrics", "slogan", "fiction", "creative"];
const TOOL_USE: &[&str] = &["search the web", "use the tool", "call the api", "browse", "book a", "schedule"];
const KNOWLEDGE: &[&str] = &[
    "who ", "what ", "when ", "where ", "which ", "capital of", "history", "fact", "define",
];
const HARDER: &[&str] = &["prove", "rigorous", "optimal", "challenging", "hard", "step by step", "olympiad"];
const EASIER: &[&str] = &["simple", "easy", "quick", "briefly", "basic"];

fn has_any(text: &str, words: &[&str]) -> bool {
    words.iter().any(|w| text.contains(w))
}

fn looks_arithmetic(text: &str) -> bool {
    let mut digits = 0;
    let mut ops = 0;
    for c in text.chars() {
        if c.is_ascii_digit() {
            digits += 1;
        } else if "+-*/^=".contains(c) {
            ops += 1;
        }
    }
    digits >= 2 && ops >= 1
}

impl Classifier for KeywordClassifier {
    fn classify(&self, text: &str) -> Option<(Domain, Difficulty)> {
        let lower = format!("{} ", text.to_lowercase());
        let name = if lower.contains("```") {
            if has_any(&lower, FRONTEND) {
                "code-frontend"
            } else {
                "code-backend"
            }
        } else if has_any(&lower, FRONTEND) && has_any(&lower, CODE) {
            "code-frontend"
        } else if has_any(&lower, CODE) {
            "code-backend"
        } else if has_any(&lower, MATH) || looks_arithmetic(&lower) {
            "math"
        } else if has_any(&lower, MEDIA) {
            "media"
        } else if has_any(&lower, DOCUMENT) {
            "document"
        } else if has_any(&lower, CREATIVE) {
            "creative"
        } else if has_any(&lower, TOOL_USE) {
            "tool-use"
        } else if has_any(&lower, KNOWLEDGE) || lower.trim_end().ends_with('?') {
            "knowledge"
        } else {
            return None;
        };
        let words = lower.split_whitespace().count();
        let mut level: i32 = match words {
            0..=19 => 1,
            20..=59 => 2,
            60..=149 => 3,
            150..=399 => 4,
            _ => 5,
        };
        if has_any(&lower, HARDER) {
            level += 1;
        }
        if has_any(&lower, EASIER) {
            level -= 1;
        }
        let difficulty = Difficulty::new(level.clamp(1, 5) as u8).expect("clamped level");
        Some((Domain::new(name).expect("canonical domain"), difficulty))
    }
}

/// Knobs of the router and composer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub learning_rate: f64,
    pub baseline_decay: f64,
    pub temperature: f64,
    pub epsilon0: f64,
    pub epsilon_decay: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            learning_rate: 0.1,
            baseline_decay: 0.9,
            temperature: 1.0,
            epsilon0: 0.1,
            epsilon_decay: 0.99,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("policy.temperature must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("policy.baseline_decay must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon0) || !(0.0..=1.0).contains(&self.epsilon_decay) {
            return Err(Error::Config("policy.epsilon0 and epsilon_decay must be in [0,1]".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("policy.learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Tabular softmax policy over paradigms, one row of logits per bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePolicy {
    pub weights: BTreeMap<String, [f64; 3]>,
    pub baselines: BTreeMap<String, f64>,
    pub config: PolicyConfig,
    pub step_count: u64,
}

impl Default for RoutePolicy {
    fn default() -> Self {
        RoutePolicy::new(PolicyConfig::default())
    }
}

fn softmax(logits: [f64; 3], temperature: f64, mask: [bool; 3]) -> [f64; 3] {
    let scaled = logits.map(|l| l / temperature);
    let max = (0..3)
        .filter(|&i| mask[i])
        .map(|i| scaled[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; 3];
    for i in 0..3 {
        if mask[i] {
            e[i] = (scaled[i] - max).exp();
        }
    }
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

impl RoutePolicy {
    pub fn new(config: PolicyConfig) -> Self {
        RoutePolicy {
            weights: BTreeMap::new(),
            baselines: BTreeMap::new(),
            config,
            step_count: 0,
        }
    }

    pub fn logits(&self, bucket: &Bucket) -> [f64; 3] {
        self.weights.get(&bucket.key()).copied().unwrap_or([0.0; 3])
    }

    pub fn probabilities(&self, bucket: &Bucket) -> [f64; 3] {
        softmax(self.logits(bucket), self.config.temperature, [true; 3])
    }

    pub fn probabilities_masked(&self, bucket: &Bucket, allowed: [bool; 3]) -> [f64; 3] {
        softmax(self.logits(bucket), self.config.temperature, allowed)
    }

    /// Current exploration rate for composition.
    pub fn epsilon(&self) -> f64 {
        self.config.epsilon0 * self.config.epsilon_decay.powf(self.step_count as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RouteMode {
    Greedy,
    Sampled { seed: u64 },
}

/// Picks a paradigm from softmax(logits / temperature) restricted to
/// `allowed`. Greedy takes the argmax, ties going to SM < SA < MA.
pub fn route_decision(
    policy: &RoutePolicy,
    bucket: &Bucket,
    allowed: [bool; 3],
    mode: RouteMode,
    key: &str,
) -> Result<(Paradigm, f64)> {
    if !allowed.iter().any(|a| *a) {
        return Err(Error::Composition("no paradigm is executable on this fleet".into()));
    }
    let probs = policy.probabilities_masked(bucket, allowed);
    let idx = match mode {
        RouteMode::Greedy => {
            let logits = policy.logits(bucket);
            let mut best = None::<usize>;
            for i in 0..3 {
                if allowed[i] && best.is_none_or(|b| logits[i] > logits[b]) {
                    best = Some(i);
                }
            }
            best.expect("at least one paradigm allowed")
        }
        RouteMode::Sampled { seed } => {
            let mut rng = keyed_rng(&[&seed.to_string(), "route", key, &bucket.key()]);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = None;
            for i in 0..3 {
                if !allowed[i] {
                    continue;
                }
                acc += probs[i];
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
            pick.expect("at least one paradigm allowed")
        }
    };
    Ok((Paradigm::from_index(idx).expect("index < 3"), probs[idx]))
}

/// One finished episode as seen by the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSample {
    pub bucket: Bucket,
    pub paradigm: Paradigm,
    pub reward: f64,
}

/// REINFORCE with a per-bucket moving-average baseline. Episodes are
/// applied in order; non-finite rewards are skipped.
pub fn policy_update(policy: &RoutePolicy, episodes: &[EpisodeSample]) -> Result<RoutePolicy> {
    if episodes.is_empty() {
        return Err(Error::Precondition("policy_update needs at least one episode".into()));
    }
    let mut next = policy.clone();
    let eta = next.config.learning_rate;
    let decay = next.config.baseline_decay;
    for ep in episodes {
        if !ep.reward.is_finite() {
            log::warn!("skipping episode in {} with non-finite reward", ep.bucket.key());
            continue;
        }
        let key = ep.bucket.key();
        let probs = next.probabilities(&ep.bucket);
        let baseline = next.baselines.get(&key).copied().unwrap_or(0.0);
        let adv = ep.reward - baseline;
        let row = next.weights.entry(key.clone()).or_insert([0.0; 3]);
        let chosen = ep.paradigm.index();
        for (i, l) in row.iter_mut().enumerate() {
            if i == chosen {
                *l += eta * adv * (1.0 - probs[i]);
            } else {
                *l -= eta * adv * probs[i];
            }
        }
        next.baselines.insert(key, baseline + (1.0 - decay) * adv);
    }
    next.step_count += 1;
    Ok(next)
}

/// Utility of one assignment: capability minus priced cost and latency.
pub fn utility(
    action: &ComposeAction,
    domain: &Domain,
    level: Difficulty,
    text: &str,
    priors: &CapabilityPriorTable,
    fleet: &Fleet,
    preference: &Preference,
) -> Result<f64> {
    let profile = fleet.profile(&action.model_id)?;
    let (c, l) = predict_call(profile, fleet.expected_usage(text));
    Ok(priors.estimate(&action.agent_id(), domain, level) - preference.lambda_c * c - preference.lambda_l * l)
}

/// Where a composition decision applies.
#[derive(Debug, Clone)]
pub struct ComposeTarget<'a> {
    pub paradigm: Paradigm,
    pub role: Role,
    pub domain: &'a Domain,
    pub level: Difficulty,
    pub text: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeChoice {
    pub action: ComposeAction,
    pub utility: f64,
    pub explored: bool,
}

/// Chooses (role, model, tool) maximising utility, exploring uniformly
/// with probability `epsilon`. Candidates follow the task-type preference
/// order and ties go to the earlier candidate.
pub fn compose_step(
    target: &ComposeTarget<'_>,
    priors: &CapabilityPriorTable,
    fleet: &Fleet,
    preference: &Preference,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ComposeChoice> {
    let cands = candidates(target.paradigm, target.role, target.domain, fleet);
    if cands.is_empty() {
        return Err(Error::Composition(format!(
            "no eligible candidate for {} in {}",
            target.paradigm, target.domain
        )));
    }
    let mut scored = Vec::with_capacity(cands.len());
    for c in cands {
        let u = utility(&c, target.domain, target.level, target.text, priors, fleet, preference)?;
        scored.push((c, u));
    }
    let explore = epsilon > 0.0 && rng.random::<f64>() < epsilon;
    let idx = if explore {
        rng.random_range(0..scored.len())
    } else {
        let mut best = 0;
        for (i, (_, u)) in scored.iter().enumerate() {
            if *u > scored[best].1 {
                best = i;
            }
        }
        best
    };
    let (action, utility) = scored.swap_remove(idx);
    Ok(ComposeChoice {
        action,
        utility,
        explored: explore,
    })
}

/// A multi-agent plan: one step per subtask, grouped into stages whose
/// members run in parallel, plus the aggregating solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    pub steps: Vec<WorkflowStep>,
    /// Stages in execution order; each lists positions into `steps`.
    pub parallel_groups: Vec<Vec<usize>>,
    pub aggregator: ComposeAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowStep {
    pub subtask_index: usize,
    pub action: ComposeAction,
}

/// Stage of each subtask: its longest dependency-path depth. Returned as
/// stages of positions into `subtasks`, each stage sorted by subtask index.
pub fn stage_assignment(subtasks: &[SubtaskSpec]) -> Result<Vec<Vec<usize>>> {
    let pos: BTreeMap<usize, usize> = subtasks.iter().enumerate().map(|(p, s)| (s.index, p)).collect();
    if pos.len() != subtasks.len() {
        return Err(Error::Workflow("duplicate subtask index".into()));
    }
    for s in subtasks {
        if let Some(d) = s.depends_on.iter().find(|d| !pos.contains_key(d)) {
            return Err(Error::Workflow(format!(
                "subtask {} depends on unknown subtask {d}",
                s.index
            )));
        }
    }
    // Kahn's algorithm, visiting ready nodes by subtask index.
    let n = subtasks.len();
    let mut indeg: Vec<usize> = subtasks.iter().map(|s| s.depends_on.len()).collect();
    let mut depth = vec![0usize; n];
    let mut ready: std::collections::BTreeSet<(usize, usize)> = (0..n)
        .filter(|&p| indeg[p] == 0)
        .map(|p| (subtasks[p].index, p))
        .collect();
    let mut seen = 0;
    while let Some(&(idx, p)) = ready.iter().next() {
        ready.remove(&(idx, p));
        seen += 1;
        for (q, s) in subtasks.iter().enumerate() {
            let times = s.depends_on.iter().filter(|d| **d == idx).count();
            if times > 0 {
                depth[q] = depth[q].max(depth[p] + 1);
                indeg[q] -= times;
                if indeg[q] == 0 {
                    ready.insert((s.index, q));
                }
            }
        }
    }
    if seen != n {
        return Err(Error::Workflow("dependency cycle among subtasks".into()));
    }
    let stages = depth.iter().copied().max().map_or(0, |d| d + 1);
    let mut out = vec![Vec::new(); stages];
    for (p, d) in depth.iter().enumerate() {
        out[*d].push(p);
    }
    for st in &mut out {
        st.sort_by_key(|&p| subtasks[p].index);
    }
    Ok(out)
}

/// Builds the workflow, asking `assign` for one action per subtask in
/// execution order.
pub fn build_workflow<F>(subtasks: &[SubtaskSpec], mut assign: F, aggregator: ComposeAction) -> Result<Workflow>
where
    F: FnMut(&SubtaskSpec) -> Result<ComposeAction>,
{
    if subtasks.is_empty() {
        return Err(Error::Workflow("decomposition is empty".into()));
    }
    let stages = stage_assignment(subtasks)?;
    let mut steps = Vec::with_capacity(subtasks.len());
    let mut groups = Vec::with_capacity(stages.len());
    for stage in stages {
        let mut group = Vec::with_capacity(stage.len());
        for p in stage {
            let s = &subtasks[p];
            group.push(steps.len());
            steps.push(WorkflowStep {
                subtask_index: s.index,
                action: assign(s)?,
            });
        }
        groups.push(group);
    }
    Ok(Workflow {
        steps,
        parallel_groups: groups,
        aggregator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ProfileKind;

    fn bucket() -> Bucket {
        Bucket::new(Domain::math(), Difficulty::new(5).unwrap(), PreferenceMode::PerformancePriority)
    }

    fn profile(id: &str, price: f64) -> ModelProfile {
        ModelProfile {
            id: id.into(),
            kind: ProfileKind::Model,
            price_prompt: price,
            price_completion: price,
            ttft_ms: 100.0,
            tokens_per_second: 100.0,
            max_context: 8000,
            preferred_domains: vec![],
        }
    }

    fn sub(index: usize, deps: &[usize]) -> SubtaskSpec {
        SubtaskSpec {
            index,
            description: format!("s{index}"),
            depends_on: deps.to_vec(),
            validator: None,
            domain: None,
            difficulty: None,
        }
    }

    #[test]
    fn bucket_key_is_tuple() {
        assert_eq!(bucket().key(), "math|5|performance_priority");
    }

    #[test]
    fn greedy_dominant_logit() {
        let mut p = RoutePolicy::default();
        p.weights.insert(bucket().key(), [10.0, -10.0, -10.0]);
        let (par, prob) = route_decision(&p, &bucket(), [true; 3], RouteMode::Greedy, "t").unwrap();
        assert_eq!(par, Paradigm::SingleModel);
        assert!(prob > 1.0 - 1e-8);
    }

    #[test]
    fn greedy_ties_prefer_earlier_paradigm() {
        let p = RoutePolicy::default();
        let (par, _) = route_decision(&p, &bucket(), [true; 3], RouteMode::Greedy, "t").unwrap();
        assert_eq!(par, Paradigm::SingleModel);
        let (par, _) = route_decision(&p, &bucket(), [false, true, true], RouteMode::Greedy, "t").unwrap();
        assert_eq!(par, Paradigm::SingleAgent);
    }

    #[test]
    fn sampled_routing_is_reproducible() {
        let p = RoutePolicy::default();
        let a = route_decision(&p, &bucket(), [true; 3], RouteMode::Sampled { seed: 7 }, "t1").unwrap();
        let b = route_decision(&p, &bucket(), [true; 3], RouteMode::Sampled { seed: 7 }, "t1").unwrap();
        assert_eq!(a, b);
        assert!((a.1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn update_sign_and_zero_advantage() {
        let p = RoutePolicy::default();
        let up = policy_update(
            &p,
            &[EpisodeSample {
                bucket: bucket(),
                paradigm: Paradigm::MultiAgent,
                reward: 1.0,
            }],
        )
        .unwrap();
        assert!(up.probabilities(&bucket())[2] > p.probabilities(&bucket())[2]);
        assert_eq!(up.step_count, 1);

        let same = policy_update(
            &p,
            &[EpisodeSample {
                bucket: bucket(),
                paradigm: Paradigm::SingleAgent,
                reward: 0.0,
            }],
        )
        .unwrap();
        assert_eq!(same.logits(&bucket()), [0.0; 3]);

        let nan = policy_update(
            &p,
            &[EpisodeSample {
                bucket: bucket(),
                paradigm: Paradigm::SingleAgent,
                reward: f64::NAN,
            }],
        )
        .unwrap();
        assert!(nan.weights.is_empty());
        assert!(policy_update(&p, &[]).is_err());
    }

    #[test]
    fn compose_prefers_cheaper_on_equal_capability() {
        let fleet = Fleet::new(vec![profile("pricey", 10.0), profile("cheap", 1.0)], vec![], 1000);
        let pref = Preference {
            mode: PreferenceMode::Auto,
            lambda_c: 0.01,
            lambda_l: 0.002,
        };
        let d = Domain::math();
        let target = ComposeTarget {
            paradigm: Paradigm::MultiAgent,
            role: Role::Solver,
            domain: &d,
            level: Difficulty::new(2).unwrap(),
            text: "x",
        };
        let mut rng = keyed_rng(&["t"]);
        let c = compose_step(&target, &CapabilityPriorTable::new(), &fleet, &pref, 0.0, &mut rng).unwrap();
        assert_eq!(c.action.model_id, "cheap");

        let solo = Fleet::new(vec![profile("only", 1.0)], vec![], 10);
        for i in 0..20 {
            let mut rng = keyed_rng(&["e", &i.to_string()]);
            let c = compose_step(&target, &CapabilityPriorTable::new(), &solo, &pref, 1.0, &mut rng).unwrap();
            assert_eq!(c.action.model_id, "only");
        }
        let empty = Fleet::new(vec![], vec![], 10);
        assert!(matches!(
            compose_step(&target, &CapabilityPriorTable::new(), &empty, &pref, 0.0, &mut rng),
            Err(Error::Composition(_))
        ));
    }

    #[test]
    fn workflow_stages() {
        let agg = ComposeAction {
            role: Role::Solver,
            model_id: "m".into(),
            tool: None,
        };
        let assign = |_: &SubtaskSpec| {
            Ok(ComposeAction {
                role: Role::Solver,
                model_id: "m".into(),
                tool: None,
            })
        };
        let w = build_workflow(&[sub(1, &[]), sub(2, &[]), sub(3, &[])], assign, agg.clone()).unwrap();
        assert_eq!(w.parallel_groups, vec![vec![0, 1, 2]]);
        let w = build_workflow(&[sub(1, &[]), sub(2, &[1]), sub(3, &[2])], assign, agg.clone()).unwrap();
        assert_eq!(w.parallel_groups.len(), 3);
        let cyc = build_workflow(&[sub(1, &[2]), sub(2, &[1])], assign, agg.clone());
        assert!(matches!(cyc, Err(Error::Workflow(_))));
        assert!(build_workflow(&[], assign, agg).is_err());
    }

    #[test]
    fn state_rejects_illegal_compose() {
        let t = TaskSpec::new("t", "x", Domain::math(), Difficulty::new(1).unwrap());
        let mut s = OrchestrationState::new(t, 0);
        let tool_action = OrchestrationAction::Compose(ComposeAction {
            role: Role::ToolOperator,
            model_id: "m".into(),
            tool: Some("calculator".into()),
        });
        assert!(s.apply(tool_action.clone()).is_err());
        s.apply(OrchestrationAction::Route {
            paradigm: Paradigm::SingleAgent,
        })
        .unwrap();
        s.apply(tool_action).unwrap();
        s.apply(OrchestrationAction::Finish).unwrap();
        assert!(s.apply(OrchestrationAction::Finish).is_err());
    }

    #[test]
    fn keyword_classifier_basics() {
        let c = KeywordClassifier;
        let (d, _) = c.classify("Fix this:\n```\nfn main() {}\n```").unwrap();
        assert_eq!(d.as_str(), "code-backend");
        let (d, _) = c.classify("Compute 12*7+3.").unwrap();
        assert_eq!(d.as_str(), "math");
        assert!(c.classify("zzz qqq").is_none());
        let r = classify_task("zzz qqq", &c).unwrap();
        assert!(r.unclassified);
        assert_eq!(r.domain, Domain::knowledge());
        assert!(classify_task("  ", &c).is_err());
    }
}
