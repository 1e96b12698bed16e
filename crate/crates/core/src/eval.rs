//! Suite runs, score/cost tables and comparison statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::capability::CapabilityPriorTable;
use crate::domain::{Difficulty, Domain, PreferenceMode, TaskSpec, ValidatorSpec};
use crate::error::{Error, Result};
use crate::execution::{calculate, format_rational, ComposeMode, EpisodeRequest};
use crate::par;
use crate::policy::{Fleet, PolicyConfig, RouteMode, RoutePolicy};
use crate::rng::{derive_seed, keyed_rng};
use crate::sim::{oracle_best, random_expected, expected, trace_id, Assignment, ReferenceTable, SimWorld, TrainConfig};
use crate::store::write_json_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub name: String,
    pub domain: Domain,
    pub tasks: Vec<TaskSpec>,
}

impl SuiteSpec {
    pub fn new(name: impl Into<String>, domain: Domain, tasks: Vec<TaskSpec>) -> Result<Self> {
        let s = SuiteSpec {
            name: name.into(),
            domain,
            tasks,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Parameter(format!("suite `{}` has no tasks", self.name)));
        }
        if let Some(t) = self.tasks.iter().find(|t| t.validator.is_none()) {
            return Err(Error::Parameter(format!("suite `{}`: task `{}` has no validator", self.name, t.id)));
        }
        Ok(())
    }
}

const WORDS: [&str; 16] = [
    "amber", "basalt", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper", "krypton", "lumen",
    "marble", "nectar", "onyx", "prism",
];

fn math_task(tag: &str, i: usize, level: Difficulty, rng: &mut impl Rng) -> TaskSpec {
    let l = level.level() as usize;
    let mut expr = rng.random_range(2..50).to_string();
    for _ in 0..l + 1 {
        let op = ["+", "-", "*"][rng.random_range(0..3)];
        let n: u32 = rng.random_range(2..50);
        expr = if op == "*" { format!("({expr}) * {n}") } else { format!("{expr} {op} {n}") };
    }
    let value = format_rational(&calculate(&expr).expect("generated expression evaluates"));
    let text = format!("Evaluate the expression {expr} and give the exact integer result.");
    let mut t = TaskSpec::new(format!("{tag}math-{i:03}"), text, Domain::math(), level)
        .with_validator(ValidatorSpec::Numeric { expected: value });
    t.reasoning_depth = l as u32;
    if l <= 2 {
        t.tool_dependency = true;
        t.metadata.insert("tool".into(), "calculator".into());
        t.metadata.insert("tool_arg.expr".into(), expr);
    }
    t
}

fn code_task(tag: &str, i: usize, level: Difficulty, rng: &mut impl Rng) -> TaskSpec {
    let name = format!("{}_{}_{:04x}", WORDS[rng.random_range(0..16)], WORDS[rng.random_range(0..16)], rng.random::<u16>());
    let steps = level.level() as usize * 2;
    let text = format!(
        "Implement a backend handler that validates a request, applies {steps} transformation steps to its payload and \
         persists the result. Reply with the name of the exported entry point, which must be `{name}`."
    );
    let mut t = TaskSpec::new(format!("{tag}code-{i:03}"), text, Domain::new("code-backend").expect("canonical"), level)
        .with_validator(ValidatorSpec::Exact { expected: name });
    t.reasoning_depth = steps as u32;
    t
}

fn knowledge_task(tag: &str, i: usize, level: Difficulty, rng: &mut impl Rng, store: &mut BTreeMap<String, String>) -> TaskSpec {
    let key = format!("{tag}entry-{i:03}");
    let answer = format!("{}-{}", WORDS[rng.random_range(0..16)], rng.random_range(100..1000));
    let text = format!("Which registry code is filed under the archive record `{key}`? Answer with the code only.");
    let mut t = TaskSpec::new(format!("{tag}know-{i:03}"), text, Domain::knowledge(), level)
        .with_validator(ValidatorSpec::Exact { expected: answer.clone() });
    if level.level() <= 3 {
        t.tool_dependency = true;
        t.metadata.insert("tool".into(), "lookup".into());
        t.metadata.insert("tool_arg.key".into(), key.clone());
    }
    store.insert(key, answer);
    t
}

/// Synthetic math/code/knowledge suites of `per_suite` tasks each, with
/// levels cycling 1..=5. `tag` prefixes ids so disjoint splits can share
/// one lookup store. Returns the suites and the lookup entries they need.
pub fn synthetic_suites(per_suite: usize, tag: &str, seed: u64) -> (Vec<SuiteSpec>, BTreeMap<String, String>) {
    let mut store = BTreeMap::new();
    let level = |i: usize| Difficulty::new((i % 5) as u8 + 1).expect("1..=5");
    let mut rng = keyed_rng(&[&seed.to_string(), "suite", tag, "math"]);
    let math = (0..per_suite).map(|i| math_task(tag, i, level(i), &mut rng)).collect();
    let mut rng = keyed_rng(&[&seed.to_string(), "suite", tag, "code"]);
    let code = (0..per_suite).map(|i| code_task(tag, i, level(i), &mut rng)).collect();
    let mut rng = keyed_rng(&[&seed.to_string(), "suite", tag, "knowledge"]);
    let know = (0..per_suite)
        .map(|i| knowledge_task(tag, i, level(i), &mut rng, &mut store))
        .collect();
    let suites = vec![
        SuiteSpec {
            name: "math".into(),
            domain: Domain::math(),
            tasks: math,
        },
        SuiteSpec {
            name: "code".into(),
            domain: Domain::new("code-backend").expect("canonical"),
            tasks: code,
        },
        SuiteSpec {
            name: "knowledge".into(),
            domain: Domain::knowledge(),
            tasks: know,
        },
    ];
    (suites, store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCostRow {
    pub system: String,
    pub scores: Vec<Option<f64>>,
    pub average: Option<f64>,
    pub cost: f64,
    /// Spread (max − min) of the average score across seeds.
    #[serde(default)]
    pub seed_spread: f64,
}

impl ScoreCostRow {
    pub fn new(system: impl Into<String>, scores: Vec<Option<f64>>, cost: f64) -> Self {
        let average = mean_present(&scores);
        ScoreCostRow {
            system: system.into(),
            scores,
            average,
            cost,
            seed_spread: 0.0,
        }
    }
}

fn mean_present(scores: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = scores.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// What answers the suites.
pub enum System<'a> {
    Router {
        policy: &'a RoutePolicy,
        priors: &'a CapabilityPriorTable,
        preference: PreferenceMode,
    },
    SingleModel {
        model: String,
    },
}

impl System<'_> {
    pub fn label(&self) -> String {
        match self {
            System::Router { preference, .. } => format!("router/{}", preference.as_str()),
            System::SingleModel { model } => model.clone(),
        }
    }
}

struct Cell {
    suite: usize,
    seed: usize,
    correct: bool,
    cost: f64,
}

/// Runs every suite under every seed. Per-suite score is the mean over
/// seeds of percent-correct; cost is the mean over seeds of total cost per
/// task in reference-workload units.
pub fn run_suites(world: &SimWorld, system: &System<'_>, suites: &[SuiteSpec], seeds: &[u64]) -> Result<ScoreCostRow> {
    if seeds.is_empty() {
        return Err(Error::Precondition("at least one seed is required".into()));
    }
    for s in suites {
        s.validate()?;
    }
    let empty = CapabilityPriorTable::new();
    let flat = RoutePolicy::new(PolicyConfig::default());
    let (fleet, policy, priors, preference, force) = match system {
        System::Router {
            policy,
            priors,
            preference,
        } => (world.fleet.clone(), *policy, *priors, *preference, None),
        System::SingleModel { model } => {
            let profile = world.fleet.profile(model)?.clone();
            let fleet = Fleet {
                models: vec![profile],
                tools: vec![],
                ..world.fleet.clone()
            };
            (fleet, &flat, &empty, PreferenceMode::Auto, Some(crate::domain::Paradigm::SingleModel))
        }
    };
    let orch = world.orchestrator_on(&fleet, priors, policy);
    let pref = world.preference(preference);
    let jobs: Vec<(usize, usize, &TaskSpec)> = suites
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            (0..seeds.len()).flat_map(move |k| s.tasks.iter().map(move |t| (si, k, t)))
        })
        .collect();
    let label = system.label();
    let cells = par::map(&jobs, |&(suite, k, task)| {
        let seed = derive_seed(&[&seeds[k].to_string(), "eval", &task.id]);
        let out = orch.run(&EpisodeRequest {
            task: task.clone(),
            preference: pref.clone(),
            seed,
            route: RouteMode::Greedy,
            compose: ComposeMode::Epsilon { epsilon: 0.0 },
            force_paradigm: force,
            trace_id: trace_id(&label, &task.id, seed),
        })?;
        Ok::<_, Error>(Cell {
            suite,
            seed: k,
            correct: out.outcome.r_final >= 1.0,
            cost: out.ledger.total_cost,
        })
    });
    let mut correct = vec![vec![0usize; seeds.len()]; suites.len()];
    let mut cost = vec![0.0; seeds.len()];
    for c in cells {
        let c = c?;
        correct[c.suite][c.seed] += c.correct as usize;
        cost[c.seed] += c.cost;
    }
    let n_tasks: usize = suites.iter().map(|s| s.tasks.len()).sum();
    let per_seed_pct = |si: usize, k: usize| 100.0 * correct[si][k] as f64 / suites[si].tasks.len() as f64;
    let scores: Vec<Option<f64>> = (0..suites.len())
        .map(|si| Some((0..seeds.len()).map(|k| per_seed_pct(si, k)).sum::<f64>() / seeds.len() as f64))
        .collect();
    let seed_avgs: Vec<f64> = (0..seeds.len())
        .map(|k| (0..suites.len()).map(|si| per_seed_pct(si, k)).sum::<f64>() / suites.len() as f64)
        .collect();
    let cost_index = cost.iter().map(|c| c / (n_tasks as f64 * world.scenario.cost_scale)).sum::<f64>() / seeds.len() as f64;
    let mut row = ScoreCostRow::new(label, scores, cost_index);
    row.seed_spread = seed_avgs.iter().cloned().fold(f64::MIN, f64::max) - seed_avgs.iter().cloned().fold(f64::MAX, f64::min);
    Ok(row)
}

/// Percent saved by `subject` relative to `baseline`.
pub fn cost_reduction(subject: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Parameter(format!("baseline cost must be > 0, got {baseline}")));
    }
    Ok(100.0 * (baseline - subject) / baseline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoVerdict {
    pub pass: bool,
    pub violations: Vec<String>,
}

/// Checks that cost and average score both strictly increase from
/// cost-priority through auto to performance-priority.
pub fn pareto_report(rows: &[(PreferenceMode, &ScoreCostRow)]) -> ParetoVerdict {
    let mut violations = Vec::new();
    let find = |m: PreferenceMode| rows.iter().find(|(k, _)| *k == m).map(|(_, r)| *r);
    let ordered: Vec<(PreferenceMode, Option<&ScoreCostRow>)> = PreferenceMode::ALL.iter().map(|&m| (m, find(m))).collect();
    for (m, r) in &ordered {
        if r.is_none() {
            violations.push(format!("missing row for {}", m.as_str()));
        }
    }
    if violations.is_empty() {
        for w in ordered.windows(2) {
            let (a, ra) = (w[0].0, w[0].1.expect("checked"));
            let (b, rb) = (w[1].0, w[1].1.expect("checked"));
            if !(ra.cost < rb.cost) {
                violations.push(format!("cost: {} ({}) !< {} ({})", a.as_str(), ra.cost, b.as_str(), rb.cost));
            }
            let (sa, sb) = (ra.average.unwrap_or(f64::NAN), rb.average.unwrap_or(f64::NAN));
            if !(sa < sb) {
                violations.push(format!("score: {} ({sa}) !< {} ({sb})", a.as_str(), b.as_str()));
            }
        }
    }
    ParetoVerdict {
        pass: violations.is_empty(),
        violations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Sim,
    Real,
}

/// How the routed system picks assignments in a regret computation.
pub enum Router<'a> {
    Policy {
        policy: &'a RoutePolicy,
        priors: &'a CapabilityPriorTable,
    },
    Uniform,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRegret {
    pub task_id: String,
    pub best: f64,
    pub achieved: f64,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub mean: f64,
    pub max: f64,
    pub mean_reward: f64,
    pub tasks: Vec<TaskRegret>,
}

/// Expected-reward regret against the best assignment under the known
/// truth surfaces.
pub fn regret_report(
    world: &SimWorld,
    mode: RunMode,
    router: &Router<'_>,
    tasks: &[TaskSpec],
    preference: PreferenceMode,
) -> Result<RegretReport> {
    if mode != RunMode::Sim {
        return Err(Error::UnsupportedMode("regret needs known truth surfaces (sim mode)".into()));
    }
    let pref = world.preference(preference);
    let rows = par::map(tasks, |task| {
        let (_, best) = oracle_best(&world.scenario, task, &pref, world.beta)?;
        let achieved = match router {
            Router::Oracle => best,
            Router::Uniform => random_expected(&world.scenario, task, &pref, world.beta)?,
            Router::Policy { policy, priors } => {
                let orch = world.orchestrator(priors, policy);
                let (plan, _) = orch.dry_run(&EpisodeRequest {
                    task: task.clone(),
                    preference: pref.clone(),
                    seed: 0,
                    route: RouteMode::Greedy,
                    compose: ComposeMode::Epsilon { epsilon: 0.0 },
                    force_paradigm: None,
                    trace_id: trace_id("regret", &task.id, 0),
                })?;
                let a = Assignment::from_plan(&plan, task)?;
                expected(&world.scenario, task, &a, world.beta)?.total(&pref)
            }
        };
        Ok::<_, Error>(TaskRegret {
            task_id: task.id.clone(),
            best,
            achieved,
            regret: (best - achieved).max(0.0),
        })
    });
    let tasks: Vec<TaskRegret> = rows.into_iter().collect::<Result<_>>()?;
    if tasks.is_empty() {
        return Err(Error::EmptyResult("no tasks".into()));
    }
    let n = tasks.len() as f64;
    Ok(RegretReport {
        mean: tasks.iter().map(|t| t.regret).sum::<f64>() / n,
        max: tasks.iter().map(|t| t.regret).fold(0.0, f64::max),
        mean_reward: tasks.iter().map(|t| t.achieved).sum::<f64>() / n,
        tasks,
    })
}

/// Mean oracle regret at training checkpoints, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretCurve {
    pub checkpoints: Vec<u32>,
    pub mean_regret: Vec<f64>,
    /// Checkpoint pairs where the averaged regret went up.
    pub flagged: Vec<String>,
}

fn mean_regret(world: &SimWorld, policy: &RoutePolicy, priors: &CapabilityPriorTable, tasks: &[TaskSpec], modes: &[PreferenceMode]) -> Result<f64> {
    let mut total = 0.0;
    for &m in modes {
        total += regret_report(world, RunMode::Sim, &Router::Policy { policy, priors }, tasks, m)?.mean;
    }
    Ok(total / modes.len().max(1) as f64)
}

/// Trains once per seed and records regret on the training tasks every
/// `every` epochs, starting from the untrained policy.
pub fn regret_curve(
    world: &SimWorld,
    priors: &CapabilityPriorTable,
    tasks: &[TaskSpec],
    policy_config: &PolicyConfig,
    train: &TrainConfig,
    seeds: &[u64],
    every: u32,
) -> Result<RegretCurve> {
    if seeds.is_empty() || every == 0 {
        return Err(Error::Parameter("need at least one seed and every >= 1".into()));
    }
    let mut checkpoints = vec![0];
    checkpoints.extend((1..=train.epochs).filter(|e| e % every == 0));
    let mut sums = vec![0.0; checkpoints.len()];
    let start = RoutePolicy::new(policy_config.clone());
    let r0 = mean_regret(world, &start, priors, tasks, &train.preferences)?;
    for &seed in seeds {
        sums[0] += r0;
        let mut k = 1;
        world.train_with(priors, tasks, policy_config.clone(), train, seed, |epoch, policy| {
            if epoch % every == 0 {
                sums[k] += mean_regret(world, policy, priors, tasks, &train.preferences)?;
                k += 1;
            }
            Ok(())
        })?;
    }
    let mean_regret: Vec<f64> = sums.iter().map(|s| s / seeds.len() as f64).collect();
    let flagged = checkpoints
        .windows(2)
        .zip(mean_regret.windows(2))
        .filter(|(_, r)| r[1] > r[0] + 1e-9)
        .map(|(c, r)| format!("epoch {} -> {}: {:.5} -> {:.5}", c[0], c[1], r[0], r[1]))
        .collect();
    Ok(RegretCurve {
        checkpoints,
        mean_regret,
        flagged,
    })
}

/// A full score/cost report for one set of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub suites: Vec<String>,
    pub single_models: Vec<ScoreCostRow>,
    pub routers: Vec<(PreferenceMode, ScoreCostRow)>,
    pub reference: Vec<ScoreCostRow>,
    pub best_single: String,
    pub performance_cost_reduction: Option<f64>,
    pub auto_vs_performance_reduction: Option<f64>,
    pub pareto: ParetoVerdict,
}

impl Report {
    pub fn router(&self, mode: PreferenceMode) -> Option<&ScoreCostRow> {
        self.routers.iter().find(|(m, _)| *m == mode).map(|(_, r)| r)
    }

    pub fn best_single_row(&self) -> Option<&ScoreCostRow> {
        self.single_models.iter().find(|r| r.system == self.best_single)
    }

    /// Aligned plain-text table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "config {}  seeds [{}]", self.config_hash, seeds.join(", "));
        let mut header = format!("{:<28}", "system");
        for s in &self.suites {
            let _ = write!(header, "{s:>11}");
        }
        let _ = write!(header, "{:>11}{:>11}", "average", "cost");
        let _ = writeln!(out, "{header}");
        let line = |out: &mut String, r: &ScoreCostRow| {
            let mut l = format!("{:<28}", r.system);
            for s in &r.scores {
                match s {
                    Some(v) => {
                        let _ = write!(l, "{v:>11.1}");
                    }
                    None => {
                        let _ = write!(l, "{:>11}", "-");
                    }
                }
            }
            match r.average {
                Some(v) => {
                    let _ = write!(l, "{v:>11.1}");
                }
                None => {
                    let _ = write!(l, "{:>11}", "-");
                }
            }
            let _ = writeln!(out, "{l}{:>11.3}", r.cost);
        };
        let _ = writeln!(out, "-- simulated");
        for r in &self.single_models {
            line(&mut out, r);
        }
        for (_, r) in &self.routers {
            line(&mut out, r);
        }
        let _ = writeln!(out, "-- reference");
        for r in &self.reference {
            line(&mut out, r);
        }
        if let Some(v) = self.performance_cost_reduction {
            let _ = writeln!(out, "cost reduction vs {}: {v:.2}%", self.best_single);
        }
        if let Some(v) = self.auto_vs_performance_reduction {
            let _ = writeln!(out, "cost reduction auto vs performance_priority: {v:.2}%");
        }
        let _ = writeln!(out, "pareto: {}", if self.pareto.pass { "pass" } else { "fail" });
        for v in &self.pareto.violations {
            let _ = writeln!(out, "  violation: {v}");
        }
        out
    }

    /// Writes the text and JSON forms; names carry the config hash and seeds.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let stem = format!("report-{}-s{}", &self.config_hash[..self.config_hash.len().min(12)], seeds.join("_"));
        let txt = dir.join(format!("{stem}.txt"));
        let json = dir.join(format!("{stem}.json"));
        let tmp = dir.join(format!("{stem}.txt.tmp"));
        std::fs::write(&tmp, self.render_text())?;
        std::fs::rename(&tmp, &txt)?;
        write_json_atomic(&json, self)?;
        Ok((txt, json))
    }
}

fn reference_rows(table: &ReferenceTable) -> Vec<ScoreCostRow> {
    table
        .rows
        .iter()
        .map(|r| {
            let mut row = ScoreCostRow::new(format!("ref/{}", r.system), r.scores.clone(), r.cost);
            row.average = r.average;
            row
        })
        .collect()
}

/// Evaluates every single model and the router under each preference.
pub fn build_report(
    world: &SimWorld,
    policy: &RoutePolicy,
    priors: &CapabilityPriorTable,
    suites: &[SuiteSpec],
    seeds: &[u64],
    config_hash: &str,
) -> Result<Report> {
    let mut single_models = Vec::new();
    for m in &world.fleet.models {
        single_models.push(run_suites(world, &System::SingleModel { model: m.id.clone() }, suites, seeds)?);
    }
    let mut routers = Vec::new();
    for mode in PreferenceMode::ALL {
        let row = run_suites(
            world,
            &System::Router {
                policy,
                priors,
                preference: mode,
            },
            suites,
            seeds,
        )?;
        routers.push((mode, row));
    }
    let best = single_models
        .iter()
        .max_by(|a, b| {
            a.average
                .unwrap_or(f64::MIN)
                .total_cmp(&b.average.unwrap_or(f64::MIN))
                .then_with(|| b.system.cmp(&a.system))
        })
        .ok_or_else(|| Error::EmptyResult("fleet has no models".into()))?;
    let router = |m: PreferenceMode| routers.iter().find(|(k, _)| *k == m).map(|(_, r)| r);
    let perf = router(PreferenceMode::PerformancePriority).expect("all modes evaluated");
    let auto = router(PreferenceMode::Auto).expect("all modes evaluated");
    let pareto = pareto_report(&routers.iter().map(|(m, r)| (*m, r)).collect::<Vec<_>>());
    Ok(Report {
        config_hash: config_hash.to_string(),
        seeds: seeds.to_vec(),
        suites: suites.iter().map(|s| s.name.clone()).collect(),
        best_single: best.system.clone(),
        performance_cost_reduction: cost_reduction(perf.cost, best.cost).ok(),
        auto_vs_performance_reduction: cost_reduction(auto.cost, perf.cost).ok(),
        reference: reference_rows(&ReferenceTable::bundled()),
        single_models,
        routers,
        pareto,
    })
}

/// Settings of the end-to-end reproduction pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tasks_per_suite: usize,
    pub train_tasks_per_suite: usize,
    /// Seeds the synthetic task content, independently of run seeds.
    pub data_seed: u64,
    pub discovery_trials: u32,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tasks_per_suite: 200,
            train_tasks_per_suite: 200,
            data_seed: 0,
            discovery_trials: 20,
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Training split and held-out suites, plus the lookup entries both need.
pub struct PipelineData {
    pub train_tasks: Vec<TaskSpec>,
    pub suites: Vec<SuiteSpec>,
    pub lookup: BTreeMap<String, String>,
}

pub fn pipeline_data(config: &PipelineConfig) -> PipelineData {
    let (train_suites, mut lookup) = synthetic_suites(config.train_tasks_per_suite, "train-", config.data_seed);
    let (suites, store) = synthetic_suites(config.tasks_per_suite, "", config.data_seed);
    lookup.extend(store);
    PipelineData {
        train_tasks: train_suites.into_iter().flat_map(|s| s.tasks).collect(),
        suites,
        lookup,
    }
}

/// Artifacts of one pipeline run.
pub struct PipelineRun {
    pub priors: CapabilityPriorTable,
    pub policy: RoutePolicy,
    pub data: PipelineData,
}

/// Discovery and REINFORCE training on the training split. The world's
/// lookup store is extended with the entries the data needs.
pub fn prepare(world: &mut SimWorld, config: &PipelineConfig, seed: u64) -> Result<PipelineRun> {
    let data = pipeline_data(config);
    world.extend_lookup(data.lookup.clone());
    let agents = world.discovery_agents();
    let (_, priors) = world.discover(&agents, &data.train_tasks, config.discovery_trials, seed)?;
    let policy = world.train(&priors, &data.train_tasks, config.policy.clone(), &config.train, seed)?;
    Ok(PipelineRun { priors, policy, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_reduction_examples() {
        assert!((cost_reduction(10.04, 14.65).unwrap() - 31.4676).abs() < 0.01);
        assert!((cost_reduction(6.306, 10.04).unwrap() - 37.19).abs() < 0.01);
        assert_eq!(cost_reduction(3.0, 3.0).unwrap(), 0.0);
        assert!(matches!(cost_reduction(1.0, 0.0), Err(Error::Parameter(_))));
    }

    fn row(score: f64, cost: f64) -> ScoreCostRow {
        ScoreCostRow::new("r", vec![Some(score)], cost)
    }

    #[test]
    fn pareto_examples() {
        let (c, a, p) = (row(24.2, 1.357), row(43.3, 6.306), row(70.1, 10.04));
        let v = pareto_report(&[
            (PreferenceMode::CostPriority, &c),
            (PreferenceMode::Auto, &a),
            (PreferenceMode::PerformancePriority, &p),
        ]);
        assert!(v.pass, "{v:?}");
        let (a2, p2) = (row(43.3, 10.04), row(70.1, 6.306));
        let v = pareto_report(&[
            (PreferenceMode::CostPriority, &c),
            (PreferenceMode::Auto, &a2),
            (PreferenceMode::PerformancePriority, &p2),
        ]);
        assert!(!v.pass);
        assert!(v.violations[0].contains("auto") && v.violations[0].contains("performance"));
        assert!(!pareto_report(&[(PreferenceMode::Auto, &a)]).pass);
    }

    #[test]
    fn averages_skip_missing_scores() {
        let r = ScoreCostRow::new("x", vec![Some(50.0), None, Some(20.0)], 1.0);
        assert_eq!(r.average, Some(35.0));
        assert_eq!(ScoreCostRow::new("y", vec![None], 1.0).average, None);
    }

    #[test]
    fn synthetic_suites_are_labelled_and_stable() {
        let (a, store) = synthetic_suites(20, "", 7);
        let (b, _) = synthetic_suites(20, "", 7);
        assert_eq!(a, b);
        for s in &a {
            s.validate().unwrap();
            assert_eq!(s.tasks.len(), 20);
            assert!(s.tasks.iter().all(|t| t.domain == s.domain));
        }
        let gated = a[2].tasks.iter().filter(|t| t.tool_dependency).count();
        assert_eq!(gated, 12);
        for t in a[0].tasks.iter().filter(|t| t.tool_dependency) {
            let expr = &t.metadata["tool_arg.expr"];
            assert_eq!(format_rational(&calculate(expr).unwrap()), t.validator.as_ref().unwrap().expected());
        }
        assert_eq!(store.len(), 20);
    }
}
