//! Fleet profiling: performance matrices, performance variance, seed and
//! boundary task selection, and the capability prior table C_a(d, l).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Difficulty, Domain, ModelProfile, ProfileKind, TaskSpec};
use crate::error::{Error, Result};
use crate::execution::{BackendClient, CallKind, CallMeta, CompletionRequest, Message};
use crate::par;
use crate::reward::{TaskOutcome, Verdict};

/// Default top-quantile used for seed selection.
pub const DEFAULT_SEED_QUANTILE: f64 = 0.2;

/// Scores P(m, x) in [0, 1], dense over `models` x `tasks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub models: Vec<String>,
    pub tasks: Vec<String>,
    /// `scores[i][j]` is model `i` on task `j`.
    pub scores: Vec<Vec<f64>>,
}

impl PerformanceMatrix {
    pub fn new(models: Vec<String>, tasks: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if scores.len() != models.len() || scores.iter().any(|r| r.len() != tasks.len()) {
            return Err(Error::Parameter(format!(
                "matrix shape does not match {} models x {} tasks",
                models.len(),
                tasks.len()
            )));
        }
        if let Some(bad) = scores.iter().flatten().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Parameter(format!("score {bad} outside [0,1]")));
        }
        for ids in [&models, &tasks] {
            let mut sorted: Vec<&String> = ids.iter().collect();
            sorted.sort();
            if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::Parameter(format!("duplicate id `{}` in matrix", w[0])));
            }
        }
        Ok(PerformanceMatrix {
            models,
            tasks,
            scores,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty() || self.tasks.is_empty()
    }

    fn task_index(&self, task_id: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t == task_id)
            .ok_or_else(|| Error::lookup("task", task_id))
    }

    pub fn get(&self, model_id: &str, task_id: &str) -> Result<f64> {
        let j = self.task_index(task_id)?;
        let i = self
            .models
            .iter()
            .position(|m| m == model_id)
            .ok_or_else(|| Error::lookup("model", model_id))?;
        Ok(self.scores[i][j])
    }

    fn column_delta(&self, j: usize) -> f64 {
        let (lo, hi) = self
            .scores
            .iter()
            .map(|row| row[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
        hi - lo
    }
}

/// Spread of model scores on one task: max minus min over models.
pub fn performance_variance(matrix: &PerformanceMatrix, task_id: &str) -> Result<f64> {
    let j = matrix.task_index(task_id)?;
    if matrix.models.is_empty() {
        return Err(Error::Precondition("matrix has no models".into()));
    }
    Ok(matrix.column_delta(j))
}

/// Tasks in the top `quantile` by performance variance, sorted by
/// descending variance then task id. Selects `ceil(quantile * n)` tasks.
pub fn select_seed_tasks(matrix: &PerformanceMatrix, quantile: f64) -> Result<Vec<String>> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::Parameter(format!("quantile {quantile} outside (0,1]")));
    }
    if matrix.is_empty() {
        return Err(Error::Precondition("matrix is empty".into()));
    }
    let n = matrix.tasks.len();
    // guard against products like 0.7 * 10 = 7.000000000000001
    let take = ((quantile * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut ranked: Vec<(f64, &String)> = (0..n).map(|j| (matrix.column_delta(j), &matrix.tasks[j])).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(ranked.into_iter().take(take.min(n)).map(|(_, id)| id.clone()).collect())
}

/// Runs `trials` executions of every (model, task) pair. `executor` returns
/// the validated outcome of one trial; an error counts as a failed trial.
pub fn evaluate_fleet<F>(
    models: &[ModelProfile],
    tasks: &[TaskSpec],
    executor: F,
    trials: u32,
) -> Result<PerformanceMatrix>
where
    F: Fn(&ModelProfile, &TaskSpec, u32) -> Result<TaskOutcome> + Sync + Send,
{
    if trials == 0 {
        return Err(Error::Parameter("trials must be >= 1".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.validator.is_none()) {
        return Err(Error::Precondition(format!("task `{}` has no validator", t.id)));
    }
    let pairs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|i| (0..tasks.len()).map(move |j| (i, j)))
        .collect();
    let fractions = par::map(&pairs, |&(i, j)| {
        let (m, t) = (&models[i], &tasks[j]);
        let mut correct = 0u32;
        for trial in 0..trials {
            match executor(m, t, trial) {
                Ok(o) if o.validator_verdict == Verdict::Correct => correct += 1,
                Ok(_) => {}
                Err(e) => log::warn!("trial {trial} of `{}` on `{}` failed: {e}", m.id, t.id),
            }
        }
        correct as f64 / trials as f64
    });
    let mut scores = vec![vec![0.0; tasks.len()]; models.len()];
    for (&(i, j), f) in pairs.iter().zip(fractions) {
        scores[i][j] = f;
    }
    PerformanceMatrix::new(
        models.iter().map(|m| m.id.clone()).collect(),
        tasks.iter().map(|t| t.id.clone()).collect(),
        scores,
    )
}

/// Identifier of a single agent: a model bound to one tool.
pub fn agent_id(model_id: &str, tool: Option<&str>) -> String {
    match tool {
        Some(t) => format!("{model_id}+{t}"),
        None => model_id.to_string(),
    }
}

/// Profile standing in for a tool-equipped agent during fleet evaluation.
pub fn agent_profile(model: &ModelProfile, tool: &str) -> ModelProfile {
    ModelProfile {
        id: agent_id(&model.id, Some(tool)),
        kind: ProfileKind::Agent,
        ..model.clone()
    }
}

/// Beta posterior pseudo-counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapabilityCell {
    pub successes: f64,
    pub failures: f64,
}

impl Default for CapabilityCell {
    fn default() -> Self {
        CapabilityCell {
            successes: 1.0,
            failures: 1.0,
        }
    }
}

impl CapabilityCell {
    pub fn mean(&self) -> f64 {
        self.successes / (self.successes + self.failures)
    }

    pub fn variance(&self) -> f64 {
        let n = self.successes + self.failures;
        self.successes * self.failures / (n * n * (n + 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub agent: String,
    pub domain: Domain,
    pub level: Difficulty,
}

impl CellKey {
    pub fn new(agent: impl Into<String>, domain: Domain, level: Difficulty) -> Self {
        CellKey {
            agent: agent.into(),
            domain,
            level,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CellEntry {
    #[serde(flatten)]
    key: CellKey,
    #[serde(flatten)]
    cell: CapabilityCell,
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    version: u64,
    cells: Vec<CellEntry>,
}

/// Per-(agent, domain, level) capability posteriors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "TableDoc", into = "TableDoc")]
pub struct CapabilityPriorTable {
    pub cells: BTreeMap<CellKey, CapabilityCell>,
    pub version: u64,
}

impl From<TableDoc> for CapabilityPriorTable {
    fn from(doc: TableDoc) -> Self {
        CapabilityPriorTable {
            cells: doc.cells.into_iter().map(|e| (e.key, e.cell)).collect(),
            version: doc.version,
        }
    }
}

impl From<CapabilityPriorTable> for TableDoc {
    fn from(t: CapabilityPriorTable) -> Self {
        TableDoc {
            version: t.version,
            cells: t
                .cells
                .into_iter()
                .map(|(key, cell)| CellEntry { key, cell })
                .collect(),
        }
    }
}

/// One observed outcome for a capability cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: String,
    pub domain: Domain,
    pub level: Difficulty,
    pub score: f64,
}

impl CapabilityPriorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn estimate(&self, agent: &str, domain: &Domain, level: Difficulty) -> f64 {
        self.cell(agent, domain, level).mean()
    }

    pub fn cell(&self, agent: &str, domain: &Domain, level: Difficulty) -> CapabilityCell {
        self.cells
            .get(&CellKey::new(agent, domain.clone(), level))
            .copied()
            .unwrap_or_default()
    }

    /// Applies a batch of observations under one version bump.
    pub fn apply_batch(&mut self, batch: &[Observation]) -> Result<()> {
        if let Some(o) = batch.iter().find(|o| !(0.0..=1.0).contains(&o.score)) {
            return Err(Error::Parameter(format!("outcome score {} outside [0,1]", o.score)));
        }
        for o in batch {
            let cell = self
                .cells
                .entry(CellKey::new(o.agent.clone(), o.domain.clone(), o.level))
                .or_default();
            cell.successes += o.score;
            cell.failures += 1.0 - o.score;
        }
        self.version += 1;
        Ok(())
    }

    pub fn agents(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.cells.keys().map(|k| k.agent.as_str()).collect();
        ids.dedup();
        ids
    }

    /// Folds every matrix entry into its task's cell, one observation per
    /// entry, as a single batch.
    pub fn absorb_matrix(&mut self, matrix: &PerformanceMatrix, tasks: &[TaskSpec]) -> Result<()> {
        let by_id: BTreeMap<&str, &TaskSpec> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
        let mut batch = Vec::with_capacity(matrix.models.len() * matrix.tasks.len());
        for (i, m) in matrix.models.iter().enumerate() {
            for (j, tid) in matrix.tasks.iter().enumerate() {
                let t = by_id.get(tid.as_str()).ok_or_else(|| Error::lookup("task", tid))?;
                batch.push(Observation {
                    agent: m.clone(),
                    domain: t.domain.clone(),
                    level: t.difficulty,
                    score: matrix.scores[i][j],
                });
            }
        }
        self.apply_batch(&batch)
    }
}

/// Returns a copy of `table` with one outcome folded in.
pub fn update_capability(
    table: &CapabilityPriorTable,
    agent: &str,
    domain: &Domain,
    level: Difficulty,
    score: f64,
) -> Result<CapabilityPriorTable> {
    let mut next = table.clone();
    next.apply_batch(&[Observation {
        agent: agent.to_string(),
        domain: domain.clone(),
        level,
        score,
    }])?;
    Ok(next)
}

/// Posterior mean of the cell; 0.5 for a cell never observed.
pub fn capability_estimate(table: &CapabilityPriorTable, agent: &str, domain: &Domain, level: Difficulty) -> f64 {
    table.estimate(agent, domain, level)
}

/// One setting of the controlled-variation dimensions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariationKnobs {
    pub difficulty_delta: i8,
    #[serde(default)]
    pub target_domain: Option<Domain>,
    #[serde(default)]
    pub reasoning_depth_delta: i32,
    #[serde(default)]
    pub toggle_tool_dependency: bool,
}

impl VariationKnobs {
    pub fn validate(&self) -> Result<()> {
        if !(-2..=2).contains(&self.difficulty_delta) {
            return Err(Error::Parameter(format!(
                "difficulty_delta {} outside [-2,2]",
                self.difficulty_delta
            )));
        }
        Ok(())
    }

    /// Compact, stable rendering used in variant ids.
    pub fn signature(&self) -> String {
        format!(
            "d{:+}.r{:+}.t{}.{}",
            self.difficulty_delta,
            self.reasoning_depth_delta,
            u8::from(self.toggle_tool_dependency),
            self.target_domain.as_ref().map(|d| d.as_str()).unwrap_or("same")
        )
    }

    /// The seed with labels adjusted; text is left to the mutator.
    pub fn apply_labels(&self, seed: &TaskSpec) -> TaskSpec {
        let mut t = seed.clone();
        t.difficulty = seed.difficulty.shifted(self.difficulty_delta as i32);
        if let Some(d) = &self.target_domain {
            t.domain = d.clone();
        }
        t.reasoning_depth = (seed.reasoning_depth as i64 + self.reasoning_depth_delta as i64).max(0) as u32;
        if self.toggle_tool_dependency {
            t.tool_dependency = !seed.tool_dependency;
        }
        t.subtasks = None;
        t
    }
}

/// A task-mutation function G.
pub trait TaskMutator: Sync {
    fn mutate(&self, seed: &TaskSpec, knobs: &VariationKnobs) -> Result<TaskSpec>;
}

/// Deterministic text templates over the variation knobs.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateMutator;

impl TaskMutator for TemplateMutator {
    fn mutate(&self, seed: &TaskSpec, knobs: &VariationKnobs) -> Result<TaskSpec> {
        let mut t = knobs.apply_labels(seed);
        let mut notes = Vec::new();
        match knobs.difficulty_delta.signum() {
            1 => notes.push(format!("Harder variant (+{}).", knobs.difficulty_delta)),
            -1 => notes.push(format!("Simplified variant ({}).", knobs.difficulty_delta)),
            _ => {}
        }
        if let Some(d) = &knobs.target_domain {
            notes.push(format!("Reframe for the {d} domain."));
        }
        if knobs.reasoning_depth_delta != 0 {
            notes.push(format!("Reasoning steps required: {}.", t.reasoning_depth));
        }
        if knobs.toggle_tool_dependency {
            notes.push(if t.tool_dependency {
                "Solve using the available tools.".to_string()
            } else {
                "Solve without tools.".to_string()
            });
        }
        if !notes.is_empty() {
            t.text = format!("{}\n\n{}", seed.text, notes.join(" "));
        }
        Ok(t)
    }
}

/// Rewrites seeds through a strong backend. Best-effort: output is not
/// deterministic unless the backend is.
pub struct ModelMutator<'a> {
    pub backend: &'a dyn BackendClient,
    pub seed: u64,
}

impl TaskMutator for ModelMutator<'_> {
    fn mutate(&self, seed: &TaskSpec, knobs: &VariationKnobs) -> Result<TaskSpec> {
        let mut t = knobs.apply_labels(seed);
        let prompt = format!(
            "Rewrite the task below as a new task with difficulty {} of 5 in the {} domain, \
             needing about {} reasoning steps{}. Reply with the task text only.\n\nTask:\n{}",
            t.difficulty,
            t.domain,
            t.reasoning_depth,
            if t.tool_dependency { " and a tool call" } else { "" },
            seed.text
        );
        let req = CompletionRequest {
            messages: vec![Message::user(prompt)],
            max_tokens: Some(1024),
            temperature: 0.7,
            meta: CallMeta::new(&seed.id, 0, self.seed, CallKind::Mutate),
        };
        let resp = self
            .backend
            .complete(&req)
            .map_err(|e| Error::EmptyResult(format!("mutator backend: {e}")))?;
        let text = resp.text.trim();
        if text.is_empty() {
            return Err(Error::EmptyResult("mutator returned empty text".into()));
        }
        t.text = text.to_string();
        Ok(t)
    }
}

/// One variant per knob setting, with ids `<seed>::<signature>` and the
/// seed id and knobs recorded in metadata. Failed variants are skipped.
pub fn generate_boundary_tasks(
    seed: &TaskSpec,
    knob_grid: &[VariationKnobs],
    generator: &dyn TaskMutator,
) -> Result<Vec<TaskSpec>> {
    if knob_grid.is_empty() {
        return Err(Error::Parameter("knob grid is empty".into()));
    }
    let mut out = Vec::with_capacity(knob_grid.len());
    for knobs in knob_grid {
        let variant = knobs.validate().and_then(|_| generator.mutate(seed, knobs));
        match variant {
            Ok(mut v) => {
                v.id = format!("{}::{}", seed.id, knobs.signature());
                v.metadata.insert("boundary.seed".into(), seed.id.clone());
                v.metadata
                    .insert("boundary.knobs".into(), serde_json::to_string(knobs)?);
                out.push(v);
            }
            Err(e) => log::warn!("variant {} of `{}` skipped: {e}", knobs.signature(), seed.id),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyResult(format!("every variant of `{}` failed", seed.id)));
    }
    Ok(out)
}

/// Grid of single-knob variations used by the discover command.
pub fn default_knob_grid() -> Vec<VariationKnobs> {
    let mut grid: Vec<VariationKnobs> = [-2i8, -1, 1, 2]
        .into_iter()
        .map(|d| VariationKnobs {
            difficulty_delta: d,
            ..Default::default()
        })
        .collect();
    grid.push(VariationKnobs {
        reasoning_depth_delta: 2,
        ..Default::default()
    });
    grid.push(VariationKnobs {
        toggle_tool_dependency: true,
        ..Default::default()
    });
    grid
}

/// An agent execution record from a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub task_id: String,
    pub task_text: String,
    pub domain: Domain,
    pub difficulty: Difficulty,
    pub agent_id: String,
    #[serde(default)]
    pub tools: Vec<String>,
    /// Final outcome in [0,1]; graded outcomes are allowed.
    pub outcome: f64,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("{}", path.display())),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn import_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let recs: Vec<TrajectoryRecord> = read_jsonl(path)?;
    if let Some(r) = recs.iter().find(|r| !(0.0..=1.0).contains(&r.outcome)) {
        return Err(Error::Parse(format!("trajectory `{}`: outcome outside [0,1]", r.task_id)));
    }
    Ok(recs)
}

/// Averages trajectory outcomes per (agent, task). Every pair must be
/// covered, as a matrix has no missing entries.
pub fn matrix_from_trajectories(records: &[TrajectoryRecord]) -> Result<PerformanceMatrix> {
    let mut sums: BTreeMap<(&str, &str), (f64, u32)> = BTreeMap::new();
    let mut agents: Vec<String> = Vec::new();
    let mut tasks: Vec<String> = Vec::new();
    for r in records {
        if !agents.contains(&r.agent_id) {
            agents.push(r.agent_id.clone());
        }
        if !tasks.contains(&r.task_id) {
            tasks.push(r.task_id.clone());
        }
        let e = sums.entry((&r.agent_id, &r.task_id)).or_default();
        e.0 += r.outcome;
        e.1 += 1;
    }
    let mut scores = Vec::with_capacity(agents.len());
    for a in &agents {
        let mut row = Vec::with_capacity(tasks.len());
        for t in &tasks {
            let (s, n) = sums
                .get(&(a.as_str(), t.as_str()))
                .ok_or_else(|| Error::Precondition(format!("no trajectory for `{a}` on `{t}`")))?;
            row.push(s / *n as f64);
        }
        scores.push(row);
    }
    PerformanceMatrix::new(agents, tasks, scores)
}

pub fn observations_from_trajectories(records: &[TrajectoryRecord]) -> Vec<Observation> {
    records
        .iter()
        .map(|r| Observation {
            agent: r.agent_id.clone(),
            domain: r.domain.clone(),
            level: r.difficulty,
            score: r.outcome,
        })
        .collect()
}

pub fn read_tasks_jsonl(path: &Path) -> Result<Vec<TaskSpec>> {
    read_jsonl(path)
}

pub fn write_tasks_jsonl(path: &Path, tasks: &[TaskSpec]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for t in tasks {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.sync_all()?;
    Ok(())
}
