//! The work behind each CLI subcommand. Every command returns a JSON
//! summary for standard output.

use std::path::Path;
use std::sync::Arc;

use fleetroute_core::capability::{
    import_trajectories, matrix_from_trajectories, observations_from_trajectories, select_seed_tasks, CapabilityPriorTable,
    DEFAULT_SEED_QUANTILE,
};
use fleetroute_core::domain::PreferenceMode;
use fleetroute_core::eval::{build_report, regret_report, Router, RunMode};
use fleetroute_core::execution::ComposeMode;
use fleetroute_core::policy::RouteMode;
use fleetroute_core::rng::derive_seed;
use fleetroute_core::sim::{EpisodeResult, trace_id};
use fleetroute_core::trace::{FileTraceStore, TraceSink};
use serde_json::{json, Value};

use crate::error::GatewayError;
use crate::runtime::Runtime;
use crate::service::{RouteRequest, Service};

/// Profiles the fleet (sim) or imports recorded trajectories, then writes
/// the pinned prior store.
pub fn discover(rt: &Runtime, seed: u64, trials: Option<u32>, trajectories: Option<&Path>) -> Result<Value, GatewayError> {
    let path = rt.loaded.prior_store();
    if let Some(file) = trajectories {
        let records = import_trajectories(file)?;
        let matrix = matrix_from_trajectories(&records)?;
        let mut priors = CapabilityPriorTable::new();
        priors.apply_batch(&observations_from_trajectories(&records))?;
        rt.save_priors(&priors)?;
        return Ok(json!({
            "command": "discover",
            "source": "trajectories",
            "records": records.len(),
            "agents": matrix.models.len(),
            "tasks": matrix.tasks.len(),
            "cells": priors.cells.len(),
            "prior_store": path,
            "config_hash": rt.loaded.hash,
        }));
    }
    if rt.mode() == RunMode::Real {
        return Err(fleetroute_core::Error::UnsupportedMode(
            "live profiling is not run from the CLI in real mode; pass --trajectories <file.jsonl>".into(),
        )
        .into());
    }
    let world = rt.world()?;
    let data = rt.data()?;
    let trials = trials.unwrap_or(rt.loaded.config.pipeline.discovery_trials);
    let agents = world.discovery_agents();
    let (matrix, priors) = world.discover(&agents, &data.train_tasks, trials, seed)?;
    let seeds = select_seed_tasks(&matrix, DEFAULT_SEED_QUANTILE)?;
    rt.save_priors(&priors)?;
    Ok(json!({
        "command": "discover",
        "source": "simulation",
        "seed": seed,
        "trials": trials,
        "agents": agents.len(),
        "tasks": matrix.tasks.len(),
        "boundary_seed_tasks": seeds.len(),
        "cells": priors.cells.len(),
        "prior_store": path,
        "config_hash": rt.loaded.hash,
    }))
}

/// REINFORCE training in simulation; writes the pinned checkpoint.
pub fn train(rt: &Runtime, seed: u64, epochs: Option<u32>) -> Result<Value, GatewayError> {
    let world = rt.world()?;
    let priors = rt.load_priors()?;
    let mut cfg = rt.loaded.config.pipeline.train.clone();
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let policy = world.train(&priors, &rt.data()?.train_tasks, rt.loaded.config.pipeline.policy.clone(), &cfg, seed)?;
    rt.save_policy(&policy)?;
    let greedy: serde_json::Map<String, Value> = policy
        .weights
        .iter()
        .map(|(k, w)| {
            let best = (0..3).fold(0, |b, i| if w[i] > w[b] { i } else { b });
            (k.clone(), json!(fleetroute_core::domain::Paradigm::ALL[best]))
        })
        .collect();
    Ok(json!({
        "command": "train",
        "seed": seed,
        "epochs": cfg.epochs,
        "updates": policy.step_count,
        "buckets": policy.weights.len(),
        "greedy": greedy,
        "policy_checkpoint": rt.loaded.policy_checkpoint(),
        "config_hash": rt.loaded.hash,
    }))
}

/// The score/cost report over the held-out suites, written as text and JSON.
pub fn eval(rt: &Runtime, seed: u64, seeds: Option<Vec<u64>>) -> Result<Value, GatewayError> {
    let world = rt.world()?;
    let priors = rt.load_priors()?;
    let policy = rt.load_policy()?;
    let seeds: Vec<u64> = seeds.unwrap_or_else(|| rt.loaded.config.eval_seeds.iter().map(|s| s + seed).collect());
    let data = rt.data()?;
    let report = build_report(world, &policy, &priors, &data.suites, &seeds, &rt.loaded.hash)?;
    let (txt, json_path) = report.write(&rt.loaded.report_dir())?;
    let mut regret = serde_json::Map::new();
    let eval_tasks: Vec<_> = data.suites.iter().flat_map(|s| s.tasks.iter().cloned()).collect();
    for mode in PreferenceMode::ALL {
        let r = regret_report(world, RunMode::Sim, &Router::Policy { policy: &policy, priors: &priors }, &eval_tasks, mode)?;
        regret.insert(mode.as_str().into(), json!({"mean": r.mean, "max": r.max}));
    }
    let rows: Vec<Value> = report
        .single_models
        .iter()
        .chain(report.routers.iter().map(|(_, r)| r))
        .map(|r| json!({"system": r.system, "scores": r.scores, "average": r.average, "cost": r.cost}))
        .collect();
    Ok(json!({
        "command": "eval",
        "seeds": seeds,
        "rows": rows,
        "best_single": report.best_single,
        "performance_cost_reduction": report.performance_cost_reduction,
        "auto_vs_performance_reduction": report.auto_vs_performance_reduction,
        "pareto": report.pareto,
        "regret": regret,
        "report_text": txt,
        "report_json": json_path,
        "config_hash": rt.loaded.hash,
    }))
}

/// Runs `count` episodes over the evaluation suites, writing each trace.
pub fn simulate(rt: &Runtime, seed: u64, count: usize, mode: Option<PreferenceMode>) -> Result<Value, GatewayError> {
    let world = rt.world()?;
    let priors = rt.load_priors()?;
    let policy = rt.load_policy()?;
    let mode = mode.unwrap_or(rt.loaded.config.default_preference);
    let store = Arc::new(FileTraceStore::open(rt.loaded.trace_dir())?);
    let recording = rt.orchestrator(&priors, &policy, Some(store.clone() as Arc<dyn TraceSink>));
    // traces from an earlier run with the same seed are already on disk
    let replaying = rt.orchestrator(&priors, &policy, None);
    let suites = &rt.data()?.suites;
    let pref = world.preference(mode);
    let mut results: Vec<EpisodeResult> = Vec::with_capacity(count);
    let (mut cost, mut latency, mut correct) = (0.0, 0.0, 0usize);
    for i in 0..count {
        let suite = &suites[i % suites.len()];
        let task = &suite.tasks[(i / suites.len()) % suite.tasks.len()];
        let ep_seed = derive_seed(&[&seed.to_string(), "simulate", &task.id]);
        let id = trace_id(mode.as_str(), &task.id, ep_seed);
        let orch = if store.get(&id).is_ok() { &replaying } else { &recording };
        let out = orch.run(&fleetroute_core::execution::EpisodeRequest {
            task: task.clone(),
            preference: pref.clone(),
            seed: ep_seed,
            route: RouteMode::Greedy,
            compose: ComposeMode::Epsilon { epsilon: 0.0 },
            force_paradigm: None,
            trace_id: id,
        })?;
        cost += out.ledger.total_cost;
        latency += out.ledger.total_latency;
        correct += (out.outcome.r_final >= 1.0) as usize;
        results.push(EpisodeResult::from(&out));
    }
    Ok(json!({
        "command": "simulate",
        "seed": seed,
        "preference": mode,
        "episodes": results,
        "correct": correct,
        "total_cost": cost,
        "total_latency": latency,
        "trace_dir": rt.loaded.trace_dir(),
    }))
}

/// One-shot routing of a task given on the command line.
pub fn route(rt: Runtime, seed: u64, request: RouteRequest) -> Result<Value, GatewayError> {
    let svc = Service::new(rt)?;
    let req = RouteRequest {
        seed: Some(request.seed.unwrap_or(seed)),
        ..request
    };
    Ok(serde_json::to_value(svc.handle_route(&req)?).expect("response serializes"))
}
