//! Request handling and the HTTP surface.

use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fleetroute_core::capability::CapabilityPriorTable;
use fleetroute_core::domain::{Difficulty, Domain, Paradigm, PreferenceMode, TaskSpec, ValidatorSpec};
use fleetroute_core::eval::RunMode;
use fleetroute_core::execution::{ComposeMode, EpisodeRequest};
use fleetroute_core::policy::{classify_task, Classifier, ComposeAction, KeywordClassifier, RouteMode, RoutePolicy, Workflow};
use fleetroute_core::rng::sha256_hex;
use fleetroute_core::trace::{FileTraceStore, TraceRecord, TraceSink};
use serde::{Deserialize, Serialize};

use crate::error::GatewayError;
use crate::runtime::Runtime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteRequest {
    pub text: String,
    #[serde(default)]
    pub preference: Option<PreferenceMode>,
    #[serde(default)]
    pub dry_run: bool,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Labels; classified from the text when absent.
    #[serde(default)]
    pub domain: Option<Domain>,
    #[serde(default)]
    pub difficulty: Option<u8>,
    /// Reference answer, used to validate the response.
    #[serde(default)]
    pub expected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DryRunResponse {
    pub trace_id: String,
    pub dry_run: bool,
    pub task_id: String,
    pub bucket: String,
    pub paradigm: Paradigm,
    pub probability: f64,
    pub composition: Vec<ComposeAction>,
    #[serde(default)]
    pub workflow: Option<Workflow>,
    pub estimated_cost: f64,
    pub estimated_latency: f64,
    pub unclassified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResponse {
    pub trace_id: String,
    pub dry_run: bool,
    pub task_id: String,
    pub paradigm: Paradigm,
    pub composition: Vec<ComposeAction>,
    pub answer: String,
    #[serde(default)]
    pub correct: Option<bool>,
    pub cost: f64,
    pub latency: f64,
    pub calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RouteResponse {
    DryRun(DryRunResponse),
    Run(RunResponse),
}

/// Post-processes answers before they leave the gateway. None is installed
/// by default; deployments can plug in moderation or redaction here.
pub trait ResponseFilter: Send + Sync {
    fn filter(&self, task: &TaskSpec, answer: String) -> String;
}

/// A runtime plus immutable prior and policy snapshots.
pub struct Service {
    pub runtime: Runtime,
    pub priors: CapabilityPriorTable,
    pub policy: RoutePolicy,
    pub store: Arc<FileTraceStore>,
    filter: Option<Arc<dyn ResponseFilter>>,
}

impl Service {
    /// Loads the pinned artifacts; refuses ones made under another config.
    pub fn new(runtime: Runtime) -> Result<Self, GatewayError> {
        let priors = runtime.load_priors()?;
        let policy = runtime.load_policy()?;
        Self::with_artifacts(runtime, priors, policy)
    }

    pub fn with_artifacts(runtime: Runtime, priors: CapabilityPriorTable, policy: RoutePolicy) -> Result<Self, GatewayError> {
        let store = Arc::new(FileTraceStore::open(runtime.loaded.trace_dir())?);
        Ok(Service {
            runtime,
            priors,
            policy,
            store,
            filter: None,
        })
    }

    pub fn with_filter(mut self, filter: Arc<dyn ResponseFilter>) -> Self {
        self.filter = Some(filter);
        self
    }

    fn task(&self, req: &RouteRequest) -> Result<TaskSpec, GatewayError> {
        if req.text.trim().is_empty() {
            return Err(GatewayError::BadRequest("task text is empty".into()));
        }
        let class = classify_task(&req.text, &KeywordClassifier as &dyn Classifier)?;
        let domain = req.domain.clone().unwrap_or(class.domain);
        let difficulty = match req.difficulty {
            Some(l) => Difficulty::new(l).map_err(|e| GatewayError::BadRequest(e.to_string()))?,
            None => class.difficulty,
        };
        let id = format!("req-{}", &sha256_hex(req.text.as_bytes())[..12]);
        let mut task = TaskSpec::new(id, req.text.clone(), domain, difficulty);
        task.validator = req.expected.clone().map(|e| ValidatorSpec::Exact { expected: e });
        Ok(task)
    }

    /// Routes one request. A dry run plans without calling any backend.
    pub fn handle_route(&self, req: &RouteRequest) -> Result<RouteResponse, GatewayError> {
        let task = self.task(req)?;
        let mode = req.preference.unwrap_or(self.runtime.loaded.config.default_preference);
        let seed = req.seed.unwrap_or(0);
        let kind = if req.dry_run { "plan" } else { "run" };
        let mut trace_id = format!("{kind}-{}-{}-{seed}", mode.as_str(), task.id);
        // A repeated sim request reproduces its trace exactly, so the stored
        // copy stands. Real backends are not reproducible and get a new id.
        let mut record = true;
        if self.store.get(&trace_id).is_ok() {
            match self.runtime.mode() {
                RunMode::Sim => record = false,
                RunMode::Real => {
                    let base = trace_id.clone();
                    let mut n = 1;
                    while self.store.get(&trace_id).is_ok() {
                        trace_id = format!("{base}-r{n}");
                        n += 1;
                    }
                }
            }
        }
        let request = EpisodeRequest {
            task: task.clone(),
            preference: self.runtime.loaded.preferences.preference(mode),
            seed,
            route: RouteMode::Greedy,
            compose: ComposeMode::Epsilon { epsilon: 0.0 },
            force_paradigm: None,
            trace_id: trace_id.clone(),
        };
        let sink = record.then(|| self.store.clone() as Arc<dyn TraceSink>);
        let orch = self.runtime.orchestrator(&self.priors, &self.policy, sink);
        if req.dry_run {
            let (plan, _) = orch.dry_run(&request).map_err(|e| match e {
                fleetroute_core::Error::Composition(reason) => GatewayError::NoEligibleBackend {
                    reason,
                    trace_id: trace_id.clone(),
                },
                e => e.into(),
            })?;
            return Ok(RouteResponse::DryRun(DryRunResponse {
                trace_id,
                dry_run: true,
                task_id: task.id,
                bucket: plan.bucket.key(),
                paradigm: plan.paradigm,
                probability: plan.probability,
                composition: plan.composition,
                workflow: plan.workflow,
                estimated_cost: plan.estimated_cost,
                estimated_latency: plan.estimated_latency,
                unclassified: plan.unclassified,
            }));
        }
        let out = orch.run(&request)?;
        let Some(plan) = out.plan.as_ref() else {
            let reason = out
                .trace
                .events
                .iter()
                .find_map(|e| match &e.kind {
                    fleetroute_core::trace::EventKind::Decision(fleetroute_core::trace::Decision::Abort { reason }) => {
                        Some(reason.clone())
                    }
                    _ => None,
                })
                .unwrap_or_else(|| "composition failed".into());
            return Err(GatewayError::NoEligibleBackend { reason, trace_id });
        };
        let calls: Vec<_> = out.trace.backend_calls().collect();
        if !calls.is_empty() && calls.iter().all(|c| c.error.is_some()) {
            let reason = calls[0].error.clone().unwrap_or_default();
            return Err(GatewayError::Upstream { reason, trace_id });
        }
        let answer = match &self.filter {
            Some(f) => f.filter(&task, out.outcome.answer_text.clone()),
            None => out.outcome.answer_text.clone(),
        };
        Ok(RouteResponse::Run(RunResponse {
            trace_id,
            dry_run: false,
            task_id: task.id,
            paradigm: plan.paradigm,
            composition: plan.composition.clone(),
            answer,
            correct: task.validator.as_ref().map(|_| out.outcome.r_final >= 1.0),
            cost: out.ledger.total_cost,
            latency: out.ledger.total_latency,
            calls: calls.len(),
        }))
    }

    pub fn get_trace(&self, trace_id: &str) -> Result<TraceRecord, GatewayError> {
        Ok(self.store.get(trace_id)?)
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace_id: Option<String>,
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            error: self.to_string(),
            trace_id: self.trace_id().map(str::to_string),
        };
        (status, Json(body)).into_response()
    }
}

async fn route(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Json(mut req): Json<RouteRequest>,
) -> Result<Json<RouteResponse>, GatewayError> {
    if req.seed.is_none() {
        if let Some(v) = headers.get("x-seed") {
            let s = v.to_str().ok().and_then(|s| s.parse().ok());
            req.seed = Some(s.ok_or_else(|| GatewayError::BadRequest("x-seed must be an integer".into()))?);
        }
    }
    let out = tokio::task::spawn_blocking(move || svc.handle_route(&req))
        .await
        .map_err(|e| GatewayError::Io(std::io::Error::other(e.to_string())))??;
    Ok(Json(out))
}

async fn trace(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Json<TraceRecord>, GatewayError> {
    Ok(Json(svc.get_trace(&id)?))
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/route", post(route))
        .route("/v1/traces/{id}", get(trace))
        .route("/healthz", get(healthz))
        .with_state(service)
}

pub async fn serve(service: Arc<Service>, listen: &str) -> Result<(), GatewayError> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
