mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use fleetroute_core::domain::{Domain, Paradigm, PreferenceMode};
use fleetroute_core::policy::{utility, ComposeAction, Role};
use fleetroute_core::trace::EventKind;
use fleetroute_gateway::service::{router, DryRunResponse};
use fleetroute_gateway::{GatewayError, RouteRequest, RouteResponse, Runtime, Service};
use http_body_util::BodyExt;
use tower::ServiceExt;

const MATH: &str = "Evaluate the expression (17 + 4) * 3 - 9 and give the exact integer result.";

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

fn post(body: serde_json::Value, seed: Option<&str>) -> Request<Body> {
    let mut b = Request::post("/v1/route").header("content-type", "application/json");
    if let Some(s) = seed {
        b = b.header("x-seed", s);
    }
    b.body(Body::from(body.to_string())).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

#[tokio::test]
async fn dry_run_plans_without_backend_calls() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(common::service(dir.path())));
    let (status, body) = call(
        &app,
        post(serde_json::json!({"text": MATH, "preference": "performance_priority", "dry_run": true, "domain": "math", "difficulty": 4}), None),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let plan: DryRunResponse = serde_json::from_slice(&body).unwrap();
    assert!(plan.dry_run);
    assert_eq!(plan.bucket, "math|4|performance_priority");

    let (status, body) = call(&app, get(&format!("/v1/traces/{}", plan.trace_id))).await;
    assert_eq!(status, StatusCode::OK);
    let trace: fleetroute_core::trace::TraceRecord = serde_json::from_slice(&body).unwrap();
    assert!(trace.meta.dry_run);
    assert_eq!(trace.backend_calls().count(), 0);
    assert!(!trace.events.iter().any(|e| matches!(e.kind, EventKind::ToolCall { .. })));
}

#[test]
fn dry_run_composition_maximises_utility() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::service(dir.path());
    let fleet = svc.runtime.fleet().clone();
    let math = Domain::math();
    for mode in PreferenceMode::ALL {
        for level in 1..=5u8 {
            let req = RouteRequest {
                text: MATH.into(),
                preference: Some(mode),
                dry_run: true,
                seed: Some(0),
                domain: Some(math.clone()),
                difficulty: Some(level),
                expected: None,
            };
            let RouteResponse::DryRun(plan) = svc.handle_route(&req).unwrap() else {
                panic!("dry run expected");
            };
            let candidates: Vec<ComposeAction> = match plan.paradigm {
                Paradigm::SingleModel => fleet
                    .models
                    .iter()
                    .map(|m| ComposeAction { role: Role::Solver, model_id: m.id.clone(), tool: None })
                    .collect(),
                Paradigm::SingleAgent => fleet
                    .models
                    .iter()
                    .flat_map(|m| {
                        fleet.tools.iter().map(move |t| ComposeAction {
                            role: Role::ToolOperator,
                            model_id: m.id.clone(),
                            tool: Some(t.clone()),
                        })
                    })
                    .collect(),
                Paradigm::MultiAgent => continue,
            };
            let pref = svc.runtime.loaded.preferences.preference(mode);
            let lvl = fleetroute_core::domain::Difficulty::new(level).unwrap();
            let score = |a: &ComposeAction| utility(a, &math, lvl, MATH, &svc.priors, &fleet, &pref).unwrap();
            let best = candidates.iter().map(score).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(score(&plan.composition[0]), best, "{mode:?} level {level}: {:?}", plan.composition);
        }
    }
}

#[tokio::test]
async fn empty_text_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(common::service(dir.path())));
    let (status, body) = call(&app, post(serde_json::json!({"text": "   "}), None)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("empty"));
    let (status, _) = call(&app, post(serde_json::json!({"text": MATH, "colour": 1}), None)).await;
    assert!(status.is_client_error());
    let (status, _) = call(&app, post(serde_json::json!({"text": MATH}), Some("abc"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn same_request_and_seed_give_identical_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(common::service(dir.path())));
    let body = serde_json::json!({"text": MATH, "preference": "auto", "expected": "54"});
    let (s1, b1) = call(&app, post(body.clone(), Some("42"))).await;
    let (s2, b2) = call(&app, post(body.clone(), Some("42"))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK), "{}", String::from_utf8_lossy(&b1));
    assert_eq!(b1, b2);
    let run: fleetroute_gateway::service::RunResponse = serde_json::from_slice(&b1).unwrap();
    assert!(run.calls >= 1);
    assert!(run.trace_id.ends_with("-42"));

    let (status, body) = call(&app, get(&format!("/v1/traces/{}", run.trace_id))).await;
    assert_eq!(status, StatusCode::OK);
    let trace: fleetroute_core::trace::TraceRecord = serde_json::from_slice(&body).unwrap();
    trace.check().unwrap();
    assert_eq!(trace.backend_calls().count(), run.calls);
    let ledger = trace.replay_ledger();
    assert_eq!(ledger.total_cost, run.cost);
    assert_eq!(ledger.total_latency, run.latency);
}

#[tokio::test]
async fn unknown_trace_is_not_found_and_health_is_ok() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(common::service(dir.path())));
    let (status, _) = call(&app, get("/v1/traces/nope-123")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = call(&app, get("/healthz")).await;
    assert_eq!((status, body.as_slice()), (StatusCode::OK, b"ok".as_slice()));
}

#[test]
fn artifacts_from_another_config_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::prepared(dir.path());
    let changed = common::SMALL.replace("eval_seeds = [1, 2]", "eval_seeds = [1, 2, 3]");
    std::fs::write(&path, changed).unwrap();
    let err = Service::new(Runtime::load(&path).unwrap()).err().expect("hash mismatch must be refused");
    assert!(matches!(err, GatewayError::Core(fleetroute_core::Error::Mismatch(_))), "{err}");
    assert!(err.to_string().contains("hashes to"), "{err}");
}

#[test]
fn missing_artifacts_name_the_remedy() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::write_config(dir.path(), common::SMALL);
    let err = Service::new(Runtime::load(&path).unwrap()).err().unwrap();
    assert!(matches!(err, GatewayError::MissingArtifact { .. }));
    assert!(err.to_string().contains("fleetroute discover"), "{err}");
    let rt = Runtime::load(&path).unwrap();
    let err = fleetroute_gateway::commands::eval(&rt, 0, None).unwrap_err();
    assert!(err.to_string().contains("run `fleetroute discover"), "{err}");
}

fn numbered_request(i: usize) -> RouteRequest {
    RouteRequest {
        text: format!("Evaluate the expression {i} * 7 + 3 and give the exact integer result."),
        preference: Some(PreferenceMode::ALL[i % 3]),
        dry_run: i % 4 == 0,
        seed: Some(i as u64),
        domain: None,
        difficulty: None,
        expected: Some((i * 7 + 3).to_string()),
    }
}

fn trace_id_of(r: &RouteResponse) -> &str {
    match r {
        RouteResponse::DryRun(r) => &r.trace_id,
        RouteResponse::Run(r) => &r.trace_id,
    }
}

#[test]
fn concurrent_requests_keep_traces_dense_and_separate() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(common::service(dir.path()));
    let handles: Vec<_> = (0..16)
        .map(|i| {
            let svc = svc.clone();
            std::thread::spawn(move || svc.handle_route(&numbered_request(i)).unwrap())
        })
        .collect();
    let responses: Vec<RouteResponse> = handles.into_iter().map(|h| h.join().unwrap()).collect();

    // the same requests one at a time against a fresh trace store
    let other = tempfile::tempdir().unwrap();
    let path = common::write_config(other.path(), common::SMALL);
    let serial = Service::with_artifacts(Runtime::load(&path).unwrap(), svc.priors.clone(), svc.policy.clone()).unwrap();
    for (i, r) in responses.iter().enumerate() {
        let id = trace_id_of(r);
        let trace = svc.get_trace(id).unwrap();
        trace.check().unwrap();
        let again = serial.handle_route(&numbered_request(i)).unwrap();
        assert_eq!(&again, r);
        assert_eq!(serial.get_trace(id).unwrap(), trace);
    }
}

struct Redact;

impl fleetroute_gateway::ResponseFilter for Redact {
    fn filter(&self, task: &fleetroute_core::domain::TaskSpec, answer: String) -> String {
        format!("[{}] {}", task.domain, answer.len())
    }
}

#[test]
fn response_filter_rewrites_answers_only() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::service(dir.path()).with_filter(Arc::new(Redact));
    let mut req = RouteRequest {
        text: MATH.into(),
        preference: Some(PreferenceMode::Auto),
        dry_run: false,
        seed: Some(3),
        domain: None,
        difficulty: None,
        expected: Some("54".into()),
    };
    let RouteResponse::Run(run) = svc.handle_route(&req).unwrap() else { panic!("expected a run response") };
    assert!(run.answer.starts_with("[math] "), "{}", run.answer);
    assert!(run.correct.is_some());
    req.dry_run = true;
    assert!(matches!(svc.handle_route(&req).unwrap(), RouteResponse::DryRun(_)));
}
