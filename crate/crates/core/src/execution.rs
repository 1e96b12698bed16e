//! Runs the three paradigms against backends: a single completion, a
//! single agent's tool loop, and a multi-agent workflow with an
//! aggregating solver. Every exchange is priced, charged to the episode
//! ledger and traced.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::accounting::{call_cost, call_latency, estimate_tokens, predict_call, CallCharge, Composition, ResourceLedger, Usage};
use crate::capability::CapabilityPriorTable;
use crate::domain::{Difficulty, Domain, Paradigm, Preference, SubtaskSpec, TaskSpec, ValidatorSpec};
use crate::error::{Error, Result};
use crate::par;
use crate::policy::{
    build_workflow, classify_task, compose_step, route_decision, Bucket, Classifier, ComposeAction, ComposeTarget,
    Fleet, GroundTruth, OrchestrationAction, OrchestrationState, Role, RouteMode, RoutePolicy, Workflow,
};
use crate::reward::{task_reward, unified_reward_for, validate_with, RewardBreakdown, SubtaskOutcome, TaskOutcome, Verdict};
use crate::rng::{keyed_rng, sha256_hex};
use crate::trace::{BackendCallEvent, Decision, EventKind, TraceBuilder, TraceMeta, TraceRecord, TraceSink};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Answer,
    AgentStep,
    Subtask,
    Aggregate,
    Plan,
    Mutate,
}

/// Ground truth made available to simulated backends only. Real backends
/// never see it; it is not part of the wire request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimHints {
    pub domain: Option<Domain>,
    pub difficulty: Option<Difficulty>,
    pub expected: Option<String>,
    pub numeric: bool,
    pub tool_dependency: bool,
    pub tool: Option<String>,
    pub tool_args: BTreeMap<String, String>,
    pub tools_offered: Vec<String>,
    pub observation: Option<String>,
    pub subtasks_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallMeta {
    pub task_id: String,
    pub call_index: u64,
    pub seed: u64,
    pub kind: CallKind,
    #[serde(default)]
    pub hints: Option<SimHints>,
}

impl CallMeta {
    pub fn new(task_id: &str, call_index: u64, seed: u64, kind: CallKind) -> Self {
        CallMeta {
            task_id: task_id.to_string(),
            call_index,
            seed,
            kind,
            hints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub max_tokens: Option<u32>,
    pub temperature: f64,
    pub meta: CallMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    /// Reported usage; `None` falls back to the byte-count estimate.
    pub usage: Option<Usage>,
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    Timeout(String),
    Protocol(String),
    Refusal(String),
    Unavailable(String),
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendError::Timeout(m) => write!(f, "timeout: {m}"),
            BackendError::Protocol(m) => write!(f, "protocol error: {m}"),
            BackendError::Refusal(m) => write!(f, "refused: {m}"),
            BackendError::Unavailable(m) => write!(f, "unavailable: {m}"),
        }
    }
}

impl std::error::Error for BackendError {}

pub trait BackendClient: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> std::result::Result<CompletionResponse, BackendError>;

    /// Extra attempts after a failure.
    fn retry_budget(&self) -> u32 {
        0
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(100 << attempt.min(6))
    }
}

/// Calls `backend`, retrying per its budget with exponential backoff.
pub fn complete_with_retries(
    backend: &dyn BackendClient,
    request: &CompletionRequest,
) -> std::result::Result<CompletionResponse, BackendError> {
    let mut attempt = 0;
    loop {
        match backend.complete(request) {
            Ok(r) => return Ok(r),
            Err(BackendError::Refusal(m)) => return Err(BackendError::Refusal(m)),
            Err(e) if attempt < backend.retry_budget() => {
                log::warn!("{} attempt {} failed: {e}", backend.model_id(), attempt + 1);
                std::thread::sleep(backend.backoff(attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Chat-completions backend over HTTP.
pub struct HttpChatBackend {
    pub model_id: String,
    pub endpoint: String,
    pub model_name: String,
    pub auth_env: Option<String>,
    pub retries: u32,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(
        model_id: impl Into<String>,
        endpoint: impl Into<String>,
        model_name: impl Into<String>,
        auth_env: Option<String>,
        timeout: Duration,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpChatBackend {
            model_id: model_id.into(),
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            auth_env,
            retries: 2,
            agent,
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    refusal: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl BackendClient for HttpChatBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn retry_budget(&self) -> u32 {
        self.retries
    }

    fn complete(&self, request: &CompletionRequest) -> std::result::Result<CompletionResponse, BackendError> {
        let mut body = serde_json::json!({
            "model": self.model_name,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        if let Some(n) = request.max_tokens {
            body["max_tokens"] = n.into();
        }
        let mut req = self.agent.post(&self.endpoint);
        if let Some(var) = &self.auth_env {
            let token = std::env::var(var)
                .map_err(|_| BackendError::Unavailable(format!("environment variable {var} is not set")))?;
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let started = std::time::Instant::now();
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(t) => BackendError::Timeout(t.to_string()),
            ureq::Error::StatusCode(s) if s == 429 || s >= 500 => BackendError::Unavailable(format!("HTTP {s}")),
            ureq::Error::StatusCode(s) => BackendError::Protocol(format!("HTTP {s}")),
            other => BackendError::Unavailable(other.to_string()),
        })?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        if let Some(r) = choice.message.refusal.filter(|r| !r.is_empty()) {
            return Err(BackendError::Refusal(r));
        }
        Ok(CompletionResponse {
            text: choice.message.content.unwrap_or_default(),
            usage: parsed.usage.map(|u| Usage::new(u.prompt_tokens, u.completion_tokens)),
            elapsed_ms: Some(started.elapsed().as_secs_f64() * 1000.0),
        })
    }
}

/// Backends by model id.
#[derive(Clone, Default)]
pub struct Backends {
    map: BTreeMap<String, Arc<dyn BackendClient>>,
}

impl Backends {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, backend: Arc<dyn BackendClient>) {
        self.map.insert(backend.model_id().to_string(), backend);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn BackendClient>> {
        self.map.get(id).ok_or_else(|| Error::lookup("backend", id))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }
}

type ToolHandler = Arc<dyn Fn(&BTreeMap<String, String>) -> std::result::Result<String, String> + Send + Sync>;

#[derive(Clone)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub input_keys: Vec<String>,
    handler: ToolHandler,
}

impl ToolSpec {
    pub fn new<F>(name: &str, description: &str, input_keys: &[&str], handler: F) -> Self
    where
        F: Fn(&BTreeMap<String, String>) -> std::result::Result<String, String> + Send + Sync + 'static,
    {
        ToolSpec {
            name: name.into(),
            description: description.into(),
            input_keys: input_keys.iter().map(|k| k.to_string()).collect(),
            handler: Arc::new(handler),
        }
    }

    pub fn invoke(&self, args: &BTreeMap<String, String>) -> std::result::Result<String, String> {
        (self.handler)(args)
    }
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, ToolSpec>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// calculator, lookup over `store`, and echo.
    pub fn with_defaults(store: BTreeMap<String, String>) -> Self {
        let mut r = ToolRegistry::new();
        r.register(ToolSpec::new(
            "calculator",
            "Exact rational arithmetic over + - * / ^ and parentheses.",
            &["expr"],
            |args| {
                let expr = args.get("expr").ok_or("missing argument `expr`")?;
                calculate(expr).map(|v| format_rational(&v))
            },
        ))
        .expect("fresh registry");
        let store = Arc::new(store);
        r.register(ToolSpec::new(
            "lookup",
            "Looks up a key in the reference store.",
            &["key"],
            move |args| {
                let key = args.get("key").ok_or("missing argument `key`")?;
                store
                    .get(key.trim())
                    .cloned()
                    .ok_or_else(|| format!("no entry for `{}`", key.trim()))
            },
        ))
        .expect("fresh registry");
        r.register(ToolSpec::new("echo", "Returns its `text` argument.", &["text"], |args| {
            Ok(args.get("text").cloned().unwrap_or_default())
        }))
        .expect("fresh registry");
        r
    }

    pub fn register(&mut self, tool: ToolSpec) -> Result<()> {
        if self.tools.contains_key(&tool.name) {
            return Err(Error::Config(format!("tool `{}` registered twice", tool.name)));
        }
        self.tools.insert(tool.name.clone(), tool);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.tools.keys().cloned().collect()
    }
}

struct CalcParser<'a> {
    s: &'a [u8],
    i: usize,
}

impl CalcParser<'_> {
    fn skip_ws(&mut self) {
        while self.i < self.s.len() && self.s[self.i].is_ascii_whitespace() {
            self.i += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.i).copied()
    }

    fn expr(&mut self) -> std::result::Result<BigRational, String> {
        let mut v = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.i += 1;
            let r = self.term()?;
            v = if c == b'+' { v + r } else { v - r };
        }
        Ok(v)
    }

    fn term(&mut self) -> std::result::Result<BigRational, String> {
        let mut v = self.factor()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.i += 1;
            let r = self.factor()?;
            if c == b'*' {
                v *= r;
            } else {
                if r.is_zero() {
                    return Err("division by zero".into());
                }
                v /= r;
            }
        }
        Ok(v)
    }

    fn factor(&mut self) -> std::result::Result<BigRational, String> {
        let base = self.unary()?;
        if self.peek() == Some(b'^') {
            self.i += 1;
            let e = self.factor()?;
            if !e.is_integer() {
                return Err("exponent must be an integer".into());
            }
            let e = e.to_integer().to_i32().filter(|e| e.abs() <= 64).ok_or("exponent out of range")?;
            if e < 0 && base.is_zero() {
                return Err("division by zero".into());
            }
            return Ok(num_traits::pow::Pow::pow(&base, e));
        }
        Ok(base)
    }

    fn unary(&mut self) -> std::result::Result<BigRational, String> {
        match self.peek() {
            Some(b'-') => {
                self.i += 1;
                Ok(-self.unary()?)
            }
            Some(b'+') => {
                self.i += 1;
                self.unary()
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> std::result::Result<BigRational, String> {
        match self.peek() {
            Some(b'(') => {
                self.i += 1;
                let v = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err("expected `)`".into());
                }
                self.i += 1;
                Ok(v)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.i;
                while self.i < self.s.len() && (self.s[self.i].is_ascii_digit() || self.s[self.i] == b'.') {
                    self.i += 1;
                }
                let lit = std::str::from_utf8(&self.s[start..self.i]).expect("ascii");
                parse_decimal(lit).ok_or_else(|| format!("bad number `{lit}`"))
            }
            Some(c) => Err(format!("unexpected `{}`", c as char)),
            None => Err("unexpected end of expression".into()),
        }
    }
}

fn parse_decimal(lit: &str) -> Option<BigRational> {
    let (int, frac) = lit.split_once('.').unwrap_or((lit, ""));
    if int.is_empty() && frac.is_empty() || frac.contains('.') {
        return None;
    }
    let digits = format!("{int}{frac}");
    let num: BigInt = digits.parse().ok()?;
    let den = num_traits::pow(BigInt::from(10), frac.len());
    Some(BigRational::new(num, den))
}

/// Evaluates an arithmetic expression exactly.
pub fn calculate(expr: &str) -> std::result::Result<BigRational, String> {
    let mut p = CalcParser { s: expr.as_bytes(), i: 0 };
    let v = p.expr()?;
    if p.peek().is_some() {
        return Err(format!("trailing input at offset {}", p.i));
    }
    Ok(v)
}

/// Integers print plainly, other values as `p/q`.
pub fn format_rational(v: &BigRational) -> String {
    if v.is_integer() {
        v.to_integer().to_string()
    } else {
        format!("{}/{}", v.numer(), v.denom())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionBlock {
    pub tool: String,
    pub args: BTreeMap<String, String>,
}

/// Parses the first fenced `action` block. `Ok(None)` means the text has
/// no action block and is a final answer.
pub fn parse_action(text: &str) -> std::result::Result<Option<ActionBlock>, String> {
    let Some(start) = text.find("```action") else {
        return Ok(None);
    };
    let body_start = start + "```action".len();
    let rest = &text[body_start..];
    let end = rest.find("```").ok_or("unterminated action block")?;
    let mut tool = None;
    let mut args = BTreeMap::new();
    for line in rest[..end].lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| format!("line `{line}` is not `key: value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(format!("empty key in `{line}`"));
        }
        if k == "tool" {
            tool = Some(v.to_string());
        } else {
            args.insert(k.to_string(), v.to_string());
        }
    }
    let tool = tool.filter(|t| !t.is_empty()).ok_or("action block names no tool")?;
    Ok(Some(ActionBlock { tool, args }))
}

pub fn render_action(block: &ActionBlock) -> String {
    let mut s = format!("```action\ntool: {}\n", block.tool);
    for (k, v) in &block.args {
        s.push_str(&format!("{k}: {v}\n"));
    }
    s.push_str("```");
    s
}

/// The text after the last `Answer:` marker, or the whole reply.
pub fn extract_answer(text: &str) -> String {
    text.lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix("Answer:").map(|a| a.trim().to_string()))
        .unwrap_or_else(|| text.trim().to_string())
}

/// Result of one traced call.
#[derive(Debug, Clone)]
pub struct CallResult {
    pub call_id: String,
    pub model_id: String,
    pub text: String,
    pub ok: bool,
    pub cost: f64,
    pub latency: f64,
}

/// A call prepared for execution inside a stage.
pub struct PendingCall {
    pub model_id: String,
    pub role: Option<Role>,
    pub messages: Vec<Message>,
    pub kind: CallKind,
    pub task_key: String,
    pub hints: Option<SimHints>,
    pub max_tokens: Option<u32>,
}

/// Per-episode execution context: trace, ledger and call numbering.
pub struct Episode<'a> {
    pub task: &'a TaskSpec,
    pub seed: u64,
    pub fleet: &'a Fleet,
    pub backends: &'a Backends,
    pub trace: TraceBuilder,
    pub ledger: ResourceLedger,
    pub sim_hints: bool,
}

impl<'a> Episode<'a> {
    pub fn new(task: &'a TaskSpec, seed: u64, fleet: &'a Fleet, backends: &'a Backends, trace: TraceBuilder, sim_hints: bool) -> Self {
        Episode {
            task,
            seed,
            fleet,
            backends,
            trace,
            ledger: ResourceLedger::new(),
            sim_hints,
        }
    }

    /// Hints for the whole task, if this episode runs against simulators.
    pub fn task_hints(&self) -> Option<SimHints> {
        self.sim_hints.then(|| task_hints(self.task))
    }

    /// Runs calls as one ledger stage and traces each in order.
    pub fn run_stage(&mut self, calls: Vec<PendingCall>, composition: Composition, cause: u64) -> Vec<CallResult> {
        if calls.is_empty() {
            return Vec::new();
        }
        let first = self.trace.alloc_calls(calls.len() as u64);
        let stage = self.trace.alloc_stage();
        let seed = self.seed;
        let backends = self.backends;
        let fleet = self.fleet;
        let indexed: Vec<(u64, PendingCall)> = calls.into_iter().enumerate().map(|(i, c)| (first + i as u64, c)).collect();
        let exec = |(idx, c): &(u64, PendingCall)| {
            let req = CompletionRequest {
                messages: c.messages.clone(),
                max_tokens: c.max_tokens,
                temperature: 0.0,
                meta: CallMeta {
                    task_id: c.task_key.clone(),
                    call_index: *idx,
                    seed,
                    kind: c.kind,
                    hints: c.hints.clone(),
                },
            };
            let resp = backends
                .get(&c.model_id)
                .map_err(|e| BackendError::Unavailable(e.to_string()))
                .and_then(|b| complete_with_retries(b.as_ref(), &req));
            (req, resp)
        };
        let results = match composition {
            Composition::Parallel => par::map(&indexed, exec),
            Composition::Sequential => par::map_seq(&indexed, exec),
        };
        let mut charges = Vec::with_capacity(results.len());
        let mut out = Vec::with_capacity(results.len());
        for ((idx, c), (req, resp)) in indexed.iter().zip(results) {
            let call_id = format!("call-{idx}");
            let prompt_text: String = req.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
            let (text, usage, estimated, error) = match resp {
                Ok(r) => {
                    let estimated = r.usage.is_none();
                    let usage = r
                        .usage
                        .unwrap_or_else(|| Usage::new(estimate_tokens(&prompt_text), estimate_tokens(&r.text)));
                    (r.text, usage, estimated, None)
                }
                Err(e) => (String::new(), Usage::default(), false, Some(e.to_string())),
            };
            let (cost, latency) = match fleet.profile(&c.model_id) {
                Ok(p) if error.is_none() => (call_cost(usage, p), call_latency(usage, p)),
                _ => (0.0, 0.0),
            };
            self.trace.push(EventKind::BackendCall(BackendCallEvent {
                call_id: call_id.clone(),
                model_id: c.model_id.clone(),
                role: c.role.map(|r| r.as_str().to_string()),
                call_index: *idx,
                stage,
                composition,
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
                usage_estimated: estimated,
                cost,
                latency,
                cause,
                prompt_digest: sha256_hex(prompt_text.as_bytes()),
                response: text.clone(),
                error: error.clone(),
            }));
            charges.push(CallCharge::new(call_id.clone(), cost, latency));
            out.push(CallResult {
                call_id,
                model_id: c.model_id.clone(),
                text,
                ok: error.is_none(),
                cost,
                latency,
            });
        }
        self.ledger.extend(&charges, composition);
        out
    }

    pub fn call(&mut self, call: PendingCall, cause: u64) -> CallResult {
        self.run_stage(vec![call], Composition::Sequential, cause)
            .pop()
            .expect("one call in, one result out")
    }

    fn record_validation(&mut self, target: &str, outcome: &TaskOutcome) {
        let flag = (outcome.validator_verdict == Verdict::Invalid).then(|| "invalid_validator".to_string());
        self.trace.push(EventKind::Validation {
            target: target.to_string(),
            verdict: outcome.validator_verdict,
            score: outcome.r_final,
            flag,
        });
    }

    fn validate_final(&mut self, answer: &str) -> TaskOutcome {
        let outcome = match &self.task.validator {
            Some(v) => validate_with(v, answer),
            None if !answer.trim().is_empty() => TaskOutcome {
                r_final: 1.0,
                answer_text: answer.to_string(),
                validator_verdict: Verdict::Correct,
            },
            None => TaskOutcome::incorrect(answer),
        };
        self.record_validation("final", &outcome);
        outcome
    }
}

fn numeric_validator(v: Option<&ValidatorSpec>) -> bool {
    matches!(v, Some(ValidatorSpec::Numeric { .. }))
}

/// Simulation hints describing `task`.
pub fn task_hints(task: &TaskSpec) -> SimHints {
    let tool_args = task
        .metadata
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("tool_arg.").map(|a| (a.to_string(), v.clone())))
        .collect();
    SimHints {
        domain: Some(task.domain.clone()),
        difficulty: Some(task.difficulty),
        expected: task.validator.as_ref().map(|v| v.expected().to_string()),
        numeric: numeric_validator(task.validator.as_ref()),
        tool_dependency: task.tool_dependency,
        tool: task.metadata.get("tool").cloned(),
        tool_args,
        ..Default::default()
    }
}

fn subtask_hints(task: &TaskSpec, s: &SubtaskSpec) -> SimHints {
    SimHints {
        domain: Some(s.domain.clone().unwrap_or_else(|| task.domain.clone())),
        difficulty: Some(s.difficulty.unwrap_or(task.difficulty)),
        expected: s.validator.as_ref().map(|v| v.expected().to_string()),
        numeric: numeric_validator(s.validator.as_ref()),
        ..Default::default()
    }
}

const ANSWER_INSTRUCTIONS: &str = "Solve the task. End your reply with a line `Answer: <final answer>`.";

/// One direct completion, validated.
pub fn run_single_model(ep: &mut Episode<'_>, model_id: &str, cause: u64) -> TaskOutcome {
    let call = PendingCall {
        model_id: model_id.to_string(),
        role: Some(Role::Solver),
        messages: vec![Message::system(ANSWER_INSTRUCTIONS), Message::user(ep.task.text.clone())],
        kind: CallKind::Answer,
        task_key: ep.task.id.clone(),
        hints: ep.task_hints(),
        max_tokens: None,
    };
    let r = ep.call(call, cause);
    if !r.ok {
        let o = TaskOutcome::invalid("");
        ep.record_validation("final", &o);
        return o;
    }
    ep.validate_final(&extract_answer(&r.text))
}

fn agent_system_prompt(tools: &[&ToolSpec]) -> String {
    let mut s = String::from(
        "You may call a tool by replying with only a fenced block:\n```action\ntool: <name>\n<key>: <value>\n```\n\
         Tool results come back as `Observation:` messages. When done, reply with `Answer: <final answer>`.\nTools:\n",
    );
    for t in tools {
        s.push_str(&format!("- {} ({}): {}\n", t.name, t.input_keys.join(", "), t.description));
    }
    s
}

/// A single agent's tool loop, every step a sequential call.
pub fn run_single_agent(
    ep: &mut Episode<'_>,
    model_id: &str,
    tools: &ToolRegistry,
    allowed: &[String],
    max_steps: u32,
    cause: u64,
) -> Result<TaskOutcome> {
    if max_steps == 0 {
        return Err(Error::Parameter("max_steps must be >= 1".into()));
    }
    let offered: Vec<&ToolSpec> = allowed.iter().filter_map(|n| tools.get(n)).collect();
    let mut messages = vec![Message::system(agent_system_prompt(&offered)), Message::user(ep.task.text.clone())];
    let mut reprompted = false;
    let mut observation: Option<String> = None;
    let mut answer = String::new();
    for _ in 0..max_steps {
        let hints = ep.task_hints().map(|mut h| {
            h.tools_offered = allowed.to_vec();
            h.observation = observation.clone();
            h
        });
        let r = ep.call(
            PendingCall {
                model_id: model_id.to_string(),
                role: Some(Role::ToolOperator),
                messages: messages.clone(),
                kind: CallKind::AgentStep,
                task_key: ep.task.id.clone(),
                hints,
                max_tokens: None,
            },
            cause,
        );
        if !r.ok {
            let o = TaskOutcome::invalid("");
            ep.record_validation("final", &o);
            return Ok(o);
        }
        match parse_action(&r.text) {
            Ok(Some(block)) => {
                let obs = match offered.iter().find(|t| t.name == block.tool) {
                    Some(tool) => tool.invoke(&block.args),
                    None => Err(format!("tool `{}` is not available", block.tool)),
                };
                let (text, error) = match obs {
                    Ok(v) => (v, false),
                    Err(e) => (format!("ERROR: {e}"), true),
                };
                ep.trace.push(EventKind::ToolCall {
                    tool: block.tool.clone(),
                    args: block.args.clone(),
                    observation: text.clone(),
                    error,
                });
                messages.push(Message::assistant(r.text));
                messages.push(Message::user(format!("Observation: {text}")));
                observation = Some(text);
            }
            Ok(None) => {
                answer = extract_answer(&r.text);
                break;
            }
            Err(why) if !reprompted => {
                reprompted = true;
                messages.push(Message::assistant(r.text));
                messages.push(Message::user(format!(
                    "Your action block could not be parsed ({why}). Reply with a valid block or a final answer."
                )));
            }
            Err(_) => {
                answer = extract_answer(&r.text);
                break;
            }
        }
    }
    Ok(ep.validate_final(&answer))
}

/// The documented fallback: the whole task as one subtask.
pub fn fallback_decomposition(task: &TaskSpec) -> Vec<SubtaskSpec> {
    vec![SubtaskSpec {
        index: 1,
        description: task.text.clone(),
        depends_on: vec![],
        validator: task.validator.clone(),
        domain: None,
        difficulty: None,
    }]
}

/// Parses a numbered plan. Accepts `N. text`, `N) text`, inline
/// `(depends on 1, 2)` and standalone `N depends on M` lines.
pub fn parse_plan(text: &str) -> std::result::Result<Vec<SubtaskSpec>, String> {
    let mut subs: Vec<SubtaskSpec> = Vec::new();
    let mut extra: Vec<(usize, Vec<usize>)> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let digits: String = line.chars().take_while(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() {
            continue;
        }
        let n: usize = digits.parse().map_err(|_| format!("bad index in `{line}`"))?;
        let rest = line[digits.len()..].trim_start();
        let lower = rest.to_lowercase();
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            let r = r.trim();
            let (desc, deps) = match r.to_lowercase().find("depends on") {
                Some(pos) => {
                    let deps = parse_index_list(&r[pos + "depends on".len()..]);
                    (r[..pos].trim().trim_end_matches('(').trim().to_string(), deps)
                }
                None => (r.to_string(), vec![]),
            };
            if desc.is_empty() {
                return Err(format!("subtask {n} has no description"));
            }
            subs.push(SubtaskSpec {
                index: n,
                description: desc,
                depends_on: deps,
                validator: None,
                domain: None,
                difficulty: None,
            });
        } else if lower.starts_with("depends on") {
            extra.push((n, parse_index_list(&rest["depends on".len()..])));
        }
    }
    if subs.is_empty() {
        return Err("no numbered subtasks found".into());
    }
    for (n, deps) in extra {
        let s = subs
            .iter_mut()
            .find(|s| s.index == n)
            .ok_or_else(|| format!("dependency line for unknown subtask {n}"))?;
        for d in deps {
            if !s.depends_on.contains(&d) {
                s.depends_on.push(d);
            }
        }
    }
    crate::policy::stage_assignment(&subs).map_err(|e| e.to_string())?;
    Ok(subs)
}

fn parse_index_list(s: &str) -> Vec<usize> {
    s.split(|c: char| !c.is_ascii_digit())
        .filter(|t| !t.is_empty())
        .filter_map(|t| t.parse().ok())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub subtasks: Vec<SubtaskSpec>,
    pub fallback: bool,
}

/// Fixture decomposition when the task carries one; otherwise asks the
/// planner (one retry) and falls back to the whole task.
pub fn decompose_task(ep: &mut Episode<'_>, planner: Option<&str>, cause: u64) -> Decomposition {
    if let Some(subs) = &ep.task.subtasks {
        if !subs.is_empty() {
            return Decomposition {
                subtasks: subs.clone(),
                fallback: false,
            };
        }
    }
    if let Some(planner) = planner {
        let mut messages = vec![
            Message::system(
                "Split the task into a numbered list of subtasks, one per line as `N. description`. \
                 Mark dependencies as `(depends on M)`.",
            ),
            Message::user(ep.task.text.clone()),
        ];
        for attempt in 0..2 {
            let r = ep.call(
                PendingCall {
                    model_id: planner.to_string(),
                    role: Some(Role::Planner),
                    messages: messages.clone(),
                    kind: CallKind::Plan,
                    task_key: ep.task.id.clone(),
                    hints: None,
                    max_tokens: Some(1024),
                },
                cause,
            );
            if !r.ok {
                break;
            }
            match parse_plan(&r.text) {
                Ok(subtasks) => return Decomposition { subtasks, fallback: false },
                Err(e) if attempt == 0 => {
                    messages.push(Message::assistant(r.text));
                    messages.push(Message::user(format!("That plan could not be parsed ({e}). Try again.")));
                }
                Err(_) => {}
            }
        }
    }
    Decomposition {
        subtasks: fallback_decomposition(ep.task),
        fallback: true,
    }
}

/// Executes the workflow stage by stage, then merges subtask outputs with
/// the aggregating solver.
pub fn run_multi_agent(
    ep: &mut Episode<'_>,
    workflow: &Workflow,
    subtasks: &[SubtaskSpec],
    cause: u64,
) -> Result<(TaskOutcome, Vec<SubtaskOutcome>)> {
    if workflow.steps.len() != subtasks.len() {
        return Err(Error::Contract(format!(
            "workflow has {} steps for {} subtasks",
            workflow.steps.len(),
            subtasks.len()
        )));
    }
    let by_index: BTreeMap<usize, &SubtaskSpec> = subtasks.iter().map(|s| (s.index, s)).collect();
    let mut outputs: BTreeMap<usize, String> = BTreeMap::new();
    let mut results: BTreeMap<usize, SubtaskOutcome> = BTreeMap::new();
    for group in &workflow.parallel_groups {
        let mut calls = Vec::with_capacity(group.len());
        for &pos in group {
            let step = &workflow.steps[pos];
            let s = by_index
                .get(&step.subtask_index)
                .ok_or_else(|| Error::Contract(format!("workflow names unknown subtask {}", step.subtask_index)))?;
            let mut prompt = format!("Overall task:\n{}\n\nYour subtask ({}):\n{}", ep.task.text, s.index, s.description);
            for d in &s.depends_on {
                if let Some(o) = outputs.get(d) {
                    prompt.push_str(&format!("\n\nResult of subtask {d}:\n{o}"));
                }
            }
            calls.push(PendingCall {
                model_id: step.action.model_id.clone(),
                role: Some(step.action.role),
                messages: vec![Message::system(ANSWER_INSTRUCTIONS), Message::user(prompt)],
                kind: CallKind::Subtask,
                task_key: format!("{}#{}", ep.task.id, s.index),
                hints: ep.sim_hints.then(|| subtask_hints(ep.task, s)),
                max_tokens: None,
            });
        }
        let rs = ep.run_stage(calls, Composition::Parallel, cause);
        for (&pos, r) in group.iter().zip(rs) {
            let step = &workflow.steps[pos];
            let s = by_index[&step.subtask_index];
            let answer = extract_answer(&r.text);
            let score = if !r.ok {
                0.0
            } else {
                match &s.validator {
                    Some(v) => validate_with(v, &answer).r_final,
                    None if !answer.is_empty() => 1.0,
                    None => 0.0,
                }
            };
            ep.trace.push(EventKind::Validation {
                target: format!("subtask:{}", s.index),
                verdict: if score >= 1.0 { Verdict::Correct } else { Verdict::Incorrect },
                score,
                flag: (!r.ok).then(|| "backend_failure".to_string()),
            });
            outputs.insert(s.index, answer);
            results.insert(
                s.index,
                SubtaskOutcome {
                    index: s.index,
                    r_subtask: score,
                    model_id: step.action.model_id.clone(),
                    tools_used: step.action.tool.iter().cloned().collect(),
                },
            );
        }
    }
    let subtask_outcomes: Vec<SubtaskOutcome> = results.into_values().collect();
    let all_ok = subtask_outcomes.iter().all(|s| s.r_subtask >= 1.0);
    let mut prompt = format!("Task:\n{}\n", ep.task.text);
    for (i, o) in &outputs {
        prompt.push_str(&format!("\nSubtask {i} result:\n{o}\n"));
    }
    prompt.push_str("\nCombine the results into the final answer.");
    let hints = ep.task_hints().map(|mut h| {
        h.subtasks_ok = Some(all_ok);
        h
    });
    let r = ep.call(
        PendingCall {
            model_id: workflow.aggregator.model_id.clone(),
            role: Some(Role::Solver),
            messages: vec![Message::system(ANSWER_INSTRUCTIONS), Message::user(prompt)],
            kind: CallKind::Aggregate,
            task_key: ep.task.id.clone(),
            hints,
            max_tokens: None,
        },
        cause,
    );
    let outcome = if r.ok {
        ep.validate_final(&extract_answer(&r.text))
    } else {
        let o = TaskOutcome::invalid("");
        ep.record_validation("final", &o);
        o
    };
    Ok((outcome, subtask_outcomes))
}

/// How composition choices are made in an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ComposeMode {
    /// ε-greedy with the policy's current ε.
    Policy,
    Epsilon { epsilon: f64 },
}

/// Everything an episode needs that is shared across episodes.
pub struct Orchestrator<'a> {
    pub fleet: &'a Fleet,
    pub backends: &'a Backends,
    pub tools: &'a ToolRegistry,
    pub priors: &'a CapabilityPriorTable,
    pub policy: &'a RoutePolicy,
    pub classifier: &'a dyn Classifier,
    pub beta: f64,
    pub max_steps: u32,
    /// Use ground-truth labels and fixture decompositions, and attach
    /// simulation hints to requests.
    pub sim_mode: bool,
    /// Model that writes plans when a task has no fixture decomposition.
    pub planner: Option<String>,
    pub sink: Option<Arc<dyn TraceSink>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRequest {
    pub task: TaskSpec,
    pub preference: Preference,
    pub seed: u64,
    pub route: RouteMode,
    pub compose: ComposeMode,
    #[serde(default)]
    pub force_paradigm: Option<Paradigm>,
    pub trace_id: String,
}

/// The chosen plan, before or without execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub bucket: Bucket,
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
pub struct EpisodeOutcome {
    pub task_id: String,
    pub seed: u64,
    pub plan: Option<Plan>,
    pub outcome: TaskOutcome,
    pub subtasks: Vec<SubtaskOutcome>,
    pub reward: RewardBreakdown,
    pub ledger: ResourceLedger,
    pub trace: TraceRecord,
}

impl EpisodeOutcome {
    pub fn paradigm(&self) -> Paradigm {
        self.reward.paradigm().expect("breakdown indicator is valid")
    }
}

struct Planned {
    plan: Plan,
    decomposition: Option<Decomposition>,
    cause: u64,
}

impl Orchestrator<'_> {
    fn allowed(&self) -> [bool; 3] {
        let mut a = self.fleet.allowed_paradigms();
        if self.tools.names().iter().all(|t| !self.fleet.tools.contains(t)) {
            a[1] = false;
        }
        a
    }

    fn epsilon(&self, mode: ComposeMode) -> f64 {
        match mode {
            ComposeMode::Policy => self.policy.epsilon(),
            ComposeMode::Epsilon { epsilon } => epsilon,
        }
    }

    fn plan(&self, ep: &mut Episode<'_>, req: &EpisodeRequest, state: &mut OrchestrationState, execute: bool) -> Result<Planned> {
        let gt = GroundTruth(&req.task);
        let classifier: &dyn Classifier = if self.sim_mode { &gt } else { self.classifier };
        let class = classify_task(&req.task.text, classifier)?;
        state.task.domain = class.domain.clone();
        state.task.difficulty = class.difficulty;
        ep.trace.decision(Decision::Classify {
            domain: class.domain.clone(),
            difficulty: class.difficulty,
            unclassified: class.unclassified,
        });
        let bucket = Bucket::new(class.domain.clone(), class.difficulty, req.preference.mode);
        let (paradigm, probability) = match req.force_paradigm {
            Some(p) => (p, 1.0),
            None => route_decision(self.policy, &bucket, self.allowed(), req.route, &req.task.id)?,
        };
        let route_seq = ep.trace.decision(Decision::Route {
            bucket: bucket.key(),
            paradigm,
            probability,
        });
        state.apply(OrchestrationAction::Route { paradigm })?;

        let epsilon = self.epsilon(req.compose);
        let mut rng = keyed_rng(&[&req.seed.to_string(), "compose", &req.task.id]);
        let text = req.task.text.as_str();
        let compose = |role: Role, p: Paradigm, domain: &Domain, level: Difficulty, text: &str, rng: &mut _| {
            compose_step(
                &ComposeTarget {
                    paradigm: p,
                    role,
                    domain,
                    level,
                    text,
                },
                self.priors,
                self.fleet,
                &req.preference,
                epsilon,
                rng,
            )
        };
        let usage = self.fleet.expected_usage(text);
        let price = |id: &str| -> Result<(f64, f64)> { Ok(predict_call(self.fleet.profile(id)?, usage)) };
        let cause;
        let mut decomposition = None;
        let (composition, workflow, est_cost, est_latency) = match paradigm {
            Paradigm::SingleModel | Paradigm::SingleAgent => {
                let role = if paradigm == Paradigm::SingleModel { Role::Solver } else { Role::ToolOperator };
                let choice = compose(role, paradigm, &class.domain, class.difficulty, text, &mut rng)?;
                cause = ep.trace.decision(Decision::Compose {
                    action: choice.action.clone(),
                    utility: choice.utility,
                    explored: choice.explored,
                });
                state.apply(OrchestrationAction::Compose(choice.action.clone()))?;
                let (c, l) = price(&choice.action.model_id)?;
                let calls = if paradigm == Paradigm::SingleAgent { 2.0 } else { 1.0 };
                (vec![choice.action], None, c * calls, l * calls)
            }
            Paradigm::MultiAgent => {
                let planner = if execute { self.planner.as_deref() } else { None };
                let d = decompose_task(ep, planner, route_seq);
                ep.trace.decision(Decision::Decompose {
                    subtasks: d.subtasks.len(),
                    fallback: d.fallback,
                });
                let agg = compose(Role::Solver, paradigm, &class.domain, class.difficulty, text, &mut rng)?;
                let wf = build_workflow(
                    &d.subtasks,
                    |s| {
                        let domain = s.domain.clone().unwrap_or_else(|| class.domain.clone());
                        let level = s.difficulty.unwrap_or(class.difficulty);
                        let choice = compose(Role::Solver, paradigm, &domain, level, &s.description, &mut rng)?;
                        Ok(choice.action)
                    },
                    agg.action.clone(),
                )?;
                for step in &wf.steps {
                    state.apply(OrchestrationAction::Compose(step.action.clone()))?;
                }
                state.apply(OrchestrationAction::Compose(wf.aggregator.clone()))?;
                let mut cost = 0.0;
                let mut latency = 0.0;
                for g in &wf.parallel_groups {
                    let mut stage_max: f64 = 0.0;
                    for &pos in g {
                        let (c, l) = price(&wf.steps[pos].action.model_id)?;
                        cost += c;
                        stage_max = stage_max.max(l);
                    }
                    latency += stage_max;
                }
                let (c, l) = price(&wf.aggregator.model_id)?;
                cost += c;
                latency += l;
                cause = ep.trace.decision(Decision::Workflow {
                    stages: wf
                        .parallel_groups
                        .iter()
                        .map(|g| g.iter().map(|&p| wf.steps[p].subtask_index).collect())
                        .collect(),
                });
                let mut comp: Vec<ComposeAction> = wf.steps.iter().map(|s| s.action.clone()).collect();
                comp.push(wf.aggregator.clone());
                decomposition = Some(d);
                (comp, Some(wf), cost, latency)
            }
        };
        Ok(Planned {
            plan: Plan {
                bucket,
                paradigm,
                probability,
                composition,
                workflow,
                estimated_cost: est_cost,
                estimated_latency: est_latency,
                unclassified: class.unclassified,
            },
            decomposition,
            cause,
        })
    }

    fn start(&self, req: &EpisodeRequest, dry_run: bool) -> Result<TraceBuilder> {
        let meta = TraceMeta {
            task_id: req.task.id.clone(),
            seed: req.seed,
            mode: if self.sim_mode { "sim".into() } else { "real".into() },
            preference: Some(req.preference.mode),
            config_hash: None,
            dry_run,
        };
        let b = TraceBuilder::new(req.trace_id.clone(), meta);
        match &self.sink {
            Some(s) => b.with_sink(s.clone()),
            None => Ok(b),
        }
    }

    /// Plans the episode without calling any backend.
    pub fn dry_run(&self, req: &EpisodeRequest) -> Result<(Plan, TraceRecord)> {
        let trace = self.start(req, true)?;
        let mut ep = Episode::new(&req.task, req.seed, self.fleet, self.backends, trace, self.sim_mode);
        let mut state = OrchestrationState::new(req.task.clone(), self.priors.version);
        let planned = self.plan(&mut ep, req, &mut state, false);
        let planned = match planned {
            Ok(p) => p,
            Err(e) => {
                ep.trace.decision(Decision::Abort { reason: e.to_string() });
                ep.trace.finish()?;
                return Err(e);
            }
        };
        Ok((planned.plan, ep.trace.finish()?))
    }

    /// classify, route, compose or decompose, execute, validate, reward.
    pub fn run(&self, req: &EpisodeRequest) -> Result<EpisodeOutcome> {
        let trace = self.start(req, false)?;
        let mut ep = Episode::new(&req.task, req.seed, self.fleet, self.backends, trace, self.sim_mode);
        let mut state = OrchestrationState::new(req.task.clone(), self.priors.version);
        let planned = self.plan(&mut ep, req, &mut state, true);
        let (plan, outcome, subtasks, paradigm) = match planned {
            Ok(p) => {
                let paradigm = p.plan.paradigm;
                let (outcome, subs) = match paradigm {
                    Paradigm::SingleModel => (run_single_model(&mut ep, &p.plan.composition[0].model_id, p.cause), vec![]),
                    Paradigm::SingleAgent => {
                        let action = &p.plan.composition[0];
                        let allowed: Vec<String> = action.tool.iter().cloned().collect();
                        (
                            run_single_agent(&mut ep, &action.model_id, self.tools, &allowed, self.max_steps, p.cause)?,
                            vec![],
                        )
                    }
                    Paradigm::MultiAgent => {
                        let wf = p.plan.workflow.as_ref().expect("multi-agent plans carry a workflow");
                        let d = p.decomposition.as_ref().expect("multi-agent plans carry a decomposition");
                        run_multi_agent(&mut ep, wf, &d.subtasks, p.cause)?
                    }
                };
                (Some(p.plan), outcome, subs, paradigm)
            }
            Err(e @ Error::Composition(_)) => {
                ep.trace.decision(Decision::Abort { reason: e.to_string() });
                let p = state.paradigm.unwrap_or(Paradigm::SingleModel);
                (None, TaskOutcome::invalid(""), vec![], p)
            }
            Err(e) => return Err(e),
        };
        let r_task = if plan.is_some() {
            task_reward(paradigm, &outcome, &subtasks, self.beta)?
        } else {
            0.0
        };
        let reward = unified_reward_for(
            paradigm,
            r_task,
            ep.ledger.total_cost,
            ep.ledger.total_latency,
            req.preference.lambda_c,
            req.preference.lambda_l,
            self.beta,
        );
        state.ledger = ep.ledger.clone();
        ep.trace.push(EventKind::Reward(reward.clone()));
        let ledger = ep.ledger.clone();
        let trace = ep.trace.finish()?;
        Ok(EpisodeOutcome {
            task_id: req.task.id.clone(),
            seed: req.seed,
            plan,
            outcome,
            subtasks,
            reward,
            ledger,
            trace,
        })
    }
}

pub const DEFAULT_MAX_STEPS: u32 = 4;
