//! Append-only episode traces and the sinks that persist them.
//!
//! Every routing decision, backend call, tool call, validation and the final
//! reward is recorded with a dense sequence number starting at 0. Backend
//! calls carry their ledger stage so the resource ledger can be rebuilt from
//! the trace alone.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::accounting::{CallCharge, Composition, LedgerStage, ResourceLedger};
use crate::domain::{Difficulty, Domain, Paradigm, PreferenceMode};
use crate::error::{Error, Result};
use crate::policy::ComposeAction;
use crate::reward::{RewardBreakdown, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Classify {
        domain: Domain,
        difficulty: Difficulty,
        unclassified: bool,
    },
    Route {
        bucket: String,
        paradigm: Paradigm,
        probability: f64,
    },
    Compose {
        action: ComposeAction,
        utility: f64,
        explored: bool,
    },
    Decompose {
        subtasks: usize,
        fallback: bool,
    },
    Workflow {
        stages: Vec<Vec<usize>>,
    },
    Abort {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendCallEvent {
    pub call_id: String,
    pub model_id: String,
    #[serde(default)]
    pub role: Option<String>,
    pub call_index: u64,
    pub stage: usize,
    pub composition: Composition,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// True when usage came from the byte-count fallback estimator.
    pub usage_estimated: bool,
    pub cost: f64,
    pub latency: f64,
    /// Sequence number of the decision that caused this call.
    pub cause: u64,
    pub prompt_digest: String,
    pub response: String,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Decision(Decision),
    BackendCall(BackendCallEvent),
    ToolCall {
        tool: String,
        args: BTreeMap<String, String>,
        observation: String,
        error: bool,
    },
    Validation {
        target: String,
        verdict: Verdict,
        score: f64,
        #[serde(default)]
        flag: Option<String>,
    },
    Reward(RewardBreakdown),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub task_id: String,
    pub seed: u64,
    pub mode: String,
    #[serde(default)]
    pub preference: Option<PreferenceMode>,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: String,
    pub meta: TraceMeta,
    pub events: Vec<TraceEvent>,
}

impl TraceRecord {
    pub fn backend_calls(&self) -> impl Iterator<Item = &BackendCallEvent> {
        self.events.iter().filter_map(|e| match &e.kind {
            EventKind::BackendCall(c) => Some(c),
            _ => None,
        })
    }

    pub fn reward(&self) -> Option<&RewardBreakdown> {
        self.events.iter().rev().find_map(|e| match &e.kind {
            EventKind::Reward(r) => Some(r),
            _ => None,
        })
    }

    /// Rebuilds the resource ledger from backend-call events.
    pub fn replay_ledger(&self) -> ResourceLedger {
        let mut per_call = Vec::new();
        let mut stages: Vec<(usize, LedgerStage)> = Vec::new();
        for c in self.backend_calls() {
            per_call.push(CallCharge::new(c.call_id.clone(), c.cost, c.latency));
            match stages.iter_mut().find(|(s, _)| *s == c.stage) {
                Some((_, st)) => st.call_ids.push(c.call_id.clone()),
                None => stages.push((
                    c.stage,
                    LedgerStage {
                        composition: c.composition,
                        call_ids: vec![c.call_id.clone()],
                    },
                )),
            }
        }
        stages.sort_by_key(|(s, _)| *s);
        let stages: Vec<LedgerStage> = stages.into_iter().map(|(_, s)| s).collect();
        ResourceLedger::replay(&per_call, &stages)
    }

    /// Dense sequence numbers from 0 and a trailing reward event, unless the
    /// trace is a dry run (which never produces a reward).
    pub fn check(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if e.seq != i as u64 {
                return Err(Error::Contract(format!(
                    "trace {}: event {i} has seq {}",
                    self.trace_id, e.seq
                )));
            }
        }
        if !self.meta.dry_run {
            match self.events.last() {
                Some(TraceEvent { kind: EventKind::Reward(_), .. }) => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "trace {}: reward event must be last",
                        self.trace_id
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Durable destination for trace events.
pub trait TraceSink: Send + Sync {
    fn begin(&self, trace_id: &str, meta: &TraceMeta) -> Result<()>;
    fn append(&self, trace_id: &str, event: &TraceEvent) -> Result<()>;
    fn finalize(&self, trace_id: &str) -> Result<()>;
    fn get(&self, trace_id: &str) -> Result<TraceRecord>;
}

/// Builds one episode's trace, optionally streaming each event to a sink.
pub struct TraceBuilder {
    record: TraceRecord,
    next_call_index: u64,
    next_stage: usize,
    sink: Option<Arc<dyn TraceSink>>,
}

impl TraceBuilder {
    pub fn new(trace_id: impl Into<String>, meta: TraceMeta) -> Self {
        TraceBuilder {
            record: TraceRecord {
                trace_id: trace_id.into(),
                meta,
                events: Vec::new(),
            },
            next_call_index: 0,
            next_stage: 0,
            sink: None,
        }
    }

    pub fn with_sink(mut self, sink: Arc<dyn TraceSink>) -> Result<Self> {
        sink.begin(&self.record.trace_id, &self.record.meta)?;
        self.sink = Some(sink);
        Ok(self)
    }

    pub fn trace_id(&self) -> &str {
        &self.record.trace_id
    }

    pub fn push(&mut self, kind: EventKind) -> u64 {
        let seq = self.record.events.len() as u64;
        let event = TraceEvent { seq, kind };
        if let Some(sink) = &self.sink {
            if let Err(e) = sink.append(&self.record.trace_id, &event) {
                log::error!("trace {}: append failed: {e}", self.record.trace_id);
            }
        }
        self.record.events.push(event);
        seq
    }

    pub fn decision(&mut self, d: Decision) -> u64 {
        self.push(EventKind::Decision(d))
    }

    /// Reserves `n` consecutive call indices and returns the first.
    pub fn alloc_calls(&mut self, n: u64) -> u64 {
        let first = self.next_call_index;
        self.next_call_index += n;
        first
    }

    pub fn alloc_stage(&mut self) -> usize {
        let s = self.next_stage;
        self.next_stage += 1;
        s
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.record.events
    }

    pub fn finish(self) -> Result<TraceRecord> {
        if let Some(sink) = &self.sink {
            sink.finalize(&self.record.trace_id)?;
        }
        Ok(self.record)
    }
}

/// In-memory sink used by tests, simulations and the service's hot path.
#[derive(Default)]
pub struct MemoryTraceStore {
    inner: Mutex<BTreeMap<String, (TraceRecord, bool)>>,
}

impl MemoryTraceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TraceSink for MemoryTraceStore {
    fn begin(&self, trace_id: &str, meta: &TraceMeta) -> Result<()> {
        let mut g = self.inner.lock().unwrap();
        if g.contains_key(trace_id) {
            return Err(Error::Contract(format!("trace `{trace_id}` already exists")));
        }
        g.insert(
            trace_id.to_string(),
            (
                TraceRecord {
                    trace_id: trace_id.to_string(),
                    meta: meta.clone(),
                    events: Vec::new(),
                },
                false,
            ),
        );
        Ok(())
    }

    fn append(&self, trace_id: &str, event: &TraceEvent) -> Result<()> {
        let mut g = self.inner.lock().unwrap();
        let (rec, done) = g
            .get_mut(trace_id)
            .ok_or_else(|| Error::NotFound(format!("trace `{trace_id}`")))?;
        if *done {
            return Err(Error::Contract(format!("trace `{trace_id}` is finalized")));
        }
        if event.seq != rec.events.len() as u64 {
            return Err(Error::Contract(format!(
                "trace `{trace_id}`: expected seq {}, got {}",
                rec.events.len(),
                event.seq
            )));
        }
        rec.events.push(event.clone());
        Ok(())
    }

    fn finalize(&self, trace_id: &str) -> Result<()> {
        let mut g = self.inner.lock().unwrap();
        let entry = g
            .get_mut(trace_id)
            .ok_or_else(|| Error::NotFound(format!("trace `{trace_id}`")))?;
        entry.1 = true;
        Ok(())
    }

    fn get(&self, trace_id: &str) -> Result<TraceRecord> {
        self.inner
            .lock()
            .unwrap()
            .get(trace_id)
            .map(|(r, _)| r.clone())
            .ok_or_else(|| Error::NotFound(format!("trace `{trace_id}`")))
    }
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    trace_id: String,
    meta: TraceMeta,
}

/// One line-delimited JSON file per trace. Events go to `<id>.jsonl.partial`
/// and are flushed per line; finalizing renames to `<id>.jsonl`, so a
/// finished trace file is always complete.
pub struct FileTraceStore {
    dir: PathBuf,
    open: Mutex<HashMap<String, File>>,
}

impl FileTraceStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(FileTraceStore {
            dir,
            open: Mutex::new(HashMap::new()),
        })
    }

    fn final_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{}.jsonl", sanitize(id)))
    }

    fn partial_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{}.jsonl.partial", sanitize(id)))
    }

    /// Reads an unfinished trace up to its last complete line.
    pub fn recover(&self, trace_id: &str) -> Result<TraceRecord> {
        read_trace_file(&self.partial_path(trace_id), true)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn write_line<T: Serialize>(f: &mut File, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line)?;
    f.flush()?;
    Ok(())
}

fn read_trace_file(path: &Path, tolerate_torn_tail: bool) -> Result<TraceRecord> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("trace file {}", path.display())),
        _ => Error::Io(e),
    })?;
    let mut lines = BufReader::new(file).lines();
    let header: TraceHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::Parse(format!("{}: empty trace file", path.display()))),
    };
    let mut events = Vec::new();
    for line in lines {
        let line = line?;
        match serde_json::from_str::<TraceEvent>(&line) {
            Ok(e) => events.push(e),
            Err(_) if tolerate_torn_tail => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(TraceRecord {
        trace_id: header.trace_id,
        meta: header.meta,
        events,
    })
}

impl TraceSink for FileTraceStore {
    fn begin(&self, trace_id: &str, meta: &TraceMeta) -> Result<()> {
        let mut open = self.open.lock().unwrap();
        if self.final_path(trace_id).exists() || open.contains_key(trace_id) {
            return Err(Error::Contract(format!("trace `{trace_id}` already exists")));
        }
        let mut f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(self.partial_path(trace_id))?;
        write_line(
            &mut f,
            &TraceHeader {
                trace_id: trace_id.to_string(),
                meta: meta.clone(),
            },
        )?;
        open.insert(trace_id.to_string(), f);
        Ok(())
    }

    fn append(&self, trace_id: &str, event: &TraceEvent) -> Result<()> {
        let mut g = self.open.lock().unwrap();
        let f = g
            .get_mut(trace_id)
            .ok_or_else(|| Error::NotFound(format!("open trace `{trace_id}`")))?;
        write_line(f, event)
    }

    fn finalize(&self, trace_id: &str) -> Result<()> {
        let f = self
            .open
            .lock()
            .unwrap()
            .remove(trace_id)
            .ok_or_else(|| Error::NotFound(format!("open trace `{trace_id}`")))?;
        f.sync_all()?;
        drop(f);
        fs::rename(self.partial_path(trace_id), self.final_path(trace_id))?;
        Ok(())
    }

    fn get(&self, trace_id: &str) -> Result<TraceRecord> {
        read_trace_file(&self.final_path(trace_id), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_indicator, Paradigm};

    fn call(seq_stage: usize, id: &str, cost: f64, latency: f64, comp: Composition) -> EventKind {
        EventKind::BackendCall(BackendCallEvent {
            call_id: id.into(),
            model_id: "m".into(),
            role: None,
            call_index: 0,
            stage: seq_stage,
            composition: comp,
            prompt_tokens: 1,
            completion_tokens: 1,
            usage_estimated: false,
            cost,
            latency,
            cause: 0,
            prompt_digest: String::new(),
            response: "ok".into(),
            error: None,
        })
    }

    fn reward() -> EventKind {
        EventKind::Reward(crate::reward::RewardBreakdown {
            indicator: make_indicator(Paradigm::MultiAgent),
            r_task: 1.0,
            cost: 0.6,
            latency: 7.0,
            lambda_c: 0.0,
            lambda_l: 0.0,
            beta: 0.1,
            total: 1.0,
        })
    }

    fn sample(b: &mut TraceBuilder) {
        b.decision(Decision::Route {
            bucket: "math|1|auto".into(),
            paradigm: Paradigm::MultiAgent,
            probability: 0.5,
        });
        b.push(call(0, "c0", 0.1, 3.0, Composition::Parallel));
        b.push(call(0, "c1", 0.2, 5.0, Composition::Parallel));
        b.push(call(1, "c2", 0.3, 2.0, Composition::Sequential));
        b.push(reward());
    }

    #[test]
    fn replay_rebuilds_ledger() {
        let mut b = TraceBuilder::new("t", TraceMeta::default());
        sample(&mut b);
        let rec = b.finish().unwrap();
        rec.check().unwrap();
        let l = rec.replay_ledger();
        assert!((l.total_cost - 0.6).abs() < 1e-15);
        assert_eq!(l.total_latency, 7.0);
    }

    #[test]
    fn memory_store_round_trip_and_not_found() {
        let store: Arc<dyn TraceSink> = Arc::new(MemoryTraceStore::new());
        let mut b = TraceBuilder::new("x", TraceMeta::default()).with_sink(store.clone()).unwrap();
        sample(&mut b);
        let rec = b.finish().unwrap();
        assert_eq!(store.get("x").unwrap(), rec);
        assert!(matches!(store.get("nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn file_store_atomic_finalize_and_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(FileTraceStore::open(dir.path()).unwrap());
        let mut b = TraceBuilder::new("ep-1", TraceMeta::default())
            .with_sink(store.clone())
            .unwrap();
        b.decision(Decision::Abort { reason: "test".into() });
        // not yet visible as a finished trace
        assert!(matches!(store.get("ep-1"), Err(Error::NotFound(_))));
        // simulate a torn write at the tail
        {
            let mut f = OpenOptions::new()
                .append(true)
                .open(dir.path().join("ep-1.jsonl.partial"))
                .unwrap();
            f.write_all(b"{\"seq\":1,\"ty").unwrap();
        }
        let rec = store.recover("ep-1").unwrap();
        assert_eq!(rec.events.len(), 1);

        let mut b2 = TraceBuilder::new("ep-2", TraceMeta::default())
            .with_sink(store.clone())
            .unwrap();
        sample(&mut b2);
        let rec2 = b2.finish().unwrap();
        assert_eq!(store.get("ep-2").unwrap(), rec2);
        assert!(!dir.path().join("ep-2.jsonl.partial").exists());
    }

    #[test]
    fn check_rejects_gaps_and_missing_reward() {
        let mut b = TraceBuilder::new("t", TraceMeta::default());
        b.decision(Decision::Abort { reason: "x".into() });
        let mut rec = b.finish().unwrap();
        assert!(rec.check().is_err());
        rec.events.push(TraceEvent { seq: 5, kind: reward() });
        assert!(rec.check().is_err());
    }
}
