//! Per-call pricing and latency, and the per-episode resource ledger.
//!
//! Prices are dollars per million tokens, split between prompt and
//! completion. Latency is time-to-first-token plus completion tokens over
//! throughput. Within a parallel stage costs still add, but latency is the
//! slowest member.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::domain::ModelProfile;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Usage {
            prompt_tokens,
            completion_tokens,
        }
    }
}

impl Add for Usage {
    type Output = Usage;
    fn add(self, rhs: Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

const PER_MILLION: f64 = 1e6;

/// Dollars charged for one call.
pub fn call_cost(usage: Usage, profile: &ModelProfile) -> f64 {
    usage.prompt_tokens as f64 * profile.price_prompt / PER_MILLION
        + usage.completion_tokens as f64 * profile.price_completion / PER_MILLION
}

/// Modeled wall-clock seconds for one call.
pub fn call_latency(usage: Usage, profile: &ModelProfile) -> f64 {
    profile.ttft_ms / 1000.0 + usage.completion_tokens as f64 / profile.tokens_per_second
}

/// Fallback token estimate when a backend does not report usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

/// Predicted (cost, latency) of a call with the given expected usage.
pub fn predict_call(profile: &ModelProfile, expected: Usage) -> (f64, f64) {
    (call_cost(expected, profile), call_latency(expected, profile))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallCharge {
    pub call_id: String,
    pub cost: f64,
    pub latency: f64,
}

impl CallCharge {
    pub fn new(call_id: impl Into<String>, cost: f64, latency: f64) -> Self {
        CallCharge {
            call_id: call_id.into(),
            cost,
            latency,
        }
    }
}

/// One `ledger_extend` step: a group of calls and how they compose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerStage {
    pub composition: Composition,
    pub call_ids: Vec<String>,
}

/// Accumulated cost (dollars) and latency (seconds) of an episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceLedger {
    pub total_cost: f64,
    pub total_latency: f64,
    pub per_call: Vec<CallCharge>,
    pub stages: Vec<LedgerStage>,
}

impl ResourceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a stage in place. Empty `calls` is a no-op.
    pub fn extend(&mut self, calls: &[CallCharge], composition: Composition) {
        if calls.is_empty() {
            return;
        }
        let cost: f64 = calls.iter().map(|c| c.cost).sum();
        let latency = match composition {
            Composition::Sequential => calls.iter().map(|c| c.latency).sum(),
            Composition::Parallel => calls.iter().map(|c| c.latency).fold(0.0, f64::max),
        };
        self.total_cost += cost;
        self.total_latency += latency;
        self.per_call.extend(calls.iter().cloned());
        self.stages.push(LedgerStage {
            composition,
            call_ids: calls.iter().map(|c| c.call_id.clone()).collect(),
        });
    }

    /// Recomputes totals from the per-call records and stage structure.
    pub fn replay(per_call: &[CallCharge], stages: &[LedgerStage]) -> ResourceLedger {
        let mut ledger = ResourceLedger::new();
        for stage in stages {
            let calls: Vec<CallCharge> = stage
                .call_ids
                .iter()
                .filter_map(|id| per_call.iter().find(|c| &c.call_id == id).cloned())
                .collect();
            ledger.extend(&calls, stage.composition);
        }
        ledger
    }

    pub fn call_count(&self) -> usize {
        self.per_call.len()
    }
}

/// Functional form: returns a new ledger with `calls` appended as one stage.
pub fn ledger_extend(
    ledger: &ResourceLedger,
    calls: &[CallCharge],
    composition: Composition,
) -> ResourceLedger {
    let mut next = ledger.clone();
    next.extend(calls, composition);
    next
}
