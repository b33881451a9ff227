//! Canonical expert-selection traces.
//!
//! A [`TraceSet`] holds, for every request, the ordered token steps of the
//! prefill and decode phases, and for each token the set of experts the gate
//! selected at every MoE layer. Layer arguments throughout the crate are MoE
//! layer indices (positions in [`ModelSpec::moe_layer_ids`]), so interleaved
//! models need no special handling downstream.

mod io;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{
    load_traces, load_traces_lenient, save_traces, CanonicalAdapter, LoadOutcome, RawRecord,
    RecordAdapter, TraceReader, TraceWriter,
};
pub use synth::{generate_synthetic, SynthParams};

/// Expert index within one MoE layer.
pub type ExpertId = u32;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: request {request:?} token {token} layer {layer}: {reason}")]
    Schema {
        line: usize,
        request: String,
        token: usize,
        layer: usize,
        reason: String,
    },
    #[error("trace header does not match the model spec: {0}")]
    ModelMismatch(String),
}

/// Static MoE model geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: usize,
    pub moe_layer_ids: Vec<usize>,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_bytes: u64,
    #[serde(default = "default_slices")]
    pub slices_per_expert: u32,
    pub activation_bytes: u64,
    pub flops_per_token_per_expert: f64,
}

fn default_slices() -> u32 {
    2
}

impl ModelSpec {
    /// Qwen3-235B-A22B geometry: 94 MoE layers, 128 experts, top-8, FP8 weights.
    pub fn qwen3() -> Self {
        let (hidden, inter) = (4096u64, 1536u64);
        Self {
            name: "qwen3".into(),
            num_layers: 94,
            moe_layer_ids: (0..94).collect(),
            num_experts: 128,
            top_k: 8,
            expert_bytes: 3 * hidden * inter,
            slices_per_expert: 2,
            activation_bytes: hidden * 2,
            flops_per_token_per_expert: (2 * 3 * hidden * inter) as f64,
        }
    }

    /// DeepSeek-V3 geometry: first three layers dense, 256 experts, top-8.
    pub fn deepseek_v3() -> Self {
        let (hidden, inter) = (7168u64, 2048u64);
        Self {
            name: "deepseek_v3".into(),
            num_layers: 61,
            moe_layer_ids: (3..61).collect(),
            num_experts: 256,
            top_k: 8,
            expert_bytes: 3 * hidden * inter,
            slices_per_expert: 2,
            activation_bytes: hidden * 2,
            flops_per_token_per_expert: (2 * 3 * hidden * inter) as f64,
        }
    }

    /// Llama-4-Maverick geometry: MoE on every other layer, 128 experts, top-1.
    pub fn llama4_maverick() -> Self {
        let (hidden, inter) = (5120u64, 8192u64);
        Self {
            name: "llama4_maverick".into(),
            num_layers: 48,
            moe_layer_ids: (1..48).step_by(2).collect(),
            num_experts: 128,
            top_k: 1,
            expert_bytes: 3 * hidden * inter,
            slices_per_expert: 2,
            activation_bytes: hidden * 2,
            flops_per_token_per_expert: (2 * 3 * hidden * inter) as f64,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "qwen3" => Some(Self::qwen3()),
            "deepseek_v3" => Some(Self::deepseek_v3()),
            "llama4_maverick" => Some(Self::llama4_maverick()),
            _ => None,
        }
    }

    /// Keeps only the first `n` MoE layers (desk-scale runs).
    pub fn truncated(mut self, n: usize) -> Self {
        self.moe_layer_ids.truncate(n);
        self
    }

    pub fn num_moe_layers(&self) -> usize {
        self.moe_layer_ids.len()
    }

    pub fn slice_bytes(&self) -> u64 {
        self.expert_bytes / self.slices_per_expert as u64
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::InvalidSpec(m));
        if self.num_experts == 0 {
            return bad("num_experts must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return bad(format!(
                "top_k {} must be in [1, num_experts={}]",
                self.top_k, self.num_experts
            ));
        }
        if self.moe_layer_ids.is_empty() {
            return bad("at least one MoE layer is required".into());
        }
        if self.moe_layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return bad("moe_layer_ids must be strictly increasing".into());
        }
        if self.moe_layer_ids.iter().any(|&l| l >= self.num_layers) {
            return bad(format!(
                "moe_layer_ids must lie in [0, {})",
                self.num_layers
            ));
        }
        if self.slices_per_expert == 0
            || !self
                .expert_bytes
                .is_multiple_of(self.slices_per_expert as u64)
        {
            return bad(format!(
                "expert_bytes {} not divisible by slices_per_expert {}",
                self.expert_bytes, self.slices_per_expert
            ));
        }
        if !(self.flops_per_token_per_expert >= 0.0) {
            return bad("flops_per_token_per_expert must be non-negative".into());
        }
        Ok(())
    }

    /// Fields that a trace must agree on to be analysed under this spec.
    pub(crate) fn check_compatible(&self, other: &ModelSpec) -> Result<(), TraceError> {
        if self.num_experts != other.num_experts
            || self.top_k != other.top_k
            || self.moe_layer_ids.len() != other.moe_layer_ids.len()
        {
            return Err(TraceError::ModelMismatch(format!(
                "expected E={} top_k={} moe_layers={}, file has E={} top_k={} moe_layers={}",
                self.num_experts,
                self.top_k,
                self.moe_layer_ids.len(),
                other.num_experts,
                other.top_k,
                other.moe_layer_ids.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Phase selector for statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseFilter {
    Prefill,
    Decode,
    #[default]
    Both,
}

impl PhaseFilter {
    pub fn admits(self, phase: Phase) -> bool {
        match self {
            PhaseFilter::Both => true,
            PhaseFilter::Prefill => phase == Phase::Prefill,
            PhaseFilter::Decode => phase == Phase::Decode,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseFilter::Prefill => "prefill",
            PhaseFilter::Decode => "decode",
            PhaseFilter::Both => "both",
        }
    }
}

impl std::str::FromStr for PhaseFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prefill" => Ok(PhaseFilter::Prefill),
            "decode" => Ok(PhaseFilter::Decode),
            "both" => Ok(PhaseFilter::Both),
            other => Err(format!("unknown phase {other:?} (prefill|decode|both)")),
        }
    }
}

/// One token's expert selections, one sorted set per MoE layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStep {
    pub phase: Phase,
    pub selections: Vec<Vec<ExpertId>>,
}

impl TokenStep {
    pub fn new(phase: Phase, mut selections: Vec<Vec<ExpertId>>) -> Self {
        for s in &mut selections {
            s.sort_unstable();
        }
        Self { phase, selections }
    }

    pub fn layer(&self, layer: usize) -> &[ExpertId] {
        &self.selections[layer]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RequestTrace {
    pub request_id: String,
    pub tokens: Vec<TokenStep>,
    pub tags: BTreeMap<String, String>,
}

impl RequestTrace {
    /// Index of the first decode token (== number of prefill tokens).
    pub fn decode_start(&self) -> usize {
        self.tokens.partition_point(|t| t.phase == Phase::Prefill)
    }

    pub fn prefill(&self) -> &[TokenStep] {
        &self.tokens[..self.decode_start()]
    }

    pub fn decode(&self) -> &[TokenStep] {
        &self.tokens[self.decode_start()..]
    }

    /// Checks one request against a model spec; errors name the offending token and layer.
    pub fn validate(&self, spec: &ModelSpec, line: usize) -> Result<(), TraceError> {
        let schema = |token: usize, layer: usize, reason: String| TraceError::Schema {
            line,
            request: self.request_id.clone(),
            token,
            layer,
            reason,
        };
        let mut seen_decode = false;
        for (t, step) in self.tokens.iter().enumerate() {
            match step.phase {
                Phase::Decode => seen_decode = true,
                Phase::Prefill if seen_decode => {
                    return Err(schema(t, 0, "prefill token after decode token".into()))
                }
                Phase::Prefill => {}
            }
            if step.selections.len() != spec.num_moe_layers() {
                return Err(schema(
                    t,
                    0,
                    format!(
                        "expected {} MoE layers, found {}",
                        spec.num_moe_layers(),
                        step.selections.len()
                    ),
                ));
            }
            for (l, sel) in step.selections.iter().enumerate() {
                if sel.len() != spec.top_k {
                    return Err(schema(
                        t,
                        l,
                        format!("expected {} experts, found {}", spec.top_k, sel.len()),
                    ));
                }
                if let Some(&e) = sel.iter().find(|&&e| e as usize >= spec.num_experts) {
                    return Err(schema(
                        t,
                        l,
                        format!("expert id {e} out of range [0, {})", spec.num_experts),
                    ));
                }
                if sel.windows(2).any(|w| w[0] == w[1]) {
                    return Err(schema(t, l, "duplicate expert id in selection".into()));
                }
            }
        }
        Ok(())
    }
}

/// Immutable collection of request traces under one model.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub model: ModelSpec,
    pub requests: Vec<RequestTrace>,
}

impl TraceSet {
    pub fn new(model: ModelSpec) -> Self {
        Self {
            model,
            requests: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        self.model.validate()?;
        for (i, r) in self.requests.iter().enumerate() {
            r.validate(&self.model, i + 2)?;
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.requests.iter().map(|r| r.tokens.len()).sum()
    }

    /// Requests whose `tags[key] == value`; the model is unchanged.
    pub fn filter_by_tag(&self, key: &str, value: &str) -> TraceSet {
        TraceSet {
            model: self.model.clone(),
            requests: self
                .requests
                .iter()
                .filter(|r| r.tags.get(key).map(String::as_str) == Some(value))
                .cloned()
                .collect(),
        }
    }
}
