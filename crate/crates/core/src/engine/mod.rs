//! Decode-stage MoE serving simulation.
//!
//! A run replays the decode phase of a fixed batch of requests. Every decode
//! step visits each MoE layer once; that (step, layer) pair is one kernel.
//! For every kernel the engine builds per-expert request counts, asks the
//! strategy for an allocation plan, times the plan on the mesh, and, when
//! prediction is enabled, updates the predictor and duplicate caches before
//! the next kernel of the same layer.

mod kernel;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kernel::{
    active_per_die, kernel_requests, remote_reads_per_die, simulate_kernel, Batch, KernelResult,
};
pub use report::{
    compare, kernels_csv, ComparisonRow, ComparisonTable, DramBreakdown, PredictorStats, RunReport,
    Totals,
};

use crate::allocator::{allocate, token_local_allocate, CostParams, TokenHomes};
use crate::fabric::{FabricError, MeshTopology};
use crate::placement::{DuplicationState, ExpertDistributionTable, PlacementError};
use crate::predictor::{
    apply_admissions, duplication_decisions, predict_next, seed_from_prefill, DieExperts,
    OnlineHeatmapState, PredictionTable, PredictorConfig, PredictorMode,
};
use crate::trace::{TraceError, TraceSet};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("trace does not match the configured model: {0}")]
    Mismatch(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Each token is computed on its home die; weights are fetched as needed.
    Base,
    /// Placement-aware allocation, no duplication.
    AlloOnly,
    /// Token-local computation plus predicted duplication.
    PredOnly,
    /// Placement-aware allocation plus predicted duplication.
    AlloPred,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Base,
        Strategy::AlloOnly,
        Strategy::PredOnly,
        Strategy::AlloPred,
    ];

    pub fn uses_allocator(self) -> bool {
        matches!(self, Strategy::AlloOnly | Strategy::AlloPred)
    }

    pub fn uses_predictor(self) -> bool {
        matches!(self, Strategy::PredOnly | Strategy::AlloPred)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::AlloOnly => "allo_only",
            Strategy::PredOnly => "pred_only",
            Strategy::AlloPred => "allo_pred",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s.replace('-', "_"))
            .ok_or_else(|| {
                EngineError::Config(format!(
                    "unknown strategy {s:?} (expected base, allo_only, pred_only or allo_pred)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub topology: MeshTopology,
    pub model: crate::trace::ModelSpec,
    pub strategy: Strategy,
    pub batch_size: usize,
    /// Stop after this many decode steps (all of them when `None`).
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub cost: CostParams,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub token_homes: TokenHomes,
    /// Starting expert placement; round-robin homes when `None`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<ExpertDistributionTable>,
    /// Recorded with every report; the simulation itself is deterministic.
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    pub fn new(
        topology: MeshTopology,
        model: crate::trace::ModelSpec,
        strategy: Strategy,
        batch_size: usize,
    ) -> Self {
        Self {
            topology,
            model,
            strategy,
            batch_size,
            max_steps: None,
            cost: CostParams::default(),
            predictor: PredictorConfig::default(),
            token_homes: TokenHomes::default(),
            placement: None,
            seed: 0,
        }
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        Self {
            strategy,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.topology.validate()?;
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(EngineError::Config("batch_size must be >= 1".into()));
        }
        self.cost.validate().map_err(EngineError::Config)?;
        self.predictor.validate().map_err(EngineError::Config)?;
        match &self.token_homes {
            TokenHomes::RoundRobin => {}
            TokenHomes::Single(d) => {
                self.topology.check(*d)?;
            }
            TokenHomes::Explicit(v) => {
                if v.is_empty() {
                    return Err(EngineError::Config("explicit token_homes is empty".into()));
                }
                for d in v {
                    self.topology.check(*d)?;
                }
            }
        }
        if let Some(t) = &self.placement {
            t.validate()?;
            t.check_model(&self.model)?;
            if t.layers
                .iter()
                .flatten()
                .any(|p| !p.duplicate_dies.is_empty())
            {
                return Err(EngineError::Config(
                    "starting placement must not contain duplicates".into(),
                ));
            }
            if t.num_dies != self.topology.num_dies() {
                return Err(EngineError::Config(format!(
                    "placement covers {} dies, mesh has {}",
                    t.num_dies,
                    self.topology.num_dies()
                )));
            }
        }
        Ok(())
    }

    /// Canonical JSON of every setting except the strategy.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(&self.with_strategy(Strategy::Base)).expect("config serializes")
    }
}

/// Replays the decode phase of the first `batch_size` requests under `cfg`.
pub fn run(ts: &TraceSet, cfg: &SimConfig) -> Result<RunReport, EngineError> {
    cfg.validate()?;
    cfg.model
        .check_compatible(&ts.model)
        .map_err(|e| EngineError::Mismatch(e.to_string()))?;
    let batch = Batch::select(ts, cfg.batch_size);
    if batch.members.len() < cfg.batch_size {
        return Err(EngineError::Config(format!(
            "batch_size {} but only {} requests have decode tokens",
            cfg.batch_size,
            batch.members.len()
        )));
    }
    let topo = &cfg.topology;
    let spec = &cfg.model;
    let layers = spec.num_moe_layers();
    let steps = cfg
        .max_steps
        .map_or(batch.steps(ts), |m| m.min(batch.steps(ts)));

    let mut table = match &cfg.placement {
        Some(t) => t.clone(),
        None => ExpertDistributionTable::initial_round_robin(spec, topo),
    };
    let predicting = cfg.strategy.uses_predictor();
    let mut dup = DuplicationState::new(topo, spec);
    let mut pt = PredictionTable::new(topo.num_dies());
    let mut heat = if predicting && cfg.predictor.mode == PredictorMode::PrefillSeeded {
        let mut seed_set = TraceSet::new(ts.model.clone());
        seed_set.requests = batch
            .members
            .iter()
            .map(|&i| ts.requests[i].clone())
            .collect();
        seed_from_prefill(&seed_set)
    } else {
        OnlineHeatmapState::new(layers, spec.num_experts)
    };
    let mut pending: Vec<DieExperts> = vec![DieExperts::new(); layers];

    let mut kernels = Vec::with_capacity(steps * layers);
    let mut admissions = Vec::new();
    let mut tokens_generated = 0u64;
    let mut now = 0u64;

    for step in 0..steps {
        tokens_generated += batch.active(ts, step) as u64;
        for layer in 0..layers {
            now += 1;
            let reqs = kernel_requests(ts, &batch, step, layer, &cfg.token_homes, topo.num_dies());
            let plan = if cfg.strategy.uses_allocator() {
                allocate(&reqs, &table, topo, spec, &cfg.cost)
            } else {
                token_local_allocate(&reqs)
            };
            if !plan.conserves(&reqs) {
                return Err(EngineError::Invariant(format!(
                    "step {step} layer {layer}: plan computes {} token-expert pairs, {} requested",
                    plan.total_tokens(),
                    reqs.total()
                )));
            }
            let mut res = simulate_kernel(&plan, &table, topo, spec, cfg.cost.req_blk)?;
            res.step = step;

            if predicting {
                let active = active_per_die(&plan);
                for (d, pred) in &pending[layer] {
                    res.predicted += pred.len() as u64;
                    if let Some(act) = active.get(d) {
                        res.predicted_hits += pred.intersection(act).count() as u64;
                    }
                }
                for (d, experts) in &active {
                    for &e in experts {
                        dup.touch(*d, (layer, e), now);
                    }
                }
                if step > 0 {
                    for &ri in &batch.members {
                        let dec = ts.requests[ri].decode();
                        if let (Some(prev), Some(cur)) = (dec.get(step - 1), dec.get(step)) {
                            heat.observe_transition(
                                layer,
                                prev.layer(layer),
                                cur.layer(layer),
                                cfg.predictor.decay,
                            );
                        }
                    }
                }
                let predicted = predict_next(&active, &heat, layer, &cfg.predictor);
                pt.set_cp_en(layer, &predicted);
                let remote = remote_reads_per_die(&plan, &table);
                let admit = duplication_decisions(layer, &predicted, &remote, &pt);
                let events =
                    apply_admissions(layer, &admit, &mut pt, &mut dup, &mut table, step, now)?;
                for ev in &events {
                    res.charge_local_write(ev.die, spec.expert_bytes, topo.die.dram_bw);
                }
                admissions.extend(events);
                pending[layer] = predicted;
                if !pt.mirrors(&dup) {
                    return Err(EngineError::Invariant(format!(
                        "step {step} layer {layer}: predictor is_local bits diverge from duplicate caches"
                    )));
                }
                debug_assert!(dup.consistent_with(&table));
            }
            kernels.push(res);
        }
    }
    Ok(RunReport::new(
        cfg.clone(),
        kernels,
        tokens_generated,
        admissions,
    ))
}
