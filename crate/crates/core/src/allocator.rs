//! Expert-placement-aware task allocation for one MoE kernel.
//!
//! [`allocate`] walks experts from most to least requested. For each it builds
//! a candidate list (dies holding the expert plus dies within
//! `candidate_dis` hops of a holder), keeps the `max_split_num` least-loaded
//! candidates, and hands out the expert's tokens in blocks of `req_blk`, each
//! block going to the candidate with the lowest [`CostModel::block_cost`].
//! Blocks landing on the same die are merged at the end.
//!
//! Two placement-blind baselines are provided: [`baseline_allocate`] sends each
//! expert to its home die, and [`token_local_allocate`] computes every token
//! on the die that holds its activations regardless of where weights live.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::fabric::{DieId, MeshTopology};
use crate::placement::ExpertDistributionTable;
use crate::trace::{ExpertId, ModelSpec};

/// Which die a batch slot's activations start on.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenHomes {
    /// Slot `b` lives on die `b mod num_dies`.
    #[default]
    RoundRobin,
    /// Every token starts on one die.
    Single(DieId),
    /// Explicit per-slot dies, repeated cyclically.
    Explicit(Vec<DieId>),
}

impl TokenHomes {
    pub fn home(&self, slot: usize, num_dies: usize) -> DieId {
        match self {
            TokenHomes::RoundRobin => DieId(slot % num_dies),
            TokenHomes::Single(d) => *d,
            TokenHomes::Explicit(v) if !v.is_empty() => v[slot % v.len()],
            TokenHomes::Explicit(_) => DieId(0),
        }
    }
}

/// Tokens routed to each expert in one kernel, recorded as the home die of
/// every routed token (so `count(e) == origins[e].len()`).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExpertRequestCounts {
    pub layer: usize,
    pub origins: BTreeMap<ExpertId, Vec<DieId>>,
}

impl ExpertRequestCounts {
    pub fn new(layer: usize) -> Self {
        Self {
            layer,
            origins: BTreeMap::new(),
        }
    }

    /// Counts with every token starting on `home`.
    pub fn with_home(layer: usize, counts: &[(ExpertId, u32)], home: DieId) -> Self {
        let origins = counts
            .iter()
            .filter(|(_, n)| *n > 0)
            .map(|&(e, n)| (e, vec![home; n as usize]))
            .collect();
        Self { layer, origins }
    }

    /// Builds counts from per-slot selections, `selections[slot]` being that
    /// token's experts at this layer.
    pub fn from_selections<'a>(
        layer: usize,
        selections: impl IntoIterator<Item = (usize, &'a [ExpertId])>,
        homes: &TokenHomes,
        num_dies: usize,
    ) -> Self {
        let mut r = Self::new(layer);
        for (slot, sel) in selections {
            let home = homes.home(slot, num_dies);
            for &e in sel {
                r.origins.entry(e).or_default().push(home);
            }
        }
        r
    }

    pub fn count(&self, e: ExpertId) -> usize {
        self.origins.get(&e).map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.origins.values().map(Vec::len).sum()
    }

    pub fn counts(&self) -> BTreeMap<ExpertId, usize> {
        self.origins.iter().map(|(e, v)| (*e, v.len())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub expert: ExpertId,
    pub die: DieId,
    pub tokens: u32,
    /// Home die -> number of this entry's tokens starting there.
    pub origins: BTreeMap<DieId, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub layer: usize,
    pub entries: Vec<PlanEntry>,
}

impl AllocationPlan {
    fn push_block(&mut self, expert: ExpertId, die: DieId, origins: &[DieId]) {
        let mut hist = BTreeMap::new();
        for &o in origins {
            *hist.entry(o).or_insert(0u32) += 1;
        }
        self.entries.push(PlanEntry {
            expert,
            die,
            tokens: origins.len() as u32,
            origins: hist,
        });
    }

    /// Folds entries with the same (expert, die) together; output sorted by (expert, die).
    pub fn merge(&mut self) {
        let mut merged: BTreeMap<(ExpertId, DieId), PlanEntry> = BTreeMap::new();
        for e in self.entries.drain(..) {
            match merged.get_mut(&(e.expert, e.die)) {
                Some(m) => {
                    m.tokens += e.tokens;
                    for (d, n) in e.origins {
                        *m.origins.entry(d).or_insert(0) += n;
                    }
                }
                None => {
                    merged.insert((e.expert, e.die), e);
                }
            }
        }
        self.entries = merged.into_values().collect();
    }

    pub fn total_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.tokens as usize).sum()
    }

    pub fn tokens_per_expert(&self) -> BTreeMap<ExpertId, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.expert).or_insert(0) += e.tokens as usize;
        }
        m
    }

    pub fn tokens_per_die(&self, num_dies: usize) -> Vec<usize> {
        let mut v = vec![0; num_dies];
        for e in &self.entries {
            v[e.die.0] += e.tokens as usize;
        }
        v
    }

    /// Every expert's tokens are fully assigned and every entry is non-empty.
    pub fn conserves(&self, reqs: &ExpertRequestCounts) -> bool {
        self.entries.iter().all(|e| e.tokens > 0) && self.tokens_per_expert() == reqs.counts()
    }

    pub fn dies_used(&self) -> BTreeSet<DieId> {
        self.entries.iter().map(|e| e.die).collect()
    }
}

/// `kernel,expert,die,tokens` rows.
pub fn plan_csv(plans: &[(usize, &AllocationPlan)]) -> String {
    let mut s = String::from("kernel,expert,die,tokens\n");
    for (k, p) in plans {
        for e in &p.entries {
            let _ = writeln!(s, "{k},{},{},{}", e.expert, e.die.0, e.tokens);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// Tokens per allocation block.
    pub req_blk: u32,
    /// Hops around each holder that still count as candidates.
    pub candidate_dis: usize,
    /// Tokens per additional allowed split (`u32::MAX` disables splitting).
    pub split_divisor: u32,
    pub compute_weight: f64,
    pub weight_fetch_weight: f64,
    pub activation_weight: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            req_blk: 50,
            candidate_dis: 1,
            split_divisor: 50,
            compute_weight: 1.0,
            weight_fetch_weight: 1.0,
            activation_weight: 1.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.req_blk == 0 {
            return Err("req_blk must be >= 1".into());
        }
        if self.split_divisor == 0 {
            return Err("split_divisor must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub compute: f64,
    pub weights: f64,
    pub activations: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.weights + self.activations
    }
}

/// Seconds-valued cost of placing work on a die: compute time, plus the time
/// to pull the expert's weights from the nearest holder if the die has no
/// copy, plus moving the tokens' activations from their home dies.
pub struct CostModel<'a> {
    pub topo: &'a MeshTopology,
    pub spec: &'a ModelSpec,
    pub table: &'a ExpertDistributionTable,
    pub params: &'a CostParams,
    pub layer: usize,
}

impl<'a> CostModel<'a> {
    /// `fetched` marks (expert, die) pairs whose weights already arrived
    /// earlier in this kernel.
    pub fn breakdown(
        &self,
        die: DieId,
        expert: ExpertId,
        origins: &[DieId],
        fetched: bool,
    ) -> CostBreakdown {
        let p = self.params;
        let compute =
            origins.len() as f64 * self.spec.flops_per_token_per_expert / self.topo.die.compute;
        let weights = if fetched || self.table.at(self.layer, expert).holds(die) {
            0.0
        } else {
            let (_, hops) = self
                .table
                .nearest_holder(self.topo, self.layer, expert, die);
            self.spec.expert_bytes as f64 * hops as f64 / self.topo.die.d2d_bw
        };
        let hops: usize = origins.iter().map(|&o| self.topo.hops(o, die)).sum();
        let activations = self.spec.activation_bytes as f64 * hops as f64 / self.topo.die.d2d_bw;
        CostBreakdown {
            compute: p.compute_weight * compute,
            weights: p.weight_fetch_weight * weights,
            activations: p.activation_weight * activations,
        }
    }

    /// `load + T_compute + T_weights + T_activations`.
    pub fn block_cost(
        &self,
        die: DieId,
        expert: ExpertId,
        origins: &[DieId],
        load: f64,
        fetched: bool,
    ) -> f64 {
        load + self.breakdown(die, expert, origins, fetched).total()
    }

    /// Per-die summed work of a merged plan (weights charged once per entry).
    pub fn die_loads(&self, plan: &AllocationPlan) -> Vec<f64> {
        let mut loads = vec![0.0; self.topo.num_dies()];
        for e in &plan.entries {
            let origins: Vec<DieId> = e
                .origins
                .iter()
                .flat_map(|(d, n)| std::iter::repeat_n(*d, *n as usize))
                .collect();
            loads[e.die.0] += self.breakdown(e.die, e.expert, &origins, false).total();
        }
        loads
    }

    /// Makespan under the cost model: the most loaded die's work.
    pub fn plan_cost(&self, plan: &AllocationPlan) -> f64 {
        self.die_loads(plan).into_iter().fold(0.0, f64::max)
    }
}

/// Holders of `expert` and dies near them, least-loaded first (ties: lower
/// die id), cut to `clamp(ceil(req_num / split_divisor), 1, len)`.
pub fn gen_candidate_list(
    layer: usize,
    expert: ExpertId,
    table: &ExpertDistributionTable,
    topo: &MeshTopology,
    load: &[f64],
    p: &CostParams,
    req_num: usize,
) -> Vec<DieId> {
    let mut cands: BTreeSet<DieId> = BTreeSet::new();
    for h in table.at(layer, expert).holders() {
        cands.extend(
            topo.dies_within(h, p.candidate_dis)
                .expect("holder on mesh"),
        );
    }
    let mut cands: Vec<DieId> = cands.into_iter().collect();
    cands.sort_by(|a, b| load[a.0].total_cmp(&load[b.0]).then(a.cmp(b)));
    let max_split = req_num
        .div_ceil(p.split_divisor as usize)
        .clamp(1, cands.len());
    cands.truncate(max_split);
    cands
}

pub fn allocate(
    reqs: &ExpertRequestCounts,
    table: &ExpertDistributionTable,
    topo: &MeshTopology,
    spec: &ModelSpec,
    p: &CostParams,
) -> AllocationPlan {
    let layer = reqs.layer;
    let model = CostModel {
        topo,
        spec,
        table,
        params: p,
        layer,
    };
    let mut load = vec![0.0f64; topo.num_dies()];
    let mut fetched: BTreeSet<(ExpertId, DieId)> = BTreeSet::new();
    let mut plan = AllocationPlan {
        layer,
        entries: Vec::new(),
    };
    let mut order: Vec<(&ExpertId, &Vec<DieId>)> =
        reqs.origins.iter().filter(|(_, o)| !o.is_empty()).collect();
    order.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
    let blk = p.req_blk as usize;
    for (&expert, origins) in order {
        let cands = gen_candidate_list(layer, expert, table, topo, &load, p, origins.len());
        for block in origins.chunks(blk) {
            let (cost, die) = cands
                .iter()
                .map(|&d| {
                    let seen = fetched.contains(&(expert, d));
                    (model.block_cost(d, expert, block, load[d.0], seen), d)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .expect("candidate list is never empty");
            plan.push_block(expert, die, block);
            load[die.0] = cost;
            fetched.insert((expert, die));
        }
    }
    plan.merge();
    plan
}

/// Each expert's whole request count on its (lowest-id) home die.
pub fn baseline_allocate(
    reqs: &ExpertRequestCounts,
    table: &ExpertDistributionTable,
) -> AllocationPlan {
    let mut plan = AllocationPlan {
        layer: reqs.layer,
        entries: Vec::new(),
    };
    for (&e, origins) in &reqs.origins {
        if origins.is_empty() {
            continue;
        }
        plan.push_block(e, table.primary_home(reqs.layer, e), origins);
    }
    plan.merge();
    plan
}

/// Every token computed where its activations live, ignoring expert placement.
pub fn token_local_allocate(reqs: &ExpertRequestCounts) -> AllocationPlan {
    let mut plan = AllocationPlan {
        layer: reqs.layer,
        entries: Vec::new(),
    };
    for (&e, origins) in &reqs.origins {
        let mut by_die: BTreeMap<DieId, u32> = BTreeMap::new();
        for &o in origins {
            *by_die.entry(o).or_insert(0) += 1;
        }
        for (d, n) in by_die {
            plan.entries.push(PlanEntry {
                expert: e,
                die: d,
                tokens: n,
                origins: BTreeMap::from([(d, n)]),
            });
        }
    }
    plan
}
