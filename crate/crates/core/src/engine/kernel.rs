use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::allocator::{AllocationPlan, ExpertRequestCounts, TokenHomes};
use crate::fabric::{DieId, MeshTopology};
use crate::placement::ExpertDistributionTable;
use crate::predictor::DieExperts;
use crate::trace::{ModelSpec, TraceSet};

/// Requests served together: indices into `TraceSet::requests`, slot order fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub members: Vec<usize>,
}

impl Batch {
    /// The first `batch_size` requests that have at least one decode token.
    pub fn select(ts: &TraceSet, batch_size: usize) -> Self {
        Self {
            members: ts
                .requests
                .iter()
                .enumerate()
                .filter(|(_, r)| !r.decode().is_empty())
                .map(|(i, _)| i)
                .take(batch_size)
                .collect(),
        }
    }

    /// Longest decode length among members.
    pub fn steps(&self, ts: &TraceSet) -> usize {
        self.members
            .iter()
            .map(|&i| ts.requests[i].decode().len())
            .max()
            .unwrap_or(0)
    }

    /// Slots still decoding at `step`.
    pub fn active(&self, ts: &TraceSet, step: usize) -> usize {
        self.members
            .iter()
            .filter(|&&i| ts.requests[i].decode().len() > step)
            .count()
    }
}

/// Tokens per expert for one decode step at one MoE layer; requests that
/// have finished decoding drop out.
pub fn kernel_requests(
    ts: &TraceSet,
    batch: &Batch,
    step: usize,
    layer: usize,
    homes: &TokenHomes,
    num_dies: usize,
) -> ExpertRequestCounts {
    let sels = batch.members.iter().enumerate().filter_map(|(slot, &ri)| {
        ts.requests[ri]
            .decode()
            .get(step)
            .map(|t| (slot, t.layer(layer)))
    });
    ExpertRequestCounts::from_selections(layer, sels, homes, num_dies)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KernelResult {
    pub step: usize,
    pub layer: usize,
    pub makespan: f64,
    pub hop_count: u64,
    pub dram_local_read_bytes: u64,
    pub dram_remote_read_bytes: u64,
    pub dram_local_write_bytes: u64,
    /// Token-expert pairs computed.
    pub work: u64,
    pub busiest_link: f64,
    #[serde(default)]
    pub predicted: u64,
    #[serde(default)]
    pub predicted_hits: u64,
    #[serde(skip)]
    pub die_busy: Vec<f64>,
}

impl KernelResult {
    /// Duplicate write into `die`'s DRAM; extends that die's busy time.
    pub fn charge_local_write(&mut self, die: DieId, bytes: u64, dram_bw: f64) {
        self.dram_local_write_bytes += bytes;
        self.die_busy[die.0] += bytes as f64 / dram_bw;
        self.makespan = self.makespan.max(self.die_busy[die.0]);
    }

    pub fn total_reads(&self) -> u64 {
        self.dram_local_read_bytes + self.dram_remote_read_bytes
    }
}

/// Bottleneck timing of one kernel.
///
/// Each die is busy for its entries' compute plus one DRAM read of each
/// expert's weights. Each directed link is busy for the bytes routed across
/// it: weight slices pulled from the nearest holder, and activations moved
/// from token home dies and back. The makespan is the largest of all die and
/// link busy times.
///
/// Hops are counted per transfer event and weighted by its Manhattan
/// distance: one event per remote weight slice, and one per block of up to
/// `act_block` activation tokens per direction.
pub fn simulate_kernel(
    plan: &AllocationPlan,
    table: &ExpertDistributionTable,
    topo: &MeshTopology,
    spec: &ModelSpec,
    act_block: u32,
) -> Result<KernelResult, EngineError> {
    let n = topo.num_dies();
    let die = &topo.die;
    let mut die_busy = vec![0.0f64; n];
    let mut link_bytes = vec![0u64; topo.link_slots()];
    let mut res = KernelResult {
        layer: plan.layer,
        ..Default::default()
    };
    let mut route_bytes = |from: DieId, to: DieId, bytes: u64| {
        for l in topo.route(from, to) {
            link_bytes[topo.link_index(l)] += bytes;
        }
    };
    let act_block = act_block.max(1);
    for e in &plan.entries {
        if e.die.0 >= n || table.entry(plan.layer, e.expert).is_err() {
            return Err(EngineError::Invariant(format!(
                "plan entry (expert {}, {}) is outside the model or mesh",
                e.expert, e.die
            )));
        }
        res.work += e.tokens as u64;
        die_busy[e.die.0] += e.tokens as f64 * spec.flops_per_token_per_expert / die.compute
            + spec.expert_bytes as f64 / die.dram_bw;
        if table.at(plan.layer, e.expert).holds(e.die) {
            res.dram_local_read_bytes += spec.expert_bytes;
        } else {
            let (src, hops) = table.nearest_holder(topo, plan.layer, e.expert, e.die);
            res.dram_remote_read_bytes += spec.expert_bytes;
            res.hop_count += hops as u64 * spec.slices_per_expert as u64;
            route_bytes(src, e.die, spec.expert_bytes);
        }
        let mut by_dist: Vec<(usize, DieId, u32)> = Vec::with_capacity(e.origins.len());
        for (&origin, &count) in &e.origins {
            by_dist.push((topo.hops(origin, e.die), origin, count));
            if origin != e.die {
                let bytes = count as u64 * spec.activation_bytes;
                route_bytes(origin, e.die, bytes);
                route_bytes(e.die, origin, bytes);
            }
        }
        by_dist.sort_unstable();
        res.hop_count += 2 * activation_block_hops(&by_dist, act_block);
    }
    res.busiest_link = link_bytes
        .iter()
        .map(|&b| b as f64 / die.d2d_bw)
        .fold(0.0, f64::max);
    res.makespan = die_busy.iter().copied().fold(res.busiest_link, f64::max);
    res.die_busy = die_busy;
    Ok(res)
}

/// Hops for one direction of an entry's activation traffic. Tokens, nearest
/// origins first, are packed into blocks of `act_block`; a block is one
/// transfer and travels as far as its farthest token.
fn activation_block_hops(by_dist: &[(usize, DieId, u32)], act_block: u32) -> u64 {
    let mut total = 0u64;
    // free slots in the last block and the distance it is charged at
    let mut room = 0u32;
    let mut open = 0u64;
    for &(dist, _, count) in by_dist {
        let dist = dist as u64;
        let take = room.min(count);
        if take > 0 {
            total += dist - open;
            open = dist;
            room -= take;
        }
        let rest = count - take;
        if rest > 0 {
            let blocks = rest.div_ceil(act_block);
            total += blocks as u64 * dist;
            room = blocks * act_block - rest;
            open = dist;
        }
    }
    total
}

/// Experts each die computes under `plan`.
pub fn active_per_die(plan: &AllocationPlan) -> DieExperts {
    let mut m: BTreeMap<DieId, BTreeSet<_>> = BTreeMap::new();
    for e in &plan.entries {
        m.entry(e.die).or_default().insert(e.expert);
    }
    m
}

/// Experts each die has to fetch from another die under `plan`.
pub fn remote_reads_per_die(plan: &AllocationPlan, table: &ExpertDistributionTable) -> DieExperts {
    let mut m: BTreeMap<DieId, BTreeSet<_>> = BTreeMap::new();
    for e in &plan.entries {
        if !table.at(plan.layer, e.expert).holds(e.die) {
            m.entry(e.die).or_default().insert(e.expert);
        }
    }
    m
}
