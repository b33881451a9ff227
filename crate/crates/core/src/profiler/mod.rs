//! Temporal and spatial expert-selection statistics.
//!
//! Temporal relations: cross-layer and cross-token conditional heatmaps and
//! the prefill/decode rank correlation between them. Spatial relations:
//! per-expert activation frequency and pairwise co-activation. All counts are
//! integers, so merging partial results (e.g. per request shard) is exact and
//! order-independent.

mod curve;
pub mod export;
mod rank;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ExpertId, ModelSpec, PhaseFilter, RequestTrace, TokenStep, TraceSet};

pub use curve::{cumulative_top_fraction, CumulativeCurve};
pub use rank::{average_ranks, spearman_rho, spearman_rho_values};

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("MoE layer {layer} out of range (model has {num_layers})")]
    InvalidLayer { layer: usize, num_layers: usize },
    #[error("layer {0} is the last MoE layer and has no successor")]
    NoSuccessorLayer(usize),
    #[error("co-activation needs top_k >= 2 (model selects {0} expert per layer)")]
    TopKTooSmall(usize),
    #[error("heatmap dimensions differ ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("input has no mass to rank")]
    EmptyInput,
    #[error("fraction {0} not in (0, 1]")]
    BadFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    Counts,
    ConditionalProb,
    NormalizedCoactivation,
}

impl HeatmapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapKind::Counts => "counts",
            HeatmapKind::ConditionalProb => "conditional_prob",
            HeatmapKind::NormalizedCoactivation => "normalized_coactivation",
        }
    }
}

/// Dense E×E matrix over expert pairs, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub dim: usize,
    pub kind: HeatmapKind,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(dim: usize, kind: HeatmapKind) -> Self {
        Self {
            dim,
            kind,
            values: vec![0.0; dim * dim],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim.max(1))
    }

    /// Mass on the diagonal over total mass; 0 for an empty map.
    pub fn diagonal_mass(&self) -> f64 {
        let total: f64 = self.values.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        (0..self.dim).map(|i| self.get(i, i)).sum::<f64>() / total
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Divides every entry by `by` (e.g. top_k, so conditional rows sum to 1).
    pub fn scaled(&self, by: f64) -> Heatmap {
        Heatmap {
            dim: self.dim,
            kind: self.kind,
            values: self.values.iter().map(|v| v / by).collect(),
        }
    }
}

/// Integer transition counts plus, per conditioning expert, the number of
/// conditioning activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub dim: usize,
    pub counts: Vec<u64>,
    pub support: Vec<u64>,
}

impl PairCounts {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            counts: vec![0; dim * dim],
            support: vec![0; dim],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.dim + j]
    }

    /// Records one conditioning event: every `i` in `from` is followed by all of `to`.
    pub fn observe(&mut self, from: &[ExpertId], to: &[ExpertId]) {
        for &i in from {
            self.support[i as usize] += 1;
            let row = i as usize * self.dim;
            for &j in to {
                self.counts[row + j as usize] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &PairCounts) {
        assert_eq!(self.dim, other.dim, "merging PairCounts of different dims");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.support.iter_mut().zip(&other.support) {
            *a += b;
        }
    }

    pub fn to_heatmap(&self) -> Heatmap {
        Heatmap {
            dim: self.dim,
            kind: HeatmapKind::Counts,
            values: self.counts.iter().map(|&c| c as f64).collect(),
        }
    }

    /// `P(j | i)`: count(i, j) over conditioning activations of `i`; rows sum
    /// to top_k where supported and are all-zero otherwise.
    pub fn conditional(&self) -> Heatmap {
        let mut h = Heatmap::zeros(self.dim, HeatmapKind::ConditionalProb);
        for i in 0..self.dim {
            let s = self.support[i];
            if s == 0 {
                continue;
            }
            for j in 0..self.dim {
                h.values[i * self.dim + j] = self.get(i, j) as f64 / s as f64;
            }
        }
        h
    }
}

/// Unordered co-activation counts within single tokens at one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoactivationCounts {
    pub dim: usize,
    pub counts: Vec<u64>,
    pub tokens: u64,
}

/// Baseline probability against which co-activation is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoactivationNormalizer {
    /// `2 / (n (n - 1))`, the chance of one specific pair under a random pair draw.
    #[default]
    RandomPair,
    /// `C(n-2, k-2) / C(n, k) = k (k - 1) / (n (n - 1))`, exact for random top-k sets.
    ExactTopK,
}

impl CoactivationCounts {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            counts: vec![0; dim * dim],
            tokens: 0,
        }
    }

    pub fn observe(&mut self, sel: &[ExpertId]) {
        self.tokens += 1;
        for (a, &i) in sel.iter().enumerate() {
            for &j in &sel[a + 1..] {
                let (i, j) = (i as usize, j as usize);
                self.counts[i * self.dim + j] += 1;
                self.counts[j * self.dim + i] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &CoactivationCounts) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.tokens += other.tokens;
    }

    pub fn normalized(&self, top_k: usize, normalizer: CoactivationNormalizer) -> Heatmap {
        let n = self.dim as f64;
        let p = match normalizer {
            CoactivationNormalizer::RandomPair => 2.0 / (n * (n - 1.0)),
            CoactivationNormalizer::ExactTopK => {
                let k = top_k as f64;
                k * (k - 1.0) / (n * (n - 1.0))
            }
        };
        let mut h = Heatmap::zeros(self.dim, HeatmapKind::NormalizedCoactivation);
        if self.tokens == 0 {
            return h;
        }
        let t = self.tokens as f64;
        for (v, &c) in h.values.iter_mut().zip(&self.counts) {
            *v = (c as f64 / t) / p;
        }
        h
    }
}

/// Per-expert activation counts and their mean-normalised values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyVector {
    pub counts: Vec<u64>,
    pub normalized: Vec<f64>,
}

impl FrequencyVector {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let mean = total as f64 / counts.len().max(1) as f64;
        let normalized = counts
            .iter()
            .map(|&c| if mean > 0.0 { c as f64 / mean } else { 0.0 })
            .collect();
        Self { counts, normalized }
    }

    pub fn max_normalized(&self) -> f64 {
        self.normalized.iter().copied().fold(0.0, f64::max)
    }

    pub fn values(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

fn check_layer(spec: &ModelSpec, layer: usize) -> Result<(), ProfileError> {
    if layer >= spec.num_moe_layers() {
        return Err(ProfileError::InvalidLayer {
            layer,
            num_layers: spec.num_moe_layers(),
        });
    }
    Ok(())
}

fn tokens_in(req: &RequestTrace, phase: PhaseFilter) -> impl Iterator<Item = &TokenStep> {
    req.tokens.iter().filter(move |t| phase.admits(t.phase))
}

/// Adds one request's cross-layer transitions (`from_layer` -> next MoE layer).
pub fn accumulate_cross_layer(
    acc: &mut PairCounts,
    req: &RequestTrace,
    from_layer: usize,
    phase: PhaseFilter,
) {
    for t in tokens_in(req, phase) {
        acc.observe(t.layer(from_layer), t.layer(from_layer + 1));
    }
}

/// Adds one request's adjacent-token transitions at `layer`. With a single
/// phase selected, pairs never straddle the prefill/decode boundary.
pub fn accumulate_cross_token(
    acc: &mut PairCounts,
    req: &RequestTrace,
    layer: usize,
    phase: PhaseFilter,
) {
    let steps: &[TokenStep] = match phase {
        PhaseFilter::Both => &req.tokens,
        PhaseFilter::Prefill => req.prefill(),
        PhaseFilter::Decode => req.decode(),
    };
    for w in steps.windows(2) {
        acc.observe(w[0].layer(layer), w[1].layer(layer));
    }
}

pub fn accumulate_coactivation(
    acc: &mut CoactivationCounts,
    req: &RequestTrace,
    layer: usize,
    phase: PhaseFilter,
) {
    for t in tokens_in(req, phase) {
        acc.observe(t.layer(layer));
    }
}

pub fn accumulate_frequency(acc: &mut [u64], req: &RequestTrace, layer: usize, phase: PhaseFilter) {
    for t in tokens_in(req, phase) {
        for &e in t.layer(layer) {
            acc[e as usize] += 1;
        }
    }
}

pub fn cross_layer_counts(
    ts: &TraceSet,
    from_layer: usize,
    phase: PhaseFilter,
) -> Result<PairCounts, ProfileError> {
    check_layer(&ts.model, from_layer)?;
    if from_layer + 1 >= ts.model.num_moe_layers() {
        return Err(ProfileError::NoSuccessorLayer(from_layer));
    }
    let mut acc = PairCounts::new(ts.model.num_experts);
    for r in &ts.requests {
        accumulate_cross_layer(&mut acc, r, from_layer, phase);
    }
    Ok(acc)
}

/// `P(j at the next MoE layer | i at from_layer)`.
pub fn cross_layer_heatmap(
    ts: &TraceSet,
    from_layer: usize,
    phase: PhaseFilter,
) -> Result<Heatmap, ProfileError> {
    cross_layer_counts(ts, from_layer, phase).map(|c| c.conditional())
}

pub fn cross_token_counts(
    ts: &TraceSet,
    layer: usize,
    phase: PhaseFilter,
) -> Result<PairCounts, ProfileError> {
    check_layer(&ts.model, layer)?;
    let mut acc = PairCounts::new(ts.model.num_experts);
    for r in &ts.requests {
        accumulate_cross_token(&mut acc, r, layer, phase);
    }
    Ok(acc)
}

/// `P(j at token t+1 | i at token t)` for the same layer and request.
pub fn cross_token_heatmap(
    ts: &TraceSet,
    layer: usize,
    phase: PhaseFilter,
) -> Result<Heatmap, ProfileError> {
    cross_token_counts(ts, layer, phase).map(|c| c.conditional())
}

pub fn expert_frequency(
    ts: &TraceSet,
    layer: usize,
    phase: PhaseFilter,
) -> Result<FrequencyVector, ProfileError> {
    check_layer(&ts.model, layer)?;
    let mut counts = vec![0u64; ts.model.num_experts];
    for r in &ts.requests {
        accumulate_frequency(&mut counts, r, layer, phase);
    }
    Ok(FrequencyVector::from_counts(counts))
}

pub fn coactivation_counts(
    ts: &TraceSet,
    layer: usize,
    phase: PhaseFilter,
) -> Result<CoactivationCounts, ProfileError> {
    check_layer(&ts.model, layer)?;
    if ts.model.top_k < 2 {
        return Err(ProfileError::TopKTooSmall(ts.model.top_k));
    }
    let mut acc = CoactivationCounts::new(ts.model.num_experts);
    for r in &ts.requests {
        accumulate_coactivation(&mut acc, r, layer, phase);
    }
    Ok(acc)
}

/// Co-activation frequency over random-selection probability; symmetric, zero diagonal.
pub fn coactivation_heatmap(
    ts: &TraceSet,
    layer: usize,
    phase: PhaseFilter,
    normalizer: CoactivationNormalizer,
) -> Result<Heatmap, ProfileError> {
    coactivation_counts(ts, layer, phase).map(|c| c.normalized(ts.model.top_k, normalizer))
}

/// Every statistic for every MoE layer under one phase filter, gathered in a
/// single streaming pass.
#[derive(Debug, Clone)]
pub struct LayerProfile {
    pub cross_layer: Option<PairCounts>,
    pub cross_token: PairCounts,
    pub coactivation: CoactivationCounts,
    pub frequency: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ProfileAccumulator {
    pub phase: PhaseFilter,
    pub layers: Vec<LayerProfile>,
}

impl ProfileAccumulator {
    pub fn new(spec: &ModelSpec, phase: PhaseFilter) -> Self {
        let e = spec.num_experts;
        let n = spec.num_moe_layers();
        let layers = (0..n)
            .map(|l| LayerProfile {
                cross_layer: (l + 1 < n).then(|| PairCounts::new(e)),
                cross_token: PairCounts::new(e),
                coactivation: CoactivationCounts::new(e),
                frequency: vec![0; e],
            })
            .collect();
        Self { phase, layers }
    }

    pub fn observe(&mut self, req: &RequestTrace) {
        let phase = self.phase;
        for (l, lp) in self.layers.iter_mut().enumerate() {
            if let Some(cl) = lp.cross_layer.as_mut() {
                accumulate_cross_layer(cl, req, l, phase);
            }
            accumulate_cross_token(&mut lp.cross_token, req, l, phase);
            accumulate_coactivation(&mut lp.coactivation, req, l, phase);
            accumulate_frequency(&mut lp.frequency, req, l, phase);
        }
    }

    pub fn merge(&mut self, other: &ProfileAccumulator) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(x), Some(y)) = (a.cross_layer.as_mut(), b.cross_layer.as_ref()) {
                x.merge(y);
            }
            a.cross_token.merge(&b.cross_token);
            a.coactivation.merge(&b.coactivation);
            for (x, y) in a.frequency.iter_mut().zip(&b.frequency) {
                *x += y;
            }
        }
    }
}
