//! Data-driven next-token expert predictor and per-die duplication control.
//!
//! The global controller keeps a cross-token heatmap per layer. After each
//! kernel, for every die it looks up the rows of the experts the die just
//! computed, takes the `top_n` strongest successors of each row, and marks
//! the union as "should be cached" (`cp_en`). Experts that the die fetched
//! remotely in that kernel and that are predicted again get duplicated into
//! the die's local DRAM (`is_local`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::fabric::DieId;
use crate::placement::{DuplicationState, ExpertDistributionTable, ExpertKey, PlacementError};
use crate::trace::{ExpertId, TraceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    /// Heatmap starts empty and learns from decode transitions.
    #[default]
    Online,
    /// Heatmap starts from the prefill-phase transitions, then keeps learning.
    PrefillSeeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub top_n: usize,
    pub mode: PredictorMode,
    /// Multiplier applied to a layer's counts before each new transition.
    pub decay: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            top_n: 2,
            mode: PredictorMode::Online,
            decay: 1.0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.top_n == 0 {
            return Err("top_n must be >= 1".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(format!("decay {} not in (0, 1]", self.decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerHeat {
    raw: Vec<f64>,
    // true count = raw * scale; decay only touches the scale
    scale: f64,
}

/// Cross-token transition counts per layer, with lazy exponential decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineHeatmapState {
    pub dim: usize,
    layers: Vec<LayerHeat>,
}

impl OnlineHeatmapState {
    pub fn new(num_layers: usize, dim: usize) -> Self {
        Self {
            dim,
            layers: vec![
                LayerHeat {
                    raw: vec![0.0; dim * dim],
                    scale: 1.0,
                };
                num_layers
            ],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn count(&self, layer: usize, i: ExpertId, j: ExpertId) -> f64 {
        let h = &self.layers[layer];
        h.raw[i as usize * self.dim + j as usize] * h.scale
    }

    pub fn counts(&self, layer: usize) -> Vec<f64> {
        let h = &self.layers[layer];
        h.raw.iter().map(|v| v * h.scale).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|h| h.raw.iter().all(|&v| v == 0.0))
    }

    /// Scales the layer by `decay`, then adds one to every (prev, cur) pair.
    pub fn observe_transition(
        &mut self,
        layer: usize,
        prev: &[ExpertId],
        cur: &[ExpertId],
        decay: f64,
    ) {
        let dim = self.dim;
        let h = &mut self.layers[layer];
        if decay != 1.0 {
            h.scale *= decay;
            if h.scale < 1e-200 {
                let s = h.scale;
                h.raw.iter_mut().for_each(|v| *v *= s);
                h.scale = 1.0;
            }
        }
        let inc = 1.0 / h.scale;
        for &i in prev {
            let row = i as usize * dim;
            for &j in cur {
                h.raw[row + j as usize] += inc;
            }
        }
    }

    /// Applies decay to a layer without adding a transition.
    pub fn decay(&mut self, layer: usize, decay: f64) {
        self.layers[layer].scale *= decay;
    }

    /// The `n` strongest successors of `row` (count desc, then id asc); zero entries never qualify.
    pub fn top_successors(&self, layer: usize, row: ExpertId, n: usize) -> Vec<ExpertId> {
        let h = &self.layers[layer];
        let r = &h.raw[row as usize * self.dim..(row as usize + 1) * self.dim];
        let mut idx: Vec<usize> = (0..self.dim).filter(|&j| r[j] > 0.0).collect();
        idx.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
        idx.into_iter().take(n).map(|j| j as ExpertId).collect()
    }
}

/// Heatmap built from the prefill phase of every request.
pub fn seed_from_prefill(ts: &TraceSet) -> OnlineHeatmapState {
    let mut st = OnlineHeatmapState::new(ts.model.num_moe_layers(), ts.model.num_experts);
    let mut any = false;
    for r in &ts.requests {
        for w in r.prefill().windows(2) {
            any = true;
            for l in 0..st.num_layers() {
                st.observe_transition(l, w[0].layer(l), w[1].layer(l), 1.0);
            }
        }
    }
    if !any {
        log::warn!("trace has no prefill transitions; prefill-seeded predictor starts empty");
    }
    st
}

pub type DieExperts = BTreeMap<DieId, BTreeSet<ExpertId>>;

/// Per die: union of the top-n successors of each active expert.
pub fn predict_next(
    active: &DieExperts,
    hm: &OnlineHeatmapState,
    layer: usize,
    cfg: &PredictorConfig,
) -> DieExperts {
    active
        .iter()
        .map(|(d, experts)| {
            let set: BTreeSet<ExpertId> = experts
                .iter()
                .flat_map(|&e| hm.top_successors(layer, e, cfg.top_n))
                .collect();
            (*d, set)
        })
        .filter(|(_, s)| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiePrediction {
    pub cp_en: BTreeSet<ExpertKey>,
    pub is_local: BTreeSet<ExpertKey>,
}

/// Per-die `cp_en` / `is_local` bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionTable {
    pub dies: Vec<DiePrediction>,
}

impl PredictionTable {
    pub fn new(num_dies: usize) -> Self {
        Self {
            dies: vec![DiePrediction::default(); num_dies],
        }
    }

    /// Replaces every die's `cp_en` bits for `layer` with `predicted`.
    pub fn set_cp_en(&mut self, layer: usize, predicted: &DieExperts) {
        for (d, die) in self.dies.iter_mut().enumerate() {
            die.cp_en.retain(|(l, _)| *l != layer);
            if let Some(set) = predicted.get(&DieId(d)) {
                die.cp_en.extend(set.iter().map(|&e| (layer, e)));
            }
        }
    }

    pub fn is_local(&self, die: DieId, key: ExpertKey) -> bool {
        self.dies[die.0].is_local.contains(&key)
    }

    /// `is_local` matches the duplicate caches exactly.
    pub fn mirrors(&self, st: &DuplicationState) -> bool {
        self.dies
            .iter()
            .zip(&st.dies)
            .all(|(p, c)| p.is_local.iter().eq(c.residents.keys()))
    }
}

/// Experts to duplicate per die: predicted ∩ fetched remotely, minus those already local.
pub fn duplication_decisions(
    layer: usize,
    predicted: &DieExperts,
    remote_reads: &DieExperts,
    pt: &PredictionTable,
) -> DieExperts {
    predicted
        .iter()
        .filter_map(|(d, pred)| {
            let remote = remote_reads.get(d)?;
            let admit: BTreeSet<ExpertId> = pred
                .intersection(remote)
                .copied()
                .filter(|&e| !pt.is_local(*d, (layer, e)))
                .collect();
            (!admit.is_empty()).then_some((*d, admit))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionEvent {
    pub step: usize,
    pub layer: usize,
    pub die: DieId,
    pub expert: ExpertId,
    pub evicted: Vec<ExpertKey>,
}

/// Carries out admissions through the duplicate caches and keeps `is_local` in sync.
pub fn apply_admissions(
    layer: usize,
    admit: &DieExperts,
    pt: &mut PredictionTable,
    st: &mut DuplicationState,
    table: &mut ExpertDistributionTable,
    step: usize,
    now: u64,
) -> Result<Vec<AdmissionEvent>, PlacementError> {
    let mut events = Vec::new();
    for (d, experts) in admit {
        for &e in experts {
            let rep = st.admit_duplicate(table, *d, layer, e, now)?;
            let die = &mut pt.dies[d.0];
            for v in &rep.evicted {
                die.is_local.remove(v);
            }
            die.is_local.insert((layer, e));
            events.push(AdmissionEvent {
                step,
                layer,
                die: *d,
                expert: e,
                evicted: rep.evicted,
            });
        }
    }
    Ok(events)
}

/// `step,layer,die,expert,evicted` rows (evictions as `layer:expert` joined by `;`).
pub fn admissions_csv(events: &[AdmissionEvent]) -> String {
    let mut s = String::from("step,layer,die,expert,evicted\n");
    for ev in events {
        let evicted: Vec<String> = ev.evicted.iter().map(|(l, e)| format!("{l}:{e}")).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            ev.step,
            ev.layer,
            ev.die.0,
            ev.expert,
            evicted.join(";")
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{MeshTopology, Preset};
    use crate::trace::ModelSpec;

    fn set(v: &[ExpertId]) -> BTreeSet<ExpertId> {
        v.iter().copied().collect()
    }

    /// Rows 1 and 4 rank {2,4} and {4,6} as their top two.
    fn worked_example_heatmap() -> OnlineHeatmapState {
        let mut hm = OnlineHeatmapState::new(1, 8);
        for (row, succ) in [(1u32, [2u32, 4]), (4, [4, 6])] {
            for _ in 0..3 {
                hm.observe_transition(0, &[row], &succ, 1.0);
            }
            hm.observe_transition(0, &[row], &[7], 1.0);
        }
        hm
    }

    #[test]
    fn worked_example_prediction_and_admission() {
        let hm = worked_example_heatmap();
        let cfg = PredictorConfig::default();
        let active = DieExperts::from([(DieId(0), set(&[1, 4]))]);
        let pred = predict_next(&active, &hm, 0, &cfg);
        assert_eq!(pred[&DieId(0)], set(&[2, 4, 6]));
        let remote = DieExperts::from([(DieId(0), set(&[1, 4]))]);
        let pt = PredictionTable::new(1);
        let admit = duplication_decisions(0, &pred, &remote, &pt);
        assert_eq!(admit[&DieId(0)], set(&[4]));
    }

    #[test]
    fn empty_active_predicts_nothing() {
        let hm = worked_example_heatmap();
        assert!(predict_next(&DieExperts::new(), &hm, 0, &PredictorConfig::default()).is_empty());
        // rows without support contribute nothing either
        let active = DieExperts::from([(DieId(3), set(&[5]))]);
        assert!(predict_next(&active, &hm, 0, &PredictorConfig::default()).is_empty());
    }

    #[test]
    fn identity_heatmap_predicts_self() {
        let mut hm = OnlineHeatmapState::new(1, 6);
        for e in 0..6 {
            hm.observe_transition(0, &[e], &[e], 1.0);
        }
        let active = DieExperts::from([(DieId(1), set(&[3]))]);
        let pred = predict_next(&active, &hm, 0, &PredictorConfig::default());
        assert!(pred[&DieId(1)].contains(&3));
    }

    #[test]
    fn already_local_experts_are_not_readmitted() {
        let pred = DieExperts::from([(DieId(0), set(&[2, 4]))]);
        let remote = DieExperts::from([(DieId(0), set(&[2, 4]))]);
        let mut pt = PredictionTable::new(1);
        pt.dies[0].is_local.extend([(0, 2), (0, 4)]);
        assert!(duplication_decisions(0, &pred, &remote, &pt).is_empty());
    }

    #[test]
    fn decay_and_increment() {
        let mut hm = OnlineHeatmapState::new(1, 3);
        hm.observe_transition(0, &[0], &[1], 1.0);
        assert_eq!(hm.count(0, 0, 1), 1.0);
        hm.observe_transition(0, &[0, 2], &[1], 1.0);
        assert_eq!(
            hm.counts(0),
            vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
        hm.decay(0, 0.5);
        hm.decay(0, 0.5);
        assert_eq!(hm.count(0, 0, 1), 0.5);
        assert_eq!(hm.count(0, 2, 1), 0.25);
        hm.observe_transition(0, &[2], &[2], 0.5);
        assert_eq!(hm.count(0, 2, 1), 0.125);
        assert_eq!(hm.count(0, 2, 2), 1.0);
    }

    #[test]
    fn capacity_one_admits_then_evicts() {
        let topo = MeshTopology::preset(Preset::Dojo);
        let spec = ModelSpec {
            name: "p".into(),
            num_layers: 1,
            moe_layer_ids: vec![0],
            num_experts: 10,
            top_k: 2,
            expert_bytes: 100,
            slices_per_expert: 2,
            activation_bytes: 1,
            flops_per_token_per_expert: 1.0,
        };
        let mut table = ExpertDistributionTable::initial_round_robin(&spec, &topo);
        let mut st = DuplicationState::with_capacity(25, 100, 100);
        let mut pt = PredictionTable::new(25);
        let admit = DieExperts::from([(DieId(20), set(&[4, 7]))]);
        let ev = apply_admissions(0, &admit, &mut pt, &mut st, &mut table, 0, 1).unwrap();
        assert_eq!(ev.len(), 2);
        assert!(ev[0].evicted.is_empty());
        assert_eq!(ev[1].evicted, vec![(0, 4)]);
        assert_eq!(pt.dies[20].is_local, BTreeSet::from([(0, 7)]));
        assert!(pt.mirrors(&st));
        assert!(st.consistent_with(&table));
        assert!(admissions_csv(&ev).ends_with("0,0,20,7,0:4\n"));
    }

    #[test]
    fn cp_en_tracks_latest_prediction() {
        let mut pt = PredictionTable::new(2);
        pt.set_cp_en(0, &DieExperts::from([(DieId(0), set(&[1, 2]))]));
        pt.set_cp_en(1, &DieExperts::from([(DieId(1), set(&[5]))]));
        pt.set_cp_en(0, &DieExperts::from([(DieId(1), set(&[3]))]));
        assert!(pt.dies[0].cp_en.is_empty());
        assert_eq!(pt.dies[1].cp_en, BTreeSet::from([(0, 3), (1, 5)]));
    }
}
