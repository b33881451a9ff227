//! Where expert weights live: home dies from the initial placement plus
//! dynamic duplicates held in each die's reserved DRAM region.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{DieId, MeshTopology};
use crate::trace::{ExpertId, ModelSpec};

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("layer {layer} expert {expert} out of range")]
    InvalidIndex { layer: usize, expert: ExpertId },
    #[error("{die} out of range ({num_dies} dies)")]
    InvalidDie { die: DieId, num_dies: usize },
    #[error("layer {layer} expert {expert} already resident on {die}")]
    AlreadyResident {
        die: DieId,
        layer: usize,
        expert: ExpertId,
    },
    #[error("expert of {bytes} bytes cannot fit a {capacity}-byte duplicate cache")]
    TooLarge { bytes: u64, capacity: u64 },
    #[error("invalid placement: {0}")]
    Invalid(String),
    #[error("placement file {path}: {reason}")]
    File { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExpertPlacement {
    pub home_dies: BTreeSet<DieId>,
    pub duplicate_dies: BTreeSet<DieId>,
}

impl ExpertPlacement {
    pub fn holds(&self, d: DieId) -> bool {
        self.home_dies.contains(&d) || self.duplicate_dies.contains(&d)
    }

    pub fn holders(&self) -> impl Iterator<Item = DieId> + '_ {
        self.home_dies.iter().chain(&self.duplicate_dies).copied()
    }
}

/// Per-layer, per-expert record of which dies hold the expert's weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertDistributionTable {
    pub num_dies: usize,
    pub layers: Vec<Vec<ExpertPlacement>>,
}

impl ExpertDistributionTable {
    /// Equal shares: expert `e` of every layer homes on die `e mod num_dies`.
    pub fn initial_round_robin(spec: &ModelSpec, topo: &MeshTopology) -> Self {
        let n = topo.num_dies();
        let layer: Vec<ExpertPlacement> = (0..spec.num_experts)
            .map(|e| ExpertPlacement {
                home_dies: BTreeSet::from([DieId(e % n)]),
                duplicate_dies: BTreeSet::new(),
            })
            .collect();
        Self {
            num_dies: n,
            layers: vec![layer; spec.num_moe_layers()],
        }
    }

    /// Arbitrary initial placement (`homes[layer][expert]`), e.g. from an
    /// external placement optimiser.
    pub fn from_homes(
        num_dies: usize,
        homes: Vec<Vec<BTreeSet<DieId>>>,
    ) -> Result<Self, PlacementError> {
        let t = Self {
            num_dies,
            layers: homes
                .into_iter()
                .map(|l| {
                    l.into_iter()
                        .map(|h| ExpertPlacement {
                            home_dies: h,
                            duplicate_dies: BTreeSet::new(),
                        })
                        .collect()
                })
                .collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        for (l, layer) in self.layers.iter().enumerate() {
            for (e, p) in layer.iter().enumerate() {
                if p.home_dies.is_empty() {
                    return Err(PlacementError::Invalid(format!(
                        "layer {l} expert {e} has no home die"
                    )));
                }
                if p.holders().any(|d| d.0 >= self.num_dies) {
                    return Err(PlacementError::Invalid(format!(
                        "layer {l} expert {e} placed on a die outside the mesh"
                    )));
                }
                if !p.home_dies.is_disjoint(&p.duplicate_dies) {
                    return Err(PlacementError::Invalid(format!(
                        "layer {l} expert {e} duplicated onto its own home"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn check_model(&self, spec: &ModelSpec) -> Result<(), PlacementError> {
        if self.layers.len() != spec.num_moe_layers()
            || self.layers.iter().any(|l| l.len() != spec.num_experts)
        {
            return Err(PlacementError::Invalid(format!(
                "table shape does not match {} layers x {} experts",
                spec.num_moe_layers(),
                spec.num_experts
            )));
        }
        Ok(())
    }

    pub fn entry(
        &self,
        layer: usize,
        expert: ExpertId,
    ) -> Result<&ExpertPlacement, PlacementError> {
        self.layers
            .get(layer)
            .and_then(|l| l.get(expert as usize))
            .ok_or(PlacementError::InvalidIndex { layer, expert })
    }

    pub(crate) fn at(&self, layer: usize, expert: ExpertId) -> &ExpertPlacement {
        &self.layers[layer][expert as usize]
    }

    /// Home dies plus current duplicates.
    pub fn dies_holding(
        &self,
        layer: usize,
        expert: ExpertId,
    ) -> Result<BTreeSet<DieId>, PlacementError> {
        Ok(self.entry(layer, expert)?.holders().collect())
    }

    /// Lowest-id home die (the expert's canonical location).
    pub fn primary_home(&self, layer: usize, expert: ExpertId) -> DieId {
        *self
            .at(layer, expert)
            .home_dies
            .first()
            .expect("validated: home_dies non-empty")
    }

    /// Closest holder of the expert to `die`, ties to the lowest die id.
    pub fn nearest_holder(
        &self,
        topo: &MeshTopology,
        layer: usize,
        expert: ExpertId,
        die: DieId,
    ) -> (DieId, usize) {
        self.at(layer, expert)
            .holders()
            .map(|h| (topo.hops(h, die), h))
            .min()
            .map(|(d, h)| (h, d))
            .expect("validated: home_dies non-empty")
    }

    /// Number of experts (over all layers) homed on each die.
    pub fn home_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_dies];
        for p in self.layers.iter().flatten() {
            for d in &p.home_dies {
                c[d.0] += 1;
            }
        }
        c
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), PlacementError> {
        let path = path.as_ref();
        let err = |reason: String| PlacementError::File {
            path: path.display().to_string(),
            reason,
        };
        let text = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, PlacementError> {
        let path = path.as_ref();
        let err = |reason: String| PlacementError::File {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }
}

/// (MoE layer, expert) key for duplicate residency.
pub type ExpertKey = (usize, ExpertId);

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DieCache {
    pub used_bytes: u64,
    /// Resident duplicates and their last-use tick.
    pub residents: BTreeMap<ExpertKey, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdmitReport {
    pub evicted: Vec<ExpertKey>,
}

/// LRU-managed duplicate caches, one per die.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicationState {
    pub capacity_bytes: u64,
    pub expert_bytes: u64,
    pub dies: Vec<DieCache>,
}

impl DuplicationState {
    pub fn new(topo: &MeshTopology, spec: &ModelSpec) -> Self {
        Self::with_capacity(
            topo.num_dies(),
            topo.die.cache_capacity_bytes(),
            spec.expert_bytes,
        )
    }

    pub fn with_capacity(num_dies: usize, capacity_bytes: u64, expert_bytes: u64) -> Self {
        Self {
            capacity_bytes,
            expert_bytes,
            dies: vec![DieCache::default(); num_dies],
        }
    }

    pub fn is_resident(&self, die: DieId, key: ExpertKey) -> bool {
        self.dies[die.0].residents.contains_key(&key)
    }

    /// Marks a resident duplicate as used at `now`; no-op otherwise.
    pub fn touch(&mut self, die: DieId, key: ExpertKey, now: u64) {
        if let Some(t) = self.dies[die.0].residents.get_mut(&key) {
            *t = (*t).max(now);
        }
    }

    /// Caches `expert` on `die`, evicting least-recently-used duplicates
    /// (oldest tick first, then lowest key) until it fits.
    pub fn admit_duplicate(
        &mut self,
        table: &mut ExpertDistributionTable,
        die: DieId,
        layer: usize,
        expert: ExpertId,
        now: u64,
    ) -> Result<AdmitReport, PlacementError> {
        if die.0 >= self.dies.len() {
            return Err(PlacementError::InvalidDie {
                die,
                num_dies: self.dies.len(),
            });
        }
        if table.entry(layer, expert)?.holds(die) {
            return Err(PlacementError::AlreadyResident { die, layer, expert });
        }
        if self.expert_bytes > self.capacity_bytes {
            return Err(PlacementError::TooLarge {
                bytes: self.expert_bytes,
                capacity: self.capacity_bytes,
            });
        }
        let cache = &mut self.dies[die.0];
        let mut report = AdmitReport::default();
        while cache.used_bytes + self.expert_bytes > self.capacity_bytes {
            let victim = cache
                .residents
                .iter()
                .map(|(k, t)| (*t, *k))
                .min()
                .map(|(_, k)| k)
                .expect("over capacity implies a resident");
            cache.residents.remove(&victim);
            cache.used_bytes -= self.expert_bytes;
            table.layers[victim.0][victim.1 as usize]
                .duplicate_dies
                .remove(&die);
            report.evicted.push(victim);
        }
        cache.residents.insert((layer, expert), now);
        cache.used_bytes += self.expert_bytes;
        table.layers[layer][expert as usize]
            .duplicate_dies
            .insert(die);
        Ok(report)
    }

    /// Residency here agrees with `table.duplicate_dies` and no die is over capacity.
    pub fn consistent_with(&self, table: &ExpertDistributionTable) -> bool {
        let mut from_table: BTreeSet<(DieId, ExpertKey)> = BTreeSet::new();
        for (l, layer) in table.layers.iter().enumerate() {
            for (e, p) in layer.iter().enumerate() {
                for d in &p.duplicate_dies {
                    from_table.insert((*d, (l, e as ExpertId)));
                }
            }
        }
        let mut from_state = BTreeSet::new();
        for (d, c) in self.dies.iter().enumerate() {
            if c.used_bytes > self.capacity_bytes
                || c.used_bytes != c.residents.len() as u64 * self.expert_bytes
            {
                return false;
            }
            for k in c.residents.keys() {
                from_state.insert((DieId(d), *k));
            }
        }
        from_table == from_state
    }
}
