//! 2D-mesh multi-chiplet topology.
//!
//! Dies are numbered row-major: die `(x, y)` has id `y * x_dies + x`. Links
//! join mesh-adjacent dies, are full duplex, and each direction carries
//! `d2d_bw` bytes/s. Routing is dimension ordered (X first, then Y).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FabricError {
    #[error("unknown topology preset {0:?} (expected dojo or tsmc_sow)")]
    UnknownPreset(String),
    #[error("die {die} out of range for a {x}x{y} mesh")]
    InvalidDie { die: usize, x: usize, y: usize },
    #[error("invalid die spec: {0}")]
    InvalidDieSpec(String),
    #[error("mesh must have at least one die")]
    EmptyMesh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DieId(pub usize);

impl fmt::Display for DieId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "die{}", self.0)
    }
}

/// Directed mesh link between two adjacent dies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub from: DieId,
    pub to: DieId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DieSpec {
    /// FP8 FLOP/s.
    pub compute: f64,
    /// Local HBM bandwidth, bytes/s.
    pub dram_bw: f64,
    pub dram_capacity: u64,
    /// Per-direction die-to-die link bandwidth, bytes/s.
    pub d2d_bw: f64,
    /// Share of DRAM set aside for hardware-managed expert duplicates.
    pub reserved_cache_fraction: f64,
}

impl DieSpec {
    pub fn validate(&self) -> Result<(), FabricError> {
        let positive =
            self.compute > 0.0 && self.dram_bw > 0.0 && self.d2d_bw > 0.0 && self.dram_capacity > 0;
        if !positive {
            return Err(FabricError::InvalidDieSpec(
                "compute, bandwidths and capacity must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.reserved_cache_fraction) {
            return Err(FabricError::InvalidDieSpec(format!(
                "reserved_cache_fraction {} not in [0, 1)",
                self.reserved_cache_fraction
            )));
        }
        Ok(())
    }

    pub fn cache_capacity_bytes(&self) -> u64 {
        (self.dram_capacity as f64 * self.reserved_cache_fraction).floor() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Dojo,
    TsmcSow,
}

impl std::str::FromStr for Preset {
    type Err = FabricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dojo" => Ok(Preset::Dojo),
            "tsmc_sow" | "tsmc-sow" => Ok(Preset::TsmcSow),
            other => Err(FabricError::UnknownPreset(other.into())),
        }
    }
}

const TB: f64 = 1e12;
const GB: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshTopology {
    pub x_dies: usize,
    pub y_dies: usize,
    pub die: DieSpec,
}

impl MeshTopology {
    pub fn new(x_dies: usize, y_dies: usize, die: DieSpec) -> Result<Self, FabricError> {
        if x_dies == 0 || y_dies == 0 {
            return Err(FabricError::EmptyMesh);
        }
        die.validate()?;
        Ok(Self {
            x_dies,
            y_dies,
            die,
        })
    }

    /// Hardware presets: Dojo is a 5×5 mesh, TSMC SoW a 3×8 mesh, both with
    /// 1000 TFLOPS, 2 TB/s HBM, 1.5 TB/s D2D, 256 GB and a 10% reserve.
    pub fn preset(p: Preset) -> Self {
        let die = DieSpec {
            compute: 1000.0 * TB,
            dram_bw: 2.0 * TB,
            dram_capacity: 256 * GB,
            d2d_bw: 1.5 * TB,
            reserved_cache_fraction: 0.10,
        };
        let (x, y) = match p {
            Preset::Dojo => (5, 5),
            Preset::TsmcSow => (3, 8),
        };
        Self {
            x_dies: x,
            y_dies: y,
            die,
        }
    }

    pub fn preset_by_name(name: &str) -> Result<Self, FabricError> {
        name.parse().map(Self::preset)
    }

    pub fn validate(&self) -> Result<(), FabricError> {
        if self.x_dies == 0 || self.y_dies == 0 {
            return Err(FabricError::EmptyMesh);
        }
        self.die.validate()
    }

    pub fn num_dies(&self) -> usize {
        self.x_dies * self.y_dies
    }

    pub fn dies(&self) -> impl Iterator<Item = DieId> {
        (0..self.num_dies()).map(DieId)
    }

    pub fn check(&self, d: DieId) -> Result<DieId, FabricError> {
        if d.0 < self.num_dies() {
            Ok(d)
        } else {
            Err(FabricError::InvalidDie {
                die: d.0,
                x: self.x_dies,
                y: self.y_dies,
            })
        }
    }

    pub fn die_at(&self, x: usize, y: usize) -> Result<DieId, FabricError> {
        if x >= self.x_dies || y >= self.y_dies {
            return Err(FabricError::InvalidDie {
                die: y * self.x_dies + x,
                x: self.x_dies,
                y: self.y_dies,
            });
        }
        Ok(DieId(y * self.x_dies + x))
    }

    pub fn coords(&self, d: DieId) -> (usize, usize) {
        (d.0 % self.x_dies, d.0 / self.x_dies)
    }

    /// Hop distance `|xa - xb| + |ya - yb|`.
    pub fn manhattan(&self, a: DieId, b: DieId) -> Result<usize, FabricError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.hops(a, b))
    }

    /// Unchecked [`manhattan`](Self::manhattan) for ids already known to be valid.
    pub(crate) fn hops(&self, a: DieId, b: DieId) -> usize {
        let (xa, ya) = self.coords(a);
        let (xb, yb) = self.coords(b);
        xa.abs_diff(xb) + ya.abs_diff(yb)
    }

    /// All dies within `dis` hops of `center`, including `center`.
    pub fn dies_within(&self, center: DieId, dis: usize) -> Result<BTreeSet<DieId>, FabricError> {
        self.check(center)?;
        let (cx, cy) = self.coords(center);
        let mut out = BTreeSet::new();
        let y_lo = cy.saturating_sub(dis);
        let y_hi = (cy + dis).min(self.y_dies - 1);
        for y in y_lo..=y_hi {
            let rem = dis - cy.abs_diff(y);
            let x_lo = cx.saturating_sub(rem);
            let x_hi = (cx + rem).min(self.x_dies - 1);
            for x in x_lo..=x_hi {
                out.insert(DieId(y * self.x_dies + x));
            }
        }
        Ok(out)
    }

    /// X-then-Y dimension-ordered route from `a` to `b`.
    pub fn route_path(&self, a: DieId, b: DieId) -> Result<Vec<Link>, FabricError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.route(a, b))
    }

    pub(crate) fn route(&self, a: DieId, b: DieId) -> Vec<Link> {
        let (mut x, mut y) = self.coords(a);
        let (tx, ty) = self.coords(b);
        let mut links = Vec::with_capacity(self.hops(a, b));
        let id = |x: usize, y: usize| DieId(y * self.x_dies + x);
        while x != tx {
            let nx = if tx > x { x + 1 } else { x - 1 };
            links.push(Link {
                from: id(x, y),
                to: id(nx, y),
            });
            x = nx;
        }
        while y != ty {
            let ny = if ty > y { y + 1 } else { y - 1 };
            links.push(Link {
                from: id(x, y),
                to: id(x, ny),
            });
            y = ny;
        }
        links
    }

    /// Dense index for a directed link between adjacent dies: 4 slots per die
    /// (+x, -x, +y, -y).
    pub(crate) fn link_index(&self, l: Link) -> usize {
        let (fx, fy) = self.coords(l.from);
        let (tx, ty) = self.coords(l.to);
        let dir = if tx > fx {
            0
        } else if tx < fx {
            1
        } else if ty > fy {
            2
        } else {
            3
        };
        l.from.0 * 4 + dir
    }

    pub(crate) fn link_slots(&self) -> usize {
        self.num_dies() * 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dojo() -> MeshTopology {
        MeshTopology::preset(Preset::Dojo)
    }

    #[test]
    fn presets() {
        let d = dojo();
        assert_eq!((d.x_dies, d.y_dies, d.num_dies()), (5, 5, 25));
        let t = MeshTopology::preset_by_name("tsmc_sow").unwrap();
        assert_eq!((t.x_dies, t.y_dies, t.num_dies()), (3, 8, 24));
        assert_eq!(d.die.reserved_cache_fraction, 0.10);
        assert_eq!(d.die.cache_capacity_bytes(), 25_600_000_000);
        assert!(matches!(
            MeshTopology::preset_by_name("cerebras"),
            Err(FabricError::UnknownPreset(_))
        ));
    }

    #[test]
    fn manhattan_cases() {
        let d = dojo();
        let o = d.die_at(0, 0).unwrap();
        assert_eq!(d.manhattan(o, o).unwrap(), 0);
        assert_eq!(d.manhattan(o, d.die_at(2, 3).unwrap()).unwrap(), 5);
        assert!(d.manhattan(o, DieId(25)).is_err());
    }

    #[test]
    fn dies_within_cases() {
        let d = dojo();
        let c = d.die_at(2, 2).unwrap();
        assert_eq!(d.dies_within(c, 0).unwrap(), BTreeSet::from([c]));
        assert_eq!(d.dies_within(c, 1).unwrap().len(), 5);
        assert_eq!(d.dies_within(DieId(0), 1).unwrap().len(), 3);
        assert_eq!(d.dies_within(c, 2).unwrap().len(), 13);
        assert!(d.dies_within(DieId(99), 1).is_err());
    }

    #[test]
    fn routes_are_x_first() {
        let d = dojo();
        let at = |x, y| d.die_at(x, y).unwrap();
        assert_eq!(
            d.route_path(at(0, 0), at(2, 0)).unwrap(),
            vec![
                Link {
                    from: at(0, 0),
                    to: at(1, 0)
                },
                Link {
                    from: at(1, 0),
                    to: at(2, 0)
                }
            ]
        );
        assert_eq!(
            d.route_path(at(0, 0), at(1, 1)).unwrap(),
            vec![
                Link {
                    from: at(0, 0),
                    to: at(1, 0)
                },
                Link {
                    from: at(1, 0),
                    to: at(1, 1)
                }
            ]
        );
        assert!(d.route_path(at(3, 3), at(3, 3)).unwrap().is_empty());
    }

    #[test]
    fn die_spec_validation() {
        let mut s = dojo().die;
        s.reserved_cache_fraction = 1.0;
        assert!(s.validate().is_err());
        let mut s = dojo().die;
        s.d2d_bw = 0.0;
        assert!(MeshTopology::new(2, 2, s).is_err());
        assert_eq!(
            MeshTopology::new(0, 2, dojo().die),
            Err(FabricError::EmptyMesh)
        );
    }
}
