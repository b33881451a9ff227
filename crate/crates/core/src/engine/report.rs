use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EngineError, KernelResult, SimConfig, Strategy};
use crate::predictor::AdmissionEvent;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Totals {
    /// Sum of kernel makespans, seconds.
    pub time: f64,
    pub hops: u64,
    pub local_read_bytes: u64,
    pub remote_read_bytes: u64,
    pub local_write_bytes: u64,
    pub work: u64,
}

/// Shares of all DRAM traffic.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DramBreakdown {
    pub local_read: f64,
    pub remote_read: f64,
    pub local_write: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictorStats {
    pub predicted: u64,
    pub hits: u64,
    pub admissions: u64,
    pub evictions: u64,
}

impl PredictorStats {
    /// Share of predicted (die, expert) pairs that were used next kernel.
    pub fn precision(&self) -> Option<f64> {
        (self.predicted > 0).then(|| self.hits as f64 / self.predicted as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SimConfig,
    pub tokens_generated: u64,
    /// Generated tokens per second of simulated time.
    pub throughput: f64,
    pub totals: Totals,
    pub dram: DramBreakdown,
    pub predictor: PredictorStats,
    pub kernels: Vec<KernelResult>,
    pub admissions: Vec<AdmissionEvent>,
}

impl RunReport {
    pub fn new(
        config: SimConfig,
        kernels: Vec<KernelResult>,
        tokens_generated: u64,
        admissions: Vec<AdmissionEvent>,
    ) -> Self {
        let mut t = Totals::default();
        let mut ps = PredictorStats::default();
        for k in &kernels {
            t.time += k.makespan;
            t.hops += k.hop_count;
            t.local_read_bytes += k.dram_local_read_bytes;
            t.remote_read_bytes += k.dram_remote_read_bytes;
            t.local_write_bytes += k.dram_local_write_bytes;
            t.work += k.work;
            ps.predicted += k.predicted;
            ps.hits += k.predicted_hits;
        }
        ps.admissions = admissions.len() as u64;
        ps.evictions = admissions.iter().map(|a| a.evicted.len() as u64).sum();
        let all = (t.local_read_bytes + t.remote_read_bytes + t.local_write_bytes) as f64;
        let frac = |b: u64| if all > 0.0 { b as f64 / all } else { 0.0 };
        let dram = DramBreakdown {
            local_read: frac(t.local_read_bytes),
            remote_read: frac(t.remote_read_bytes),
            local_write: frac(t.local_write_bytes),
        };
        let throughput = if t.time > 0.0 {
            tokens_generated as f64 / t.time
        } else {
            0.0
        };
        Self {
            config,
            tokens_generated,
            throughput,
            totals: t,
            dram,
            predictor: ps,
            kernels,
            admissions,
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }
}

/// `step,layer,strategy,makespan,hops,local_rd,remote_rd,local_wr` rows for each report.
pub fn kernels_csv(reports: &[&RunReport]) -> String {
    let mut s = String::from("step,layer,strategy,makespan,hops,local_rd,remote_rd,local_wr\n");
    for r in reports {
        for k in &r.kernels {
            let _ = writeln!(
                s,
                "{},{},{},{:e},{},{},{},{}",
                k.step,
                k.layer,
                r.strategy(),
                k.makespan,
                k.hop_count,
                k.dram_local_read_bytes,
                k.dram_remote_read_bytes,
                k.dram_local_write_bytes
            );
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub throughput: f64,
    /// Throughput relative to the base run.
    pub speedup: f64,
    pub hops: u64,
    /// `base hops / hops`; 10 means hops dropped to a tenth.
    pub hop_reduction: Option<f64>,
    pub dram: DramBreakdown,
    pub predictor_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, s: Strategy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "strategy,throughput,speedup,hops,hop_reduction,local_read,remote_read,local_write\n",
        );
        for r in &self.rows {
            let hr = r
                .hop_reduction
                .map_or("inf".to_string(), |v| format!("{v}"));
            let _ = writeln!(
                s,
                "{},{:e},{},{},{},{},{},{}",
                r.strategy,
                r.throughput,
                r.speedup,
                r.hops,
                hr,
                r.dram.local_read,
                r.dram.remote_read,
                r.dram.local_write
            );
        }
        s
    }
}

/// Normalizes every report against the base run. All reports must share the
/// same configuration apart from the strategy.
pub fn compare(reports: &[RunReport]) -> Result<ComparisonTable, EngineError> {
    let base = reports
        .iter()
        .find(|r| r.strategy() == Strategy::Base)
        .ok_or_else(|| EngineError::Config("comparison needs a base run".into()))?;
    let fp = base.config.fingerprint();
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        if r.config.fingerprint() != fp {
            return Err(EngineError::Config(format!(
                "{} run was made with a different configuration than base",
                r.strategy()
            )));
        }
        rows.push(ComparisonRow {
            strategy: r.strategy(),
            throughput: r.throughput,
            speedup: if base.throughput > 0.0 {
                r.throughput / base.throughput
            } else {
                0.0
            },
            hops: r.totals.hops,
            hop_reduction: (r.totals.hops > 0)
                .then(|| base.totals.hops as f64 / r.totals.hops as f64),
            dram: r.dram,
            predictor_precision: r.predictor.precision(),
        });
    }
    rows.sort_by_key(|r| r.strategy);
    Ok(ComparisonTable { rows })
}
