//! Experiment configuration: a TOML file, then environment, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use moesim::allocator::{CostParams, TokenHomes};
use moesim::engine::{SimConfig, Strategy};
use moesim::fabric::MeshTopology;
use moesim::predictor::PredictorConfig;
use moesim::profiler::CoactivationNormalizer;
use moesim::trace::{ModelSpec, PhaseFilter, SynthParams};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    /// Keep only the first N MoE layers.
    pub moe_layers: Option<usize>,
    pub num_experts: Option<usize>,
    pub top_k: Option<usize>,
    pub expert_bytes: Option<u64>,
    pub activation_bytes: Option<u64>,
    pub flops_per_token_per_expert: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "qwen3".into(),
            moe_layers: None,
            num_experts: None,
            top_k: None,
            expert_bytes: None,
            activation_bytes: None,
            flops_per_token_per_expert: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelSpec, CliError> {
        let mut m = ModelSpec::by_name(&self.preset).ok_or_else(|| {
            CliError::Config(format!(
                "unknown model preset {:?} (qwen3, deepseek_v3, llama4_maverick)",
                self.preset
            ))
        })?;
        if let Some(n) = self.moe_layers {
            m = m.truncated(n);
        }
        if let Some(v) = self.num_experts {
            m.num_experts = v;
        }
        if let Some(v) = self.top_k {
            m.top_k = v;
        }
        if let Some(v) = self.expert_bytes {
            m.expert_bytes = v;
        }
        if let Some(v) = self.activation_bytes {
            m.activation_bytes = v;
        }
        if let Some(v) = self.flops_per_token_per_expert {
            m.flops_per_token_per_expert = v;
        }
        m.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    pub preset: String,
    pub x_dies: Option<usize>,
    pub y_dies: Option<usize>,
    pub compute: Option<f64>,
    pub dram_bw: Option<f64>,
    pub dram_capacity: Option<u64>,
    pub d2d_bw: Option<f64>,
    pub reserved_cache_fraction: Option<f64>,
}

impl Default for TopologySection {
    fn default() -> Self {
        Self {
            preset: "dojo".into(),
            x_dies: None,
            y_dies: None,
            compute: None,
            dram_bw: None,
            dram_capacity: None,
            d2d_bw: None,
            reserved_cache_fraction: None,
        }
    }
}

impl TopologySection {
    pub fn resolve(&self) -> Result<MeshTopology, CliError> {
        let mut t = MeshTopology::preset_by_name(&self.preset)
            .map_err(|e| CliError::Config(e.to_string()))?;
        t.x_dies = self.x_dies.unwrap_or(t.x_dies);
        t.y_dies = self.y_dies.unwrap_or(t.y_dies);
        let d = &mut t.die;
        d.compute = self.compute.unwrap_or(d.compute);
        d.dram_bw = self.dram_bw.unwrap_or(d.dram_bw);
        d.dram_capacity = self.dram_capacity.unwrap_or(d.dram_capacity);
        d.d2d_bw = self.d2d_bw.unwrap_or(d.d2d_bw);
        d.reserved_cache_fraction = self
            .reserved_cache_fraction
            .unwrap_or(d.reserved_cache_fraction);
        t.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub path: PathBuf,
    /// Skip malformed records instead of failing.
    #[serde(default)]
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub token_homes: TokenHomes,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_steps: None,
            token_homes: TokenHomes::RoundRobin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    /// MoE layer indices to export; all when absent.
    pub layers: Option<Vec<usize>>,
    pub phases: Vec<PhaseFilter>,
    /// Fraction used for the cumulative top-share summary.
    pub top_fraction: f64,
    pub normalizer: CoactivationNormalizer,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            layers: None,
            phases: vec![PhaseFilter::Both, PhaseFilter::Prefill, PhaseFilter::Decode],
            top_fraction: 0.1,
            normalizer: CoactivationNormalizer::RandomPair,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives every random choice, including the synthetic generator.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub strategies: Vec<Strategy>,
    pub model: ModelSection,
    pub topology: TopologySection,
    pub synth: Option<SynthParams>,
    pub trace: Option<TraceSection>,
    pub sim: SimSection,
    pub cost: CostParams,
    pub predictor: PredictorConfig,
    pub profile: ProfileSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            strategies: Strategy::ALL.to_vec(),
            model: ModelSection::default(),
            topology: TopologySection::default(),
            synth: None,
            trace: None,
            sim: SimSection::default(),
            cost: CostParams::default(),
            predictor: PredictorConfig::default(),
            profile: ProfileSection::default(),
        }
    }
}

pub enum Source<'a> {
    Synth(SynthParams),
    Trace(&'a TraceSection),
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The single trace source, with the synthetic generator seeded from `seed`.
    pub fn source(&self) -> Result<Source<'_>, CliError> {
        match (&self.synth, &self.trace) {
            (Some(s), None) => Ok(Source::Synth(SynthParams {
                seed: self.seed,
                ..s.clone()
            })),
            (None, Some(t)) => Ok(Source::Trace(t)),
            (Some(_), Some(_)) => Err(CliError::Config(
                "both [synth] and [trace] are set; choose one trace source".into(),
            )),
            (None, None) => Err(CliError::Config(
                "no trace source: add a [synth] section or a [trace] path".into(),
            )),
        }
    }

    pub fn sim_config(&self, model: &ModelSpec, strategy: Strategy) -> Result<SimConfig, CliError> {
        let mut c = SimConfig::new(
            self.topology.resolve()?,
            model.clone(),
            strategy,
            self.sim.batch_size,
        );
        c.max_steps = self.sim.max_steps;
        c.cost = self.cost.clone();
        c.predictor = self.predictor.clone();
        c.token_homes = self.sim.token_homes.clone();
        c.seed = self.seed;
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.strategies.is_empty() {
            return Err(CliError::Config("strategies must not be empty".into()));
        }
        self.model.resolve()?;
        self.topology.resolve()?;
        self.cost.validate().map_err(CliError::Config)?;
        self.predictor.validate().map_err(CliError::Config)?;
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// One-line JSON used in every output header.
    pub fn header_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// `# config=...` and `# seed=...` comment lines.
    pub fn header_lines(&self) -> Vec<String> {
        vec![
            format!("config={}", self.header_json()),
            format!("seed={}", self.seed),
        ]
    }
}
