//! Parameterised synthetic traces.
//!
//! Each MoE layer gets its own popularity ranking (a seeded permutation of
//! expert ids) with Zipf weights `1 / rank^s`. Every selection slot is filled
//! by one of three sources, tried in order:
//!
//! 1. with probability `stickiness`, an expert the previous token of the same
//!    request chose at this layer;
//! 2. with probability `layer_coupling`, a successor (from a fixed per-expert
//!    list) of an expert this token chose at the previous MoE layer;
//! 3. otherwise a draw from the layer's popularity distribution.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExpertId, ModelSpec, Phase, RequestTrace, TokenStep, TraceError, TraceSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub num_requests: usize,
    /// Decode tokens per request.
    pub tokens_per_request: usize,
    /// Prefill tokens per request, generated ahead of the decode tokens.
    pub prefill_tokens: usize,
    /// When set, the prefill phase is an exact copy of the decode phase.
    pub mirror_prefill: bool,
    pub zipf_s: f64,
    pub stickiness: f64,
    pub layer_coupling: f64,
    pub seed: u64,
    /// Tag key -> candidate values; each request draws one value per key.
    pub tags: BTreeMap<String, Vec<String>>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_requests: 16,
            tokens_per_request: 16,
            prefill_tokens: 0,
            mirror_prefill: false,
            zipf_s: 0.0,
            stickiness: 0.0,
            layer_coupling: 0.0,
            seed: 0,
            tags: BTreeMap::new(),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), TraceError> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(TraceError::InvalidParams(format!(
                    "{name}={v} not in [0,1]"
                )))
            }
        };
        prob("stickiness", self.stickiness)?;
        prob("layer_coupling", self.layer_coupling)?;
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return Err(TraceError::InvalidParams(format!(
                "zipf_s={} must be a finite value >= 0",
                self.zipf_s
            )));
        }
        if self.tags.values().any(Vec::is_empty) {
            return Err(TraceError::InvalidParams(
                "tag with no candidate values".into(),
            ));
        }
        Ok(())
    }
}

struct LayerModel {
    popularity: WeightedIndex<f64>,
    /// rank -> expert id
    ranking: Vec<ExpertId>,
    /// successors[e] = experts favoured at this layer after `e` at the previous one
    successors: Vec<Vec<ExpertId>>,
}

struct Generator<'a> {
    spec: &'a ModelSpec,
    p: &'a SynthParams,
    layers: Vec<LayerModel>,
    rng: ChaCha8Rng,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a ModelSpec, p: &'a SynthParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let e = spec.num_experts;
        let weights: Vec<f64> = (1..=e).map(|r| (r as f64).powf(-p.zipf_s)).collect();
        let mut layers: Vec<LayerModel> = Vec::with_capacity(spec.num_moe_layers());
        for _ in 0..spec.num_moe_layers() {
            let mut ranking: Vec<ExpertId> = (0..e as ExpertId).collect();
            ranking.shuffle(&mut rng);
            layers.push(LayerModel {
                popularity: WeightedIndex::new(&weights).expect("positive Zipf weights"),
                ranking,
                successors: Vec::new(),
            });
        }
        let mut gen = Generator {
            spec,
            p,
            layers,
            rng,
        };
        for l in 1..gen.layers.len() {
            let succ = (0..e)
                .map(|_| {
                    let mut picked = Vec::with_capacity(spec.top_k);
                    while picked.len() < spec.top_k {
                        let x = gen.popular(l, &picked);
                        picked.push(x);
                    }
                    picked
                })
                .collect();
            gen.layers[l].successors = succ;
        }
        gen
    }

    /// Popularity draw avoiding `taken`; falls back to a uniform pick among the rest.
    fn popular(&mut self, layer: usize, taken: &[ExpertId]) -> ExpertId {
        let lm = &self.layers[layer];
        for _ in 0..64 {
            let x = lm.ranking[lm.popularity.sample(&mut self.rng)];
            if !taken.contains(&x) {
                return x;
            }
        }
        let rest: Vec<ExpertId> = (0..self.spec.num_experts as ExpertId)
            .filter(|x| !taken.contains(x))
            .collect();
        *rest.choose(&mut self.rng).expect("top_k <= num_experts")
    }

    fn pick_from(&mut self, pool: &[ExpertId], taken: &[ExpertId]) -> Option<ExpertId> {
        let free: Vec<ExpertId> = pool
            .iter()
            .copied()
            .filter(|x| !taken.contains(x))
            .collect();
        free.choose(&mut self.rng).copied()
    }

    fn token(&mut self, prev: Option<&[Vec<ExpertId>]>) -> Vec<Vec<ExpertId>> {
        let k = self.spec.top_k;
        let mut out: Vec<Vec<ExpertId>> = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let mut chosen: Vec<ExpertId> = Vec::with_capacity(k);
            while chosen.len() < k {
                let mut pick = None;
                if let Some(prev) = prev {
                    if self.rng.random::<f64>() < self.p.stickiness {
                        pick = self.pick_from(&prev[l], &chosen);
                    }
                }
                if pick.is_none() && l > 0 && self.rng.random::<f64>() < self.p.layer_coupling {
                    let anchor = *out[l - 1]
                        .choose(&mut self.rng)
                        .expect("non-empty selection");
                    let pool = self.layers[l].successors[anchor as usize].clone();
                    pick = self.pick_from(&pool, &chosen);
                }
                let x = match pick {
                    Some(x) => x,
                    None => self.popular(l, &chosen),
                };
                chosen.push(x);
            }
            chosen.sort_unstable();
            out.push(chosen);
        }
        out
    }

    fn request(&mut self, idx: usize) -> RequestTrace {
        let mut tags = BTreeMap::new();
        for (key, values) in &self.p.tags {
            let v = values
                .choose(&mut self.rng)
                .expect("validated non-empty")
                .clone();
            tags.insert(key.clone(), v);
        }
        let (n_prefill, n_decode) = if self.p.mirror_prefill {
            (0, self.p.tokens_per_request)
        } else {
            (self.p.prefill_tokens, self.p.tokens_per_request)
        };
        let mut tokens: Vec<TokenStep> = Vec::with_capacity(n_prefill + n_decode);
        for i in 0..n_prefill + n_decode {
            let prev = tokens.last().map(|t| t.selections.as_slice());
            let sel = self.token(prev);
            let phase = if i < n_prefill {
                Phase::Prefill
            } else {
                Phase::Decode
            };
            tokens.push(TokenStep {
                phase,
                selections: sel,
            });
        }
        if self.p.mirror_prefill {
            let mirrored: Vec<TokenStep> = tokens
                .iter()
                .map(|t| TokenStep {
                    phase: Phase::Prefill,
                    selections: t.selections.clone(),
                })
                .collect();
            tokens.splice(0..0, mirrored);
        }
        RequestTrace {
            request_id: format!("syn-{idx:06}"),
            tokens,
            tags,
        }
    }
}

/// Deterministic synthetic trace for `(spec, p)`.
pub fn generate_synthetic(spec: &ModelSpec, p: &SynthParams) -> Result<TraceSet, TraceError> {
    spec.validate()?;
    p.validate()?;
    let mut gen = Generator::new(spec, p);
    let requests = (0..p.num_requests).map(|i| gen.request(i)).collect();
    Ok(TraceSet {
        model: spec.clone(),
        requests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(e: usize, k: usize, layers: usize) -> ModelSpec {
        ModelSpec {
            name: "syn".into(),
            num_layers: layers,
            moe_layer_ids: (0..layers).collect(),
            num_experts: e,
            top_k: k,
            expert_bytes: 2,
            slices_per_expert: 2,
            activation_bytes: 1,
            flops_per_token_per_expert: 1.0,
        }
    }

    #[test]
    fn same_seed_same_traces() {
        let s = spec(16, 4, 3);
        let p = SynthParams {
            seed: 42,
            zipf_s: 1.0,
            stickiness: 0.3,
            layer_coupling: 0.3,
            prefill_tokens: 4,
            ..Default::default()
        };
        let a = generate_synthetic(&s, &p).unwrap();
        assert_eq!(a, generate_synthetic(&s, &p).unwrap());
        a.validate().unwrap();
        let other = generate_synthetic(&s, &SynthParams { seed: 43, ..p }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn full_stickiness_top1_is_a_constant_chain() {
        let s = spec(32, 1, 4);
        let p = SynthParams {
            stickiness: 1.0,
            zipf_s: 0.5,
            num_requests: 20,
            tokens_per_request: 12,
            ..Default::default()
        };
        let ts = generate_synthetic(&s, &p).unwrap();
        for r in &ts.requests {
            for l in 0..4 {
                assert!(r
                    .tokens
                    .iter()
                    .all(|t| t.selections[l] == r.tokens[0].selections[l]));
            }
        }
    }

    #[test]
    fn stickiness_lower_bounds_repeat_fraction() {
        let s = spec(64, 4, 2);
        let p = SynthParams {
            stickiness: 0.4,
            num_requests: 200,
            tokens_per_request: 20,
            ..Default::default()
        };
        let ts = generate_synthetic(&s, &p).unwrap();
        let (mut rep, mut tot) = (0usize, 0usize);
        for r in &ts.requests {
            for w in r.tokens.windows(2) {
                for l in 0..2 {
                    tot += 1;
                    if w[1].selections[l]
                        .iter()
                        .any(|x| w[0].selections[l].contains(x))
                    {
                        rep += 1;
                    }
                }
            }
        }
        assert!(rep as f64 / tot as f64 >= 0.4, "{rep}/{tot}");
    }

    #[test]
    fn mirrored_prefill_equals_decode() {
        let s = spec(8, 2, 2);
        let p = SynthParams {
            mirror_prefill: true,
            tokens_per_request: 5,
            stickiness: 0.5,
            ..Default::default()
        };
        let ts = generate_synthetic(&s, &p).unwrap();
        for r in &ts.requests {
            let pre: Vec<_> = r.prefill().iter().map(|t| &t.selections).collect();
            let dec: Vec<_> = r.decode().iter().map(|t| &t.selections).collect();
            assert_eq!(pre, dec);
        }
    }

    #[test]
    fn rejects_bad_probabilities() {
        let s = spec(8, 2, 1);
        for p in [
            SynthParams {
                stickiness: 1.5,
                ..Default::default()
            },
            SynthParams {
                layer_coupling: -0.1,
                ..Default::default()
            },
            SynthParams {
                zipf_s: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                generate_synthetic(&s, &p),
                Err(TraceError::InvalidParams(_))
            ));
        }
    }
}
