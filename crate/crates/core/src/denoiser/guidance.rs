//! Guided spatial self-attention: the middle-frame blend and its ablation
//! variants (first-frame, sparse-causal, middle sparse-causal).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum AttentionStrategy {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "mf")]
    MiddleFrame,
    #[serde(rename = "ff")]
    FirstFrame,
    #[serde(rename = "sc")]
    SparseCausal,
    #[serde(rename = "msc")]
    MiddleSparseCausal,
}

impl AttentionStrategy {
    pub const ALL: [AttentionStrategy; 5] = [
        AttentionStrategy::None,
        AttentionStrategy::MiddleFrame,
        AttentionStrategy::FirstFrame,
        AttentionStrategy::SparseCausal,
        AttentionStrategy::MiddleSparseCausal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionStrategy::None => "none",
            AttentionStrategy::MiddleFrame => "mf",
            AttentionStrategy::FirstFrame => "ff",
            AttentionStrategy::SparseCausal => "sc",
            AttentionStrategy::MiddleSparseCausal => "msc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Argument(format!("unknown attention strategy {s:?}")))
    }

    /// Whether this strategy reads a cross-segment reference K/V cache.
    pub fn uses_cache(self) -> bool {
        matches!(
            self,
            AttentionStrategy::MiddleFrame | AttentionStrategy::FirstFrame | AttentionStrategy::MiddleSparseCausal
        )
    }

    /// Global index of the reference frame in an `n_prime`-frame video. The
    /// middle frame is taken as index ⌊N′/2⌋ counting from zero.
    pub fn reference_frame(self, n_prime: usize) -> Option<usize> {
        match self {
            AttentionStrategy::MiddleFrame | AttentionStrategy::MiddleSparseCausal => Some(n_prime / 2),
            AttentionStrategy::FirstFrame => Some(0),
            _ => None,
        }
    }
}

/// Reference keys/values per spatial self-attention layer, each `[1, HW, C]`.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    entries: HashMap<String, (Tensor, Tensor)>,
}

impl KvCache {
    pub fn get(&self, layer: &str) -> Option<&(Tensor, Tensor)> {
        self.entries.get(layer)
    }

    pub fn insert(&mut self, layer: &str, k: Tensor, v: Tensor) {
        self.entries.insert(layer.to_string(), (k, v));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Strategy, blend weight and reference cache for one denoising step.
#[derive(Debug, Clone, Default)]
pub struct AttentionGuidanceState {
    pub strategy: AttentionStrategy,
    pub omega: f32,
    pub cache: KvCache,
}

impl AttentionGuidanceState {
    pub fn new(strategy: AttentionStrategy, omega: f32) -> Result<Self> {
        check_omega(omega)?;
        Ok(Self {
            strategy,
            omega,
            cache: KvCache::default(),
        })
    }

    /// Guidance that leaves attention untouched; never needs a cache.
    pub fn none() -> Self {
        Self::default()
    }
}

fn check_omega(omega: f32) -> Result<()> {
    ensure!((0.0..=1.0).contains(&omega), Argument, "omega must lie in [0, 1], got {omega}");
    Ok(())
}

#[derive(Debug)]
enum Access<'a> {
    Off,
    Build(&'a mut KvCache),
    Read(&'a KvCache),
}

/// Per-clip view of the guidance state handed to the network: where the clip
/// sits in the full video and whether this pass builds or reads the cache.
#[derive(Debug)]
pub struct ClipGuidance<'a> {
    strategy: AttentionStrategy,
    omega: f32,
    clip_start: usize,
    reference: Option<usize>,
    access: Access<'a>,
}

impl<'a> ClipGuidance<'a> {
    /// Plain self-attention.
    pub fn off() -> ClipGuidance<'static> {
        ClipGuidance {
            strategy: AttentionStrategy::None,
            omega: 0.0,
            clip_start: 0,
            reference: None,
            access: Access::Off,
        }
    }

    /// Pass over the clip holding the reference frame; fills `state.cache`.
    pub fn build(state: &'a mut AttentionGuidanceState, clip_start: usize, n_prime: usize) -> Result<Self> {
        check_omega(state.omega)?;
        state.cache.clear();
        Ok(Self {
            strategy: state.strategy,
            omega: state.omega,
            clip_start,
            reference: state.strategy.reference_frame(n_prime),
            access: Access::Build(&mut state.cache),
        })
    }

    /// Pass over any other clip; the cache is read-only.
    pub fn read(state: &'a AttentionGuidanceState, clip_start: usize, n_prime: usize) -> Result<Self> {
        check_omega(state.omega)?;
        Ok(Self {
            strategy: state.strategy,
            omega: state.omega,
            clip_start,
            reference: state.strategy.reference_frame(n_prime),
            access: Access::Read(&state.cache),
        })
    }

    pub fn strategy(&self) -> AttentionStrategy {
        self.strategy
    }

    /// Reference keys/values for `layer`, `[1, HW, C]` each.
    fn reference_kv(&mut self, layer: &str, k: &Var, v: &Var) -> Result<(Var, Var, Option<usize>)> {
        let r = self.reference.expect("strategy without a reference frame");
        let frames = k.shape()[0];
        let local = r.checked_sub(self.clip_start).filter(|&l| l < frames);
        match &mut self.access {
            Access::Off => Err(Error::State("guidance is off".into())),
            Access::Build(cache) => {
                let l = local.ok_or_else(|| {
                    Error::State(format!(
                        "cache build pass over clip at {} does not contain reference frame {r}",
                        self.clip_start
                    ))
                })?;
                let kr = k.narrow0(l, 1)?;
                let vr = v.narrow0(l, 1)?;
                cache.insert(layer, kr.value().clone(), vr.value().clone());
                Ok((kr, vr, local))
            }
            Access::Read(cache) => {
                let (kr, vr) = cache
                    .get(layer)
                    .ok_or_else(|| Error::State(format!("no cached reference keys/values for layer {layer}")))?;
                Ok((Var::constant(kr.clone()), Var::constant(vr.clone()), local))
            }
        }
    }

    /// Attention over `[F, L, C]` projections of one clip under the strategy.
    pub(crate) fn attend(&mut self, layer: &str, q: &Var, k: &Var, v: &Var) -> Result<Var> {
        let f = q.shape()[0];
        match self.strategy {
            AttentionStrategy::None => Var::attention(q, k, v),
            AttentionStrategy::MiddleFrame | AttentionStrategy::FirstFrame => {
                let (kr, vr, local) = self.reference_kv(layer, k, v)?;
                let plain = Var::attention(q, k, v)?;
                if self.omega == 0.0 {
                    return Ok(plain);
                }
                let (l, c) = (q.shape()[1], q.shape()[2]);
                let flat = q.reshape(&[1, f * l, c])?;
                let guided = Var::attention(&flat, &kr, &vr)?.reshape(&[f, l, c])?;
                let w = self.omega;
                let blend = plain.scale(1.0 - w)?.add(&guided.scale(w)?)?;
                match local {
                    // The reference frame keeps exact self-attention.
                    Some(r) => {
                        let mut parts = Vec::new();
                        if r > 0 {
                            parts.push(blend.narrow0(0, r)?);
                        }
                        parts.push(plain.narrow0(r, 1)?);
                        if r + 1 < f {
                            parts.push(blend.narrow0(r + 1, f - r - 1)?);
                        }
                        Var::concat(&parts, 0)
                    }
                    None => Ok(blend),
                }
            }
            AttentionStrategy::SparseCausal | AttentionStrategy::MiddleSparseCausal => {
                let prev: Vec<usize> = (0..f).map(|i| i.saturating_sub(1)).collect();
                let (ka, va) = if self.strategy == AttentionStrategy::SparseCausal {
                    let first = vec![0; f];
                    (k.index_select0(&first)?, v.index_select0(&first)?)
                } else {
                    let (kr, vr, _) = self.reference_kv(layer, k, v)?;
                    let rep = vec![0; f];
                    (kr.index_select0(&rep)?, vr.index_select0(&rep)?)
                };
                let kk = Var::concat(&[ka, k.index_select0(&prev)?], 1)?;
                let vv = Var::concat(&[va, v.index_select0(&prev)?], 1)?;
                Var::attention(q, &kk, &vv)
            }
        }
    }
}

/// Tensor-level guided attention over projected `[F, L, C]` queries, keys and
/// values of one clip.
pub fn guided_spatial_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layer: &str,
    guidance: &mut ClipGuidance<'_>,
) -> Result<Tensor> {
    let out = guidance.attend(
        layer,
        &Var::constant(q.clone()),
        &Var::constant(k.clone()),
        &Var::constant(v.clone()),
    )?;
    Ok(out.value().clone())
}
