//! Building blocks of the pseudo-3D UNet and the parameter layout they use.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};

use crate::denoiser::config::{DenoiserConfig, LEVELS};
use crate::denoiser::guidance::ClipGuidance;
use crate::denoiser::weights::{ParamGroup, SpecBuilder, Weights};
use crate::error::{ensure, Error, Result};
use crate::numerics::kernels::sinusoidal_encoding_bounded;
use crate::numerics::{Graph, Tensor, Var};

/// Weights bound as graph values for one forward pass.
pub struct Params {
    vars: HashMap<String, Var>,
    used: RefCell<BTreeSet<String>>,
}

impl Params {
    /// Every weight as a constant (inference).
    pub fn constants(w: &Weights) -> Self {
        let vars = w.iter().map(|(n, t)| (n.to_string(), Var::constant(t.clone()))).collect();
        Self {
            vars,
            used: RefCell::default(),
        }
    }

    /// Every weight registered on `graph`; only `trainable` groups get gradients.
    pub fn on_graph(graph: &mut Graph, w: &Weights, trainable: &[ParamGroup]) -> Self {
        let vars = w
            .iter()
            .map(|(n, t)| {
                let train = trainable.contains(&ParamGroup::of(n));
                (n.to_string(), graph.param(n, t.clone(), train))
            })
            .collect();
        Self {
            vars,
            used: RefCell::default(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        let v = self
            .vars
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("no weight named {name}")))?;
        self.used.borrow_mut().insert(name.to_string());
        Ok(v)
    }

    pub fn used(&self) -> BTreeSet<String> {
        self.used.borrow().clone()
    }
}

/// Everything a block needs besides its input.
pub(crate) struct Ctx<'a, 'g, 'c> {
    pub cfg: &'a DenoiserConfig,
    pub p: &'a Params,
    /// `[1, L, text_dim]` prompt embedding.
    pub text: Var,
    pub guide: &'g mut ClipGuidance<'c>,
}

impl Ctx<'_, '_, '_> {
    fn w(&self, prefix: &str, leaf: &str) -> Result<Var> {
        self.p.get(&format!("{prefix}.{leaf}"))
    }

    pub fn conv(&self, name: &str, x: &Var, stride: usize, pad: usize) -> Result<Var> {
        x.conv2d(&self.w(name, "weight")?, Some(&self.w(name, "bias")?), stride, pad)
    }

    pub fn linear(&self, name: &str, x: &Var, bias: bool) -> Result<Var> {
        let b = if bias { Some(self.w(name, "bias")?) } else { None };
        x.linear(&self.w(name, "weight")?, b.as_ref())
    }

    pub fn norm(&self, name: &str, x: &Var) -> Result<Var> {
        let groups = self.cfg.groups_for(x.shape()[1]);
        x.group_norm(groups, &self.w(name, "gamma")?, &self.w(name, "beta")?)
    }
}

pub(crate) fn resblock_specs(b: &mut SpecBuilder, cfg: &DenoiserConfig, prefix: &str, c_in: usize, c_out: usize) {
    b.norm(&format!("{prefix}.norm1"), c_in);
    b.conv(&format!("{prefix}.conv1"), c_out, c_in, 3, false);
    b.linear(&format!("{prefix}.temb"), c_out, cfg.time_embed_dim, true, false);
    b.norm(&format!("{prefix}.norm2"), c_out);
    b.conv(&format!("{prefix}.conv2"), c_out, c_out, 3, false);
    if c_in != c_out {
        b.conv(&format!("{prefix}.skip"), c_out, c_in, 1, false);
    }
}

/// Residual block with the timestep embedding added between the convolutions.
/// `temb` is `[F, time_embed_dim]`.
pub(crate) fn resblock(ctx: &Ctx, prefix: &str, x: &Var, temb: &Var, c_out: usize) -> Result<Var> {
    let c_in = x.shape()[1];
    let h = ctx.norm(&format!("{prefix}.norm1"), x)?.silu()?;
    let h = ctx.conv(&format!("{prefix}.conv1"), &h, 1, 1)?;
    let e = ctx.linear(&format!("{prefix}.temb"), &temb.silu()?, true)?;
    let h = h.add_batch_channel(&e)?;
    let h = ctx.norm(&format!("{prefix}.norm2"), &h)?.silu()?;
    let h = ctx.conv(&format!("{prefix}.conv2"), &h, 1, 1)?;
    let skip = if c_in != c_out {
        ctx.conv(&format!("{prefix}.skip"), x, 1, 0)?
    } else {
        x.clone()
    };
    skip.add(&h)
}

/// `[F, C, H, W]` → `[F, HW, C]`.
fn to_tokens(x: &Var) -> Result<Var> {
    let s = x.shape();
    let (f, c, hw) = (s[0], s[1], s[2] * s[3]);
    x.reshape(&[f, c, hw])?.permute(&[0, 2, 1])
}

fn from_tokens(t: &Var, like: &[usize]) -> Result<Var> {
    t.permute(&[0, 2, 1])?.reshape(like)
}

pub(crate) fn attn_specs(b: &mut SpecBuilder, prefix: &str, c: usize, kv_in: usize) {
    b.norm(&format!("{prefix}.norm"), c);
    b.linear(&format!("{prefix}.q"), c, c, false, false);
    b.linear(&format!("{prefix}.k"), c, kv_in, false, false);
    b.linear(&format!("{prefix}.v"), c, kv_in, false, false);
    b.linear(&format!("{prefix}.out"), c, c, true, false);
}

/// Per-frame spatial self-attention; the layer name doubles as the cache key
/// for guidance.
pub(crate) fn spatial_attention(ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
    let tok = to_tokens(&ctx.norm(&format!("{prefix}.norm"), x)?)?;
    let q = ctx.linear(&format!("{prefix}.q"), &tok, false)?;
    let k = ctx.linear(&format!("{prefix}.k"), &tok, false)?;
    let v = ctx.linear(&format!("{prefix}.v"), &tok, false)?;
    let a = ctx.guide.attend(prefix, &q, &k, &v)?;
    let o = ctx.linear(&format!("{prefix}.out"), &a, true)?;
    x.add(&from_tokens(&o, x.shape())?)
}

/// Per-frame attention onto the prompt tokens.
pub(crate) fn cross_attention(ctx: &Ctx, prefix: &str, x: &Var) -> Result<Var> {
    let f = x.shape()[0];
    let tok = to_tokens(&ctx.norm(&format!("{prefix}.norm"), x)?)?;
    let q = ctx.linear(&format!("{prefix}.q"), &tok, false)?;
    let text = ctx.text.index_select0(&vec![0; f])?;
    let k = ctx.linear(&format!("{prefix}.k"), &text, false)?;
    let v = ctx.linear(&format!("{prefix}.v"), &text, false)?;
    let a = Var::attention(&q, &k, &v)?;
    let o = ctx.linear(&format!("{prefix}.out"), &a, true)?;
    x.add(&from_tokens(&o, x.shape())?)
}

pub(crate) fn motion_specs(b: &mut SpecBuilder, prefix: &str, c: usize) {
    b.linear(&format!("{prefix}.q"), c, c, false, false);
    b.linear(&format!("{prefix}.k"), c, c, false, false);
    b.linear(&format!("{prefix}.v"), c, c, false, false);
    b.linear(&format!("{prefix}.out"), c, c, true, true);
}

/// Projections of one motion module.
#[derive(Debug, Clone)]
pub struct MotionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

fn positions(frames: usize, dim: usize, max_len: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames * dim);
    for p in 0..frames {
        data.extend_from_slice(sinusoidal_encoding_bounded(p, dim, max_len)?.data());
    }
    Ok(Tensor::from_parts(vec![frames, dim], data))
}

fn motion_core(x: &Var, w: [&Var; 5], max_len: usize) -> Result<Var> {
    let s = x.shape().to_vec();
    ensure!(s.len() == 4, Argument, "temporal attention expects [N, C, H, W], got {s:?}");
    let (f, c, h, wd) = (s[0], s[1], s[2], s[3]);
    ensure!(f <= max_len, Range, "{f} frames exceed the positional table of {max_len}");
    let tok = x.permute(&[2, 3, 0, 1])?.reshape(&[h * wd, f, c])?;
    let tok = tok.add_leading(&Var::constant(positions(f, c, max_len)?))?;
    let q = tok.linear(w[0], None)?;
    let k = tok.linear(w[1], None)?;
    let v = tok.linear(w[2], None)?;
    let a = Var::attention(&q, &k, &v)?;
    let o = a.linear(w[3], Some(w[4]))?;
    let o = o.reshape(&[h, wd, f, c])?.permute(&[2, 3, 0, 1])?;
    x.add(&o)
}

/// Pixel-wise self-attention along the frame axis with a residual connection.
pub(crate) fn motion_module(ctx: &Ctx, prefix: &str, x: &Var) -> Result<Var> {
    let g = |leaf: &str| ctx.p.get(&format!("{prefix}.{leaf}"));
    let w = [g("q.weight")?, g("k.weight")?, g("v.weight")?, g("out.weight")?, g("out.bias")?];
    motion_core(x, [&w[0], &w[1], &w[2], &w[3], &w[4]], ctx.cfg.temporal_max_len)
}

/// Tensor-level motion module over `[N, C, H, W]` features.
pub fn temporal_attention(features: &Tensor, params: &MotionParams, max_len: usize) -> Result<Tensor> {
    let c = |t: &Tensor| Var::constant(t.clone());
    let w = [c(&params.wq), c(&params.wk), c(&params.wv), c(&params.wo), c(&params.bo)];
    let out = motion_core(&c(features), [&w[0], &w[1], &w[2], &w[3], &w[4]], max_len)?;
    Ok(out.value().clone())
}

/// One encoder/decoder/middle block: residual block, then spatial and cross
/// attention at attention resolutions, then the motion module.
pub(crate) fn block_specs(
    b: &mut SpecBuilder,
    cfg: &DenoiserConfig,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    attention: bool,
) {
    resblock_specs(b, cfg, &format!("{prefix}.res"), c_in, c_out);
    if attention {
        attn_specs(b, &format!("{prefix}.attn"), c_out, c_out);
        attn_specs(b, &format!("{prefix}.xattn"), c_out, cfg.text_dim);
    }
    motion_specs(b, &format!("{prefix}.motion"), c_out);
}

pub(crate) fn block(ctx: &mut Ctx, prefix: &str, x: &Var, temb: &Var, c_out: usize, attention: bool) -> Result<Var> {
    let mut h = resblock(ctx, &format!("{prefix}.res"), x, temb, c_out)?;
    if attention {
        h = spatial_attention(ctx, &format!("{prefix}.attn"), &h)?;
        h = cross_attention(ctx, &format!("{prefix}.xattn"), &h)?;
    }
    motion_module(ctx, &format!("{prefix}.motion"), &h)
}

/// Channel width entering encoder block `(level, b)`.
pub(crate) fn enc_in(cfg: &DenoiserConfig, level: usize, b: usize) -> usize {
    if b > 0 {
        cfg.width(level)
    } else if level == 0 {
        cfg.width(0)
    } else {
        cfg.width(level - 1)
    }
}

/// Encoder and middle-block parameters under `prefix` (shared by the main
/// network and the structure branch).
fn encoder_specs(b: &mut SpecBuilder, cfg: &DenoiserConfig, prefix: &str) {
    b.linear(&format!("{prefix}time.lin1"), cfg.time_embed_dim, cfg.time_embed_dim, true, false);
    b.linear(&format!("{prefix}time.lin2"), cfg.time_embed_dim, cfg.time_embed_dim, true, false);
    b.conv(&format!("{prefix}conv_in"), cfg.width(0), cfg.input_channels, 3, false);
    for level in 0..LEVELS {
        for blk in 0..cfg.blocks_per_level {
            block_specs(
                b,
                cfg,
                &format!("{prefix}enc.{level}.{blk}"),
                enc_in(cfg, level, blk),
                cfg.width(level),
                cfg.level_attends(level),
            );
        }
        if level + 1 < LEVELS {
            b.conv(&format!("{prefix}enc.{level}.down"), cfg.width(level), cfg.width(level), 2, false);
        }
    }
    let top = cfg.width(LEVELS - 1);
    resblock_specs(b, cfg, &format!("{prefix}mid.res1"), top, top);
    attn_specs(b, &format!("{prefix}mid.attn"), top, top);
    attn_specs(b, &format!("{prefix}mid.xattn"), top, cfg.text_dim);
    motion_specs(b, &format!("{prefix}mid.motion"), top);
    resblock_specs(b, cfg, &format!("{prefix}mid.res2"), top, top);
}

pub(crate) fn backbone_specs(b: &mut SpecBuilder, cfg: &DenoiserConfig) {
    encoder_specs(b, cfg, "");
    for level in (0..LEVELS).rev() {
        for blk in 0..cfg.blocks_per_level {
            let cur = if blk == 0 && level + 1 < LEVELS {
                cfg.width(level + 1)
            } else {
                cfg.width(level)
            };
            block_specs(b, cfg, &format!("dec.{level}.{blk}"), cur + cfg.width(level), cfg.width(level), cfg.level_attends(level));
        }
        if level > 0 {
            b.conv(&format!("dec.{level}.up"), cfg.width(level), cfg.width(level), 3, false);
        }
    }
    b.norm("out.norm", cfg.width(0));
    b.conv("out.conv", 3, cfg.width(0), 3, true);
}

pub(crate) fn control_specs(b: &mut SpecBuilder, cfg: &DenoiserConfig) {
    encoder_specs(b, cfg, "control.");
    b.conv("control.hint", cfg.width(0), 1, 3, true);
    let mut slot = 0;
    for level in 0..LEVELS {
        for _ in 0..cfg.blocks_per_level {
            b.conv(&format!("control.zero.{slot}"), cfg.width(level), cfg.width(level), 1, true);
            slot += 1;
        }
    }
    let top = cfg.width(LEVELS - 1);
    b.conv(&format!("control.zero.{slot}"), top, top, 1, true);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn motion_params(c: usize, rng: &mut ChaCha8Rng) -> MotionParams {
        MotionParams {
            wq: Tensor::randn(&[c, c], rng).scale(0.5),
            wk: Tensor::randn(&[c, c], rng).scale(0.5),
            wv: Tensor::randn(&[c, c], rng).scale(0.5),
            wo: Tensor::randn(&[c, c], rng).scale(0.5),
            bo: Tensor::randn(&[c], rng),
        }
    }

    fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
        let (o, i) = (w.shape()[0], w.shape()[1]);
        (0..o).map(|r| (0..i).map(|k| w.data()[r * i + k] as f64 * x[k]).sum()).collect()
    }

    /// Brute-force per-pixel temporal attention in f64.
    fn oracle(x: &Tensor, p: &MotionParams) -> Vec<f64> {
        let s = x.shape();
        let (f, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        for pix in 0..hw {
            let toks: Vec<Vec<f64>> = (0..f)
                .map(|fi| {
                    let pe = crate::numerics::kernels::sinusoid_row(fi as f64, c);
                    (0..c).map(|ch| x.data()[(fi * c + ch) * hw + pix] as f64 + pe[ch] as f64).collect()
                })
                .collect();
            let q: Vec<_> = toks.iter().map(|t| matvec(&p.wq, t)).collect();
            let k: Vec<_> = toks.iter().map(|t| matvec(&p.wk, t)).collect();
            let v: Vec<_> = toks.iter().map(|t| matvec(&p.wv, t)).collect();
            for i in 0..f {
                let sc: Vec<f64> = (0..f)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt())
                    .collect();
                let m = sc.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = sc.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let a: Vec<f64> = (0..c).map(|ch| (0..f).map(|j| e[j] / z * v[j][ch]).sum()).collect();
                let o = matvec(&p.wo, &a);
                for ch in 0..c {
                    out[(i * c + ch) * hw + pix] += o[ch] + p.bo.data()[ch] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn temporal_attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for f in [1, 3] {
            let x = Tensor::randn(&[f, 4, 2, 3], &mut rng);
            let p = motion_params(4, &mut rng);
            let got = temporal_attention(&x, &p, 24).unwrap();
            let want = oracle(&x, &p);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-4, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[3, 4, 2, 2], &mut rng);
        let mut p = motion_params(4, &mut rng);
        p.wo = Tensor::zeros(&[4, 4]);
        p.bo = Tensor::zeros(&[4]);
        assert!(temporal_attention(&x, &p, 24).unwrap().bit_eq(&x));
    }

    #[test]
    fn too_many_frames_is_range_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[5, 2, 1, 1], &mut rng);
        let p = motion_params(2, &mut rng);
        assert!(matches!(temporal_attention(&x, &p, 4), Err(Error::Range(_))));
    }
}
