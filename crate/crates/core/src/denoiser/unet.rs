//! Network assembly: encoder, middle block, decoder and the structure branch.

use crate::conditioning::ConditionSet;
use crate::denoiser::config::{DenoiserConfig, LEVELS};
use crate::denoiser::guidance::ClipGuidance;
use crate::denoiser::layers::{block, cross_attention, motion_module, resblock, spatial_attention, Ctx, Params};
use crate::denoiser::weights::Model;
use crate::error::{ensure, Result};
use crate::numerics::kernels::sinusoid_row;
use crate::numerics::{Tensor, Var};
use crate::structure::{StructureFeatures, StructureMap};

fn time_embedding(ctx: &Ctx, prefix: &str, t: usize, frames: usize) -> Result<Var> {
    let d = ctx.cfg.time_embed_dim;
    let e = Var::constant(Tensor::from_parts(vec![1, d], sinusoid_row(t as f64, d)));
    let h = ctx.linear(&format!("{prefix}time.lin1"), &e, true)?.silu()?;
    let h = ctx.linear(&format!("{prefix}time.lin2"), &h, true)?;
    h.index_select0(&vec![0; frames])
}

/// `(x_t, v_m, m)` stacked along channels.
fn network_input(latent: &Var, cond: &ConditionSet) -> Result<Var> {
    let vm = Var::constant(cond.masked_video.tensor().clone());
    let m = Var::constant(cond.masks.tensor().clone());
    Var::concat(&[latent.clone(), vm, m], 1)
}

fn check_inputs(cfg: &DenoiserConfig, latent: &Tensor, cond: &ConditionSet) -> Result<()> {
    let s = latent.shape();
    ensure!(s.len() == 4 && s[1] == 3, Argument, "latent must be [N, 3, H, W], got {s:?}");
    ensure!(
        cond.masked_video.tensor().shape() == s,
        Argument,
        "condition video {:?} does not match latent {:?}",
        cond.masked_video.tensor().shape(),
        s
    );
    ensure!(
        s[0] <= cfg.temporal_max_len,
        Range,
        "{} frames exceed the temporal window limit of {}",
        s[0],
        cfg.temporal_max_len
    );
    ensure!(
        cond.text_embedding.shape().len() == 2 && cond.text_embedding.shape()[1] == cfg.text_dim,
        Argument,
        "text embedding must be [tokens, {}]",
        cfg.text_dim
    );
    cfg.check_input_size(s[2], s[3])
}

/// Encoder plus middle block; returns the skip tensors and the middle output.
fn encode(ctx: &mut Ctx, prefix: &str, mut h: Var, temb: &Var) -> Result<(Vec<Var>, Var)> {
    let cfg = ctx.cfg;
    let mut skips = Vec::with_capacity(LEVELS * cfg.blocks_per_level);
    for level in 0..LEVELS {
        for b in 0..cfg.blocks_per_level {
            let name = format!("{prefix}enc.{level}.{b}");
            h = block(ctx, &name, &h, temb, cfg.width(level), cfg.level_attends(level))?;
            skips.push(h.clone());
        }
        if level + 1 < LEVELS {
            h = ctx.conv(&format!("{prefix}enc.{level}.down"), &h, 2, 0)?;
        }
    }
    let top = cfg.width(LEVELS - 1);
    h = resblock(ctx, &format!("{prefix}mid.res1"), &h, temb, top)?;
    h = spatial_attention(ctx, &format!("{prefix}mid.attn"), &h)?;
    h = cross_attention(ctx, &format!("{prefix}mid.xattn"), &h)?;
    h = motion_module(ctx, &format!("{prefix}mid.motion"), &h)?;
    h = resblock(ctx, &format!("{prefix}mid.res2"), &h, temb, top)?;
    Ok((skips, h))
}

fn decode(ctx: &mut Ctx, mut skips: Vec<Var>, mut h: Var, temb: &Var) -> Result<Var> {
    let cfg = ctx.cfg;
    for level in (0..LEVELS).rev() {
        for b in 0..cfg.blocks_per_level {
            let skip = skips.pop().expect("encoder emits one skip per decoder block");
            h = Var::concat(&[h, skip], 1)?;
            h = block(ctx, &format!("dec.{level}.{b}"), &h, temb, cfg.width(level), cfg.level_attends(level))?;
        }
        if level > 0 {
            h = ctx.conv(&format!("dec.{level}.up"), &h.upsample2x()?, 1, 1)?;
        }
    }
    let h = ctx.norm("out.norm", &h)?.silu()?;
    ctx.conv("out.conv", &h, 1, 1)
}

/// Adds structure maps to the skips and middle tensor.
fn inject(skips: &mut [Var], mid: &mut Var, maps: &[Var]) -> Result<()> {
    ensure!(
        maps.len() == skips.len() + 1,
        Argument,
        "{} structure maps for {} injection slots",
        maps.len(),
        skips.len() + 1
    );
    for (i, (s, h)) in skips.iter_mut().zip(maps).enumerate() {
        ensure!(s.shape() == h.shape(), Argument, "structure map {i} is {:?}, slot is {:?}", h.shape(), s.shape());
        *s = s.add(h)?;
    }
    let h = maps.last().unwrap();
    ensure!(mid.shape() == h.shape(), Argument, "middle structure map is {:?}, slot is {:?}", h.shape(), mid.shape());
    *mid = mid.add(h)?;
    Ok(())
}

/// Noise prediction over one clip as a graph value.
pub(crate) fn eps_var(
    p: &Params,
    cfg: &DenoiserConfig,
    latent: &Var,
    t: usize,
    cond: &ConditionSet,
    structure: Option<&[Var]>,
    guide: &mut ClipGuidance,
) -> Result<Var> {
    check_inputs(cfg, latent.value(), cond)?;
    let frames = latent.shape()[0];
    let text = Var::constant(cond.text_embedding.reshape(&[1, cond.text_embedding.shape()[0], cfg.text_dim])?);
    let mut ctx = Ctx { cfg, p, text, guide };
    let temb = time_embedding(&ctx, "", t, frames)?;
    let x = network_input(latent, cond)?;
    let h = ctx.conv("conv_in", &x, 1, 1)?;
    let (mut skips, mut mid) = encode(&mut ctx, "", h, &temb)?;
    if let Some(maps) = structure {
        inject(&mut skips, &mut mid, maps)?;
    }
    decode(&mut ctx, skips, mid, &temb)
}

/// The structure branch: an encoder copy fed the structure map through a
/// zero-initialized projection, each output passed through a zero 1×1 conv.
pub(crate) fn control_var(
    p: &Params,
    cfg: &DenoiserConfig,
    latent: &Var,
    t: usize,
    cond: &ConditionSet,
    structure: &StructureMap,
    guide: &mut ClipGuidance,
) -> Result<Vec<Var>> {
    check_inputs(cfg, latent.value(), cond)?;
    let s = latent.shape();
    ensure!(
        structure.tensor().shape() == [s[0], 1, s[2], s[3]],
        Argument,
        "structure map {:?} does not match latent {:?}",
        structure.tensor().shape(),
        s
    );
    let frames = s[0];
    let text = Var::constant(cond.text_embedding.reshape(&[1, cond.text_embedding.shape()[0], cfg.text_dim])?);
    let mut ctx = Ctx { cfg, p, text, guide };
    let temb = time_embedding(&ctx, "control.", t, frames)?;
    let x = network_input(latent, cond)?;
    let hint = ctx.conv("control.hint", &Var::constant(structure.tensor().clone()), 1, 1)?;
    let h = ctx.conv("control.conv_in", &x, 1, 1)?.add(&hint)?;
    let (skips, mid) = encode(&mut ctx, "control.", h, &temb)?;
    skips
        .iter()
        .chain(std::iter::once(&mid))
        .enumerate()
        .map(|(i, f)| ctx.conv(&format!("control.zero.{i}"), f, 1, 0))
        .collect()
}

/// ε_θ(v_t, t, c[, c_s]) for one clip of `[N, 3, H, W]`.
pub fn forward(
    model: &Model,
    latent: &Tensor,
    t: usize,
    cond: &ConditionSet,
    structure: Option<&StructureFeatures>,
    guide: &mut ClipGuidance,
) -> Result<Tensor> {
    let p = Params::constants(&model.weights);
    let maps: Option<Vec<Var>> = structure.map(|f| f.maps().iter().cloned().map(Var::constant).collect());
    let out = eps_var(&p, &model.config, &Var::constant(latent.clone()), t, cond, maps.as_deref(), guide)?;
    Ok(out.value().clone())
}

/// Adds `h_i` to slot `i` (twelve skips, then the middle tensor).
pub fn inject_structure(skips: &[Tensor], middle: &Tensor, features: &StructureFeatures) -> Result<(Vec<Tensor>, Tensor)> {
    let mut s: Vec<Var> = skips.iter().cloned().map(Var::constant).collect();
    let mut m = Var::constant(middle.clone());
    let maps: Vec<Var> = features.maps().iter().cloned().map(Var::constant).collect();
    inject(&mut s, &mut m, &maps)?;
    Ok((s.into_iter().map(|v| v.value().clone()).collect(), m.value().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{make_condition, MaskSequence, VideoTensor};
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(frames: usize, side: usize, seed: u64) -> (Tensor, ConditionSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = VideoTensor::new(Tensor::rand_uniform(&[frames, 3, side, side], -1.0, 1.0, &mut rng)).unwrap();
        let mut m = Tensor::zeros(&[frames, 1, side, side]);
        for f in 0..frames {
            for y in 2..6 {
                for x in 3..7 {
                    m.data_mut()[(f * side + y) * side + x] = 1.0;
                }
            }
        }
        let masks = MaskSequence::new(m).unwrap();
        let cond = make_condition(&video, &masks, "a red circle", false).unwrap();
        (Tensor::randn(&[frames, 3, side, side], &mut rng), cond)
    }

    /// Weights where every zero-initialized output is randomized, so tests
    /// exercise all paths.
    fn live_model(seed: u64) -> Model {
        let mut m = Model::init(DenoiserConfig::micro(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let names: Vec<String> = m.weights.names().map(String::from).collect();
        for n in names {
            let t = m.weights.get(&n).unwrap();
            if t.data().iter().all(|&v| v == 0.0) && !n.ends_with(".beta") {
                let r = Tensor::randn(t.shape(), &mut rng).scale(0.2);
                m.weights.set(&n, r).unwrap();
            }
        }
        m
    }

    #[test]
    fn output_shape_and_zero_init() {
        let model = Model::init(DenoiserConfig::micro(), 1).unwrap();
        let (x, cond) = inputs(4, 32, 1);
        let out = forward(&model, &x, 10, &cond, None, &mut ClipGuidance::off()).unwrap();
        assert_eq!(out.shape(), &[4, 3, 32, 32]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_consumes_every_weight() {
        let model = live_model(2);
        let (x, cond) = inputs(3, 16, 2);
        let a = forward(&model, &x, 5, &cond, None, &mut ClipGuidance::off()).unwrap();
        let b = forward(&model, &x, 5, &cond, None, &mut ClipGuidance::off()).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().any(|&v| v != 0.0));

        let p = Params::constants(&model.weights);
        let cfg = &model.config;
        let lat = Var::constant(x.clone());
        let smap = StructureMap::new(Tensor::full(&[3, 1, 16, 16], 0.5)).unwrap();
        let maps = control_var(&p, cfg, &lat, 5, &cond, &smap, &mut ClipGuidance::off()).unwrap();
        eps_var(&p, cfg, &lat, 5, &cond, Some(&maps), &mut ClipGuidance::off()).unwrap();
        let used = p.used();
        let unused: Vec<&str> = model.weights.names().filter(|n| !used.contains(*n)).collect();
        assert!(unused.is_empty(), "unused weights: {unused:?}");
    }

    #[test]
    fn too_many_frames_is_range_error() {
        let model = Model::init(DenoiserConfig::micro(), 1).unwrap();
        let (x, cond) = inputs(25, 8, 3);
        assert!(matches!(
            forward(&model, &x, 1, &cond, None, &mut ClipGuidance::off()),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn injection_is_elementwise_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let skips: Vec<Tensor> = (0..12).map(|i| Tensor::randn(&[2, 4, 32 >> (i / 3), 32 >> (i / 3)], &mut rng)).collect();
        let mid = Tensor::randn(&[2, 4, 4, 4], &mut rng);
        let maps: Vec<Tensor> = skips.iter().chain([&mid]).map(|s| Tensor::randn(s.shape(), &mut rng)).collect();
        let feats = StructureFeatures::new(maps.clone()).unwrap();
        let (s2, m2) = inject_structure(&skips, &mid, &feats).unwrap();
        for (i, s) in s2.iter().enumerate() {
            for ((o, a), b) in s.data().iter().zip(skips[i].data()).zip(maps[i].data()) {
                assert_eq!(*o, a + b);
            }
        }
        assert!(m2.bit_eq(&mid.add(&maps[12]).unwrap()));
        let neg = StructureFeatures::new(skips.iter().chain([&mid]).map(|s| s.scale(-1.0)).collect()).unwrap();
        let (z, zm) = inject_structure(&skips, &mid, &neg).unwrap();
        assert!(z.iter().chain([&zm]).all(|t| t.data().iter().all(|&v| v == 0.0)));
        let bad = StructureFeatures::new(maps[..12].iter().cloned().chain([Tensor::zeros(&[2, 4, 2, 2])]).collect());
        if let Ok(bad) = bad {
            assert!(matches!(inject_structure(&skips, &mid, &bad), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn conservative_inflation() {
        // Zeroed motion outputs and no guidance: frames are independent.
        let mut model = live_model(5);
        let names: Vec<String> = model.weights.names().filter(|n| n.contains(".motion.out.")).map(String::from).collect();
        for n in names {
            let z = Tensor::zeros(model.weights.get(&n).unwrap().shape());
            model.weights.set(&n, z).unwrap();
        }
        let (x, cond) = inputs(3, 16, 5);
        let joint = forward(&model, &x, 7, &cond, None, &mut ClipGuidance::off()).unwrap();
        for f in 0..3 {
            let c1 = cond.frames_range(f, 1).unwrap();
            let single = forward(&model, &x.narrow0(f, 1).unwrap(), 7, &c1, None, &mut ClipGuidance::off()).unwrap();
            assert!(joint.narrow0(f, 1).unwrap().max_abs_diff(&single).unwrap() < 1e-5);
        }
    }
}
