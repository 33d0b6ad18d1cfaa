//! Structure guidance: edge maps from the source video, the encoder-copy
//! branch that turns them into thirteen additive feature maps, and their
//! inference-time scaling.

use std::collections::BTreeSet;

use crate::conditioning::{ConditionSet, MaskSequence, VideoTensor};
use crate::denoiser::guidance::ClipGuidance;
use crate::denoiser::layers::Params;
use crate::denoiser::unet::control_var;
use crate::denoiser::weights::Model;
use crate::error::{ensure, Result};
use crate::numerics::{Tensor, Var};

/// `[N, 1, H, W]` edge strengths in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMap(Tensor);

impl StructureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        ensure!(
            t.rank() == 4 && t.shape()[1] == 1,
            Argument,
            "structure map must be [N, 1, H, W], got {:?}",
            t.shape()
        );
        ensure!(
            t.data().iter().all(|v| (0.0..=1.0).contains(v)),
            Range,
            "structure values must lie in [0, 1]"
        );
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn frames_range(&self, start: usize, count: usize) -> Result<Self> {
        Ok(Self(self.0.narrow0(start, count)?))
    }
}

/// Ordered feature maps for the twelve skip slots and the middle slot.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureFeatures {
    maps: Vec<Tensor>,
}

pub const STRUCTURE_SLOTS: usize = 13;

impl StructureFeatures {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        ensure!(
            maps.len() == STRUCTURE_SLOTS,
            Argument,
            "expected {STRUCTURE_SLOTS} feature maps, got {}",
            maps.len()
        );
        ensure!(maps.iter().all(|m| m.rank() == 4), Argument, "feature maps must be [N, C, H, W]");
        let res: BTreeSet<(usize, usize)> = maps.iter().map(|m| (m.shape()[2], m.shape()[3])).collect();
        ensure!(res.len() == 4, Argument, "feature maps span {} resolutions, expected 4", res.len());
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    /// Restricts every map to frames `[start, start + count)`.
    pub fn frames_range(&self, start: usize, count: usize) -> Result<Self> {
        let maps = self.maps.iter().map(|m| m.narrow0(start, count)).collect::<Result<_>>()?;
        Ok(Self { maps })
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel magnitude of each frame's luma (edge-replicated borders), divided by
/// the frame's maximum and restricted to the mask.
pub fn extract_structure(video: &VideoTensor, masks: &MaskSequence) -> Result<StructureMap> {
    ensure!(
        masks.frames() == video.frames()
            && masks.tensor().shape()[2] == video.height()
            && masks.tensor().shape()[3] == video.width(),
        Argument,
        "mask {:?} does not match video {:?}",
        masks.tensor().shape(),
        video.tensor().shape()
    );
    let (f, h, w) = (video.frames(), video.height(), video.width());
    let plane = h * w;
    let v = video.tensor().data();
    let m = masks.tensor().data();
    let mut out = vec![0.0f32; f * plane];
    let mut gray = vec![0.0f64; plane];
    let mut mag = vec![0.0f64; plane];
    for fi in 0..f {
        let base = fi * 3 * plane;
        for i in 0..plane {
            gray[i] = 0.299 * v[base + i] as f64 + 0.587 * v[base + plane + i] as f64 + 0.114 * v[base + 2 * plane + i] as f64;
        }
        let at = |y: isize, x: isize| {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, w as isize - 1) as usize;
            gray[yy * w + xx]
        };
        let mut peak = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for dy in 0..3 {
                    for dx in 0..3 {
                        let g = at(y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                        gx += SOBEL_X[dy][dx] * g;
                        gy += SOBEL_Y[dy][dx] * g;
                    }
                }
                let mm = (gx * gx + gy * gy).sqrt();
                mag[y * w + x] = mm;
                peak = peak.max(mm);
            }
        }
        if peak > 0.0 {
            for i in 0..plane {
                out[fi * plane + i] = ((mag[i] / peak) as f32).min(1.0) * m[fi * plane + i];
            }
        }
    }
    StructureMap::new(Tensor::from_parts(vec![f, 1, h, w], out))
}

/// c_s = s_θ(v_t, t, c, s).
pub fn control_forward(
    model: &Model,
    latent: &Tensor,
    t: usize,
    cond: &ConditionSet,
    structure: &StructureMap,
    guide: &mut ClipGuidance,
) -> Result<StructureFeatures> {
    let p = Params::constants(&model.weights);
    let maps = control_var(&p, &model.config, &Var::constant(latent.clone()), t, cond, structure, guide)?;
    StructureFeatures::new(maps.into_iter().map(|v| v.value().clone()).collect())
}

/// Multiplies every map by `omega_s`.
pub fn scale_features(features: &StructureFeatures, omega_s: f32) -> Result<StructureFeatures> {
    ensure!(
        omega_s >= 0.0 && omega_s.is_finite(),
        Argument,
        "structure scale must be a non-negative number, got {omega_s}"
    );
    Ok(StructureFeatures {
        maps: features.maps.iter().map(|m| m.scale(omega_s)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::make_condition;
    use crate::denoiser::DenoiserConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video_from_gray(f: usize, h: usize, w: usize, g: impl Fn(usize, usize) -> f32) -> VideoTensor {
        let mut d = Vec::new();
        for _ in 0..f {
            for _ in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        d.push(g(y, x));
                    }
                }
            }
        }
        VideoTensor::new(Tensor::new(&[f, 3, h, w], d).unwrap()).unwrap()
    }

    #[test]
    fn constant_frames_and_empty_masks_give_zero() {
        let v = video_from_gray(2, 5, 5, |_, _| 0.3);
        let s = extract_structure(&v, &MaskSequence::ones(2, 5, 5)).unwrap();
        assert!(s.tensor().data().iter().all(|&x| x == 0.0));
        let v = video_from_gray(2, 5, 5, |y, x| (y * x) as f32 / 16.0);
        let s = extract_structure(&v, &MaskSequence::zeros(2, 5, 5)).unwrap();
        assert!(s.tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn step_edge_matches_hand_sobel() {
        // Columns 0..2 black, 2..5 white. With replicated borders the x-kernel
        // response is 4·(1 − (−1)) = 8 in columns 1 and 2, zero elsewhere, and
        // the y-response is zero everywhere; after max-normalization those
        // columns read 1.
        let v = video_from_gray(1, 5, 5, |_, x| if x < 2 { -1.0 } else { 1.0 });
        let s = extract_structure(&v, &MaskSequence::ones(1, 5, 5)).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let want = if x == 1 || x == 2 { 1.0 } else { 0.0 };
                assert!((s.tensor().data()[y * 5 + x] - want).abs() < 1e-6, "({y},{x})");
            }
        }
    }

    #[test]
    fn scale_features_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps: Vec<Tensor> = (0..13).map(|i| Tensor::randn(&[1, 2, 32 >> (i / 3).min(3), 32 >> (i / 3).min(3)], &mut rng)).collect();
        let f = StructureFeatures::new(maps).unwrap();
        assert!(scale_features(&f, -0.1).is_err());
        let z = scale_features(&f, 0.0).unwrap();
        assert!(z.maps().iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert_eq!(scale_features(&f, 1.0).unwrap(), f);
        let h = scale_features(&f, 0.5).unwrap();
        for (a, b) in h.maps().iter().zip(f.maps()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y * 0.5);
            }
        }
        assert!(StructureFeatures::new(f.maps()[..12].to_vec()).is_err());
    }

    #[test]
    fn untrained_branch_emits_zero_maps() {
        let model = Model::init(DenoiserConfig::micro(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = VideoTensor::new(Tensor::rand_uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng)).unwrap();
        let masks = MaskSequence::ones(2, 32, 32);
        let cond = make_condition(&v, &masks, "x", false).unwrap();
        let s = extract_structure(&v, &masks).unwrap();
        let lat = Tensor::randn(&[2, 3, 32, 32], &mut rng);
        let f = control_forward(&model, &lat, 3, &cond, &s, &mut ClipGuidance::off()).unwrap();
        assert_eq!(f.maps().len(), 13);
        let res: BTreeSet<usize> = f.maps().iter().map(|m| m.shape()[2]).collect();
        assert_eq!(res.into_iter().collect::<Vec<_>>(), vec![4, 8, 16, 32]);
        assert!(f.maps().iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    proptest! {
        #[test]
        fn structure_in_unit_range(seed in 0u64..1000, f in 1usize..3, h in 3usize..9, w in 3usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = VideoTensor::new(Tensor::rand_uniform(&[f, 3, h, w], -1.0, 1.0, &mut rng)).unwrap();
            let m = MaskSequence::new(Tensor::from_fn(&[f, 1, h, w], |i| (i % 3 != 0) as u8 as f32)).unwrap();
            let s = extract_structure(&v, &m).unwrap();
            prop_assert!(s.tensor().data().iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn scaling_is_linear(seed in 0u64..1000, a in 0.0f32..3.0, b in 0.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<Tensor> = (0..13).map(|i| Tensor::randn(&[1, 2, 16 >> (i / 3).min(3), 16 >> (i / 3).min(3)], &mut rng)).collect();
            let f = StructureFeatures::new(maps).unwrap();
            let one = scale_features(&f, a * b).unwrap();
            let two = scale_features(&scale_features(&f, a).unwrap(), b).unwrap();
            for (x, y) in one.maps().iter().zip(two.maps()) {
                for (p, q) in x.data().iter().zip(y.data()) {
                    prop_assert!((p - q).abs() <= 1e-6 * p.abs().max(1.0));
                }
            }
        }
    }
}
