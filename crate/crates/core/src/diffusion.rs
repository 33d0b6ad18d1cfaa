//! Noise schedule, forward noising, reverse steps and guidance combination.

use serde::{Deserialize, Serialize};

use crate::conditioning::{MaskSequence, VideoTensor};
use crate::error::{ensure, Result};
use crate::numerics::Tensor;

/// Per-step noise rates and their cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` entries.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 1, Argument, "schedule needs at least one step");
        ensure!(
            0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
            Argument,
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        );
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// The usual 1000-step schedule with β in [1e-4, 0.02].
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid constants")
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure!(t < self.len(), Range, "timestep {t} outside [0, {})", self.len());
        Ok(())
    }
}

/// Convenience wrapper matching the spec-level constructor name.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// Reverse-process settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub inference_steps: usize,
    pub eta: f64,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            inference_steps: 50,
            eta: 0.0,
            cfg_scale: 7.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let total = schedule.len();
        ensure!(
            self.inference_steps >= 1 && self.inference_steps <= total,
            Argument,
            "inference steps {} outside [1, {total}]",
            self.inference_steps
        );
        ensure!(
            total % self.inference_steps == 0,
            Argument,
            "inference steps {} must divide the schedule length {total}",
            self.inference_steps
        );
        ensure!((0.0..=1.0).contains(&self.eta), Argument, "eta {} outside [0, 1]", self.eta);
        ensure!(self.cfg_scale >= 0.0, Argument, "negative guidance scale {}", self.cfg_scale);
        if self.kind == SamplerKind::Ddpm {
            ensure!(
                self.inference_steps == total,
                Argument,
                "ddpm sampling walks every timestep; set inference steps to {total}"
            );
        }
        Ok(())
    }

    /// Descending timesteps with uniform spacing `T / steps`; each entry
    /// pairs `t` with the timestep it steps to (`None` is the clean end).
    pub fn timesteps(&self, schedule: &NoiseSchedule) -> Result<Vec<(usize, Option<usize>)>> {
        self.validate(schedule)?;
        let ratio = schedule.len() / self.inference_steps;
        let ts: Vec<usize> = (0..self.inference_steps).rev().map(|i| i * ratio).collect();
        Ok(ts
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, ts.get(i + 1).copied()))
            .collect())
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
}

/// One ancestral step. The mean follows the ε-parameterised reverse relation;
/// `noise` is scaled by `√β_t` and ignored at `t = 0`.
pub fn ddpm_step(
    xt: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check_t(t)?;
    xt.expect_same_shape(eps_pred)?;
    xt.expect_same_shape(noise)?;
    let alpha = sched.alpha[t];
    let ab = sched.alpha_bar[t];
    let inv = 1.0 / alpha.sqrt();
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let sigma = if t > 0 { sched.beta[t].sqrt() } else { 0.0 };
    let out: Vec<f32> = xt
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(noise.data())
        .map(|((&x, &e), &z)| (inv * (x as f64 - coef * e as f64) + sigma * z as f64) as f32)
        .collect();
    Tensor::new(xt.shape(), out)
}

/// Clean-sample estimate `(x_t − √(1−ᾱ_t)·ε) / √ᾱ_t`.
pub fn predict_x0(xt: &Tensor, eps_pred: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar[t];
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    xt.zip_map(eps_pred, |x, e| ((x as f64 - n * e as f64) / s) as f32)?
        .check_finite("x0 prediction")
}

/// DDIM update from `t` to `t_prev` (`None` = the clean endpoint, ᾱ = 1).
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    xt: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    eta: f64,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if let Some(tp) = t_prev {
        ensure!(tp < t, Argument, "t_prev {tp} must precede t {t}");
    }
    ensure!((0.0..=1.0).contains(&eta), Argument, "eta {eta} outside [0, 1]");
    xt.expect_same_shape(eps_pred)?;
    xt.expect_same_shape(noise)?;
    let ab = sched.alpha_bar[t];
    let ab_prev = t_prev.map_or(1.0, |tp| sched.alpha_bar[tp]);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let sp = ab_prev.sqrt();
    let out: Vec<f32> = xt
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(noise.data())
        .map(|((&x, &e), &z)| {
            let x0 = (x as f64 - n * e as f64) / s;
            let mut v = sp * x0 + dir * e as f64;
            if sigma > 0.0 {
                v += sigma * z as f64;
            }
            v as f32
        })
        .collect();
    Tensor::new(xt.shape(), out)
}

/// Classifier-free guidance: `ε_u + s·(ε_c − ε_u)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_uncond.zip_map(eps_cond, |u, c| (u as f64 + scale * (c as f64 - u as f64)) as f32)?
        .check_finite("guidance combination")
}

/// Keeps source pixels where the mask is 0 and generated pixels where it is 1.
pub fn composite_final(
    generated: &VideoTensor,
    source: &VideoTensor,
    masks: &MaskSequence,
) -> Result<VideoTensor> {
    ensure!(
        generated.frames() == source.frames() && source.frames() == masks.frames(),
        Argument,
        "frame counts differ: generated {}, source {}, masks {}",
        generated.frames(),
        source.frames(),
        masks.frames()
    );
    generated.tensor().expect_same_shape(source.tensor())?;
    masks.check_matches(source)?;
    let (h, w) = (source.height(), source.width());
    let plane = h * w;
    let mut out = source.tensor().data().to_vec();
    let gen = generated.tensor().data();
    let m = masks.tensor().data();
    for f in 0..source.frames() {
        let mf = &m[f * plane..(f + 1) * plane];
        for c in 0..3 {
            let base = (f * 3 + c) * plane;
            for (p, &mv) in mf.iter().enumerate() {
                if mv != 0.0 {
                    out[base + p] = gen[base + p];
                }
            }
        }
    }
    VideoTensor::new(Tensor::from_parts(source.tensor().shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_schedule(steps: usize, beta: f64) -> NoiseSchedule {
        NoiseSchedule::linear(steps, beta, beta).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = constant_schedule(2, 0.1);
        assert!((s.alpha_bar()[0] - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar()[1] - 0.81).abs() < 1e-12);
        assert_eq!(constant_schedule(1, 0.5).alpha_bar(), &[0.5]);
        let s = NoiseSchedule::standard();
        assert!(s.alpha_bar()[999] < 1e-4);
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::standard();
        for t in 1..s.len() {
            assert!(s.alpha_bar()[t] < s.alpha_bar()[t - 1]);
            assert!((s.alpha_bar()[t] / s.alpha_bar()[t - 1] - s.alpha()[t]).abs() < 1e-7);
            assert!(s.beta()[t] >= s.beta()[t - 1]);
            assert_eq!(s.alpha()[t], 1.0 - s.beta()[t]);
        }
    }

    #[test]
    fn q_sample_examples() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let x0 = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2);
        let z = Tensor::zeros(&[2, 3]);
        let t = 30;
        let out = q_sample(&x0, t, &z, &s).unwrap();
        let a = s.alpha_bar()[t].sqrt();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((*o as f64 - a * *x as f64).abs() < 1e-6);
        }
        let eps = Tensor::from_fn(&[2, 3], |i| 1.0 - i as f32 * 0.3);
        let out = q_sample(&z, t, &eps, &s).unwrap();
        let b = (1.0 - s.alpha_bar()[t]).sqrt();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert!((*o as f64 - b * *e as f64).abs() < 1e-6);
        }
        assert!(q_sample(&x0, 50, &z, &s).is_err());
    }

    #[test]
    fn ddpm_examples() {
        let s = NoiseSchedule::linear(10, 0.1, 0.1).unwrap();
        let xt = Tensor::from_fn(&[4], |i| i as f32 - 1.5);
        let zero = Tensor::zeros(&[4]);
        let out = ddpm_step(&xt, &zero, 3, &s, &zero).unwrap();
        for (o, x) in out.data().iter().zip(xt.data()) {
            assert!((*o as f64 - *x as f64 / 0.9f64.sqrt()).abs() < 1e-6);
        }
        // α_1 = 0.9, ᾱ_1 = 0.81 in a constant-0.1 schedule
        let out = ddpm_step(&Tensor::scalar(1.0), &Tensor::scalar(1.0), 1, &s, &Tensor::scalar(0.0)).unwrap();
        let expect = (1.0 / 0.9f64.sqrt()) * (1.0 - 0.1 / 0.19f64.sqrt());
        assert!((out.data()[0] as f64 - expect).abs() < 1e-6);
        assert!((out.data()[0] - 0.81226).abs() < 1e-4);
        assert!(ddpm_step(&xt, &zero, 10, &s, &zero).is_err());
        // noise is suppressed at t = 0
        let ones = Tensor::ones(&[4]);
        let a = ddpm_step(&xt, &zero, 0, &s, &ones).unwrap();
        let b = ddpm_step(&xt, &zero, 0, &s, &zero).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn ddim_examples() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[3, 4], &mut rng);
        let eps = Tensor::randn(&[3, 4], &mut rng);
        let noise = Tensor::randn(&[3, 4], &mut rng);
        let xt = q_sample(&x0, 15, &eps, &s).unwrap();
        let a = ddim_step(&xt, &eps, 15, Some(10), &s, 0.0, &noise).unwrap();
        let b = ddim_step(&xt, &eps, 15, Some(10), &s, 0.0, &Tensor::zeros(&[3, 4])).unwrap();
        assert!(a.bit_eq(&b));
        let x0_hat = predict_x0(&xt, &eps, 15, &s).unwrap();
        assert!(x0_hat.max_abs_diff(&x0).unwrap() < 1e-5);
        // exact ε to the clean endpoint returns x0
        let end = ddim_step(&xt, &eps, 15, None, &s, 0.0, &noise).unwrap();
        assert!(end.max_abs_diff(&x0).unwrap() < 1e-5);
        assert!(ddim_step(&xt, &eps, 10, Some(10), &s, 0.0, &noise).is_err());
        assert!(ddim_step(&xt, &eps, 10, Some(5), &s, 1.5, &noise).is_err());
    }

    #[test]
    fn ddim_two_step_scalar_chain() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        // hand-unrolled: ᾱ = [0.9, 0.72, 0.504]
        let ab = [0.9f64, 0.9 * 0.8, 0.9 * 0.8 * 0.7];
        let (x, e1, e2, z1, eta) = (0.7f64, 0.4f64, -0.2f64, 0.5f64, 0.5f64);
        let step = |x: f64, e: f64, abt: f64, abp: f64, z: f64| {
            let x0 = (x - (1.0 - abt).sqrt() * e) / abt.sqrt();
            let sig = eta * ((1.0 - abp) / (1.0 - abt)).sqrt() * (1.0 - abt / abp).sqrt();
            abp.sqrt() * x0 + (1.0 - abp - sig * sig).sqrt() * e + sig * z
        };
        let x1 = step(x, e1, ab[2], ab[1], z1);
        let x2 = step(x1, e2, ab[1], 1.0, 0.0);
        let y1 = ddim_step(&Tensor::scalar(x as f32), &Tensor::scalar(e1 as f32), 2, Some(1), &s, eta, &Tensor::scalar(z1 as f32)).unwrap();
        let y2 = ddim_step(&y1, &Tensor::scalar(e2 as f32), 1, None, &s, eta, &Tensor::scalar(0.0)).unwrap();
        assert!((y1.data()[0] as f64 - x1).abs() < 1e-6);
        assert!((y2.data()[0] as f64 - x2).abs() < 1e-5);
    }

    #[test]
    fn cfg_examples() {
        let u = Tensor::from_fn(&[5], |i| i as f32);
        let c = Tensor::from_fn(&[5], |i| 2.0 - i as f32 * 0.5);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &c, 7.5).unwrap(), c);
        assert!(cfg_combine(&u, &Tensor::zeros(&[4]), 1.0).is_err());
    }

    #[test]
    fn timestep_subsequence() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let cfg = SamplerConfig { inference_steps: 5, ..Default::default() };
        let ts = cfg.timesteps(&s).unwrap();
        assert_eq!(ts, vec![(40, Some(30)), (30, Some(20)), (20, Some(10)), (10, Some(0)), (0, None)]);
        let bad = SamplerConfig { inference_steps: 7, ..Default::default() };
        assert!(bad.timesteps(&s).is_err());
        let ddpm = SamplerConfig { kind: SamplerKind::Ddpm, inference_steps: 10, ..Default::default() };
        assert!(ddpm.validate(&s).is_err());
    }

    proptest! {
        #[test]
        fn exact_eps_recovers_x0(seed in 0u64..1000, t in 0usize..1000) {
            let s = NoiseSchedule::standard();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Tensor::rand_uniform(&[8], -1.0, 1.0, &mut rng);
            let eps = Tensor::randn(&[8], &mut rng);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let rec = predict_x0(&xt, &eps, t, &s).unwrap();
            // recovery divides by √ᾱ_t, so f32 rounding of x_t is amplified
            let tol = 1e-5f32.max(4.0 * f32::EPSILON * xt.data().iter().fold(0f32, |a, v| a.max(v.abs())) / (s.alpha_bar()[t].sqrt() as f32));
            prop_assert!(rec.max_abs_diff(&x0).unwrap() <= tol);
        }

        #[test]
        fn cfg_is_affine(scale in 0.0f64..10.0, v in proptest::collection::vec(-3.0f32..3.0, 8)) {
            let u = Tensor::new(&[4], v[..4].to_vec()).unwrap();
            let c = Tensor::new(&[4], v[4..].to_vec()).unwrap();
            let r0 = cfg_combine(&u, &c, 0.0).unwrap();
            let r1 = cfg_combine(&u, &c, 1.0).unwrap();
            let rs = cfg_combine(&u, &c, scale).unwrap();
            for i in 0..4 {
                let lin = r0.data()[i] as f64 + scale * (r1.data()[i] as f64 - r0.data()[i] as f64);
                prop_assert!((rs.data()[i] as f64 - lin).abs() < 1e-5);
            }
        }
    }
}
