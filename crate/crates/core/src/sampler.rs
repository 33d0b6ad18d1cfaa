//! Any-length sampling: overlapping windows denoised independently at every
//! step and averaged per frame, with the reference-frame cache built first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{make_condition, ConditionSet, MaskSequence, VideoTensor};
use crate::denoiser::guidance::{AttentionGuidanceState, AttentionStrategy, ClipGuidance};
use crate::denoiser::unet::forward;
use crate::denoiser::weights::Model;
use crate::diffusion::{cfg_combine, composite_final, ddim_step, ddpm_step, NoiseSchedule, SamplerConfig, SamplerKind};
use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;
use crate::structure::{control_forward, extract_structure, scale_features, StructureMap};

/// Sliding-window decomposition of an `N′`-frame video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub total_frames: usize,
    pub window: usize,
    pub stride: usize,
    pub starts: Vec<usize>,
    /// For each frame, the `(clip, offset)` pairs that cover it.
    pub coverage: Vec<Vec<(usize, usize)>>,
}

impl SegmentPlan {
    pub fn n(&self) -> usize {
        self.starts.len()
    }

    /// Frames per clip (`N`, or `N′` when the video is shorter).
    pub fn clip_len(&self) -> usize {
        self.window.min(self.total_frames)
    }

    /// Lowest-start clip containing `frame`.
    pub fn reference_segment(&self, frame: usize) -> Option<usize> {
        self.coverage.get(frame).and_then(|c| c.iter().map(|&(i, _)| i).min())
    }
}

/// `n = ⌈(N′−N)/o⌉ + 1` windows starting at `min(i·o, N′−N)`.
pub fn plan_segments(n_prime: usize, n_window: usize, stride: usize) -> Result<SegmentPlan> {
    ensure!(
        n_prime >= 1 && n_window >= 1 && stride >= 1,
        Argument,
        "segment plan needs positive sizes (frames {n_prime}, window {n_window}, stride {stride})"
    );
    ensure!(
        n_prime <= n_window || stride <= n_window,
        Argument,
        "stride {stride} exceeds window {n_window} and would leave frames uncovered"
    );
    let starts: Vec<usize> = if n_prime <= n_window {
        vec![0]
    } else {
        let span = n_prime - n_window;
        let n = span.div_ceil(stride) + 1;
        (0..n).map(|i| (i * stride).min(span)).collect()
    };
    let len = n_window.min(n_prime);
    let mut coverage = vec![Vec::new(); n_prime];
    for (i, &s) in starts.iter().enumerate() {
        for j in 0..len {
            coverage[s + j].push((i, j));
        }
    }
    Ok(SegmentPlan {
        total_frames: n_prime,
        window: n_window,
        stride,
        starts,
        coverage,
    })
}

/// Per-frame mean over every clip covering the frame, summed in clip order.
pub fn aggregate(clip_outputs: &[Tensor], plan: &SegmentPlan) -> Result<Tensor> {
    ensure!(
        clip_outputs.len() == plan.n(),
        Argument,
        "{} clip outputs for a plan of {} clips",
        clip_outputs.len(),
        plan.n()
    );
    let first = clip_outputs[0].shape();
    ensure!(
        !first.is_empty() && first[0] == plan.clip_len(),
        Argument,
        "clips must hold {} frames, got shape {:?}",
        plan.clip_len(),
        first
    );
    for c in clip_outputs {
        ensure!(c.shape() == first, Argument, "clip shapes differ: {:?} vs {:?}", c.shape(), first);
    }
    let frame = clip_outputs[0].len() / first[0];
    let mut out = Vec::with_capacity(plan.total_frames * frame);
    let mut acc = vec![0.0f64; frame];
    for cover in &plan.coverage {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &(i, j) in cover {
            let src = &clip_outputs[i].data()[j * frame..(j + 1) * frame];
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += v as f64;
            }
        }
        let k = cover.len() as f64;
        out.extend(acc.iter().map(|&a| (a / k) as f32));
    }
    let mut shape = first.to_vec();
    shape[0] = plan.total_frames;
    Ok(Tensor::from_parts(shape, out))
}

/// Attention guidance and structure scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub strategy: AttentionStrategy,
    pub omega: f32,
    pub omega_s: f32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            strategy: AttentionStrategy::MiddleFrame,
            omega: 0.3,
            omega_s: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplingRequest {
    pub video: VideoTensor,
    pub masks: MaskSequence,
    pub prompt: String,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub schedule: NoiseSchedule,
    pub window: usize,
    pub stride: usize,
    pub workers: usize,
}

impl SamplingRequest {
    /// Request with the default window (16), stride (4) and guidance.
    pub fn new(video: VideoTensor, masks: MaskSequence, prompt: &str) -> Self {
        Self {
            video,
            masks,
            prompt: prompt.to_string(),
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig::default(),
            schedule: NoiseSchedule::standard(),
            window: 16,
            stride: 4,
            workers: 1,
        }
    }
}

/// A validated request bound to a model, able to run single denoising steps.
pub struct Sampler<'m> {
    model: &'m Model,
    req: SamplingRequest,
    cond: ConditionSet,
    uncond: Option<ConditionSet>,
    structure: Option<StructureMap>,
    plan: SegmentPlan,
    pool: rayon::ThreadPool,
}

impl<'m> Sampler<'m> {
    pub fn new(model: &'m Model, req: SamplingRequest) -> Result<Self> {
        let cfg = &model.config;
        ensure!(
            req.window <= cfg.temporal_max_len,
            Range,
            "window of {} frames exceeds the temporal limit of {}",
            req.window,
            cfg.temporal_max_len
        );
        ensure!(req.window >= 1 && req.stride >= 1, Argument, "window and stride must be positive");
        ensure!(
            (0.0..=1.0).contains(&req.guidance.omega),
            Argument,
            "omega must lie in [0, 1], got {}",
            req.guidance.omega
        );
        ensure!(
            req.guidance.omega_s >= 0.0,
            Argument,
            "omega_s must be non-negative, got {}",
            req.guidance.omega_s
        );
        ensure!(req.workers >= 1, Argument, "need at least one worker");
        req.sampler.validate(&req.schedule)?;
        cfg.check_input_size(req.video.height(), req.video.width())?;
        let cond = make_condition(&req.video, &req.masks, &req.prompt, false)?;
        // Scale 1 is the conditional prediction itself.
        let uncond = (req.sampler.cfg_scale != 1.0).then(|| cond.to_null());
        let structure = if req.guidance.omega_s > 0.0 {
            Some(extract_structure(&req.video, &req.masks)?)
        } else {
            None
        };
        let plan = plan_segments(req.video.frames(), req.window, req.stride)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(req.workers)
            .build()
            .map_err(|e| Error::State(format!("worker pool: {e}")))?;
        Ok(Self {
            model,
            req,
            cond,
            uncond,
            structure,
            plan,
            pool,
        })
    }

    pub fn plan(&self) -> &SegmentPlan {
        &self.plan
    }

    pub fn request(&self) -> &SamplingRequest {
        &self.req
    }

    fn latent_shape(&self) -> Vec<usize> {
        self.req.video.tensor().shape().to_vec()
    }

    fn fresh_state(&self) -> Result<AttentionGuidanceState> {
        AttentionGuidanceState::new(self.req.guidance.strategy, self.req.guidance.omega)
    }

    /// Noise prediction for one branch over frames `[start, start + len)`.
    fn branch_eps(&self, cond: &ConditionSet, x: &Tensor, t: usize, start: usize, guide: &mut ClipGuidance) -> Result<Tensor> {
        let len = x.shape()[0];
        let c = cond.frames_range(start, len)?;
        let feats = match &self.structure {
            Some(s) => {
                let f = control_forward(self.model, x, t, &c, &s.frames_range(start, len)?, guide)?;
                Some(scale_features(&f, self.req.guidance.omega_s)?)
            }
            None => None,
        };
        forward(self.model, x, t, &c, feats.as_ref(), guide)
    }

    /// Guided noise prediction; `states` holds the conditional and (when
    /// guidance is on) unconditional caches.
    fn clip_eps(
        &self,
        x: &Tensor,
        t: usize,
        start: usize,
        mut guides: (ClipGuidance, Option<ClipGuidance>),
    ) -> Result<Tensor> {
        let eps_c = self.branch_eps(&self.cond, x, t, start, &mut guides.0)?;
        match (&self.uncond, guides.1.as_mut()) {
            (Some(u), Some(g)) => {
                let eps_u = self.branch_eps(u, x, t, start, g)?;
                cfg_combine(&eps_u, &eps_c, self.req.sampler.cfg_scale)
            }
            _ => Ok(eps_c),
        }
    }

    fn reverse(&self, x: &Tensor, eps: &Tensor, t: usize, t_prev: Option<usize>, noise: &Tensor) -> Result<Tensor> {
        match self.req.sampler.kind {
            SamplerKind::Ddim => ddim_step(x, eps, t, t_prev, &self.req.schedule, self.req.sampler.eta, noise),
            SamplerKind::Ddpm => ddpm_step(x, eps, t, &self.req.schedule, noise),
        }
    }

    /// Reference pass: runs the clip holding the reference frame and fills
    /// both caches.
    fn build_caches(&self, x: &Tensor, t: usize) -> Result<(AttentionGuidanceState, AttentionGuidanceState)> {
        let mut sc = self.fresh_state()?;
        let mut su = self.fresh_state()?;
        let n_prime = self.plan.total_frames;
        if let Some(r) = self.req.guidance.strategy.reference_frame(n_prime) {
            if self.req.guidance.strategy.uses_cache() {
                let seg = self.plan.reference_segment(r).expect("full coverage");
                let start = self.plan.starts[seg];
                let xc = x.narrow0(start, self.plan.clip_len())?;
                let gc = ClipGuidance::build(&mut sc, start, n_prime)?;
                let gu = if self.uncond.is_some() {
                    Some(ClipGuidance::build(&mut su, start, n_prime)?)
                } else {
                    None
                };
                self.clip_eps(&xc, t, start, (gc, gu))?;
            }
        }
        Ok((sc, su))
    }

    /// One windowed denoising step `v_t → v_{t−1}` over all `N′` frames.
    pub fn step_windowed(&self, x: &Tensor, t: usize, t_prev: Option<usize>, noise: &Tensor) -> Result<Tensor> {
        let (sc, su) = self.build_caches(x, t)?;
        let n_prime = self.plan.total_frames;
        let len = self.plan.clip_len();
        let run = |i: usize| -> Result<Tensor> {
            let start = self.plan.starts[i];
            let xc = x.narrow0(start, len)?;
            let gc = ClipGuidance::read(&sc, start, n_prime)?;
            let gu = if self.uncond.is_some() {
                Some(ClipGuidance::read(&su, start, n_prime)?)
            } else {
                None
            };
            let eps = self.clip_eps(&xc, t, start, (gc, gu))?;
            self.reverse(&xc, &eps, t, t_prev, &noise.narrow0(start, len)?)
        };
        let clips: Vec<Tensor> = if self.req.workers == 1 {
            (0..self.plan.n()).map(run).collect::<Result<_>>()?
        } else {
            self.pool
                .install(|| (0..self.plan.n()).into_par_iter().map(run).collect::<Result<_>>())?
        };
        aggregate(&clips, &self.plan)
    }

    /// One step treating all `N′` frames as a single clip.
    pub fn step_direct(&self, x: &Tensor, t: usize, t_prev: Option<usize>, noise: &Tensor) -> Result<Tensor> {
        let n_prime = self.plan.total_frames;
        ensure!(
            n_prime <= self.model.config.temporal_max_len,
            Range,
            "{n_prime} frames exceed the temporal limit of {}",
            self.model.config.temporal_max_len
        );
        let mut sc = self.fresh_state()?;
        let mut su = self.fresh_state()?;
        let cached = self.req.guidance.strategy.uses_cache();
        let gc = if cached {
            ClipGuidance::build(&mut sc, 0, n_prime)?
        } else {
            ClipGuidance::read(&sc, 0, n_prime)?
        };
        let gu = match (&self.uncond, cached) {
            (None, _) => None,
            (Some(_), true) => Some(ClipGuidance::build(&mut su, 0, n_prime)?),
            (Some(_), false) => Some(ClipGuidance::read(&su, 0, n_prime)?),
        };
        let eps = self.clip_eps(x, t, 0, (gc, gu))?;
        self.reverse(x, &eps, t, t_prev, noise)
    }

    fn run(&self, direct: bool) -> Result<VideoTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.req.sampler.seed);
        let shape = self.latent_shape();
        let mut x = Tensor::randn(&shape, &mut rng);
        for (t, t_prev) in self.req.sampler.timesteps(&self.req.schedule)? {
            let noise = Tensor::randn(&shape, &mut rng);
            x = if direct {
                self.step_direct(&x, t, t_prev, &noise)?
            } else {
                self.step_windowed(&x, t, t_prev, &noise)?
            };
            x = x.check_finite("denoised latent")?;
        }
        let generated = VideoTensor::new(x.map(|v| v.clamp(-1.0, 1.0)))?;
        composite_final(&generated, &self.req.video, &self.req.masks)
    }

    pub fn sample(&self) -> Result<VideoTensor> {
        self.run(false)
    }

    pub fn sample_direct(&self) -> Result<VideoTensor> {
        self.run(true)
    }
}

/// Full windowed denoising loop followed by compositing onto the source.
pub fn sample_video(request: &SamplingRequest, model: &Model) -> Result<VideoTensor> {
    Sampler::new(model, request.clone())?.sample()
}

/// Reference sampler running every frame as one clip (`N′ ≤` the temporal limit).
pub fn sample_direct(request: &SamplingRequest, model: &Model) -> Result<VideoTensor> {
    Sampler::new(model, request.clone())?.sample_direct()
}
