//! Editing metrics and the runtime scaling benchmark.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{MaskSequence, VideoTensor};
use crate::denoiser::guidance::AttentionStrategy;
use crate::denoiser::weights::Model;
use crate::error::{ensure, Error, Result};
use crate::numerics::kernels::scaled_dot_attention;
use crate::numerics::Tensor;
use crate::sampler::{aggregate, plan_segments, GuidanceConfig, Sampler, SamplingRequest};
use crate::training::{gen_random_mask, gen_synthetic_sample};

/// Mean absolute difference over out-of-mask pixels (all channels), ×10³.
pub fn background_preservation(edited: &VideoTensor, source: &VideoTensor, masks: &MaskSequence) -> Result<f64> {
    edited.tensor().expect_same_shape(source.tensor())?;
    ensure!(
        masks.tensor().shape() == [source.frames(), 1, source.height(), source.width()],
        Argument,
        "mask {:?} does not match video {:?}",
        masks.tensor().shape(),
        source.tensor().shape()
    );
    let plane = source.height() * source.width();
    let (e, s, m) = (edited.tensor().data(), source.tensor().data(), masks.tensor().data());
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for f in 0..source.frames() {
        for p in 0..plane {
            if m[f * plane + p] != 0.0 {
                continue;
            }
            count += 1;
            let d: f64 = (0..3)
                .map(|c| {
                    let i = (f * 3 + c) * plane + p;
                    (e[i] as f64 - s[i] as f64).abs()
                })
                .sum();
            sum += d / 3.0;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("every pixel is masked; no background to compare".into()));
    }
    Ok(sum / count as f64 * 1e3)
}

pub const TC_GRID: usize = 8;

/// Per-frame 8×8 average-pooled intensity in `[0, 1]`. Bins follow
/// `⌊i·H/8⌋`, so any size from 8×8 up works.
pub fn frame_features(video: &VideoTensor) -> Result<Vec<Vec<f64>>> {
    let (h, w) = (video.height(), video.width());
    ensure!(h >= TC_GRID && w >= TC_GRID, Argument, "frames must be at least {TC_GRID}×{TC_GRID}, got {h}×{w}");
    let plane = h * w;
    let d = video.tensor().data();
    let mut out = Vec::with_capacity(video.frames());
    for f in 0..video.frames() {
        let mut feat = vec![0.0f64; TC_GRID * TC_GRID];
        for by in 0..TC_GRID {
            let (y0, y1) = (by * h / TC_GRID, (by + 1) * h / TC_GRID);
            for bx in 0..TC_GRID {
                let (x0, x1) = (bx * w / TC_GRID, (bx + 1) * w / TC_GRID);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = y * w + x;
                        let u = |c: usize| (d[(f * 3 + c) * plane + p] as f64 + 1.0) / 2.0;
                        acc += 0.299 * u(0) + 0.587 * u(1) + 0.114 * u(2);
                    }
                }
                feat[by * TC_GRID + bx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
        out.push(feat);
    }
    Ok(out)
}

/// Mean cosine similarity of consecutive feature vectors, ×100.
pub fn consistency_of(features: &[Vec<f64>]) -> Result<f64> {
    ensure!(features.len() >= 2, Argument, "temporal consistency needs at least two frames");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut acc = 0.0;
    for (i, pair) in features.windows(2).enumerate() {
        let (na, nb) = (norm(&pair[0]), norm(&pair[1]));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::UndefinedMetric(format!("frame {} has a zero feature vector", if na == 0.0 { i } else { i + 1 })));
        }
        let dot: f64 = pair[0].iter().zip(&pair[1]).map(|(a, b)| a * b).sum();
        acc += dot / (na * nb);
    }
    Ok(acc / (features.len() - 1) as f64 * 100.0)
}

pub fn temporal_consistency(video: &VideoTensor) -> Result<f64> {
    ensure!(video.frames() >= 2, Argument, "temporal consistency needs at least two frames");
    consistency_of(&frame_features(video)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` when every pixel is masked.
    pub bp: Option<f64>,
    pub tc: Option<f64>,
    pub runtime_ms: f64,
    pub config: serde_json::Value,
}

impl MetricReport {
    /// BP and TC of an edit; undefined metrics become `None`, other errors
    /// propagate.
    pub fn measure(edited: &VideoTensor, source: &VideoTensor, masks: &MaskSequence, runtime_ms: f64, config: serde_json::Value) -> Result<Self> {
        let undefined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let tc = if edited.frames() >= 2 {
            undefined(temporal_consistency(edited))?
        } else {
            None
        };
        Ok(Self {
            bp: undefined(background_preservation(edited, source, masks))?,
            tc,
            runtime_ms,
            config,
        })
    }
}

/// Least-squares slope and intercept of `ln y` against `ln x`.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    ensure!(xs.len() == ys.len() && xs.len() >= 2, Argument, "need at least two paired points");
    ensure!(
        xs.iter().chain(ys).all(|&v| v > 0.0 && v.is_finite()),
        Argument,
        "power-law fit needs positive values"
    );
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    ensure!(sxx > 0.0, Argument, "power-law fit needs distinct x values");
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Analytic per-step attention cost in units of `(HW)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub n_prime: usize,
    /// `⌈(N′−N)/o⌉ + 1`, or 1 when `N′ ≤ N`.
    pub clips: usize,
    /// `N′²`.
    pub direct: u64,
    /// `n·N²`.
    pub windowed: u64,
}

pub fn cost_model(n_prime: usize, window: usize, stride: usize) -> Result<CostRow> {
    ensure!(n_prime >= 1 && window >= 1 && stride >= 1, Argument, "cost model needs positive sizes");
    let clips = if n_prime <= window { 1 } else { (n_prime - window).div_ceil(stride) + 1 };
    let len = window.min(n_prime) as u64;
    Ok(CostRow {
        n_prime,
        clips,
        direct: (n_prime as u64).pow(2),
        windowed: clips as u64 * len * len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchScope {
    /// Attention workload only: joint attention over all frames vs the
    /// windowed pipeline (reference pass, guided clips, aggregation).
    Attention,
    /// Whole denoiser steps of a model.
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scope: BenchScope,
    pub n_prime_list: Vec<usize>,
    pub window: usize,
    pub stride: usize,
    pub reps: usize,
    pub workers: usize,
    pub strategy: AttentionStrategy,
    pub omega: f32,
    /// Spatial tokens per frame (attention scope).
    pub tokens: usize,
    /// Channel width (attention scope).
    pub channels: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scope: BenchScope::Attention,
            n_prime_list: vec![16, 32, 64, 128],
            window: 16,
            stride: 4,
            reps: 5,
            workers: 1,
            strategy: AttentionStrategy::MiddleFrame,
            omega: 0.3,
            tokens: 16,
            channels: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n_prime: usize,
    pub mode: String,
    pub median_ms: f64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config: BenchConfig,
    pub points: Vec<ScalingPoint>,
    pub exponent_direct: f64,
    pub exponent_windowed: f64,
    pub cost_model: Vec<CostRow>,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_prime,mode,median_ms,workers\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{:.6},{}\n", p.n_prime, p.mode, p.median_ms, p.workers));
        }
        s
    }

    pub fn median(&self, n_prime: usize, mode: &str) -> Option<f64> {
        self.points.iter().find(|p| p.n_prime == n_prime && p.mode == mode).map(|p| p.median_ms)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Query/key/value tokens for `frames` frames, `tokens` per frame, laid out
/// frame-major as `[frames·tokens, C]`.
struct Qkv {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    tokens: usize,
}

impl Qkv {
    fn rows(&self, frame: usize, count: usize) -> Result<[Tensor; 3]> {
        let (s, n) = (frame * self.tokens, count * self.tokens);
        Ok([self.q.narrow0(s, n)?, self.k.narrow0(s, n)?, self.v.narrow0(s, n)?])
    }
}

fn attention_direct(x: &Qkv) -> Result<Tensor> {
    scaled_dot_attention(&x.q, &x.k, &x.v)
}

/// Joint attention within one clip, blended with attention onto the cached
/// reference tokens when guidance is on.
fn guided_clip(x: &Qkv, start: usize, len: usize, reference: Option<&(Tensor, Tensor)>, omega: f32) -> Result<Tensor> {
    let [q, k, v] = x.rows(start, len)?;
    let own = scaled_dot_attention(&q, &k, &v)?;
    let out = match reference {
        Some((rk, rv)) if omega > 0.0 => {
            let r = scaled_dot_attention(&q, rk, rv)?;
            own.zip_map(&r, |a, b| (1.0 - omega) * a + omega * b)?
        }
        _ => own,
    };
    out.reshape(&[len, x.tokens, out.shape()[1]])
}

fn attention_windowed(x: &Qkv, n_prime: usize, cfg: &BenchConfig, pool: &rayon::ThreadPool) -> Result<Tensor> {
    let plan = plan_segments(n_prime, cfg.window, cfg.stride)?;
    let len = plan.clip_len();
    // Reference pass: the reference frame's keys and values are stored and
    // its whole clip is evaluated with guidance, as the sampler's cache pass
    // does.
    let reference = match cfg.strategy.reference_frame(n_prime) {
        Some(r) if cfg.strategy.uses_cache() => {
            let seg = plan.reference_segment(r).expect("full coverage");
            let [_, k, v] = x.rows(r, 1)?;
            let kv = (k, v);
            guided_clip(x, plan.starts[seg], len, Some(&kv), cfg.omega)?;
            Some(kv)
        }
        _ => None,
    };
    let run = |i: usize| guided_clip(x, plan.starts[i], len, reference.as_ref(), cfg.omega);
    let clips: Vec<Tensor> = if cfg.workers == 1 {
        (0..plan.n()).map(run).collect::<Result<_>>()?
    } else {
        pool.install(|| (0..plan.n()).into_par_iter().map(run).collect::<Result<_>>())?
    };
    aggregate(&clips, &plan)
}

fn network_request(n_prime: usize, cfg: &BenchConfig) -> Result<SamplingRequest> {
    let s = gen_synthetic_sample(cfg.seed, n_prime)?;
    let masks = gen_random_mask(s.video.height(), s.video.width(), n_prime, cfg.seed)?;
    let mut r = SamplingRequest::new(s.video, masks, &s.caption);
    r.guidance = GuidanceConfig {
        strategy: cfg.strategy,
        omega: cfg.omega,
        omega_s: 0.0,
    };
    r.window = cfg.window;
    r.stride = cfg.stride;
    r.workers = cfg.workers;
    Ok(r)
}

/// Median wall-clock per denoising step for direct and windowed processing
/// at each `N′`, plus log-log exponent fits. `model` is required for the
/// network scope.
pub fn complexity_benchmark(model: Option<&Model>, cfg: &BenchConfig) -> Result<ScalingReport> {
    ensure!(
        cfg.n_prime_list.len() >= 3,
        Argument,
        "scaling fit needs at least 3 frame counts, got {}",
        cfg.n_prime_list.len()
    );
    ensure!(cfg.reps >= 1 && cfg.workers >= 1, Argument, "reps and workers must be positive");
    ensure!(cfg.tokens >= 1 && cfg.channels >= 1, Argument, "token and channel counts must be positive");
    for &n in &cfg.n_prime_list {
        ensure!(n >= cfg.window, Argument, "frame count {n} is below the window {}", cfg.window);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cost = cfg
        .n_prime_list
        .iter()
        .map(|&n| cost_model(n, cfg.window, cfg.stride))
        .collect::<Result<Vec<_>>>()?;
    let mut wide_models = Vec::new();
    let mut requests = Vec::new();
    // One job per (N′, mode), direct first.
    let mut jobs: Vec<Box<dyn FnMut() -> Result<()> + '_>> = Vec::new();
    match cfg.scope {
        BenchScope::Attention => {
            for &n_prime in &cfg.n_prime_list {
                let shape = [n_prime * cfg.tokens, cfg.channels];
                let x = std::rc::Rc::new(Qkv {
                    q: Tensor::randn(&shape, &mut rng),
                    k: Tensor::randn(&shape, &mut rng),
                    v: Tensor::randn(&shape, &mut rng),
                    tokens: cfg.tokens,
                });
                let xd = x.clone();
                jobs.push(Box::new(move || attention_direct(&xd).map(drop)));
                let pool = &pool;
                jobs.push(Box::new(move || attention_windowed(&x, n_prime, cfg, pool).map(drop)));
            }
        }
        BenchScope::Network => {
            let model = model.ok_or_else(|| Error::Argument("the network scope needs a model".into()))?;
            for &n_prime in &cfg.n_prime_list {
                // Timing only: widen the positional table so one clip can
                // hold every frame.
                let mut wide = model.clone();
                wide.config.temporal_max_len = wide.config.temporal_max_len.max(n_prime);
                wide_models.push(wide);
                let req = network_request(n_prime, cfg)?;
                let shape = req.video.tensor().shape().to_vec();
                let x = Tensor::randn(&shape, &mut rng);
                let noise = Tensor::randn(&shape, &mut rng);
                let (t, t_prev) = req.sampler.timesteps(&req.schedule)?[0];
                requests.push((req, x, noise, t, t_prev));
            }
            for (wide, (req, x, noise, t, t_prev)) in wide_models.iter().zip(requests) {
                let direct = Sampler::new(wide, req.clone())?;
                let windowed = Sampler::new(model, req)?;
                let (xd, nd) = (x.clone(), noise.clone());
                jobs.push(Box::new(move || direct.step_direct(&xd, t, t_prev, &nd).map(drop)));
                jobs.push(Box::new(move || windowed.step_windowed(&x, t, t_prev, &noise).map(drop)));
            }
        }
    }
    // A warm-up round, then repetitions interleaved across jobs so slow drift
    // in machine speed does not bias one end of the fit.
    for job in jobs.iter_mut() {
        job()?;
    }
    let mut times = vec![Vec::with_capacity(cfg.reps); jobs.len()];
    for _ in 0..cfg.reps {
        for (job, ts) in jobs.iter_mut().zip(times.iter_mut()) {
            let start = Instant::now();
            job()?;
            ts.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mut points = Vec::new();
    for (i, &n_prime) in cfg.n_prime_list.iter().enumerate() {
        for (j, mode) in ["direct", "windowed"].into_iter().enumerate() {
            points.push(ScalingPoint {
                n_prime,
                mode: mode.to_string(),
                median_ms: median(&mut times[2 * i + j]).max(1e-6),
                workers: cfg.workers,
            });
        }
    }
    let xs: Vec<f64> = cfg.n_prime_list.iter().map(|&n| n as f64).collect();
    let series = |mode: &str| -> Vec<f64> { points.iter().filter(|p| p.mode == mode).map(|p| p.median_ms).collect() };
    let (exponent_direct, _) = fit_power_law(&xs, &series("direct"))?;
    let (exponent_windowed, _) = fit_power_law(&xs, &series("windowed"))?;
    Ok(ScalingReport {
        config: cfg.clone(),
        points,
        exponent_direct,
        exponent_windowed,
        cost_model: cost,
    })
}
