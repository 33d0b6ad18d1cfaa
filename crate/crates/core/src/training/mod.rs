//! Staged training on synthetic clips: an image-level backbone warm-up, the
//! motion modules, then the structure branch.

pub mod data;
pub mod loss;
pub mod optim;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::weights::{Model, ParamGroup};
use crate::diffusion::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::numerics::{Gradients, Tensor};

pub use data::{gen_random_mask, gen_random_mask_with, gen_synthetic_dataset, gen_synthetic_sample, MaskMotion, SyntheticSample};
pub use loss::{denoising_loss, inpaint_loss, loss_gradients, structure_loss, Objective, TrainingExample};
pub use optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Per-frame inpainting; stands in for a pretrained image model.
    Backbone,
    Motion,
    Control,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Backbone, Stage::Motion, Stage::Control];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Motion => "motion",
            Stage::Control => "control",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown stage {s:?} (expected backbone, motion or control)")))
    }

    pub fn group(self) -> ParamGroup {
        match self {
            Stage::Backbone => ParamGroup::Backbone,
            Stage::Motion => ParamGroup::Motion,
            Stage::Control => ParamGroup::Control,
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Stage::Control => Objective::Structure,
            _ => Objective::Inpaint,
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cfg_dropout_prob: f64,
    pub seed: u64,
    /// Frames per training clip, cut at a random offset from each sample.
    pub clip_frames: usize,
    pub workers: usize,
    pub schedule: NoiseSchedule,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            steps: 500,
            batch_size: 1,
            lr: 1e-3,
            cfg_dropout_prob: 0.1,
            seed: 0,
            clip_frames: data::SAMPLE_FRAMES,
            workers: 1,
            schedule: NoiseSchedule::standard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    pub stage: Stage,
    pub loss: f64,
}

/// Step counter and optimizer moments; stored next to the weights so a run
/// can resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub step: u64,
    pub optimizer: Adam,
}

const STEP_KEY: &str = "train.step";
const STAGE_KEY: &str = "train.stage";
const ADAM_T_KEY: &str = "train.adam.t";

fn encode_u64(v: u64) -> Tensor {
    // Four 16-bit limbs, each exact in f32.
    Tensor::from_fn(&[4], |i| ((v >> (16 * i)) & 0xffff) as f32)
}

fn decode_u64(t: &Tensor) -> Result<u64> {
    ensure!(t.len() == 4, Format, "counter record must hold 4 limbs");
    Ok(t.data().iter().enumerate().fold(0u64, |acc, (i, &l)| acc | ((l as u64) << (16 * i))))
}

impl TrainState {
    pub fn new(stage: Stage, lr: f64) -> Self {
        Self {
            stage,
            step: 0,
            optimizer: Adam::new(lr),
        }
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(STEP_KEY.to_string(), encode_u64(self.step));
        m.insert(STAGE_KEY.to_string(), Tensor::scalar(self.stage.index() as f32));
        m.insert(ADAM_T_KEY.to_string(), encode_u64(self.optimizer.t));
        for (k, v) in &self.optimizer.m {
            m.insert(format!("train.adam.m.{k}"), Tensor::from_parts(vec![v.len()], v.clone()));
        }
        for (k, v) in &self.optimizer.v {
            m.insert(format!("train.adam.v.{k}"), Tensor::from_parts(vec![v.len()], v.clone()));
        }
        m
    }

    /// Reads a state written by [`TrainState::to_tensors`]; `None` when the
    /// map carries no training records.
    pub fn from_tensors(map: &BTreeMap<String, Tensor>, lr: f64) -> Result<Option<Self>> {
        let Some(step) = map.get(STEP_KEY) else { return Ok(None) };
        let stage_idx = map
            .get(STAGE_KEY)
            .ok_or_else(|| Error::Format("training record lacks its stage".into()))?
            .item()? as usize;
        let stage = *Stage::ALL
            .get(stage_idx)
            .ok_or_else(|| Error::Format(format!("stage index {stage_idx} out of range")))?;
        let mut optimizer = Adam::new(lr);
        optimizer.t = decode_u64(map.get(ADAM_T_KEY).ok_or_else(|| Error::Format("training record lacks the optimizer counter".into()))?)?;
        for (k, v) in map {
            if let Some(n) = k.strip_prefix("train.adam.m.") {
                optimizer.m.insert(n.to_string(), v.data().to_vec());
            } else if let Some(n) = k.strip_prefix("train.adam.v.") {
                optimizer.v.insert(n.to_string(), v.data().to_vec());
            }
        }
        Ok(Some(Self {
            stage,
            step: decode_u64(step)?,
            optimizer,
        }))
    }
}

struct Draw {
    example: TrainingExample,
    t: usize,
    eps: Tensor,
}

fn draw_batch(cfg: &TrainConfig, data: &[SyntheticSample], step: u64) -> Result<Vec<Draw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let null = rng.gen_bool(cfg.cfg_dropout_prob);
    (0..cfg.batch_size)
        .map(|_| {
            let s = &data[rng.gen_range(0..data.len())];
            let total = s.video.frames();
            let start = rng.gen_range(0..=total - cfg.clip_frames);
            let video = s.video.frames_range(start, cfg.clip_frames)?;
            let masks = gen_random_mask(video.height(), video.width(), cfg.clip_frames, rng.gen())?;
            let t = rng.gen_range(0..cfg.schedule.len());
            let eps = Tensor::randn(video.tensor().shape(), &mut rng);
            Ok(Draw {
                example: TrainingExample {
                    video,
                    masks,
                    caption: s.caption.clone(),
                    null,
                },
                t,
                eps,
            })
        })
        .collect()
}

fn batch_gradient(results: Vec<(f64, Gradients)>) -> (f64, Gradients) {
    let n = results.len() as f64;
    let mut loss = 0.0;
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (l, g) in results {
        loss += l;
        for (k, t) in g {
            let a = acc.entry(k.clone()).or_insert_with(|| vec![0.0; t.len()]);
            for (x, &y) in a.iter_mut().zip(t.data()) {
                *x += y as f64;
            }
            shapes.entry(k).or_insert_with(|| t.shape().to_vec());
        }
    }
    let grads = acc
        .into_iter()
        .map(|(k, a)| {
            let shape = shapes.remove(&k).unwrap();
            (k, Tensor::from_parts(shape, a.into_iter().map(|v| (v / n) as f32).collect()))
        })
        .collect();
    (loss / n, grads)
}

/// Runs `cfg.steps` optimizer steps on the stage's parameter group. Every
/// other tensor is left untouched. `on_step` sees each trace entry as it is
/// produced.
pub fn train_stage(
    cfg: &TrainConfig,
    data: &[SyntheticSample],
    model: &mut Model,
    state: &mut TrainState,
    mut on_step: impl FnMut(&TraceEntry) -> Result<()>,
) -> Result<Vec<TraceEntry>> {
    ensure!(!data.is_empty(), Argument, "training needs at least one sample");
    ensure!(cfg.batch_size >= 1, Argument, "batch size must be positive");
    ensure!(cfg.workers >= 1, Argument, "need at least one worker");
    ensure!(cfg.lr > 0.0 && cfg.lr.is_finite(), Argument, "learning rate must be positive");
    ensure!(
        (0.0..=1.0).contains(&cfg.cfg_dropout_prob),
        Argument,
        "dropout probability must lie in [0, 1]"
    );
    let shortest = data.iter().map(|s| s.video.frames()).min().unwrap();
    ensure!(
        cfg.clip_frames >= 1 && cfg.clip_frames <= shortest,
        Argument,
        "clip length {} must lie in 1..={shortest}",
        cfg.clip_frames
    );
    ensure!(
        cfg.clip_frames <= model.config.temporal_max_len,
        Range,
        "clip length {} exceeds the temporal limit of {}",
        cfg.clip_frames,
        model.config.temporal_max_len
    );
    if state.stage != cfg.stage {
        *state = TrainState::new(cfg.stage, cfg.lr);
    }
    state.optimizer.lr = cfg.lr;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))?;
    let group = [cfg.stage.group()];
    let objective = cfg.stage.objective();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let draws = draw_batch(cfg, data, state.step)?;
        let m: &Model = model;
        let run = |d: &Draw| loss_gradients(m, &d.example, d.t, &d.eps, &cfg.schedule, objective, &group);
        let results: Vec<(f64, Gradients)> = if cfg.workers == 1 {
            draws.iter().map(run).collect::<Result<_>>()?
        } else {
            pool.install(|| draws.par_iter().map(run).collect::<Result<_>>())?
        };
        let (loss, grads) = batch_gradient(results);
        ensure!(loss.is_finite(), Numeric, "loss diverged at step {}", state.step);
        state.optimizer.step(model.weights.tensors_mut(), &grads)?;
        state.step += 1;
        let entry = TraceEntry {
            step: state.step,
            stage: cfg.stage,
            loss,
        };
        on_step(&entry)?;
        trace.push(entry);
    }
    Ok(trace)
}
