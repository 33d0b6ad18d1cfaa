//! Run configuration: a JSON document whose keys double as CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vinpaint_core::denoiser::DenoiserConfig;
use vinpaint_core::eval::BenchScope;
use vinpaint_core::training::Stage;
use vinpaint_core::{AttentionStrategy, SamplerKind};

use crate::error::{CliError, CliResult};

pub const WORKERS_ENV: &str = "AVID_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Inpaint,
    Train,
    Bench,
    Ablate,
}

/// Editing task; only picks the default structure scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Swap,
    Uncrop,
    Removal,
    Retexture,
}

impl Task {
    pub fn default_omega_s(self) -> f32 {
        match self {
            Task::Retexture => 1.0,
            _ => 0.0,
        }
    }
}

/// Architecture used when no weights file is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    #[default]
    Tiny,
    Micro,
    Full,
}

impl ModelPreset {
    pub fn config(self) -> DenoiserConfig {
        match self {
            ModelPreset::Tiny => DenoiserConfig::tiny(),
            ModelPreset::Micro => DenoiserConfig::micro(),
            ModelPreset::Full => DenoiserConfig::default(),
        }
    }
}

/// Every key is optional on input; [`RunConfig::resolve`] fills the
/// defaults relevant to the mode, and the result is what gets echoed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub video_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// N′: how many frames to read (all contiguous frames when absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega_s: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<f64>,
    /// Inference steps when sampling, optimizer steps when training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<AttentionStrategy>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invert_mask: Option<bool>,
    /// Length T of the noise schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelPreset>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfg_dropout: Option<f64>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategies: Option<Vec<AttentionStrategy>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omegas: Option<Vec<f32>>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub scope: Option<BenchScope>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_prime_list: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),+ $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )+
    };
}

fn fill<T>(slot: &mut Option<T>, value: impl FnOnce() -> T) {
    if slot.is_none() {
        *slot = Some(value());
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Keys set in `other` win.
    pub fn overlay(mut self, other: RunConfig) -> Self {
        overlay!(
            self, other, mode, video_dir, mask_dir, prompt, frames, window, stride, omega, omega_s, cfg_scale, steps, sampler, eta,
            seed, weights_path, out_dir, workers, strategy, task, invert_mask, schedule_steps, model, stage, lr, batch_size,
            dataset_size, clip_frames, cfg_dropout, strategies, omegas, scope, n_prime_list, reps, tokens, channels,
        );
        self
    }

    /// Applies the defaults for the configured mode. `env_workers` is the
    /// value of the workers environment variable, if any.
    pub fn resolve(mut self, env_workers: Option<&str>) -> CliResult<Self> {
        let mode = self.mode.ok_or_else(|| CliError::Config("no mode given (inpaint, train, bench or ablate)".into()))?;
        if self.out_dir.is_none() {
            return Err(CliError::Config("out_dir is required".into()));
        }
        if self.workers.is_none() {
            self.workers = Some(match env_workers {
                Some(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{WORKERS_ENV}={v:?} is not a worker count")))?,
                None => 1,
            });
        }
        fill(&mut self.seed, || 0);
        match mode {
            Mode::Inpaint | Mode::Ablate => self.resolve_sampling(mode)?,
            Mode::Train => self.resolve_training()?,
            Mode::Bench => self.resolve_bench(),
        }
        Ok(self)
    }

    fn resolve_sampling(&mut self, mode: Mode) -> CliResult<()> {
        for (key, v) in [("video_dir", &self.video_dir), ("mask_dir", &self.mask_dir)] {
            if v.is_none() {
                return Err(CliError::Config(format!("{key} is required")));
            }
        }
        if self.weights_path.is_none() {
            return Err(CliError::Config("weights_path is required for sampling".into()));
        }
        fill(&mut self.prompt, String::new);
        fill(&mut self.window, || 16);
        fill(&mut self.stride, || 4);
        fill(&mut self.omega, || 0.3);
        fill(&mut self.task, Task::default);
        let task = self.task.unwrap();
        fill(&mut self.omega_s, || task.default_omega_s());
        fill(&mut self.cfg_scale, || 7.5);
        fill(&mut self.sampler, || SamplerKind::Ddim);
        fill(&mut self.schedule_steps, || 1000);
        let total = self.schedule_steps.unwrap();
        let ddpm = self.sampler == Some(SamplerKind::Ddpm);
        fill(&mut self.steps, || if ddpm { total } else { 50 });
        fill(&mut self.eta, || if ddpm { 1.0 } else { 0.0 });
        fill(&mut self.strategy, || AttentionStrategy::MiddleFrame);
        fill(&mut self.invert_mask, || false);
        if mode == Mode::Ablate {
            fill(&mut self.strategies, || AttentionStrategy::ALL.to_vec());
            fill(&mut self.omegas, || vec![0.0, 0.3, 1.0]);
            if self.strategies.as_ref().unwrap().is_empty() || self.omegas.as_ref().unwrap().is_empty() {
                return Err(CliError::Config("ablation needs at least one strategy and one omega".into()));
            }
        }
        Ok(())
    }

    fn resolve_training(&mut self) -> CliResult<()> {
        let stage = self
            .stage
            .ok_or_else(|| CliError::Config("training needs a stage (backbone, motion or control)".into()))?;
        if stage == Stage::Control && self.weights_path.is_none() {
            return Err(CliError::Config("the control stage starts from a motion-stage checkpoint; set weights_path".into()));
        }
        if self.weights_path.is_none() {
            fill(&mut self.model, ModelPreset::default);
        }
        fill(&mut self.steps, || 500);
        fill(&mut self.lr, || 1e-3);
        fill(&mut self.batch_size, || 1);
        fill(&mut self.dataset_size, || 64);
        fill(&mut self.clip_frames, || 16);
        fill(&mut self.cfg_dropout, || 0.1);
        fill(&mut self.schedule_steps, || 1000);
        Ok(())
    }

    fn resolve_bench(&mut self) {
        fill(&mut self.scope, || BenchScope::Attention);
        fill(&mut self.n_prime_list, || vec![16, 32, 64, 128]);
        fill(&mut self.window, || 16);
        fill(&mut self.stride, || 4);
        fill(&mut self.reps, || 5);
        fill(&mut self.strategy, || AttentionStrategy::MiddleFrame);
        fill(&mut self.omega, || 0.3);
        fill(&mut self.tokens, || 16);
        fill(&mut self.channels, || 16);
        if self.scope == Some(BenchScope::Network) && self.weights_path.is_none() {
            fill(&mut self.model, ModelPreset::default);
        }
    }
}

/// Fetches a key that `resolve` guarantees for the mode at hand.
pub fn get<T: Clone>(v: &Option<T>, key: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| CliError::Config(format!("{key} is not set")))
}
