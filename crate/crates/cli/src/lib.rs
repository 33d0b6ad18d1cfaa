//! Command-line front end: `inpaint`, `train`, `ablate` and `bench` over
//! frame directories and JSON run configs.

pub mod commands;
pub mod config;
pub mod error;
pub mod frames;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use serde::de::DeserializeOwned;
use vinpaint_core::eval::BenchScope;
use vinpaint_core::training::Stage;
use vinpaint_core::{AttentionStrategy, SamplerKind};

pub use commands::run;
pub use config::{Mode, ModelPreset, RunConfig, Task, WORKERS_ENV};
pub use error::{CliError, CliResult};

fn named<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Flags mirror the run-config keys; any flag given overrides `--config`.
#[derive(Debug, Parser)]
#[command(name = "vinpaint", version, about = "Text-guided video inpainting with windowed temporal sampling")]
pub struct Cli {
    /// inpaint, train, bench or ablate; may instead come from --config.
    #[arg(value_enum)]
    pub mode: Option<Mode>,
    /// JSON run config (for example a previous run's config.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub video_dir: Option<PathBuf>,
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub omega: Option<f32>,
    #[arg(long)]
    pub omega_s: Option<f32>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_parser = named::<SamplerKind>)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub weights_path: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Defaults to $AVID_WORKERS, then 1.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_parser = named::<AttentionStrategy>)]
    pub strategy: Option<AttentionStrategy>,
    /// swap, uncrop, removal or retexture; sets the default omega_s.
    #[arg(long, value_parser = named::<Task>)]
    pub task: Option<Task>,
    /// Inpaint the complement of the mask.
    #[arg(long)]
    pub invert_mask: bool,
    #[arg(long)]
    pub schedule_steps: Option<usize>,
    #[arg(long, value_parser = named::<ModelPreset>)]
    pub model: Option<ModelPreset>,
    #[arg(long, value_parser = named::<Stage>)]
    pub stage: Option<Stage>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dataset_size: Option<usize>,
    #[arg(long)]
    pub clip_frames: Option<usize>,
    #[arg(long)]
    pub cfg_dropout: Option<f64>,
    #[arg(long, value_delimiter = ',', value_parser = named::<AttentionStrategy>)]
    pub strategies: Option<Vec<AttentionStrategy>>,
    #[arg(long, value_delimiter = ',')]
    pub omegas: Option<Vec<f32>>,
    #[arg(long, value_parser = named::<BenchScope>)]
    pub scope: Option<BenchScope>,
    #[arg(long, value_delimiter = ',')]
    pub n_prime_list: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
}

impl Cli {
    /// The run config: `--config` contents overlaid with explicit flags.
    pub fn run_config(self) -> CliResult<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            mode: self.mode,
            video_dir: self.video_dir,
            mask_dir: self.mask_dir,
            prompt: self.prompt,
            frames: self.frames,
            window: self.window,
            stride: self.stride,
            omega: self.omega,
            omega_s: self.omega_s,
            cfg_scale: self.cfg_scale,
            steps: self.steps,
            sampler: self.sampler,
            eta: self.eta,
            seed: self.seed,
            weights_path: self.weights_path,
            out_dir: self.out_dir,
            workers: self.workers,
            strategy: self.strategy,
            task: self.task,
            invert_mask: self.invert_mask.then_some(true),
            schedule_steps: self.schedule_steps,
            model: self.model,
            stage: self.stage,
            lr: self.lr,
            batch_size: self.batch_size,
            dataset_size: self.dataset_size,
            clip_frames: self.clip_frames,
            cfg_dropout: self.cfg_dropout,
            strategies: self.strategies,
            omegas: self.omegas,
            scope: self.scope,
            n_prime_list: self.n_prime_list,
            reps: self.reps,
            tokens: self.tokens,
            channels: self.channels,
        };
        Ok(base.overlay(flags))
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let env_workers = std::env::var(WORKERS_ENV).ok();
    match cli.run_config().and_then(|cfg| run(cfg, env_workers.as_deref())) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("vinpaint: {e}");
            e.exit_code()
        }
    }
}
