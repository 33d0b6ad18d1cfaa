use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vinpaint_core::denoiser::weights::{load_tensors, save_tensors};
use vinpaint_core::eval::{complexity_benchmark, BenchConfig, BenchScope, MetricReport};
use vinpaint_core::sampler::{sample_video, GuidanceConfig, SamplingRequest};
use vinpaint_core::training::{gen_synthetic_dataset, train_stage, Stage, TrainConfig, TrainState};
use vinpaint_core::{AttentionStrategy, MaskSequence, Model, NoiseSchedule, SamplerConfig, VideoTensor};

use crate::config::{get, Mode, RunConfig};
use crate::error::{write_err, CliError, CliResult};
use crate::frames::{read_masks, read_video, write_video};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.avdw";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const ABLATION_FILE: &str = "ablation.json";
pub const SCALING_JSON: &str = "scaling.json";
pub const SCALING_CSV: &str = "scaling.csv";

/// Metrics written next to the edited frames. Wall-clock runtime is kept
/// out of the directory so reruns stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub bp: Option<f64>,
    pub tc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub strategy: AttentionStrategy,
    pub omega: f32,
    pub tc: Option<f64>,
    pub bp: Option<f64>,
    /// Relative to the run's out_dir.
    pub out_dir: PathBuf,
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| write_err(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| write_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))? + "\n";
    write_file(path, text.as_bytes())
}

fn load_model(path: &Path) -> CliResult<(Model, BTreeMap<String, vinpaint_core::Tensor>)> {
    let map = load_tensors(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Model::from_tensors(map).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn schedule(cfg: &RunConfig) -> CliResult<NoiseSchedule> {
    Ok(NoiseSchedule::linear(get(&cfg.schedule_steps, "schedule_steps")?, 1e-4, 0.02)?)
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Resolves `cfg`, echoes it to `out_dir/config.json` and runs the mode.
/// Returns a JSON summary for stdout.
pub fn run(cfg: RunConfig, env_workers: Option<&str>) -> CliResult<Value> {
    let cfg = cfg.resolve(env_workers)?;
    let out = get(&cfg.out_dir, "out_dir")?;
    write_file(&out.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    match cfg.mode.unwrap() {
        Mode::Inpaint => inpaint(&cfg),
        Mode::Ablate => ablate(&cfg),
        Mode::Train => train(&cfg),
        Mode::Bench => bench(&cfg),
    }
}

struct Inputs {
    video: VideoTensor,
    masks: MaskSequence,
    model: Model,
}

fn read_inputs(cfg: &RunConfig) -> CliResult<Inputs> {
    let video = read_video(&get(&cfg.video_dir, "video_dir")?, cfg.frames)?;
    let mut masks = read_masks(&get(&cfg.mask_dir, "mask_dir")?, &video)?;
    if cfg.invert_mask == Some(true) {
        masks = masks.inverted();
    }
    let (model, _) = load_model(&get(&cfg.weights_path, "weights_path")?)?;
    Ok(Inputs { video, masks, model })
}

fn request(cfg: &RunConfig, inputs: &Inputs, strategy: AttentionStrategy, omega: f32) -> CliResult<SamplingRequest> {
    Ok(SamplingRequest {
        video: inputs.video.clone(),
        masks: inputs.masks.clone(),
        prompt: get(&cfg.prompt, "prompt")?,
        guidance: GuidanceConfig {
            strategy,
            omega,
            omega_s: get(&cfg.omega_s, "omega_s")?,
        },
        sampler: SamplerConfig {
            kind: get(&cfg.sampler, "sampler")?,
            inference_steps: get(&cfg.steps, "steps")?,
            eta: get(&cfg.eta, "eta")?,
            cfg_scale: get(&cfg.cfg_scale, "cfg_scale")?,
            seed: get(&cfg.seed, "seed")?,
        },
        schedule: schedule(cfg)?,
        window: get(&cfg.window, "window")?,
        stride: get(&cfg.stride, "stride")?,
        workers: get(&cfg.workers, "workers")?,
    })
}

fn edit(req: &SamplingRequest, model: &Model, dir: &Path) -> CliResult<(EditMetrics, f64)> {
    let start = Instant::now();
    let edited = sample_video(req, model)?;
    let runtime = ms_since(start);
    write_video(dir, &edited)?;
    let report = MetricReport::measure(&edited, &req.video, &req.masks, runtime, Value::Null)?;
    Ok((EditMetrics { bp: report.bp, tc: report.tc }, runtime))
}

fn inpaint(cfg: &RunConfig) -> CliResult<Value> {
    let inputs = read_inputs(cfg)?;
    let req = request(cfg, &inputs, get(&cfg.strategy, "strategy")?, get(&cfg.omega, "omega")?)?;
    let out = get(&cfg.out_dir, "out_dir")?;
    let (metrics, runtime) = edit(&req, &inputs.model, &out)?;
    write_json(&out.join(METRICS_FILE), &metrics)?;
    Ok(json!({
        "mode": "inpaint",
        "frames": inputs.video.frames(),
        "bp": metrics.bp,
        "tc": metrics.tc,
        "runtime_ms": runtime,
    }))
}

pub fn cell_dir(strategy: AttentionStrategy, omega: f32) -> PathBuf {
    Path::new("cells").join(format!("{}_w{omega}", strategy.name()))
}

fn ablate(cfg: &RunConfig) -> CliResult<Value> {
    let inputs = read_inputs(cfg)?;
    let out = get(&cfg.out_dir, "out_dir")?;
    let mut cells = Vec::new();
    let mut runtime = 0.0;
    for &strategy in &get(&cfg.strategies, "strategies")? {
        for &omega in &get(&cfg.omegas, "omegas")? {
            let req = request(cfg, &inputs, strategy, omega)?;
            let rel = cell_dir(strategy, omega);
            let (m, ms) = edit(&req, &inputs.model, &out.join(&rel))?;
            runtime += ms;
            cells.push(AblationCell {
                strategy,
                omega,
                tc: m.tc,
                bp: m.bp,
                out_dir: rel,
            });
        }
    }
    write_json(&out.join(ABLATION_FILE), &json!({ "cells": cells }))?;
    Ok(json!({ "mode": "ablate", "cells": cells, "runtime_ms": runtime }))
}

fn save_checkpoint(path: &Path, model: &Model, state: &TrainState) -> CliResult<()> {
    let mut map = model.to_tensors();
    map.extend(state.to_tensors());
    // Written aside and renamed: the target may be the file we resumed from.
    let tmp = path.with_extension("avdw.tmp");
    save_tensors(&tmp, map.iter().map(|(k, v)| (k.as_str(), v))).map_err(|e| write_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| write_err(path, e))
}

fn train(cfg: &RunConfig) -> CliResult<Value> {
    let stage = get(&cfg.stage, "stage")?;
    let lr = get(&cfg.lr, "lr")?;
    let seed = get(&cfg.seed, "seed")?;
    let (mut model, state) = match &cfg.weights_path {
        Some(p) => {
            let (model, extra) = load_model(p)?;
            let state = TrainState::from_tensors(&extra, lr).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            (model, state)
        }
        None => (Model::init(get(&cfg.model, "model")?.config(), seed)?, None),
    };
    let mut state = match state {
        Some(s) if s.stage == stage => s,
        _ => {
            if stage == Stage::Control {
                // The structure branch starts as a copy of the trained encoder.
                model.weights.copy_encoder_to_control();
            }
            TrainState::new(stage, lr)
        }
    };
    let tcfg = TrainConfig {
        stage,
        steps: get(&cfg.steps, "steps")?,
        batch_size: get(&cfg.batch_size, "batch_size")?,
        lr,
        cfg_dropout_prob: get(&cfg.cfg_dropout, "cfg_dropout")?,
        seed,
        clip_frames: get(&cfg.clip_frames, "clip_frames")?,
        workers: get(&cfg.workers, "workers")?,
        schedule: schedule(cfg)?,
    };
    let data = gen_synthetic_dataset(get(&cfg.dataset_size, "dataset_size")?, seed)?;
    let out = get(&cfg.out_dir, "out_dir")?;
    let trace_path = out.join(TRACE_FILE);
    let mut trace = BufWriter::new(File::create(&trace_path).map_err(|e| write_err(&trace_path, e))?);
    let start = Instant::now();
    let entries = train_stage(&tcfg, &data, &mut model, &mut state, |e| {
        let line = serde_json::to_string(e).expect("trace entry serializes");
        writeln!(trace, "{line}").map_err(vinpaint_core::Error::Io)
    })
    .map_err(|e| match e {
        vinpaint_core::Error::Io(io) => write_err(&trace_path, io),
        other => other.into(),
    })?;
    trace.flush().map_err(|e| write_err(&trace_path, e))?;
    let runtime = ms_since(start);
    save_checkpoint(&out.join(CHECKPOINT_FILE), &model, &state)?;
    Ok(json!({
        "mode": "train",
        "stage": stage,
        "steps_run": entries.len(),
        "step": state.step,
        "first_loss": entries.first().map(|e| e.loss),
        "last_loss": entries.last().map(|e| e.loss),
        "runtime_ms": runtime,
    }))
}

fn bench(cfg: &RunConfig) -> CliResult<Value> {
    let bcfg = BenchConfig {
        scope: get(&cfg.scope, "scope")?,
        n_prime_list: get(&cfg.n_prime_list, "n_prime_list")?,
        window: get(&cfg.window, "window")?,
        stride: get(&cfg.stride, "stride")?,
        reps: get(&cfg.reps, "reps")?,
        workers: get(&cfg.workers, "workers")?,
        strategy: get(&cfg.strategy, "strategy")?,
        omega: get(&cfg.omega, "omega")?,
        tokens: get(&cfg.tokens, "tokens")?,
        channels: get(&cfg.channels, "channels")?,
        seed: get(&cfg.seed, "seed")?,
    };
    let model = match (bcfg.scope, &cfg.weights_path) {
        (BenchScope::Attention, _) => None,
        (BenchScope::Network, Some(p)) => Some(load_model(p)?.0),
        (BenchScope::Network, None) => Some(Model::init(get(&cfg.model, "model")?.config(), bcfg.seed)?),
    };
    let report = complexity_benchmark(model.as_ref(), &bcfg)?;
    let out = get(&cfg.out_dir, "out_dir")?;
    write_json(&out.join(SCALING_JSON), &report)?;
    write_file(&out.join(SCALING_CSV), report.to_csv().as_bytes())?;
    Ok(json!({
        "mode": "bench",
        "exponent_direct": report.exponent_direct,
        "exponent_windowed": report.exponent_windowed,
        "points": report.points,
    }))
}
