#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vinpaint_cli::frames::{write_masks, write_video};
use vinpaint_core::training::{gen_random_mask, gen_synthetic_sample};
use vinpaint_core::{DenoiserConfig, MaskSequence, Model};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vinpaint"));
    c.env_remove("AVID_WORKERS");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn run_config(cfg: &Path) -> Output {
    run(&["--config", cfg.to_str().unwrap()])
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small non-degenerate model saved to `dir/model.avdw`.
pub fn micro_weights(dir: &Path) -> PathBuf {
    let mut m = Model::init(DenoiserConfig::micro(), 1).unwrap();
    m.weights.jitter(2, 0.05);
    let p = dir.join("model.avdw");
    m.save(&p).unwrap();
    p
}

/// Synthetic clip plus random masks written as frame directories.
pub fn write_inputs(dir: &Path, frames: usize, seed: u64) -> (PathBuf, PathBuf) {
    let s = gen_synthetic_sample(seed, frames).unwrap();
    let masks = gen_random_mask(s.video.height(), s.video.width(), frames, seed + 1).unwrap();
    write_inputs_with(dir, &s.video, &masks)
}

pub fn write_inputs_with(dir: &Path, video: &vinpaint_core::VideoTensor, masks: &MaskSequence) -> (PathBuf, PathBuf) {
    let (v, m) = (dir.join("video"), dir.join("masks"));
    write_video(&v, video).unwrap();
    write_masks(&m, masks).unwrap();
    (v, m)
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// A quick inpaint config: short DDIM chain, small windows.
pub fn quick_inpaint(video: &Path, masks: &Path, weights: &Path, out: &Path) -> serde_json::Value {
    serde_json::json!({
        "mode": "inpaint",
        "video_dir": video,
        "mask_dir": masks,
        "weights_path": weights,
        "out_dir": out,
        "prompt": "a red square moving right",
        "window": 8,
        "stride": 4,
        "steps": 4,
        "schedule_steps": 40,
        "cfg_scale": 2.0,
        "seed": 7,
    })
}

pub fn write_cfg(path: &Path, v: &serde_json::Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}
