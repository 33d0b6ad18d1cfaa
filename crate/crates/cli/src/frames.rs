//! Frame directories: `frame_00000.png`, `frame_00001.png`, ... with PPM/PGM
//! accepted as a fallback for each index.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use vinpaint_core::conditioning::validate_mask_sequence;
use vinpaint_core::{MaskSequence, Tensor, VideoTensor};

use crate::error::{write_err, CliError, CliResult};

const EXTENSIONS: [&str; 3] = ["png", "ppm", "pgm"];

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

pub fn u8_to_value(u: u8) -> f32 {
    2.0 * (u as f32 / 255.0) - 1.0
}

/// Inverse of [`u8_to_value`], rounding half up and clamping.
pub fn value_to_u8(v: f32) -> u8 {
    let u = ((v as f64 + 1.0) / 2.0 * 255.0 + 0.5).floor();
    u.clamp(0.0, 255.0) as u8
}

fn parse_index(name: &str) -> Option<usize> {
    let (stem, ext) = name.rsplit_once('.')?;
    let digits = stem.strip_prefix("frame_")?;
    if !EXTENSIONS.contains(&ext) || digits.len() != 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn locate(dir: &Path, index: usize) -> CliResult<PathBuf> {
    let png = dir.join(frame_name(index));
    if png.is_file() {
        return Ok(png);
    }
    EXTENSIONS[1..]
        .iter()
        .map(|ext| dir.join(format!("frame_{index:05}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Input(format!("missing frame {}", png.display())))
}

/// Number of frames in `dir`; every index below the highest one must exist.
pub fn count_frames(dir: &Path) -> CliResult<usize> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Input(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut indices = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        if let Some(i) = entry.file_name().to_str().and_then(parse_index) {
            indices.insert(i);
        }
    }
    let Some(&last) = indices.last() else {
        return Err(CliError::Input(format!("no frame_NNNNN images in {}", dir.display())));
    };
    if let Some(gap) = (0..=last).find(|i| !indices.contains(i)) {
        return Err(CliError::Input(format!("missing frame {}", dir.join(frame_name(gap)).display())));
    }
    Ok(last + 1)
}

fn open(path: &Path) -> CliResult<image::DynamicImage> {
    image::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn check_dims(path: &Path, got: (u32, u32), expect: &mut Option<(u32, u32)>) -> CliResult<()> {
    match *expect {
        None => *expect = Some(got),
        Some(e) if e != got => {
            return Err(CliError::Input(format!(
                "{}: size {}x{} differs from {}x{}",
                path.display(),
                got.0,
                got.1,
                e.0,
                e.1
            )))
        }
        _ => {}
    }
    Ok(())
}

/// Reads `frames` frames (all of them when `None`) as a `[N′, 3, H, W]` video.
pub fn read_video(dir: &Path, frames: Option<usize>) -> CliResult<VideoTensor> {
    let n = match frames {
        Some(n) if n >= 1 => n,
        Some(_) => return Err(CliError::Config("frames must be positive".into())),
        None => count_frames(dir)?,
    };
    let mut dims = None;
    let mut data = Vec::new();
    for i in 0..n {
        let path = locate(dir, i)?;
        let img = open(&path)?.to_rgb8();
        check_dims(&path, img.dimensions(), &mut dims)?;
        let (w, h) = img.dimensions();
        let plane = (w * h) as usize;
        let base = data.len();
        data.resize(base + 3 * plane, 0.0);
        for (p, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + p] = u8_to_value(px[c]);
            }
        }
    }
    let (w, h) = dims.unwrap();
    let t = Tensor::new(&[n, 3, h as usize, w as usize], data)?;
    Ok(VideoTensor::new(t)?)
}

/// Reads one mask per video frame. Values must be exactly 0 or 255.
pub fn read_masks(dir: &Path, video: &VideoTensor) -> CliResult<MaskSequence> {
    let n = video.frames();
    let available = count_frames(dir)?;
    if available < n {
        locate(dir, available)?;
    }
    let (h, w) = (video.height(), video.width());
    let mut data = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let path = locate(dir, i)?;
        let img = open(&path)?.to_luma8();
        check_dims(&path, img.dimensions(), &mut Some((w as u32, h as u32)))?;
        if let Some((p, v)) = img.as_raw().iter().enumerate().find(|(_, &v)| v != 0 && v != 255) {
            return Err(CliError::Input(format!(
                "{}: mask value {v} at (y={}, x={}) is neither 0 nor 255",
                path.display(),
                p / w,
                p % w
            )));
        }
        data.extend(img.as_raw().iter().map(|&v| if v == 255 { 1.0 } else { 0.0 }));
    }
    let raw = Tensor::new(&[n, 1, h, w], data)?;
    let report = validate_mask_sequence(&raw, video);
    if let Some(issue) = report.errors().next() {
        return Err(CliError::Input(format!("{}: {issue:?}", dir.display())));
    }
    Ok(MaskSequence::new(raw)?)
}

pub fn video_to_images(video: &VideoTensor) -> Vec<RgbImage> {
    let (h, w) = (video.height(), video.width());
    let plane = h * w;
    video
        .tensor()
        .data()
        .chunks(3 * plane)
        .map(|frame| {
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let p = y as usize * w + x as usize;
                image::Rgb([0, 1, 2].map(|c| value_to_u8(frame[c * plane + p])))
            })
        })
        .collect()
}

pub fn write_video(dir: &Path, video: &VideoTensor) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
    for (i, img) in video_to_images(video).into_iter().enumerate() {
        let path = dir.join(frame_name(i));
        img.save(&path).map_err(|e| write_err(&path, e))?;
    }
    Ok(())
}

pub fn write_masks(dir: &Path, masks: &MaskSequence) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
    let s = masks.tensor().shape();
    let (h, w) = (s[2], s[3]);
    for (i, frame) in masks.tensor().data().chunks(h * w).enumerate() {
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if frame[y as usize * w + x as usize] != 0.0 { 255 } else { 0 }]));
        let path = dir.join(frame_name(i));
        img.save(&path).map_err(|e| write_err(&path, e))?;
    }
    Ok(())
}
