//! Synthetic moving-shape clips and random inpainting masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{MaskSequence, VideoTensor};
use crate::error::{ensure, Result};
use crate::numerics::Tensor;

pub const SAMPLE_FRAMES: usize = 16;
pub const SAMPLE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the offset `(dx, dy)` from the centre lies inside a shape of
    /// half-size `r`. Triangles point up.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("purple", [0.6, 0.15, 0.8]),
    ("orange", [1.0, 0.55, 0.05]),
];

pub const DIRECTIONS: [(&str, [f32; 2]); 4] = [("left", [-1.0, 0.0]), ("right", [1.0, 0.0]), ("up", [0.0, -1.0]), ("down", [0.0, 1.0])];

/// One object's trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrack {
    pub shape: Shape,
    pub color: usize,
    pub direction: usize,
    pub radius: f32,
    pub start: [f32; 2],
    pub speed: f32,
}

impl ShapeTrack {
    pub fn centre(&self, frame: usize) -> [f32; 2] {
        let d = DIRECTIONS[self.direction].1;
        let s = self.speed * frame as f32;
        [self.start[0] + d[0] * s, self.start[1] + d[1] * s]
    }

    fn covers(&self, frame: usize, x: usize, y: usize) -> bool {
        let c = self.centre(frame);
        self.shape.contains(x as f32 + 0.5 - c[0], y as f32 + 0.5 - c[1], self.radius)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub video: VideoTensor,
    pub caption: String,
    /// Pixels of the captioned object.
    pub object_masks: MaskSequence,
    pub tracks: Vec<ShapeTrack>,
}

/// Smooth per-channel noise from a bilinearly interpolated 5×5 lattice.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<[f32; 3]> {
    const G: usize = 5;
    let lattice: Vec<[f32; 3]> = (0..G * G).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let tint: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gy = y as f32 / (h - 1).max(1) as f32 * (G - 1) as f32;
            let gx = x as f32 / (w - 1).max(1) as f32 * (G - 1) as f32;
            let (y0, x0) = ((gy as usize).min(G - 2), (gx as usize).min(G - 2));
            let (fy, fx) = (gy - y0 as f32, gx - x0 as f32);
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let a = lattice[y0 * G + x0][c] * (1.0 - fx) + lattice[y0 * G + x0 + 1][c] * fx;
                let b = lattice[(y0 + 1) * G + x0][c] * (1.0 - fx) + lattice[(y0 + 1) * G + x0 + 1][c] * fx;
                let v = a * (1.0 - fy) + b * fy;
                // Muted background in [0.1, 0.5] so objects stand out.
                *p = 0.1 + 0.25 * v + 0.15 * tint[c];
            }
            out.push(px);
        }
    }
    out
}

fn random_track(rng: &mut ChaCha8Rng, frames: usize, size: usize) -> ShapeTrack {
    let radius = rng.gen_range(3.5f32..6.0);
    let speed = rng.gen_range(0.4f32..1.0);
    let direction = rng.gen_range(0..DIRECTIONS.len());
    let travel = speed * (frames - 1) as f32;
    let d = DIRECTIONS[direction].1;
    // Keep the whole path (plus the shape extent) inside the frame.
    let lo = radius + 0.5;
    let hi = size as f32 - radius - 0.5;
    let mut start = [0.0f32; 2];
    for a in 0..2 {
        let (mut l, mut hgh) = (lo, hi);
        if d[a] > 0.0 {
            hgh -= travel;
        } else if d[a] < 0.0 {
            l += travel;
        }
        start[a] = if hgh > l { rng.gen_range(l..hgh) } else { (l + hgh) / 2.0 };
    }
    ShapeTrack {
        shape: SHAPES[rng.gen_range(0..SHAPES.len())],
        color: rng.gen_range(0..COLORS.len()),
        direction,
        radius,
        start,
        speed,
    }
}

/// Renders a clip with the given tracks drawn in order over `background`.
pub fn render(tracks: &[ShapeTrack], background: &[[f32; 3]], frames: usize, size: usize) -> Result<VideoTensor> {
    let plane = size * size;
    let mut d = vec![0.0f32; frames * 3 * plane];
    for f in 0..frames {
        for y in 0..size {
            for x in 0..size {
                let mut px = background[y * size + x];
                for t in tracks {
                    if t.covers(f, x, y) {
                        px = COLORS[t.color].1;
                    }
                }
                for c in 0..3 {
                    d[(f * 3 + c) * plane + y * size + x] = 2.0 * px[c] - 1.0;
                }
            }
        }
    }
    VideoTensor::new(Tensor::new(&[frames, 3, size, size], d)?)
}

/// One synthetic clip with `frames` frames.
pub fn gen_synthetic_sample(seed: u64, frames: usize) -> Result<SyntheticSample> {
    ensure!(frames >= 1, Argument, "need at least one frame");
    let size = SAMPLE_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = value_noise(&mut rng, size, size);
    let count = rng.gen_range(1..=2);
    let mut tracks: Vec<ShapeTrack> = (0..count).map(|_| random_track(&mut rng, frames, size)).collect();
    if count == 2 && tracks[1].color == tracks[0].color {
        tracks[1].color = (tracks[0].color + 1) % COLORS.len();
    }
    // The captioned object is drawn last so it is never occluded.
    tracks.reverse();
    let main = tracks.last().unwrap().clone();
    let video = render(&tracks, &background, frames, size)?;
    let masks = Tensor::from_fn(&[frames, 1, size, size], |i| {
        let (f, p) = (i / (size * size), i % (size * size));
        main.covers(f, p % size, p / size) as u8 as f32
    });
    Ok(SyntheticSample {
        video,
        caption: format!("a {} {} moving {}", COLORS[main.color].0, main.shape.name(), DIRECTIONS[main.direction].0),
        object_masks: MaskSequence::new(masks)?,
        tracks,
    })
}

/// `count` 16-frame 32×32 clips, deterministic in `seed`.
pub fn gen_synthetic_dataset(count: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    ensure!(count >= 1, Argument, "dataset size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_synthetic_sample(rng.gen(), SAMPLE_FRAMES)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMotion {
    Static,
    Drifting,
}

pub const MIN_COVERAGE: f64 = 0.05;
pub const MAX_COVERAGE: f64 = 0.6;

enum Stroke {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Line { a: [f32; 2], b: [f32; 2], half: f32 },
}

impl Stroke {
    fn hit(&self, x: f32, y: f32) -> bool {
        match *self {
            Stroke::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Stroke::Line { a, b, half } => {
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let len2 = (dx * dx + dy * dy).max(1e-6);
                let s = (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0);
                let (px, py) = (a[0] + s * dx - x, a[1] + s * dy - y);
                px * px + py * py <= half * half
            }
        }
    }
}

fn draw_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, frames: usize, motion: MaskMotion) -> Vec<f32> {
    let (hf, wf) = (h as f32, w as f32);
    let n = rng.gen_range(1..=3);
    let strokes: Vec<Stroke> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                let rw = rng.gen_range(0.15..0.5) * wf;
                let rh = rng.gen_range(0.15..0.5) * hf;
                let x0 = rng.gen_range(0.0..(wf - rw).max(1.0));
                let y0 = rng.gen_range(0.0..(hf - rh).max(1.0));
                Stroke::Rect { x0, y0, x1: x0 + rw, y1: y0 + rh }
            } else {
                let a = [rng.gen_range(0.0..wf), rng.gen_range(0.0..hf)];
                let b = [rng.gen_range(0.0..wf), rng.gen_range(0.0..hf)];
                let half = rng.gen_range(0.04..0.1) * wf.min(hf);
                Stroke::Line { a, b, half }
            }
        })
        .collect();
    let vel = match motion {
        MaskMotion::Static => [0.0, 0.0],
        MaskMotion::Drifting => [rng.gen_range(-0.5f32..0.5), rng.gen_range(-0.5f32..0.5)],
    };
    let mut out = vec![0.0f32; frames * h * w];
    for f in 0..frames {
        let (ox, oy) = (vel[0] * f as f32, vel[1] * f as f32);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5 - ox, y as f32 + 0.5 - oy);
                if strokes.iter().any(|s| s.hit(px, py)) {
                    out[(f * h + y) * w + x] = 1.0;
                }
            }
        }
    }
    out
}

fn coverage_ok(m: &[f32], plane: usize) -> bool {
    m.chunks(plane).all(|fr| {
        let c = fr.iter().filter(|&&v| v != 0.0).count() as f64 / plane as f64;
        (MIN_COVERAGE..=MAX_COVERAGE).contains(&c)
    })
}

/// Union of 1–3 rectangles and thick strokes whose per-frame coverage lies in
/// `[MIN_COVERAGE, MAX_COVERAGE]`; drifting by default.
pub fn gen_random_mask(height: usize, width: usize, frames: usize, seed: u64) -> Result<MaskSequence> {
    gen_random_mask_with(height, width, frames, seed, MaskMotion::Drifting)
}

pub fn gen_random_mask_with(height: usize, width: usize, frames: usize, seed: u64, motion: MaskMotion) -> Result<MaskSequence> {
    ensure!(
        height >= 1 && width >= 1 && frames >= 1,
        Argument,
        "mask dimensions must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = height * width;
    for _ in 0..64 {
        let m = draw_mask(&mut rng, height, width, frames, motion);
        if coverage_ok(&m, plane) {
            return MaskSequence::new(Tensor::new(&[frames, 1, height, width], m)?);
        }
    }
    // Centred box covering about a quarter of the frame.
    let m = Tensor::from_fn(&[frames, 1, height, width], |i| {
        let p = i % plane;
        let (y, x) = (p / width, p % width);
        let inside = |v: usize, n: usize| 4 * v + 2 >= n && 4 * v + 2 < 3 * n;
        (inside(y, height) && inside(x, width)) as u8 as f32
    });
    MaskSequence::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_with_valid_captions() {
        let a = gen_synthetic_dataset(6, 3).unwrap();
        let b = gen_synthetic_dataset(6, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.video.tensor().bit_eq(y.video.tensor()));
            assert_eq!(x.caption, y.caption);
        }
        for s in &a {
            assert_eq!(s.video.tensor().shape(), [16, 3, 32, 32]);
            let words: Vec<&str> = s.caption.split(' ').collect();
            assert_eq!(words.len(), 5);
            assert!(COLORS.iter().any(|c| c.0 == words[1]));
            assert!(SHAPES.iter().any(|c| c.name() == words[2]));
            assert!(DIRECTIONS.iter().any(|c| c.0 == words[4]));
            let main = s.tracks.last().unwrap();
            assert_eq!(COLORS[main.color].0, words[1]);
            for f in 0..16 {
                let m = s.object_masks.frames_range(f, 1).unwrap();
                assert!(m.coverage() > 0.0, "frame {f} has an empty mask");
                // The object is painted in its colour wherever the mask is set.
                let c = COLORS[main.color].1;
                let plane = 32 * 32;
                for p in 0..plane {
                    if m.tensor().data()[p] != 0.0 {
                        for ch in 0..3 {
                            let v = s.video.tensor().data()[(f * 3 + ch) * plane + p];
                            assert!((v - (2.0 * c[ch] - 1.0)).abs() < 1e-6);
                        }
                    }
                }
            }
            for t in &s.tracks {
                for f in 0..16 {
                    let c = t.centre(f);
                    assert!(c[0] - t.radius >= 0.0 && c[0] + t.radius <= 32.0);
                    assert!(c[1] - t.radius >= 0.0 && c[1] + t.radius <= 32.0);
                }
            }
        }
        assert!(gen_synthetic_dataset(0, 1).is_err());
    }

    #[test]
    fn masks_are_binary_bounded_and_seeded() {
        for seed in 0..1000 {
            let m = gen_random_mask(32, 32, 4, seed).unwrap();
            assert!(m.tensor().data().iter().all(|&v| v == 0.0 || v == 1.0));
            for f in 0..4 {
                let c = m.frames_range(f, 1).unwrap().coverage();
                assert!((MIN_COVERAGE..=MAX_COVERAGE).contains(&c), "seed {seed}: {c}");
            }
        }
        let a = gen_random_mask(16, 24, 3, 7).unwrap();
        let b = gen_random_mask(16, 24, 3, 7).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
        let s = gen_random_mask_with(32, 32, 5, 2, MaskMotion::Static).unwrap();
        let f0 = s.frames_range(0, 1).unwrap();
        for f in 1..5 {
            assert!(s.frames_range(f, 1).unwrap().tensor().bit_eq(f0.tensor()));
        }
        assert!(gen_random_mask(0, 3, 3, 1).is_err());
    }
}
