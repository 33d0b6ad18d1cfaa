//! Conditional inputs: masked video, mask sequence and the prompt embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

/// `[frames, 3, H, W]` video with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor(Tensor);

impl VideoTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        ensure!(
            t.rank() == 4 && t.shape()[1] == 3,
            Argument,
            "video must be [frames, 3, H, W], got {:?}",
            t.shape()
        );
        ensure!(
            t.data().iter().all(|v| (-1.0..=1.0).contains(v)),
            Range,
            "video values must lie in [-1, 1]"
        );
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// Frames `[start, start + count)`.
    pub fn frames_range(&self, start: usize, count: usize) -> Result<Self> {
        Ok(Self(self.0.narrow0(start, count)?))
    }
}

/// `[frames, 1, H, W]` binary masks; 1 marks the region to regenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence(Tensor);

impl MaskSequence {
    pub fn new(t: Tensor) -> Result<Self> {
        ensure!(
            t.rank() == 4 && t.shape()[1] == 1,
            Argument,
            "mask sequence must be [frames, 1, H, W], got {:?}",
            t.shape()
        );
        if let Some(i) = t.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!(
                "mask value {} at flat index {i} is not binary",
                t.data()[i]
            )));
        }
        Ok(Self(t))
    }

    /// The same mask on every frame, as used for uncropping.
    pub fn repeated(frame: &Tensor, frames: usize) -> Result<Self> {
        ensure!(frame.rank() == 2, Argument, "single mask must be [H, W]");
        let (h, w) = (frame.shape()[0], frame.shape()[1]);
        let data = frame.data().repeat(frames);
        Self::new(Tensor::new(&[frames, 1, h, w], data)?)
    }

    pub fn zeros(frames: usize, h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[frames, 1, h, w]))
    }

    pub fn ones(frames: usize, h: usize, w: usize) -> Self {
        Self(Tensor::ones(&[frames, 1, h, w]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn frames_range(&self, start: usize, count: usize) -> Result<Self> {
        Ok(Self(self.0.narrow0(start, count)?))
    }

    /// Complement: 1 where the mask was 0.
    pub fn inverted(&self) -> Self {
        Self(self.0.map(|v| 1.0 - v))
    }

    /// Fraction of masked pixels over the whole sequence.
    pub fn coverage(&self) -> f64 {
        self.0.mean_f64()
    }

    pub(crate) fn check_matches(&self, video: &VideoTensor) -> Result<()> {
        let (m, v) = (self.0.shape(), video.tensor().shape());
        ensure!(
            m[0] == v[0] && m[2] == v[2] && m[3] == v[3],
            Argument,
            "mask sequence {m:?} does not match video {v:?}"
        );
        Ok(())
    }
}

/// Prompt embedder: each whitespace token (lowercased) maps to a Gaussian
/// vector seeded from a SHA-256 of the token, rows past the last token are 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEmbedder {
    pub dim: usize,
    pub max_tokens: usize,
}

impl Default for TextEmbedder {
    fn default() -> Self {
        Self {
            dim: 32,
            max_tokens: 8,
        }
    }
}

const EMBED_SALT: &[u8] = b"vinpaint-token-v1";

impl TextEmbedder {
    pub fn token_vector(&self, token: &str) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(EMBED_SALT);
        h.update(token.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        Tensor::randn(&[self.dim], &mut rng).into_vec()
    }

    pub fn embed(&self, prompt: &str) -> Tensor {
        let mut data = vec![0.0f32; self.max_tokens * self.dim];
        for (i, tok) in prompt.split_whitespace().take(self.max_tokens).enumerate() {
            let v = self.token_vector(&tok.to_lowercase());
            data[i * self.dim..(i + 1) * self.dim].copy_from_slice(&v);
        }
        Tensor::from_parts(vec![self.max_tokens, self.dim], data)
    }

    pub fn null(&self) -> Tensor {
        Tensor::zeros(&[self.max_tokens, self.dim])
    }
}

/// `embed_text` with the default 8×32 embedder.
pub fn embed_text(prompt: &str) -> Tensor {
    TextEmbedder::default().embed(prompt)
}

/// The condition `(v_m, m, τ(y))` fed to the denoiser.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub masked_video: VideoTensor,
    pub masks: MaskSequence,
    pub text_embedding: Tensor,
    pub is_null: bool,
}

impl ConditionSet {
    pub fn frames(&self) -> usize {
        self.masks.frames()
    }

    /// Restricts the condition to frames `[start, start + count)`.
    pub fn frames_range(&self, start: usize, count: usize) -> Result<Self> {
        Ok(Self {
            masked_video: self.masked_video.frames_range(start, count)?,
            masks: self.masks.frames_range(start, count)?,
            text_embedding: self.text_embedding.clone(),
            is_null: self.is_null,
        })
    }

    /// Same visual condition with the prompt replaced by the null embedding.
    pub fn to_null(&self) -> Self {
        Self {
            text_embedding: Tensor::zeros(self.text_embedding.shape()),
            is_null: true,
            ..self.clone()
        }
    }
}

/// `v ⊙ (1 − m)` elementwise over every channel.
pub fn apply_mask(video: &VideoTensor, masks: &MaskSequence) -> Result<VideoTensor> {
    masks.check_matches(video)?;
    let (h, w) = (video.height(), video.width());
    let plane = h * w;
    let mut out = video.tensor().data().to_vec();
    let m = masks.tensor().data();
    for (fc, chunk) in out.chunks_mut(plane).enumerate() {
        let f = fc / 3;
        for (v, &mv) in chunk.iter_mut().zip(&m[f * plane..(f + 1) * plane]) {
            if mv != 0.0 {
                *v = 0.0;
            }
        }
    }
    VideoTensor::new(Tensor::from_parts(video.tensor().shape().to_vec(), out))
}

pub fn make_condition_with(
    embedder: &TextEmbedder,
    video: &VideoTensor,
    masks: &MaskSequence,
    prompt: &str,
    null_condition: bool,
) -> Result<ConditionSet> {
    let masked_video = apply_mask(video, masks)?;
    let text_embedding = if null_condition {
        embedder.null()
    } else {
        embedder.embed(prompt)
    };
    Ok(ConditionSet {
        masked_video,
        masks: masks.clone(),
        text_embedding,
        is_null: null_condition,
    })
}

pub fn make_condition(
    video: &VideoTensor,
    masks: &MaskSequence,
    prompt: &str,
    null_condition: bool,
) -> Result<ConditionSet> {
    make_condition_with(&TextEmbedder::default(), video, masks, prompt, null_condition)
}

/// One problem found while checking an ingested mask sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskIssue {
    FrameCount { masks: usize, video: usize },
    Shape { masks: Vec<usize>, video: Vec<usize> },
    NonBinary { frame: usize, y: usize, x: usize, value: f32 },
    /// Allowed; reported as a warning only.
    EmptyFrame { frame: usize },
}

impl MaskIssue {
    pub fn is_warning(&self) -> bool {
        matches!(self, MaskIssue::EmptyFrame { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub issues: Vec<MaskIssue>,
}

impl MaskReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = &MaskIssue> {
        self.issues.iter().filter(|i| !i.is_warning())
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }
}

/// Checks a raw `[frames, 1, H, W]` mask tensor against a video.
pub fn validate_mask_sequence(masks: &Tensor, video: &VideoTensor) -> MaskReport {
    let mut issues = Vec::new();
    let ms = masks.shape();
    let vs = video.tensor().shape();
    if ms.len() != 4 || ms[1] != 1 || ms[2] != vs[2] || ms[3] != vs[3] {
        issues.push(MaskIssue::Shape {
            masks: ms.to_vec(),
            video: vs.to_vec(),
        });
        if ms.len() != 4 {
            return MaskReport { issues };
        }
    }
    if ms[0] != vs[0] {
        issues.push(MaskIssue::FrameCount {
            masks: ms[0],
            video: vs[0],
        });
    }
    let plane = ms[1] * ms[2] * ms[3];
    for (f, frame) in masks.data().chunks(plane).enumerate() {
        let mut any = false;
        for (i, &v) in frame.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                issues.push(MaskIssue::NonBinary {
                    frame: f,
                    y: (i % (ms[2] * ms[3])) / ms[3],
                    x: i % ms[3],
                    value: v,
                });
            }
            any |= v != 0.0;
        }
        if !any {
            issues.push(MaskIssue::EmptyFrame { frame: f });
        }
    }
    MaskReport { issues }
}
