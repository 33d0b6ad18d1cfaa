use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::TEMPORAL_MAX_LEN;

/// Shape of the inflated UNet. Four levels of three blocks give the twelve
/// skip tensors that, with the middle block, form the thirteen structure
/// injection slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Noisy frame (3) + masked frame (3) + mask (1).
    pub input_channels: usize,
    pub level_widths: Vec<usize>,
    pub blocks_per_level: usize,
    /// Spatial extents (in pixels) at which self/cross attention run.
    pub spatial_attention_resolutions: Vec<usize>,
    pub temporal_max_len: usize,
    pub text_dim: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            input_channels: 7,
            level_widths: vec![32, 64, 96, 128],
            blocks_per_level: 3,
            spatial_attention_resolutions: vec![16, 8, 4],
            temporal_max_len: TEMPORAL_MAX_LEN,
            text_dim: 32,
            time_embed_dim: 64,
            norm_groups: 8,
        }
    }
}

pub const LEVELS: usize = 4;

/// Frame side the attention placement refers to: level `l` attends when
/// `NOMINAL_SIDE >> l` is an attention resolution, whatever the input size.
pub const NOMINAL_SIDE: usize = 32;

impl DenoiserConfig {
    /// Small widths for desk-scale training runs and tests.
    pub fn tiny() -> Self {
        Self {
            level_widths: vec![8, 16, 16, 16],
            time_embed_dim: 32,
            norm_groups: 4,
            ..Self::default()
        }
    }

    /// Smallest useful network, for gradient checks.
    pub fn micro() -> Self {
        Self {
            level_widths: vec![4, 4, 4, 4],
            time_embed_dim: 8,
            norm_groups: 2,
            text_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_channels == 7, Argument, "input must carry 7 channels (x_t, v_m, m)");
        ensure!(self.level_widths.len() == LEVELS, Argument, "exactly {LEVELS} levels are required");
        ensure!(self.blocks_per_level == 3, Argument, "the 13-slot layout needs 3 blocks per level");
        ensure!(
            self.level_widths.iter().all(|&w| w >= 2 && w % 2 == 0),
            Argument,
            "level widths must be even and at least 2"
        );
        ensure!(self.time_embed_dim >= 2 && self.time_embed_dim % 2 == 0, Argument, "time embedding width must be even");
        ensure!(self.temporal_max_len >= 1, Argument, "positional table cannot be empty");
        ensure!(self.norm_groups >= 1, Argument, "norm groups must be positive");
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.level_widths[level]
    }

    /// Number of structure injection slots (all skips plus the middle block).
    pub fn injection_slots(&self) -> usize {
        LEVELS * self.blocks_per_level + 1
    }

    pub fn has_attention(&self, resolution: usize) -> bool {
        self.spatial_attention_resolutions.contains(&resolution)
    }

    pub fn level_attends(&self, level: usize) -> bool {
        self.has_attention(NOMINAL_SIDE >> level)
    }

    /// Groups for a layer of `channels` channels.
    pub fn groups_for(&self, channels: usize) -> usize {
        let mut g = self.norm_groups.min(channels);
        while channels % g != 0 {
            g -= 1;
        }
        g
    }

    /// Spatial side lengths must halve cleanly through every level.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let div = 1 << (LEVELS - 1);
        ensure!(
            h % div == 0 && w % div == 0 && h >= div && w >= div,
            Argument,
            "frame size {h}x{w} must be a positive multiple of {div}"
        );
        Ok(())
    }

    /// Packs the numeric fields for storage alongside weights.
    pub fn to_meta(&self) -> Vec<f32> {
        let mut v = vec![
            1.0,
            self.input_channels as f32,
            self.blocks_per_level as f32,
            self.temporal_max_len as f32,
            self.text_dim as f32,
            self.time_embed_dim as f32,
            self.norm_groups as f32,
        ];
        v.extend(self.level_widths.iter().map(|&w| w as f32));
        v.push(self.spatial_attention_resolutions.len() as f32);
        v.extend(self.spatial_attention_resolutions.iter().map(|&r| r as f32));
        v
    }

    pub fn from_meta(v: &[f32]) -> Result<Self> {
        ensure!(v.len() >= 12 && v[0] == 1.0, Format, "unrecognised model config record");
        let u = |x: f32| x as usize;
        let n_attn = u(v[11]);
        ensure!(v.len() == 12 + n_attn, Format, "truncated model config record");
        let cfg = Self {
            input_channels: u(v[1]),
            blocks_per_level: u(v[2]),
            temporal_max_len: u(v[3]),
            text_dim: u(v[4]),
            time_embed_dim: u(v[5]),
            norm_groups: u(v[6]),
            level_widths: v[7..11].iter().map(|&x| u(x)).collect(),
            spatial_attention_resolutions: v[12..].iter().map(|&x| u(x)).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_thirteen_slots() {
        let c = DenoiserConfig::default();
        c.validate().unwrap();
        assert_eq!(c.injection_slots(), 13);
        assert_eq!(c.level_widths, vec![32, 64, 96, 128]);
    }

    #[test]
    fn meta_roundtrip() {
        for c in [DenoiserConfig::default(), DenoiserConfig::tiny(), DenoiserConfig::micro()] {
            assert_eq!(DenoiserConfig::from_meta(&c.to_meta()).unwrap(), c);
        }
    }

    #[test]
    fn groups_divide_channels() {
        let c = DenoiserConfig::default();
        assert_eq!(c.groups_for(32), 8);
        assert_eq!(c.groups_for(4), 4);
        assert_eq!(c.groups_for(12), 6);
    }
}
