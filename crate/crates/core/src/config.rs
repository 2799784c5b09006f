//! Model configuration and the two built-in profiles.
//!
//! `paper` mirrors the published hyperparameter tables; `desk` is the small
//! fast-test profile the acceptance suite pins (d=32, 2 heads, 1+1 encoder
//! layers, 2 decoder layers, sync after layer 1, chunk 8).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

/// Which components are switched off. The first three mirror the ablation
/// study rows; `no_visual` additionally drops the visual segment entirely
/// (used by the isolation checks).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Omit CLS tokens from the decoder memories.
    pub no_cls: bool,
    /// Skip every cross-segment encoder pass.
    pub no_cross: bool,
    /// Make the synchronization block an identity.
    pub no_sync: bool,
    /// Drop the visual segment from the model input.
    pub no_visual: bool,
}

impl Ablation {
    pub fn any(&self) -> bool {
        self.no_cls || self.no_cross || self.no_sync || self.no_visual
    }

    /// Names accepted by the CLI `--ablate` list.
    pub const FLAG_NAMES: [&'static str; 3] = ["no-cls", "no-cross", "no-sync"];

    pub fn set_flag(&mut self, name: &str) -> Result<()> {
        match name {
            "no-cls" => self.no_cls = true,
            "no-cross" => self.no_cross = true,
            "no-sync" => self.no_sync = true,
            other => {
                return Err(Error::config(format!(
                    "unknown ablation '{other}'; valid names: {}",
                    Self::FLAG_NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stacking {
    /// Alternate segment-wise and cross-segment layers.
    Interleaved,
    /// All segment-wise layers, then all cross-segment layers.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

/// Every architectural and training hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Segment-wise encoder layers.
    pub l_seg: usize,
    /// Cross-segment encoder layers.
    pub l_cross: usize,
    /// Decoder layers per arm.
    pub l_dec: usize,
    /// Synchronization block layers.
    pub l_sync: usize,
    /// Decoder layer index after which synchronization happens.
    pub sync_position: usize,
    /// CLS token counts for [arm1, arm2, visual].
    pub cls_counts: [usize; 3],
    /// Joints per arm (incl. gripper).
    pub joints_per_arm: usize,
    /// Actions predicted per observation.
    pub chunk_size: usize,
    pub latent_dim: usize,
    /// Latent conditioning on/off; off reduces the objective to plain L1.
    pub use_latent: bool,
    /// KL weight.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Temporal-ensemble exponential decay.
    pub ensemble_decay: f64,
    pub stacking: Stacking,
    /// Pre-norm residual blocks instead of the default post-norm.
    pub pre_norm: bool,
    pub ablation: Ablation,
    pub precision: Precision,
    pub seed: u64,
    pub image_h: usize,
    pub image_w: usize,
    pub image_c: usize,
    /// Output channels per conv stem block; the last must equal `d_model`.
    pub stem_channels: Vec<usize>,
    /// Stride per conv stem block.
    pub stem_strides: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::config(format!(
                "unknown profile '{other}' (expected 'paper' or 'desk')"
            ))),
        }
    }
}

impl ModelConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => ModelConfig {
                d_model: 512,
                n_heads: 8,
                ffn_dim: 3200,
                dropout: 0.1,
                l_seg: 3,
                l_cross: 3,
                l_dec: 4,
                l_sync: 1,
                sync_position: 2,
                cls_counts: [7, 7, 5],
                joints_per_arm: 7,
                chunk_size: 50,
                latent_dim: 32,
                use_latent: true,
                beta: 10.0,
                lr: 1e-5,
                batch_size: 8,
                ensemble_decay: 0.01,
                stacking: Stacking::Interleaved,
                pre_norm: false,
                ablation: Ablation::default(),
                precision: Precision::F32,
                seed: 0,
                image_h: 64,
                image_w: 64,
                image_c: 1,
                stem_channels: vec![64, 128, 512],
                stem_strides: vec![2, 2, 2],
            },
            Profile::Desk => ModelConfig {
                d_model: 32,
                n_heads: 2,
                ffn_dim: 128,
                dropout: 0.1,
                l_seg: 1,
                l_cross: 1,
                l_dec: 2,
                l_sync: 1,
                sync_position: 1,
                cls_counts: [2, 2, 1],
                joints_per_arm: 4,
                chunk_size: 8,
                latent_dim: 8,
                use_latent: true,
                beta: 10.0,
                lr: 1e-3,
                batch_size: 8,
                ensemble_decay: 0.01,
                stacking: Stacking::Interleaved,
                pre_norm: false,
                ablation: Ablation::default(),
                precision: Precision::F32,
                seed: 0,
                image_h: 32,
                image_w: 32,
                image_c: 1,
                stem_channels: vec![8, 16, 32],
                stem_strides: vec![2, 2, 2],
            },
        }
    }

    pub fn paper() -> Self {
        Self::profile(Profile::Paper)
    }

    pub fn desk() -> Self {
        Self::profile(Profile::Desk)
    }

    /// Total two-arm action width.
    pub fn action_dim(&self) -> usize {
        2 * self.joints_per_arm
    }

    /// Visual token grid after the stem.
    pub fn visual_grid(&self) -> (usize, usize) {
        let s: usize = self.stem_strides.iter().product();
        (self.image_h / s, self.image_w / s)
    }

    pub fn visual_tokens(&self) -> usize {
        let (h, w) = self.visual_grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 4 != 0 {
            return fail(format!(
                "d_model {} must be divisible by 4 for 2-D positional encoding",
                self.d_model
            ));
        }
        if self.l_dec < 2 || self.sync_position == 0 || self.sync_position >= self.l_dec {
            return fail(format!(
                "sync_position {} must satisfy 1 <= s < l_dec ({})",
                self.sync_position, self.l_dec
            ));
        }
        if self.stacking == Stacking::Interleaved && self.l_seg != self.l_cross {
            return fail(format!(
                "interleaved stacking needs l_seg == l_cross, got {}/{}",
                self.l_seg, self.l_cross
            ));
        }
        if self.chunk_size == 0 {
            return fail("chunk_size must be >= 1".into());
        }
        if self.joints_per_arm == 0 {
            return fail("joints_per_arm must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.stem_channels.len() != self.stem_strides.len() || self.stem_channels.is_empty() {
            return fail("stem_channels and stem_strides must be non-empty and equal length".into());
        }
        if *self.stem_channels.last().unwrap() != self.d_model {
            return fail(format!(
                "last stem channel count {} must equal d_model {}",
                self.stem_channels.last().unwrap(),
                self.d_model
            ));
        }
        let s: usize = self.stem_strides.iter().product();
        if s == 0 || self.image_h % s != 0 || self.image_w % s != 0 {
            return fail(format!(
                "image {}x{} not divisible by total stem stride {}",
                self.image_h, self.image_w, s
            ));
        }
        if self.use_latent && self.latent_dim == 0 {
            return fail("latent_dim must be >= 1 when use_latent is set".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// Canonical serialized form: the digest hashes exactly these bytes.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// 64-bit FNV-1a over the canonical text.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
