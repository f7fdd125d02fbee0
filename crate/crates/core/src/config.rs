//! Run configuration.
//!
//! Every section deserializes with defaults for missing keys, so a config file
//! only needs the values it changes. The hash of the serialized config is
//! embedded in each artifact a run writes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Side length of the square spectrogram patches the networks consume.
pub const SEGMENT_SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Hamming,
    Rectangular,
}

/// What to do with clips shorter than one segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortClipPolicy {
    ReflectPad,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub window: WindowKind,
    pub log_floor: f64,
    pub segment_frames: usize,
    pub segment_hop_frames: usize,
    pub short_clip: ShortClipPolicy,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate_hz: 16_000,
            n_fft: 2048,
            hop_length: 512,
            n_mels: SEGMENT_SIZE,
            window: WindowKind::Hann,
            log_floor: 1e-10,
            segment_frames: SEGMENT_SIZE,
            segment_hop_frames: 64,
            short_clip: ShortClipPolicy::ReflectPad,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sample_rate_hz", self.sample_rate_hz as usize),
            ("n_fft", self.n_fft),
            ("hop_length", self.hop_length),
            ("n_mels", self.n_mels),
            ("segment_frames", self.segment_frames),
            ("segment_hop_frames", self.segment_hop_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("frontend.{name} must be positive")));
            }
        }
        if self.segment_hop_frames > self.segment_frames {
            return Err(Error::Config(format!(
                "frontend.segment_hop_frames ({}) exceeds segment_frames ({})",
                self.segment_hop_frames, self.segment_frames
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("frontend.log_floor must be > 0".into()));
        }
        if self.n_mels != SEGMENT_SIZE || self.segment_frames != SEGMENT_SIZE {
            return Err(Error::Config(format!(
                "the networks take {SEGMENT_SIZE}x{SEGMENT_SIZE} segments; got n_mels {} and segment_frames {}",
                self.n_mels, self.segment_frames
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScheme {
    /// Layer normalization in both networks.
    LnBoth,
    /// Batch normalization in the generator, layer normalization in the critic.
    BnGeneratorLnCritic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub norm_scheme: NormScheme,
    pub leaky_slope: f64,
    pub embedding_dim: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 256,
            base_channels: 64,
            norm_scheme: NormScheme::LnBoth,
            leaky_slope: 0.2,
            embedding_dim: 1024,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Reduced-width config; the embedding follows the final stage width.
    pub fn with_width(base_channels: usize, latent_dim: usize) -> Self {
        ModelConfig {
            base_channels,
            latent_dim,
            embedding_dim: 16 * base_channels,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "model.leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        if self.embedding_dim != 16 * self.base_channels {
            return Err(Error::Config(format!(
                "model.embedding_dim must equal the final critic width 16 * base_channels = {}, got {}",
                16 * self.base_channels,
                self.embedding_dim
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("model.init_std must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub lambda_gp: f64,
    pub n_critic: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha_fm: f64,
    pub beta_mse: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            adam_betas: (0.5, 0.9),
            lambda_gp: 10.0,
            n_critic: 1,
            epochs: 60,
            batch_size: 512,
            alpha_fm: 1.0,
            beta_mse: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "train.batch_size must be at least 2 so embedding statistics are defined".into(),
            ));
        }
        if self.n_critic == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "train.n_critic and train.epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.lambda_gp < 0.0 {
            return Err(Error::Config(
                "train.learning_rate must be > 0 and lambda_gp >= 0".into(),
            ));
        }
        if self.alpha_fm < 0.0 || self.beta_mse < 0.0 {
            return Err(Error::Config(
                "train.alpha_fm and train.beta_mse must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub knn_k: usize,
    pub lof_neighbors: usize,
    pub aggregation: Aggregation,
    pub shrinkage: f64,
    pub threshold_percentile: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            knn_k: 2,
            lof_neighbors: 20,
            aggregation: Aggregation::Mean,
            shrinkage: 1e-3,
            threshold_percentile: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_fpr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_fpr: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detection: DetectionConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.detection.knn_k == 0 || self.detection.lof_neighbors == 0 {
            return Err(Error::Config(
                "detection neighbor counts must be positive".into(),
            ));
        }
        if self.detection.shrinkage < 0.0 {
            return Err(Error::Config("detection.shrinkage must be >= 0".into()));
        }
        let p = self.detection.threshold_percentile;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Config(
                "detection.threshold_percentile must lie in (0, 1)".into(),
            ));
        }
        let f = self.evaluation.max_fpr;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(
                "evaluation.max_fpr must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// SHA-256 over the canonical JSON form of any serializable config section.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config sections are always serializable");
    hex::encode(Sha256::digest(&json))
}
