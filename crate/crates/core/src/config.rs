//! Model and training configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel widths of the four VGG-19 tap layers at full scale.
pub const VGG_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const FULL_DISC_WIDTH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Divides every channel width; 1 is full size, 8 gives widths 8..64.
    pub scale: usize,
    /// Encoder layers (1-based) receiving residual features.
    pub residual_layers: Vec<usize>,
    pub use_residual_encoder: bool,
    pub use_feature_disc: bool,
    pub use_image_disc: bool,
    /// Learned soft mask; when off the output is a hard composite.
    pub use_blending: bool,
    /// Seed of the frozen main encoder when no weight file is given.
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 1,
            residual_layers: vec![1, 2, 3, 4],
            use_residual_encoder: true,
            use_feature_disc: true,
            use_image_disc: true,
            use_blending: true,
            encoder_seed: 0x5eed_e5c0,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig { scale: 8, ..Self::default() }
    }

    pub fn encoder_widths(&self) -> [usize; 4] {
        VGG_WIDTHS.map(|w| w / self.scale)
    }

    pub fn disc_base_width(&self) -> usize {
        FULL_DISC_WIDTH / self.scale
    }

    pub fn injects_residual(&self, layer: usize) -> bool {
        self.use_residual_encoder && self.residual_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || !FULL_DISC_WIDTH.is_multiple_of(self.scale) {
            return Err(Error::config(format!("scale {} must divide 64", self.scale)));
        }
        if self.residual_layers.iter().any(|l| !(1..=4).contains(l)) {
            return Err(Error::config(format!("residual layers {:?} must be a subset of 1..=4", self.residual_layers)));
        }
        Ok(())
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        let (er, df, dm) = ablation.components();
        self.use_residual_encoder = er;
        self.use_feature_disc = df;
        self.use_image_disc = dm;
        self
    }
}

/// Component subsets compared in the ablation study.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Ablation {
    /// Multi-scale AdaIN with a decoder only.
    V1,
    /// V1 plus the image discriminator.
    V2,
    /// V2 plus the residual encoder.
    V3,
    /// V3 plus the feature discriminators (full model).
    V4,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::V1, Ablation::V2, Ablation::V3, Ablation::V4];

    /// `(residual encoder, feature discriminators, image discriminator)`.
    pub fn components(self) -> (bool, bool, bool) {
        match self {
            Ablation::V1 => (false, false, false),
            Ablation::V2 => (false, false, true),
            Ablation::V3 => (true, false, true),
            Ablation::V4 => (true, true, true),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "V1" => Ok(Ablation::V1),
            "V2" => Ok(Ablation::V2),
            "V3" => Ok(Ablation::V3),
            "V4" => Ok(Ablation::V4),
            _ => Err(Error::config(format!("unknown ablation `{s}` (expected V1..V4)"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Multipliers of the generator loss terms. All 1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub adv_feat: f64,
    pub adv_img: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { content: 1.0, style: 1.0, adv_feat: 1.0, adv_img: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub image_size: usize,
    pub model: ModelConfig,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            max_steps: 1000,
            seed: 0,
            image_size: 256,
            model: ModelConfig::default(),
            checkpoint_every: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Width-8 model on 64x64 images.
    pub fn desk() -> Self {
        TrainConfig { image_size: 64, model: ModelConfig::desk(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.image_size < 64 || !self.image_size.is_multiple_of(32) {
            return Err(Error::config(format!("image size {} must be a multiple of 32 and at least 64", self.image_size)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows() {
        assert_eq!(Ablation::V1.components(), (false, false, false));
        assert_eq!(Ablation::V2.components(), (false, false, true));
        assert_eq!(Ablation::V3.components(), (true, false, true));
        assert_eq!(Ablation::V4.components(), (true, true, true));
        assert_eq!("v3".parse::<Ablation>().unwrap(), Ablation::V3);
        assert!("V5".parse::<Ablation>().is_err());
    }

    #[test]
    fn desk_widths() {
        let m = ModelConfig::desk();
        assert_eq!(m.encoder_widths(), [8, 16, 32, 64]);
        assert_eq!(m.disc_base_width(), 8);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        let mut c = TrainConfig::desk();
        c.model.residual_layers = vec![0, 2];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.image_size = 72;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.model.scale = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = TrainConfig::desk();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
    }
}
