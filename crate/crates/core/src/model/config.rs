use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    /// Gate, then channel and spatial attention.
    A,
    /// Concatenation followed by a 1x1 convolution.
    B,
    /// Gate only.
    C,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::A, Scheme::B, Scheme::C];
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::A => "A",
            Scheme::B => "B",
            Scheme::C => "C",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Scheme::A),
            "B" | "b" => Ok(Scheme::B),
            "C" | "c" => Ok(Scheme::C),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionOrder {
    ChannelFirst,
    SpatialFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GtaPlacement {
    /// Only on the fused output of the deepest stage.
    Deepest,
    /// On every fused stage.
    PerStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_depth: u32,
    pub rgb_in_channels: usize,
    pub thermal_in_channels: usize,
    pub num_classes: usize,
    pub scheme: Scheme,
    pub pretrained_backbone: bool,
    /// Safetensors file with torchvision-style ResNet names.
    pub pretrained_path: Option<PathBuf>,
    pub gta_kernel_sizes: Vec<usize>,
    pub gta_global_branch: bool,
    pub gta_placement: GtaPlacement,
    pub attention_order: AttentionOrder,
    pub decoder_channels: usize,
    /// Width of the first residual stage; 64 gives the standard
    /// (64, 256, 512, 1024, 2048) pyramid.
    pub base_width: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_depth: 50,
            rgb_in_channels: 3,
            thermal_in_channels: 1,
            num_classes: 2,
            scheme: Scheme::A,
            pretrained_backbone: false,
            pretrained_path: None,
            gta_kernel_sizes: vec![1, 3, 5],
            gta_global_branch: true,
            gta_placement: GtaPlacement::Deepest,
            attention_order: AttentionOrder::ChannelFirst,
            decoder_channels: 128,
            base_width: 64,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_counts().is_none() {
            return Err(Error::Config(format!(
                "unsupported backbone depth {} (expected 50 or 152)",
                self.backbone_depth
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!("num_classes must be 2, got {}", self.num_classes)));
        }
        if self.rgb_in_channels == 0 || self.thermal_in_channels == 0 {
            return Err(Error::Config("input channel counts must be positive".into()));
        }
        if self.gta_kernel_sizes.is_empty() {
            return Err(Error::Config("gta_kernel_sizes must not be empty".into()));
        }
        if let Some(k) = self.gta_kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("gta kernel size {k} is not odd")));
        }
        if self.decoder_channels < 2 {
            return Err(Error::Config("decoder_channels must be at least 2".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.pretrained_backbone {
            if self.pretrained_path.is_none() {
                return Err(Error::Config("pretrained_backbone requires pretrained_path".into()));
            }
            if self.base_width != 64 {
                return Err(Error::Config("pretrained weights require base_width = 64".into()));
            }
        }
        Ok(())
    }

    pub fn block_counts(&self) -> Option<[usize; 4]> {
        match self.backbone_depth {
            50 => Some([3, 4, 6, 3]),
            152 => Some([3, 8, 36, 3]),
            _ => None,
        }
    }

    /// Channel count of each of the five pyramid stages.
    pub fn stage_channels(&self) -> [usize; 5] {
        let w = self.base_width;
        [w, 4 * w, 8 * w, 16 * w, 32 * w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_standard() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage_channels(), [64, 256, 512, 1024, 2048]);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert!(bad(|c| c.backbone_depth = 101).to_string().contains("depth"));
        bad(|c| c.gta_kernel_sizes = vec![1, 4]);
        bad(|c| c.gta_kernel_sizes.clear());
        bad(|c| c.num_classes = 3);
        bad(|c| c.pretrained_backbone = true);
    }
}
