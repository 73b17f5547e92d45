use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Transformer encoder and transformer decoder (generator-style).
    VitVit,
    /// Transformer encoder feeding a convolutional decoder through
    /// multi-resolution skip connections.
    VitCnn,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::VitVit => "vit-vit",
            Variant::VitCnn => "vit-cnn",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit-vit" | "vitvit" => Ok(Variant::VitVit),
            "vit-cnn" | "vitcnn" => Ok(Variant::VitCnn),
            other => Err(Error::Config(format!("unknown model variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub variant: Variant,
    /// Cubic edge length of input volumes, in voxels.
    pub volume_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    /// Transformer layers in the decoder (`VitVit` only).
    #[serde(default)]
    pub decoder_layers: usize,
    /// Output channels of each upsampling stage (`VitCnn` only). Each stage
    /// doubles the spatial resolution, so `patch_size` must be `2^stages`.
    #[serde(default)]
    pub decoder_channels: Vec<usize>,
    pub mlp_ratio: usize,
    /// 1-based encoder layers whose hidden states feed the decoder (`VitCnn`).
    #[serde(default)]
    pub skip_layers: Vec<usize>,
    /// Additive PEFT modules attach only to the first N encoder layers.
    #[serde(default)]
    pub peft_encoder_layers: Option<usize>,
    /// Additive PEFT modules attach only to the first N decoder layers.
    #[serde(default)]
    pub peft_decoder_layers: Option<usize>,
}

impl ArchConfig {
    /// Desk-scale defaults: 16³ volumes, 4³ patches, d=32, 4 heads, 4 encoder layers.
    pub fn desk(variant: Variant) -> Self {
        match variant {
            Variant::VitVit => Self {
                variant,
                volume_size: 16,
                patch_size: 4,
                embed_dim: 32,
                num_heads: 4,
                encoder_layers: 4,
                decoder_layers: 2,
                decoder_channels: Vec::new(),
                mlp_ratio: 4,
                skip_layers: Vec::new(),
                peft_encoder_layers: Some(3),
                peft_decoder_layers: Some(2),
            },
            Variant::VitCnn => Self {
                variant,
                volume_size: 16,
                patch_size: 4,
                embed_dim: 32,
                num_heads: 4,
                encoder_layers: 4,
                decoder_layers: 0,
                decoder_channels: vec![16, 8],
                mlp_ratio: 4,
                skip_layers: vec![1, 2, 3, 4],
                peft_encoder_layers: None,
                peft_decoder_layers: None,
            },
        }
    }

    /// Larger configuration used for parameter accounting: 64³ volumes,
    /// 16³ patches, d=256, 8 encoder layers.
    pub fn paper_like(variant: Variant) -> Self {
        let mut cfg = Self::desk(variant);
        cfg.volume_size = 64;
        cfg.patch_size = 16;
        cfg.embed_dim = 256;
        cfg.num_heads = 8;
        cfg.encoder_layers = 8;
        match variant {
            Variant::VitVit => cfg.decoder_layers = 4,
            Variant::VitCnn => {
                cfg.decoder_channels = vec![128, 64, 32, 16];
                cfg.skip_layers = vec![2, 4, 6, 8];
            }
        }
        cfg
    }

    /// Patches per axis.
    pub fn grid(&self) -> usize {
        self.volume_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().pow(3)
    }

    pub fn patch_volume(&self) -> usize {
        self.patch_size.pow(3)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn decoder_stages(&self) -> usize {
        self.decoder_channels.len()
    }

    /// Transformer layers in the named stack ("encoder" or "decoder").
    pub fn stack_layers(&self, stack: Stack) -> usize {
        match stack {
            Stack::Encoder => self.encoder_layers,
            Stack::Decoder => match self.variant {
                Variant::VitVit => self.decoder_layers,
                Variant::VitCnn => 0,
            },
        }
    }

    /// Layers of `stack` that may receive additive PEFT modules.
    pub fn peft_layers(&self, stack: Stack) -> usize {
        let n = self.stack_layers(stack);
        let limit = match stack {
            Stack::Encoder => self.peft_encoder_layers,
            Stack::Decoder => self.peft_decoder_layers,
        };
        limit.map_or(n, |l| l.min(n))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.volume_size == 0
            || self.patch_size == 0
            || self.embed_dim == 0
            || self.num_heads == 0
        {
            return fail(
                "volume_size, patch_size, embed_dim and num_heads must be positive".into(),
            );
        }
        if !self.volume_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "volume_size {} is not divisible by patch_size {}",
                self.volume_size, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.encoder_layers == 0 {
            return fail("encoder_layers must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        match self.variant {
            Variant::VitVit => {
                if self.decoder_layers == 0 {
                    return fail("vit-vit needs at least one decoder layer".into());
                }
            }
            Variant::VitCnn => {
                let stages = self.decoder_stages();
                if stages == 0 || self.decoder_channels.contains(&0) {
                    return fail(
                        "vit-cnn needs at least one decoder stage with positive channels".into(),
                    );
                }
                if self.patch_size != 1 << stages {
                    return fail(format!(
                        "patch_size {} must equal 2^decoder_stages = {}",
                        self.patch_size,
                        1usize << stages
                    ));
                }
                if self.skip_layers.is_empty() {
                    return fail("skip_layer_indices must not be empty".into());
                }
                if self.skip_layers.windows(2).any(|w| w[0] >= w[1]) {
                    return fail(format!(
                        "skip_layer_indices {:?} must be strictly increasing",
                        self.skip_layers
                    ));
                }
                if self.skip_layers[0] < 1
                    || *self.skip_layers.last().unwrap() > self.encoder_layers
                {
                    return fail(format!(
                        "skip_layer_indices {:?} must lie in [1, {}]",
                        self.skip_layers, self.encoder_layers
                    ));
                }
            }
        }
        Ok(())
    }

    /// Deepest skip layer feeds the bottleneck; the remaining skips are spread
    /// over the upsampling stages from deep to shallow, several skips sharing
    /// a stage when there are more skips than stages.
    pub fn skip_plan(&self) -> SkipPlan {
        let mut layers = self.skip_layers.clone();
        let bottleneck = layers.pop().unwrap_or(self.encoder_layers);
        let stages = self.decoder_stages();
        let mut per_stage = vec![Vec::new(); stages];
        let rest = layers.len();
        for (m, &layer) in layers.iter().rev().enumerate() {
            per_stage[m * stages / rest].push(layer);
        }
        SkipPlan {
            bottleneck,
            per_stage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipPlan {
    pub bottleneck: usize,
    pub per_stage: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        }
    }

    pub fn block(self, index: usize) -> String {
        format!("{}.blocks.{index}", self.prefix())
    }
}
