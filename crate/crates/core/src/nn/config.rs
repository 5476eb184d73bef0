use serde::{Deserialize, Serialize};

use crate::Error;

/// Shape of one transformer decoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Hidden width of the position-wise sublayer, as a multiple of `d_model`.
    pub ffn_mult: usize,
}

impl DecoderConfig {
    pub fn attention_width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// How the image encoder turns raw inputs into `P x d_model` features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Learned linear adapter over precomputed `P x d_model` features.
    Projection,
    /// Three strided 3x3 convolutions over a channels-last grid image.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width shared by image features and ingredient embeddings.
    pub d_model: usize,
    pub ingredient_decoder: DecoderConfig,
    pub instruction_decoder: DecoderConfig,
    pub dropout: f64,
    pub max_ingredients: usize,
    pub max_instruction_words: usize,
    /// Ingredient dictionary size `N` (set from the vocabulary at training time).
    pub n_ingredients: usize,
    /// Word vocabulary size `V` (set from the vocabulary at training time).
    pub vocab_size: usize,
    /// Image feature positions `P`.
    pub image_positions: usize,
    pub encoder: EncoderKind,
    /// Side length of square grid images for the convolutional encoder.
    pub image_size: usize,
    pub image_channels: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Full-size settings: instruction decoder with 16 blocks of 8 heads of
    /// width 64, ingredient decoder with 4 blocks of 2 heads of width 256,
    /// 512-d embeddings, at most 20 ingredients and 150 instruction words.
    pub fn paper() -> Self {
        ModelConfig {
            d_model: 512,
            ingredient_decoder: DecoderConfig {
                n_blocks: 4,
                n_heads: 2,
                head_dim: 256,
                ffn_mult: 4,
            },
            instruction_decoder: DecoderConfig {
                n_blocks: 16,
                n_heads: 8,
                head_dim: 64,
                ffn_mult: 4,
            },
            dropout: 0.3,
            max_ingredients: 20,
            max_instruction_words: 150,
            n_ingredients: 1488,
            vocab_size: 23231,
            image_positions: 49,
            encoder: EncoderKind::Projection,
            image_size: 224,
            image_channels: 3,
            layer_norm_eps: 1e-5,
        }
    }

    /// Small settings that train in minutes on a CPU.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            ingredient_decoder: DecoderConfig {
                n_blocks: 2,
                n_heads: 2,
                head_dim: 32,
                ffn_mult: 2,
            },
            instruction_decoder: DecoderConfig {
                n_blocks: 2,
                n_heads: 4,
                head_dim: 16,
                ffn_mult: 2,
            },
            dropout: 0.1,
            max_ingredients: 10,
            max_instruction_words: 64,
            n_ingredients: 30,
            vocab_size: 64,
            image_positions: 16,
            encoder: EncoderKind::Projection,
            image_size: 32,
            image_channels: 3,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 {
            return fail("d_model must be positive".into());
        }
        for (name, d) in [
            ("ingredient_decoder", &self.ingredient_decoder),
            ("instruction_decoder", &self.instruction_decoder),
        ] {
            if d.n_heads == 0 || d.head_dim == 0 || d.ffn_mult == 0 {
                return fail(format!("{name}: heads, head_dim and ffn_mult must be positive"));
            }
        }
        if self.max_ingredients < 1 {
            return fail("max_ingredients must be at least 1".into());
        }
        if self.max_instruction_words < 2 {
            return fail("max_instruction_words must be at least 2".into());
        }
        if self.n_ingredients == 0 || self.vocab_size == 0 || self.image_positions == 0 {
            return fail("vocabulary sizes and image positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.encoder == EncoderKind::Conv {
            let side = self.image_size.div_ceil(8);
            if side * side != self.image_positions {
                return fail(format!(
                    "conv encoder on {0}x{0} images yields {1} positions, config says {2}",
                    self.image_size,
                    side * side,
                    self.image_positions
                ));
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
