//! Transformer building blocks, conditioning fusion, and the image encoder.
//!
//! Blocks use pre-normalization residual sublayers and sinusoidal position
//! encodings on the token stream. Condition rows (image grid positions and
//! ingredient embeddings) carry no position information.

mod attention;
mod block;
mod config;
mod decoder;
mod encoder;
mod layers;

pub use attention::{attend, init_attention, multi_head_attention, project_keys_values, AttentionShape, KeyValues};
pub use block::{
    concat_conditions, init_block, key_padding_mask, prepare_conditioning, transformer_block, transformer_block_step,
    BlockSettings, Condition, Conditioning, FusionStrategy, PreparedConditioning,
};
pub use decoder::{DecoderStack, DecoderState};
pub use config::{DecoderConfig, EncoderKind, ModelConfig};
pub use encoder::{
    encode_batch, encode_image, init_image_encoder, load_features, read_features, save_features, write_features,
    ImageFeatures, ImageSource, Provenance, FEATURE_MAGIC, FEATURE_VERSION, IMAGE_ENCODER,
};
pub use layers::{causal_mask, init_layer_norm, init_linear, layer_norm, linear, positional_encoding};

#[cfg(test)]
mod tests;
