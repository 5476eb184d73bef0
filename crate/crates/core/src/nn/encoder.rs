use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{EncoderKind, ModelConfig};
use super::layers::{init_linear, linear};
use crate::tensor::{Graph, Params, Scalar, Tensor, Var};
use crate::Error;

pub const FEATURE_MAGIC: &[u8; 4] = b"ICFT";
pub const FEATURE_VERSION: u16 = 1;

/// Parameter-name prefix of the image encoder.
pub const IMAGE_ENCODER: &str = "image_encoder.";

const CONV_CHANNELS: [usize; 2] = [16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic,
    Encoded,
    PrecomputedFile,
}

/// `P x d_model` image features.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures<F> {
    pub features: Tensor<F>,
    pub provenance: Provenance,
}

impl<F: Scalar> ImageFeatures<F> {
    pub fn positions(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

pub enum ImageSource<F> {
    /// Channels-last `[H, W, C]` grid image.
    Grid(Tensor<F>),
    Features(ImageFeatures<F>),
}

pub fn init_image_encoder<F: Scalar, R: Rng>(p: &mut Params<F>, rng: &mut R, cfg: &ModelConfig) {
    match cfg.encoder {
        EncoderKind::Projection => {
            init_linear(p, rng, "image_encoder.proj", cfg.d_model, cfg.d_model);
        }
        EncoderKind::Conv => {
            let chans = [cfg.image_channels, CONV_CHANNELS[0], CONV_CHANNELS[1], cfg.d_model];
            for l in 0..3 {
                init_linear(p, rng, &format!("image_encoder.conv{l}"), 9 * chans[l], chans[l + 1]);
            }
        }
    }
}

/// Runs the encoder on a batch: `[B, P, d]` precomputed features for the
/// projection encoder or `[B, H, W, C]` grid images for the convolutional
/// one. Output is `[B, P, d_model]`.
pub fn encode_batch<F: Scalar>(g: &mut Graph<F>, p: &Params<F>, cfg: &ModelConfig, input: Var) -> Result<Var, Error> {
    let shape = g.shape(input).to_vec();
    match cfg.encoder {
        EncoderKind::Projection => {
            if shape.len() != 3 || shape[1] != cfg.image_positions || shape[2] != cfg.d_model {
                return Err(Error::Validation(format!(
                    "image features {shape:?} do not match [B, {}, {}]",
                    cfg.image_positions, cfg.d_model
                )));
            }
            Ok(linear(g, p, "image_encoder.proj", input)?)
        }
        EncoderKind::Conv => {
            if shape.len() != 4 || shape[1] != cfg.image_size || shape[2] != cfg.image_size || shape[3] != cfg.image_channels {
                return Err(Error::Validation(format!(
                    "grid images {shape:?} do not match [B, {0}, {0}, {1}]",
                    cfg.image_size, cfg.image_channels
                )));
            }
            let b = shape[0];
            let mut x = input;
            let mut side = cfg.image_size;
            for l in 0..3 {
                let cols = g.im2col(x, 3, 2, 1)?;
                let y = linear(g, p, &format!("image_encoder.conv{l}"), cols)?;
                let y = if l < 2 { g.relu(y) } else { y };
                side = side.div_ceil(2);
                let c = g.shape(y)[2];
                x = g.reshape(y, &[b, side, side, c])?;
            }
            Ok(g.reshape(x, &[b, side * side, cfg.d_model])?)
        }
    }
}

/// Produces `P x d_model` features for a single image. Grid images go
/// through the convolutional encoder; precomputed features pass through
/// unchanged after shape validation.
pub fn encode_image<F: Scalar>(source: ImageSource<F>, cfg: &ModelConfig, p: &Params<F>) -> Result<ImageFeatures<F>, Error> {
    match source {
        ImageSource::Features(f) => {
            if f.features.shape() != [cfg.image_positions, cfg.d_model] {
                return Err(Error::Validation(format!(
                    "feature shape {:?} does not match config [{}, {}]",
                    f.features.shape(),
                    cfg.image_positions,
                    cfg.d_model
                )));
            }
            Ok(f)
        }
        ImageSource::Grid(img) => {
            if cfg.encoder != EncoderKind::Conv {
                return Err(Error::Config("grid images need the conv encoder".into()));
            }
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            let mut g = Graph::new();
            let x = g.constant(img.reshaped(&shape)?);
            let y = encode_batch(&mut g, p, cfg, x)?;
            let out = g.value(y).clone().reshaped(&[cfg.image_positions, cfg.d_model])?;
            Ok(ImageFeatures {
                features: out,
                provenance: Provenance::Encoded,
            })
        }
    }
}

/// Serializes `P x d` features: magic, version u16, P u32, d u32, then
/// little-endian f32 values row-major.
pub fn write_features<W: Write>(mut w: W, features: &Tensor<f32>) -> Result<(), Error> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::Validation(format!("features must be P x d, got {s:?}")));
    }
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(s[0] as u32).to_le_bytes())?;
    w.write_all(&(s[1] as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(features.len() * 4);
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<Tensor<f32>, Error> {
    let mut head = [0u8; 14];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("feature file shorter than its header".into()))?;
    if &head[..4] != FEATURE_MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let p = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(head[10..14].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != p * d * 4 {
        return Err(Error::Format(format!(
            "feature file declares {p}x{d} values but holds {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(&[p, d], data)?)
}

pub fn save_features(path: &Path, features: &Tensor<f32>) -> Result<(), Error> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_features(std::io::BufWriter::new(f), features)
}

pub fn load_features(path: &Path) -> Result<ImageFeatures<f32>, Error> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(ImageFeatures {
        features: read_features(std::io::BufReader::new(f))?,
        provenance: Provenance::PrecomputedFile,
    })
}
