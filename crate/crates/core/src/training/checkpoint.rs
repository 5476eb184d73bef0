use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, FitOutcome, TrainConfig};
use crate::ingredient_decoder::IngredientModelKind;
use crate::instruction_decoder::Ablation;
use crate::nn::{FusionStrategy, ModelConfig};
use crate::tensor::{Params, Tensor};
use crate::vocab::{IngredientVocabulary, WordVocabulary};
use crate::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICKP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// What the parameters belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum ModelSpec {
    Ingredients { kind: IngredientModelKind },
    Recipe { ablation: Ablation, strategy: FusionStrategy },
}

/// Everything in a checkpoint besides tensors, stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub config: ModelConfig,
    pub train: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub adam_step: u64,
    pub ingredients: Option<IngredientVocabulary>,
    pub words: Option<WordVocabulary>,
}

/// Parameters, optimizer moments and metadata of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params<f32>,
    pub optimizer: AdamState<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// The best parameters of a finished run, with the final optimizer state.
    pub fn from_fit(
        out: FitOutcome<f32>,
        model: ModelSpec,
        config: ModelConfig,
        train: TrainConfig,
        ingredients: Option<IngredientVocabulary>,
        words: Option<WordVocabulary>,
    ) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model,
                config,
                train,
                epoch: out.history.len(),
                best_val_loss: out.best_val_loss.is_finite().then_some(out.best_val_loss),
                adam_step: out.optimizer.step,
                ingredients,
                words,
            },
            params: out.best,
            optimizer: out.optimizer,
        }
    }

    /// `ICKP`, version u16, the parameter group, the first and second
    /// moment groups, then the metadata as u32-length-prefixed UTF-8 JSON.
    /// A group is a u32 count of tensors, each a u16-length-prefixed name,
    /// a u8 rank, u32 dims and little-endian f32 values.
    pub fn to_bytes(&self) -> Result<Vec<u8>, Error> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for group in [&self.params, &self.optimizer.m, &self.optimizer.v] {
            write_group(&mut out, group)?;
        }
        let mut meta = self.meta.clone();
        meta.adam_step = self.optimizer.step;
        let json = serde_json::to_string(&meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let params = read_group(&mut r)?;
        let m = read_group(&mut r)?;
        let v = read_group(&mut r)?;
        let len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_str(json)?;
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            params,
            optimizer: AdamState {
                step: meta.adam_step,
                m,
                v,
            },
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_group(out: &mut Vec<u8>, group: &Params<f32>) -> Result<(), Error> {
    out.extend_from_slice(&(group.len() as u32).to_le_bytes());
    for (name, t) in group.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Validation(format!("name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn read_group(r: &mut Reader<'_>) -> Result<Params<f32>, Error> {
    let count = r.u32()?;
    let mut p = Params::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if p.contains(&name) {
            return Err(Error::Format(format!("tensor `{name}` stored twice")));
        }
        p.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(p)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
