use rand::Rng;

use super::attention::KeyValues;
use super::block::{
    init_block, prepare_conditioning, transformer_block, transformer_block_step, BlockSettings, Conditioning,
    FusionStrategy, PreparedConditioning,
};
use super::layers::{causal_mask, init_layer_norm, layer_norm, positional_encoding};
use crate::tensor::{Graph, Params, Scalar, Tensor, Var};
use crate::Error;

/// A stack of decoder blocks named `{prefix}.block{i}` followed by a final
/// layer norm `{prefix}.norm_out`.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub prefix: String,
    pub n_blocks: usize,
    pub strategy: FusionStrategy,
    pub settings: BlockSettings,
}

impl DecoderStack {
    fn block(&self, i: usize) -> String {
        format!("{}.block{i}", self.prefix)
    }

    pub fn init<F: Scalar, R: Rng>(&self, p: &mut Params<F>, rng: &mut R) {
        for i in 0..self.n_blocks {
            init_block(p, rng, &self.block(i), &self.settings, self.strategy);
        }
        init_layer_norm(p, &format!("{}.norm_out", self.prefix), self.settings.d_model);
    }

    /// Embeds `ids` (row-major `[B, T]`) from table `table`, adds position
    /// encodings for positions `start..start + T`, and applies dropout.
    pub fn embed<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Params<F>,
        table: &str,
        ids: &[usize],
        b: usize,
        start: usize,
    ) -> Result<Var, Error> {
        let t = ids.len() / b;
        let d = self.settings.d_model;
        let table = g.param(p, table)?;
        let e = g.embedding(table, ids)?;
        let e = g.reshape(e, &[b, t, d])?;
        let pe: Tensor<F> = positional_encoding(start + t, d);
        let pe = Tensor::new(&[t, d], pe.data()[start * d..].to_vec())?;
        let pe = g.constant(pe);
        let x = g.add(e, pe)?;
        Ok(g.dropout(x, self.settings.dropout))
    }

    /// Full causal pass over `[B, T, d]` inputs; returns normalized hidden
    /// states `[B, T, d]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Params<F>, x: Var, cond: &Conditioning) -> Result<Var, Error> {
        let t = g.shape(x)[1];
        let mask = causal_mask(t);
        let mut h = x;
        for i in 0..self.n_blocks {
            h = transformer_block(g, p, &self.block(i), h, cond, Some(&mask), self.strategy, &self.settings)?;
        }
        Ok(layer_norm(g, p, &format!("{}.norm_out", self.prefix), h, self.settings.eps)?)
    }

    /// Prepares incremental decoding: conditioning keys and values are
    /// projected once and self-attention caches start empty.
    pub fn start<F: Scalar>(&self, g: &mut Graph<F>, p: &Params<F>, cond: &Conditioning) -> Result<DecoderState, Error> {
        let prepared = (0..self.n_blocks)
            .map(|i| prepare_conditioning(g, p, &self.block(i), cond, self.strategy, &self.settings))
            .collect::<Result<_, _>>()?;
        Ok(DecoderState {
            prepared,
            caches: vec![None; self.n_blocks],
            position: 0,
        })
    }

    /// Runs one position `[B, 1, d]` through the stack; equals the
    /// corresponding row of [`DecoderStack::forward`] on the whole prefix.
    pub fn step<F: Scalar>(&self, g: &mut Graph<F>, p: &Params<F>, state: &mut DecoderState, x: Var) -> Result<Var, Error> {
        let mut h = x;
        for i in 0..self.n_blocks {
            h = transformer_block_step(
                g,
                p,
                &self.block(i),
                h,
                &state.prepared[i],
                &mut state.caches[i],
                &self.settings,
            )?;
        }
        state.position += 1;
        Ok(layer_norm(g, p, &format!("{}.norm_out", self.prefix), h, self.settings.eps)?)
    }
}

/// Incremental decoding state of a [`DecoderStack`].
#[derive(Clone, Debug)]
pub struct DecoderState {
    prepared: Vec<PreparedConditioning>,
    caches: Vec<Option<KeyValues>>,
    position: usize,
}

impl DecoderState {
    /// Number of positions decoded so far.
    pub fn position(&self) -> usize {
        self.position
    }
}
