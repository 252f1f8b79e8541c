//! Multi-head cross-attention block: `LayerNorm(q + MHA(q, kv))`.
//!
//! No positional terms are added, so the block is invariant to permutations
//! of the key/value sequence.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::encoders::FeatureSequence;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm: LayerNorm,
}

/// Block output plus the per-head `Lq x Lkv` attention weights.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            dim,
            heads,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, false, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, false, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, false, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_seq: Var, kv_seq: Var) -> Result<Attended> {
        let (qd, kd) = (g.value(q_seq).cols(), g.value(kv_seq).cols());
        if qd != self.dim || kd != self.dim {
            return Err(Error::Shape(format!(
                "attention expects dim {}, got query {qd} and key/value {kd}",
                self.dim
            )));
        }
        let q = self.query.forward(g, store, q_seq);
        let k = self.key.forward(g, store, kv_seq);
        let v = self.value.forward(g, store, kv_seq);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let w = g.softmax(scores);
            weights.push(w);
            heads.push(g.matmul(w, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let projected = self.output.forward(g, store, merged);
        let residual = g.add(q_seq, projected);
        let output = self.norm.forward(g, store, residual);
        Ok(Attended { output, weights })
    }
}

/// Runs one attention block outside a training graph, returning the output
/// sequence and each head's attention weights.
pub fn multi_head_attention(
    q_seq: &FeatureSequence,
    kv_seq: &FeatureSequence,
    mha: &MultiHeadAttention,
    store: &ParamStore,
) -> Result<(FeatureSequence, Vec<Tensor>)> {
    let mut g = Graph::new();
    let q = g.constant(q_seq.values().clone());
    let kv = g.constant(kv_seq.values().clone());
    let att = mha.forward(&mut g, store, q, kv)?;
    let out = FeatureSequence::new(g.value(att.output).clone())?;
    let weights = att.weights.iter().map(|&w| g.value(w).clone()).collect();
    Ok((out, weights))
}
