//! Multi-head self-attention over region or token sequences, followed by
//! mean pooling into one instance embedding.
//!
//! There are no positional encodings, so `multi_head` is equivariant under
//! row permutations of its input and `attend_and_pool` is invariant.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct HeadProjection {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub heads: Vec<HeadProjection>,
    /// `(h·d_k)×d` output projection.
    pub output: ParamId,
    pub model_dim: usize,
    pub head_dim: usize,
}

impl MhsaParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, model_dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!("embed_dim {model_dim} is not divisible by {heads} heads")));
        }
        let head_dim = model_dim / heads;
        let mut projections = Vec::with_capacity(heads);
        for i in 0..heads {
            let query = store.add_uniform(format!("{prefix}.head{i}.w_q"), &[model_dim, head_dim], model_dim, rng)?;
            let key = store.add_uniform(format!("{prefix}.head{i}.w_k"), &[model_dim, head_dim], model_dim, rng)?;
            let value = store.add_uniform(format!("{prefix}.head{i}.w_v"), &[model_dim, head_dim], model_dim, rng)?;
            projections.push(HeadProjection { query, key, value });
        }
        let output = store.add_uniform(format!("{prefix}.w_o"), &[heads * head_dim, model_dim], heads * head_dim, rng)?;
        Ok(Self { heads: projections, output, model_dim, head_dim })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// Scaled scores `QKᵀ/√d_k` before the softmax.
    pub scores: Var,
    /// Row-stochastic attention matrix.
    pub weights: Var,
}

/// `softmax(QKᵀ/√d_k)·V`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<AttentionOutput> {
    let (n, dk) = tape.value(q).dims2("attention")?;
    let (nk, dk2) = tape.value(k).dims2("attention")?;
    let (nv, _) = tape.value(v).dims2("attention")?;
    if dk != dk2 || n == 0 || nk != nv {
        return Err(Error::shape("attention", format!("Q {n}x{dk}, K {nk}x{dk2}, V has {nv} rows")));
    }
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, 1.0 / (dk as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    let output = tape.matmul(weights, v)?;
    Ok(AttentionOutput { output, scores, weights })
}

#[derive(Clone, Debug)]
pub struct MultiHeadOutput {
    pub output: Var,
    pub heads: Vec<AttentionOutput>,
}

/// `Concat(head_1..head_h)·W^O` with `head_i = Attention(XW_i^Q, XW_i^K, XW_i^V)`.
pub fn multi_head(tape: &mut Tape, x: Var, p: &MhsaParams, bind: &Binding) -> Result<MultiHeadOutput> {
    let (_, d) = tape.value(x).dims2("multi_head")?;
    if d != p.model_dim {
        return Err(Error::shape("multi_head", format!("input width {d}, attention width {}", p.model_dim)));
    }
    let mut heads = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let q = tape.matmul(x, bind.var(head.query))?;
        let k = tape.matmul(x, bind.var(head.key))?;
        let v = tape.matmul(x, bind.var(head.value))?;
        heads.push(scaled_dot_attention(tape, q, k, v)?);
    }
    let outs: Vec<Var> = heads.iter().map(|h| h.output).collect();
    let concat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let output = tape.matmul(concat, bind.var(p.output))?;
    Ok(MultiHeadOutput { output, heads })
}

/// Mean over positions of the multi-head output: `n×d → 1×d`.
pub fn attend_and_pool(tape: &mut Tape, x: Var, p: &MhsaParams, bind: &Binding) -> Result<Var> {
    let mh = multi_head(tape, x, p, bind)?;
    tape.mean_rows(mh.output)
}
