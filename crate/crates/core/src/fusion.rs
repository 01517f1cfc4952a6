//! Parameterized two-input feature fusion (`concat`, `adap_sum`, `weight_sum`).
//!
//! The first input carries the "image" weight (`α`, `w_image`) and the second
//! the "text" weight. The model applies one fusion module per modality.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FuseType {
    Concat,
    AdapSum,
    #[default]
    WeightSum,
}

impl FromStr for FuseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "adap_sum" => Ok(Self::AdapSum),
            "weight_sum" => Ok(Self::WeightSum),
            other => Err(Error::Config(format!("unknown fuse_type `{other}` (concat|adap_sum|weight_sum)"))),
        }
    }
}

impl fmt::Display for FuseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::AdapSum => "adap_sum",
            Self::WeightSum => "weight_sum",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub fuse_type: FuseType,
    /// Unconstrained scalar; `α = σ(alpha_logit)`.
    pub alpha_logit: ParamId,
    /// `2d×2` weight generator for per-instance weights.
    pub weight_net: ParamId,
    /// `1×2` logits used instead of `weight_net` when `global_weights` is set.
    pub global_logits: ParamId,
    pub global_weights: bool,
    pub dim: usize,
}

impl FusionParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        fuse_type: FuseType,
        global_weights: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let alpha_logit = store.add(format!("{prefix}.alpha_logit"), Tensor::matrix(1, 1, vec![0.0])?)?;
        let weight_net = store.add_uniform(format!("{prefix}.weight_net"), &[2 * dim, 2], 2 * dim, rng)?;
        let global_logits = store.add(format!("{prefix}.global_logits"), Tensor::zeros(&[1, 2]))?;
        Ok(Self { fuse_type, alpha_logit, weight_net, global_logits, global_weights, dim })
    }

    pub fn output_dim(&self) -> usize {
        match self.fuse_type {
            FuseType::Concat => 2 * self.dim,
            _ => self.dim,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusedEmbedding {
    /// L2-normalized `1×d` (or `1×2d` for concat).
    pub vector: Var,
    pub fuse_type: FuseType,
    /// `1×2` `(w_image, w_text)` for the sum variants; `α, 1−α` for `adap_sum`.
    pub weights: Option<Var>,
}

/// Fuses one first-input row with one second-input row; both `1×d`, or both
/// `B×d` for a batch (weights are then produced per row).
pub fn fuse(tape: &mut Tape, first: Var, second: Var, p: &FusionParams, bind: &Binding) -> Result<FusedEmbedding> {
    let (rows, d) = tape.value(first).dims2("fuse")?;
    let other = tape.value(second).dims2("fuse")?;
    if other != (rows, d) || d != p.dim {
        return Err(Error::shape("fuse", format!("inputs {rows}x{d} and {}x{}, fusion width {}", other.0, other.1, p.dim)));
    }
    let (raw, weights) = match p.fuse_type {
        FuseType::Concat => (tape.concat_cols(&[first, second])?, None),
        FuseType::AdapSum => {
            let alpha = tape.sigmoid(bind.var(p.alpha_logit))?;
            let beta = tape.one_minus(alpha)?;
            let w = tape.concat_cols(&[alpha, beta])?;
            let w = tape.broadcast_rows(w, rows)?;
            (weighted_sum(tape, first, second, w, d)?, Some(w))
        }
        FuseType::WeightSum => {
            let logits = if p.global_weights {
                tape.broadcast_rows(bind.var(p.global_logits), rows)?
            } else {
                let joint = tape.concat_cols(&[first, second])?;
                tape.matmul(joint, bind.var(p.weight_net))?
            };
            let w = tape.softmax_rows(logits)?;
            (weighted_sum(tape, first, second, w, d)?, Some(w))
        }
    };
    let vector = tape.l2_normalize_rows(raw)?;
    Ok(FusedEmbedding { vector, fuse_type: p.fuse_type, weights })
}

/// `w[:,0]·first + w[:,1]·second` with `w` of shape `rows×2`.
fn weighted_sum(tape: &mut Tape, first: Var, second: Var, w: Var, d: usize) -> Result<Var> {
    let w_first = tape.slice_cols(w, 0, 1)?;
    let w_first = tape.broadcast_cols(w_first, d)?;
    let w_second = tape.slice_cols(w, 1, 2)?;
    let w_second = tape.broadcast_cols(w_second, d)?;
    let a = tape.mul(w_first, first)?;
    let b = tape.mul(w_second, second)?;
    tape.add(a, b)
}
