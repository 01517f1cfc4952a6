//! Contrastive, KL and dynamically weighted total objectives.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ContrastiveMode {
    /// Mean hinge over all negatives.
    Sum,
    /// Hinge of the most violating negative.
    #[default]
    Hardest,
}

impl FromStr for ContrastiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "hardest" => Ok(Self::Hardest),
            other => Err(Error::Config(format!("unknown contrastive_mode `{other}` (sum|hardest)"))),
        }
    }
}

impl fmt::Display for ContrastiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Hardest => "hardest",
        })
    }
}

/// Cosine similarities `B×B` between L2-normalized rows: `images · textsᵀ`.
pub fn similarity(tape: &mut Tape, images: Var, texts: Var) -> Result<Var> {
    let tt = tape.transpose(texts)?;
    tape.matmul(images, tt)
}

/// Bidirectional hinge ranking loss on a square similarity matrix whose
/// diagonal holds the matched pairs. Each positive is compared against every
/// other text in its row and every other image in its column; the two
/// directions are added and the result is averaged over the batch.
pub fn contrastive_loss(tape: &mut Tape, scores: Var, margin: f64, mode: ContrastiveMode) -> Result<Var> {
    let (b, b2) = tape.value(scores).dims2("contrastive_loss")?;
    if b != b2 {
        return Err(Error::shape("contrastive_loss", format!("similarity matrix must be square, got {b}x{b2}")));
    }
    if b < 2 {
        return Err(Error::Input("contrastive loss needs a batch of at least 2".into()));
    }
    if !(margin > 0.0) {
        return Err(Error::Input(format!("margin must be positive, got {margin}")));
    }
    let eye = tape.leaf(Tensor::eye(b));
    let off_diag = tape.leaf(Tensor::eye(b).map(|v| 1.0 - v));

    let diag_only = tape.mul(scores, eye)?;
    let diag_mean = tape.mean_cols(diag_only)?;
    let diag_col = tape.scale(diag_mean, b as f64)?;
    let diag_row = tape.transpose(diag_col)?;

    let shifted = tape.add_scalar(scores, margin)?;
    // row i: [m - S(i,i) + S(i,j)]₊ over texts j
    let pos_rows = tape.broadcast_cols(diag_col, b)?;
    let i2t = tape.sub(shifted, pos_rows)?;
    let i2t = tape.relu(i2t)?;
    let i2t = tape.mul(i2t, off_diag)?;
    // column j: [m - S(j,j) + S(i,j)]₊ over images i
    let pos_cols = tape.broadcast_rows(diag_row, b)?;
    let t2i = tape.sub(shifted, pos_cols)?;
    let t2i = tape.relu(t2i)?;
    let t2i = tape.mul(t2i, off_diag)?;

    match mode {
        ContrastiveMode::Sum => {
            let both = tape.add(i2t, t2i)?;
            let total = tape.sum(both)?;
            tape.scale(total, 1.0 / (b * (b - 1)) as f64)
        }
        ContrastiveMode::Hardest => {
            let worst_text = tape.max_rows(i2t)?;
            let t2i_t = tape.transpose(t2i)?;
            let worst_image = tape.max_rows(t2i_t)?;
            let both = tape.add(worst_text, worst_image)?;
            let total = tape.sum(both)?;
            tape.scale(total, 1.0 / b as f64)
        }
    }
}

/// `KL(p_text ‖ p_image)` averaged over rows of two `B×K` distributions.
pub fn kl_loss(tape: &mut Tape, p_text: Var, p_image: Var) -> Result<Var> {
    let (b, k) = tape.value(p_text).dims2("kl_loss")?;
    if tape.value(p_image).shape() != [b, k] {
        return Err(Error::shape("kl_loss", format!("{b}x{k} vs {:?}", tape.value(p_image).shape())));
    }
    #[cfg(debug_assertions)]
    for var in [p_text, p_image] {
        let t = tape.value(var);
        for i in 0..b {
            let row = t.row_slice(i);
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| v <= 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("kl_loss row {i} is not a positive distribution")));
            }
        }
    }
    let log_t = tape.log(p_text)?;
    let log_i = tape.log(p_image)?;
    let ratio = tape.sub(log_t, log_i)?;
    let terms = tape.mul(p_text, ratio)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / b as f64)
}

/// `w · σ(loss_value)`, or `w · σ(−loss_value)` when `invert` is set.
pub fn dynamic_weight(w: f64, loss_value: f64, invert: bool) -> f64 {
    let x = if invert { -loss_value } else { loss_value };
    w * sigmoid(x)
}

/// Loss values and weights for one batch (or an epoch average).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// `[instance, consensus, fusion, kl]`
    pub values: [f64; 4],
    pub base_weights: [f64; 4],
    pub effective_weights: [f64; 4],
    pub total: f64,
}

impl LossTerms {
    pub fn instance(&self) -> f64 {
        self.values[0]
    }

    pub fn consensus(&self) -> f64 {
        self.values[1]
    }

    pub fn fusion(&self) -> f64 {
        self.values[2]
    }

    pub fn kl(&self) -> f64 {
        self.values[3]
    }
}

/// `Σ λ_i·L_i` with `λ_i = dynamic_weight(w_i, L_i)`. The weights are read
/// from the current loss values and enter the tape as constants, so gradients
/// flow only through the `L_i` factors.
pub fn total_loss(tape: &mut Tape, terms: [Var; 4], base_weights: [f64; 4], invert: bool) -> Result<(Var, LossTerms)> {
    let mut values = [0.0; 4];
    let mut effective = [0.0; 4];
    let mut weighted = Vec::with_capacity(4);
    for i in 0..4 {
        values[i] = tape.value(terms[i]).item()?;
        effective[i] = dynamic_weight(base_weights[i], values[i], invert);
        weighted.push(tape.scale(terms[i], effective[i])?);
    }
    let mut total = weighted[0];
    for &w in &weighted[1..] {
        total = tape.add(total, w)?;
    }
    let total_value = tape.value(total).item()?;
    Ok((total, LossTerms { values, base_weights, effective_weights: effective, total: total_value }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(s: Tensor, margin: f64, mode: ContrastiveMode) -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(s);
        let l = contrastive_loss(&mut tape, v, margin, mode).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn separated_pairs_cost_nothing() {
        for mode in [ContrastiveMode::Sum, ContrastiveMode::Hardest] {
            assert_eq!(loss_of(Tensor::eye(4), 0.2, mode), 0.0);
        }
    }

    #[test]
    fn tied_scores_cost_twice_the_margin() {
        for mode in [ContrastiveMode::Sum, ContrastiveMode::Hardest] {
            assert!((loss_of(Tensor::ones(&[5, 5]), 0.2, mode) - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_degenerate_batches() {
        let mut tape = Tape::new();
        let one = tape.leaf(Tensor::ones(&[1, 1]));
        assert!(matches!(contrastive_loss(&mut tape, one, 0.2, ContrastiveMode::Sum), Err(Error::Input(_))));
        let two = tape.leaf(Tensor::ones(&[2, 2]));
        assert!(contrastive_loss(&mut tape, two, 0.0, ContrastiveMode::Sum).is_err());
    }

    #[test]
    fn kl_identical_is_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]]).unwrap());
        let l = kl_loss(&mut tape, p, p).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn kl_of_near_one_hot_against_uniform() {
        let eps = 1e-12;
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::row(vec![1.0 - eps, eps]));
        let q = tape.leaf(Tensor::row(vec![0.5, 0.5]));
        let l = kl_loss(&mut tape, p, q).unwrap();
        let exact = (1.0 - eps) * ((1.0 - eps) / 0.5f64).ln() + eps * (eps / 0.5f64).ln();
        let v = tape.value(l).item().unwrap();
        assert!((v - exact).abs() < 1e-15);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn kl_rejects_non_distributions() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::row(vec![0.7, 0.7]));
        let q = tape.leaf(Tensor::row(vec![0.5, 0.5]));
        assert!(matches!(kl_loss(&mut tape, p, q), Err(Error::Contract(_))));
    }

    #[test]
    fn dynamic_weight_anchor_points() {
        assert_eq!(dynamic_weight(2.0, 0.0, false), 1.0);
        assert!((dynamic_weight(2.0, 3f64.ln(), false) - 1.5).abs() < 1e-15);
        assert!((dynamic_weight(2.0, 3f64.ln(), true) - 0.5).abs() < 1e-15);
        assert!((dynamic_weight(1.0, 50.0, false) - 1.0).abs() < 1e-20);
        assert!(dynamic_weight(1.0, -50.0, false) < 1e-21);
    }

    #[test]
    fn total_of_single_term() {
        let mut tape = Tape::new();
        let terms = [1.0, 0.0, 0.0, 0.0].map(|v| tape.leaf(Tensor::scalar(v)));
        let (total, info) = total_loss(&mut tape, terms, [1.0; 4], false).unwrap();
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((tape.value(total).item().unwrap() - expect).abs() < 1e-15);
        assert!((info.total - 0.7310585786300049).abs() < 1e-15);
        assert_eq!(info.effective_weights[1], 0.5);
    }

    #[test]
    fn total_gradient_is_the_detached_weight() {
        let mut tape = Tape::new();
        let terms = [0.3, 1.2, 0.0, 2.5].map(|v| tape.leaf(Tensor::scalar(v)));
        let (total, info) = total_loss(&mut tape, terms, [1.0, 2.0, 0.5, 1.0], false).unwrap();
        let g = tape.backward(total).unwrap();
        for i in 0..4 {
            assert_eq!(g.get(terms[i]).unwrap().data()[0], info.effective_weights[i]);
        }
    }
}
