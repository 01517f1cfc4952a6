use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Moment buffers for Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[Tensor], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, beta1, beta2, epsilon }
    }
}

/// One Adam update. `names` label parameters in error messages.
///
/// A learning rate of exactly zero updates the moments and step count but
/// leaves every parameter bit-identical.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != names.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment buffers, {} names",
                params.len(),
                grads.len(),
                state.m.len(),
                names.len()
            ),
        ));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Contract(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("`{name}`: {:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
        }
        if lr == 0.0 {
            continue;
        }
        for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            *pj -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
