//! Adam with bias correction; β1 = 0.9, β2 = 0.999, ε = 1e-8.

use crate::backbones::Param;
use crate::{Error, Result, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments mirroring the parameter shapes.
    pub fn new(params: &[Param<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over all parameters. `grads` must align with `params`
/// elementwise; `weight_decay` adds the L2 term `wd * θ` to each gradient
/// before the moment updates.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidOp(format!(
            "adam got {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.data.len() {
            return Err(Error::ShapeMismatch {
                left: p.shape.clone(),
                right: vec![g.len()],
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64c(BETA1);
    let b2 = T::from_f64c(BETA2);
    let one = T::one();
    let wd = T::from_f64c(weight_decay);
    // Bias corrections depend only on the step count.
    let inv_corr1 = T::from_f64c(1.0 / (1.0 - BETA1.powi(t)));
    let inv_corr2 = T::from_f64c(1.0 / (1.0 - BETA2.powi(t)));
    let step_size = T::from_f64c(lr);
    let eps = T::from_f64c(EPSILON);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.data.len() {
            let grad = g[i] + wd * p.data[i];
            m[i] = b1 * m[i] + (one - b1) * grad;
            v[i] = b2 * v[i] + (one - b2) * grad * grad;
            let m_hat = m[i] * inv_corr1;
            let v_hat = v[i] * inv_corr2;
            p.data[i] = p.data[i] - step_size * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
