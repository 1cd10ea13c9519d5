//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, betas: (f64, f64), weight_decay: f64) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| Tensor::zeros(params.get(id).shape()))
                .collect()
        };
        Self {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            betas,
            weight_decay,
            epsilon: 1e-8,
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Scales every gradient by `clip_norm / total` when the global norm exceeds
/// `clip_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], clip_norm: f64) -> f64 {
    let total = global_norm(grads);
    if total > clip_norm && total > 0.0 {
        let s = clip_norm / total;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    total
}

/// One clipped AdamW update. Returns the pre-clip gradient norm.
pub fn adamw_step(
    params: &mut ParamStore,
    mut grads: Vec<Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    if lr <= 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::Config(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.first_moment.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(&grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: params.get(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    let norm = clip_global_norm(&mut grads, clip_norm);

    state.step += 1;
    let (b1, b2) = state.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let eps = state.epsilon;
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let decay = if params.decays(id) {
            state.weight_decay
        } else {
            0.0
        };
        let m = state.first_moment[k].data_mut();
        let v = state.second_moment[k].data_mut();
        let p = params.get_mut(id).data_mut();
        for (((p, &g), m), v) in p
            .iter_mut()
            .zip(grads[k].data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *p -= lr * decay * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}
