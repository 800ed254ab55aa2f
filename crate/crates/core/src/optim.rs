//! Adam with L2-coupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates for every trainable parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| Tensor::zeros(p.tensor.shape()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update. `grads` has one entry per parameter in the store
/// (buffers included, ignored). The decay term `weight_decay * param` is
/// added to the gradient before the moment updates.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    let n_trainable = params.iter().filter(|p| p.trainable).count();
    if state.m.len() != n_trainable {
        return Err(Error::shape(
            "adam_step",
            format!("optimizer state for {} tensors, model has {n_trainable}", state.m.len()),
        ));
    }
    for ((p, g), slot) in params
        .iter()
        .zip(grads)
        .filter(|(p, _)| p.trainable)
        .zip(0..)
    {
        if p.tensor.shape() != g.shape() || state.m[slot].shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{}: param {:?}, grad {:?}", p.name, p.tensor.shape(), g.shape()),
            ));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let mut slot = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        if !p.trainable {
            continue;
        }
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        for (((w, gv), mv), vv) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let grad = gv + weight_decay * *w;
            *mv = BETA1 * *mv + (1.0 - BETA1) * grad;
            *vv = BETA2 * *vv + (1.0 - BETA2) * grad * grad;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        slot += 1;
    }
    Ok(())
}
