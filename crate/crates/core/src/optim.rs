//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments for every trainable parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamWState {
    /// Zeroed moments for the store's trainable partition.
    pub fn new(store: &ParamStore) -> Self {
        let ids = store.trainable();
        let zeros: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        AdamWState { step: 0, ids, m: zeros.clone(), v: zeros }
    }

    fn slot(&self, id: ParamId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }
}

/// One update. `grads` may omit parameters that received no gradient; those
/// are treated as zero-gradient (moments still decay, weight decay still applies).
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if state.ids != store.trainable() {
        return Err(Error::Contract("optimizer state does not match the trainable parameters".into()));
    }
    let mut by_slot: Vec<Option<&Tensor>> = vec![None; state.ids.len()];
    for (id, g) in grads {
        let k = state.slot(*id).ok_or_else(|| {
            Error::Contract(format!("gradient for parameter {} which is not trainable", store.param(*id).name))
        })?;
        if g.shape() != store.get(*id).shape() {
            return Err(Error::Contract(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                store.param(*id).name,
                g.shape(),
                store.get(*id).shape()
            )));
        }
        by_slot[k] = Some(g);
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (k, &id) in state.ids.iter().enumerate() {
        let w = store.value_mut(id).data_mut();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let g = by_slot[k].map(|g| g.data());
        for i in 0..w.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] = w[i] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
