use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

/// Per-parameter moments indexed like the store, created lazily the first
/// time a parameter is updated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: Vec<Option<Moments>>,
}

/// One bias-corrected Adam update (no weight decay) of every unfrozen
/// parameter from its accumulated gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        let p = store.get_mut(id);
        let shape = p.value.shape();
        let slot = state.moments[id.index()].get_or_insert_with(|| Moments {
            m: Matrix::zeros(shape.0, shape.1),
            v: Matrix::zeros(shape.0, shape.1),
        });
        if slot.m.shape() != shape || slot.v.shape() != shape || p.grad.shape() != shape {
            return Err(Error::dim(
                "adam_step",
                format!("{} is {shape:?} but its moments are {:?}", p.name, slot.m.shape()),
            ));
        }
        let grads = p.grad.data();
        let values = p.value.data_mut();
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for i in 0..values.len() {
            let g = grads[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
