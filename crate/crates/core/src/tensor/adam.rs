use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&[f64]> {
        self.first.get(index).map(Vec::as_slice)
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    if let Some(id) = ids.iter().find(|&&id| params.grad(id).is_none()) {
        return Err(Error::State(format!(
            "parameter {} has no gradient",
            params.name(*id)
        )));
    }
    if state.first.is_empty() {
        state.first = ids
            .iter()
            .map(|&id| vec![0.0; params.value(id).len()])
            .collect();
        state.second = state.first.clone();
    } else if state.first.len() != ids.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first.len(),
            ids.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (k, &id) in ids.iter().enumerate() {
        let (value, grad) = params.value_and_grad(id)?;
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
