//! Adam optimizer with name-keyed state.
//!
//! State lives in a map keyed by parameter name, so components whose graph
//! bindings are rebuilt every step (the registry allocates fresh node ids
//! per graph) still accumulate moments correctly, and parameters that
//! receive no gradient in a step are simply left untouched.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const EPS: f64 = 1e-8;

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Number of updates this parameter has received; bias corrections use
    /// this count, so a parameter that sits out some steps is corrected as
    /// if the missed steps never happened.
    t: u64,
}

/// Adam with L2 weight decay folded into the gradient (decay * theta is
/// added to the raw gradient before the moment updates).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    t: u64,
    state: HashMap<String, Slot>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            weight_decay,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Marks the start of an optimization step. Bias corrections count per
    /// parameter, so this only enforces that updates happen inside a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to `param` in place.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Contract("update called before begin_step".into()));
        }
        if grad.len() != param.data.len() {
            return Err(Error::Contract(format!(
                "gradient length {} does not match parameter `{name}` of {}",
                grad.len(),
                param.data.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter `{name}`"
            )));
        }
        let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            t: 0,
        });
        if slot.m.len() != grad.len() {
            return Err(Error::Contract(format!(
                "parameter `{name}` changed size between steps"
            )));
        }
        slot.t += 1;
        let bias1 = 1.0 - self.beta1.powi(slot.t as i32);
        let bias2 = 1.0 - self.beta2.powi(slot.t as i32);
        for i in 0..grad.len() {
            let g = grad[i] + self.weight_decay * param.data[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = slot.m[i] / bias1;
            let v_hat = slot.v[i] / bias2;
            param.data[i] -= self.lr * m_hat / (v_hat.sqrt() + EPS);
        }
        Ok(())
    }
}
