//! Adam optimizer over a model's visited parameter tensors.

use ndarray::ArrayD;

/// Adam with bias correction. State slots are created lazily on the first
/// step and are keyed by visit order, which is fixed for a given model.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: Vec<Slot>,
}

struct Slot {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

impl Adam {
    /// The conventional defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new() -> Self {
        Self::with_params(0.9, 0.999, 1e-8)
    }

    pub fn with_params(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter the model exposes.
    pub fn step(&mut self, model: &mut dyn super::ParamVisitable, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let slots = &mut self.slots;
        let mut idx = 0usize;
        model.visit_params_grads_mut(&mut |_name, mut value, grad| {
            if slots.len() == idx {
                slots.push(Slot {
                    m: ArrayD::zeros(grad.shape().to_vec()),
                    v: ArrayD::zeros(grad.shape().to_vec()),
                });
            }
            let slot = &mut slots[idx];
            for ((w, &g), (m, v)) in value
                .iter_mut()
                .zip(grad.iter())
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}
