//! Decoupled-weight-decay Adam.

use super::params::ParamSet;
use super::tensor::Tensor;

/// AdamW state for one parameter group.
///
/// Weight decay is decoupled: `p <- p - lr*wd*p` is applied before the
/// moment-based step. A non-finite gradient aborts the step for that tensor
/// (its moments are left untouched) while the shared step counter still
/// advances.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One optimizer step over a parameter group. `grads[i]` pairs with the
    /// i-th entry of `params`; `None` leaves that tensor untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len(), "grad/param count mismatch");
        self.step_count += 1;
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (name, tensor)) in params.iter_mut().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            if !grad.all_finite() {
                eprintln!("warning: non-finite gradient for `{name}`, skipping its update at step {t}");
                continue;
            }
            let (m, v) = self.moments[i].get_or_insert_with(|| {
                (vec![0.0; tensor.numel()], vec![0.0; tensor.numel()])
            });
            let p = tensor.data_mut();
            let gd = grad.data();
            for j in 0..p.len() {
                p[j] -= self.lr * self.weight_decay * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gd[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gd[j] * gd[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
