use super::param::{Moments, Parameter};

/// Gradient-descent update rule applied to a set of parameters.
///
/// Implementations mutate parameter values in place from the gradients left
/// by the latest backward pass. Parameters without a gradient (unreached by
/// the loss) are skipped.
pub trait Optimizer {
    fn step(&mut self, params: &[&Parameter]);
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

/// Adam (Kingma & Ba) with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &[&Parameter]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            if !p.is_trainable() {
                continue;
            }
            let grad = match p.tensor().grad() {
                Some(g) => g,
                None => continue,
            };
            let mut slot = p.moments.borrow_mut();
            let moments = slot.get_or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let mut values = p.tensor().values_mut();
            for i in 0..grad.len() {
                let g = grad[i] as f64;
                let m = self.beta1 * moments.m[i] as f64 + (1.0 - self.beta1) * g;
                let v = self.beta2 * moments.v[i] as f64 + (1.0 - self.beta2) * g * g;
                moments.m[i] = m as f32;
                moments.v[i] = v as f32;
                let m_hat = m / b1t;
                let v_hat = v / b2t;
                values[i] = (values[i] as f64 - self.lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Plain stochastic gradient descent (used to cross-check training plumbing).
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Sgd {
        Sgd { lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &[&Parameter]) {
        for p in params {
            if !p.is_trainable() {
                continue;
            }
            let grad = match p.tensor().grad() {
                Some(g) => g,
                None => continue,
            };
            let mut values = p.tensor().values_mut();
            for i in 0..grad.len() {
                values[i] = (values[i] as f64 - self.lr * grad[i] as f64) as f32;
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Clears gradient buffers on every parameter (trainable or not).
pub fn zero_grads(params: &[&Parameter]) {
    for p in params {
        p.tensor().clear_grad();
    }
}
