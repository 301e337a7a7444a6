//! Parameter update rules: plain SGD and Adam.

use crate::tensor::Tensor;

/// In-place `value <- value - lr * grad`. Tensors without a gradient buffer
/// are left untouched.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) {
    for t in params.iter_mut() {
        if let Some(g) = t.grad.take() {
            for (v, gv) in t.data_mut().iter_mut().zip(&g) {
                *v -= lr * gv;
            }
            t.grad = Some(g);
        }
    }
}

/// Adam with bias correction. State lives in [`Adam`]; this free function is
/// one step over a parameter list whose order must stay fixed across calls.
pub fn adam_step(state: &mut Adam, params: &mut [&mut Tensor]) {
    state.step(params);
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data().len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.data().len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer bound to a different parameter list");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, t) in params.iter_mut().enumerate() {
            let Some(g) = t.grad.take() else { continue };
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for (i, val) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *val -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            t.grad = Some(g);
        }
    }
}

/// Optimizer for model parameters; feature tensors always use plain SGD so
/// one feature step is exactly `-lr * grad`.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam(Adam::new(lr))
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        match self {
            Self::Sgd { lr } => sgd_step(params, *lr),
            Self::Adam(a) => a.step(params),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_exact() {
        let mut x = Tensor::from_vec(1, 1, vec![1.0]).unwrap().with_grad();
        x.grad = Some(vec![2.0]);
        sgd_step(&mut [&mut x], 0.5);
        assert_eq!(x.data(), &[0.0]);
    }

    #[test]
    fn sgd_matches_formula_to_ulp() {
        let vals = [0.3, -1.7, 2.503, 9.99];
        let grads = [0.01, -4.2, 0.333, -0.125];
        let lr = 0.07;
        let mut t = Tensor::from_vec(4, 1, vals.to_vec()).unwrap().with_grad();
        t.grad = Some(grads.to_vec());
        sgd_step(&mut [&mut t], lr);
        for i in 0..4 {
            assert_eq!(t.data()[i].to_bits(), (vals[i] - lr * grads[i]).to_bits());
        }
    }

    #[test]
    fn adam_first_step_magnitude() {
        // With bias correction, the first Adam step is ~lr * sign(grad).
        let mut x = Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap().with_grad();
        x.grad = Some(vec![10.0, -0.3]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut x]);
        assert!((x.data()[0] + 0.1).abs() < 1e-6);
        assert!((x.data()[1] - 0.1).abs() < 1e-6);
    }
}
