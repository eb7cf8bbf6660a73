use ndarray::{ArrayD, Zip};

use crate::model::{ParamSet, Real};

/// Adam with bias correction. Tensors outside the trainable mask are never
/// touched.
pub struct Adam<T: Real> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    trainable: Vec<bool>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, trainable: impl Fn(&str) -> bool) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| ArrayD::zeros(t.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
            trainable: params.iter().map(|(_, name, _)| trainable(name)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one, lr, eps) = (T::one(), T::from_f64(self.lr), T::from_f64(self.eps));
        let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
        for ((i, (_, _, p)), (_, _, g)) in params.iter_mut().enumerate().zip(grads.iter()) {
            if !self.trainable[i] {
                continue;
            }
            Zip::from(p)
                .and(g)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}
