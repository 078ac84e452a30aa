//! Adam optimizer and exponential moving average of parameters.

use super::{Float, ParamStore};
use ndarray::ArrayD;

/// Adam with bias correction; moment buffers are part of checkpointable
/// state so training resumes bit-exactly.
#[derive(Debug, Clone)]
pub struct Adam<F: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(ps: &ParamStore<F>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = ps.ids().map(|id| ArrayD::zeros(ps.value(id).raw_dim())).collect();
        let v = ps.ids().map(|id| ArrayD::zeros(ps.value(id).raw_dim())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m,
            v,
        }
    }

    /// Apply one update from the gradients currently accumulated in `ps`.
    pub fn step(&mut self, ps: &mut ParamStore<F>) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = F::from_f64(self.lr / bc1);
        let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt());
        let eps = F::from_f64(self.eps);

        for id in ps.ids().collect::<Vec<_>>() {
            let i = id.0;
            {
                let g = ps.grad(id);
                ndarray::Zip::from(&mut self.m[i]).and(g).for_each(|m, &gv| {
                    *m = b1 * *m + (one - b1) * gv;
                });
                ndarray::Zip::from(&mut self.v[i]).and(g).for_each(|v, &gv| {
                    *v = b2 * *v + (one - b2) * gv * gv;
                });
            }
            let m = &self.m[i];
            let v = &self.v[i];
            ndarray::Zip::from(ps.value_mut(id))
                .and(m)
                .and(v)
                .for_each(|p, &mv, &vv| {
                    // p -= lr/bc1 * m / (sqrt(v/bc2) + eps)
                    *p = *p - lr * mv / (vv.sqrt() * inv_sqrt_bc2 + eps);
                });
        }
    }
}

/// In-place EMA update: `ema = decay * ema + (1 - decay) * param`.
pub fn ema_update<F: Float>(ema: &mut [ArrayD<F>], ps: &ParamStore<F>, decay: f64) {
    let d = F::from_f64(decay);
    let one = F::one();
    for (i, id) in ps.ids().enumerate() {
        ndarray::Zip::from(&mut ema[i])
            .and(ps.value(id))
            .for_each(|e, &p| {
                *e = d * *e + (one - d) * p;
            });
    }
}
