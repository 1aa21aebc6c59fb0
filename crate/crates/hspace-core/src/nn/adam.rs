//! Adam with bias correction, operating over any [`Params`] container.

use crate::nn::params::Params;
use crate::scalar::{fl, Scalar};

#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: fl::<F>(lr),
            beta1: fl::<F>(0.9),
            beta2: fl::<F>(0.999),
            eps: fl::<F>(1e-8),
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = fl::<F>(lr);
    }

    pub fn lr(&self) -> F {
        self.lr
    }

    /// One update. `grads`, `m`, `v` must be containers of the same type as
    /// `params` (same parameter layout).
    pub fn step<P: Params<F>>(&mut self, params: &mut P, grads: &P, m: &mut P, v: &mut P) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let ps = params.named_mut();
        let gs = grads.named();
        let ms = m.named_mut();
        let vs = v.named_mut();
        debug_assert_eq!(ps.len(), gs.len());
        for ((((pn, mut p), (gn, g)), (_, mut mm)), (_, mut vv)) in
            ps.into_iter().zip(gs).zip(ms).zip(vs)
        {
            debug_assert_eq!(pn, gn);
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut mm)
                .and(&mut vv)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (F::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (F::one() - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
