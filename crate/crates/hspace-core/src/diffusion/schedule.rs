//! Noise schedule: per-step variances and their cumulative products.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};

/// Default step count and beta range.
pub const DEFAULT_T: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear-beta schedule. `alpha_bar` is indexed 0..=T with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of beta over `t` steps.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid beta bounds ({beta_start}, {beta_end}): need 0 < start <= end < 1"
            )));
        }
        let beta: Vec<f64> = if t == 1 {
            vec![beta_start]
        } else {
            (0..t)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
                .collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(Self {
            t_max: t,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn default_schedule() -> Self {
        Self::linear(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap()
    }

    /// Beta at step `t` (1-based).
    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product at step `t` (0-based index valid: `alpha_bar_at(0) == 1`).
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::Config(format!(
                "step {t} out of range 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Closed-form forward corruption:
    /// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn add_noise<F: Scalar>(&self, x0: &ArrayD<F>, t: usize, eps: &ArrayD<F>) -> Result<ArrayD<F>> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "noise shape {:?} does not match image shape {:?}",
                eps.shape(),
                x0.shape()
            )));
        }
        let ab = self.alpha_bar_at(t);
        let s_sig: F = fl(ab.sqrt());
        let s_noise: F = fl((1.0 - ab).sqrt());
        let mut out = x0.clone();
        ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| {
            *o = s_sig * *o + s_noise * e;
        });
        Ok(out)
    }
}
