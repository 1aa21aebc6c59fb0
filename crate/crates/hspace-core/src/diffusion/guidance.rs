//! Classifier-free guidance with the negative-prompt extension.
//!
//! Three-term combination:
//! `eps = l1 * eps(x|y) - l2 * eps(x|y_neg) + (1 - l1 - l2) * eps(x|null)`.
//! With `l2 = 0` it reduces to plain two-term CFG; with `l1 = 1, l2 = 0` it
//! is the conditional prediction.

use ndarray::{Array2, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::diffusion::model::{DenoiserModel, HOffset};
use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};

/// Positive- and negative-prompt guidance weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceParams {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            lambda1: 7.5,
            lambda2: 0.0,
        }
    }
}

impl GuidanceParams {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let g = Self { lambda1, lambda2 };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0) || !self.lambda1.is_finite() {
            return Err(Error::Config(format!(
                "lambda1 must be positive, got {}",
                self.lambda1
            )));
        }
        if self.lambda2 < 0.0 || !self.lambda2.is_finite() {
            return Err(Error::Config(format!(
                "lambda2 must be non-negative, got {}",
                self.lambda2
            )));
        }
        Ok(())
    }

    /// Unguided conditional prediction.
    pub fn conditional() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.0,
        }
    }
}

/// Plain two-term classifier-free guidance.
pub fn cfg_two_term<F: Scalar>(e_pos: &Array4<F>, e_null: &Array4<F>, lambda1: F) -> Array4<F> {
    let mut out = e_pos.clone();
    ndarray::Zip::from(&mut out).and(e_null).for_each(|o, &u| {
        *o = lambda1 * *o + (F::one() - lambda1) * u;
    });
    out
}

/// Guided noise prediction. Every branch is evaluated with the same h-space
/// offset. Degenerate weights skip the unused branches so the reductions are
/// exact tensor identities.
pub fn guided_noise<F: Scalar>(
    model: &DenoiserModel<F>,
    x: &ArrayView4<F>,
    ts: &[usize],
    cond_pos: &Array2<F>,
    cond_neg: &Array2<F>,
    cond_null: &Array2<F>,
    g: &GuidanceParams,
    offset: &HOffset<F>,
) -> Result<Array4<F>> {
    g.validate()?;
    let e_pos = model.predict_noise(x, ts, cond_pos, offset)?;
    if g.lambda2 == 0.0 {
        if g.lambda1 == 1.0 {
            return Ok(e_pos);
        }
        let e_null = model.predict_noise(x, ts, cond_null, offset)?;
        return Ok(cfg_two_term(&e_pos, &e_null, fl(g.lambda1)));
    }
    let e_neg = model.predict_noise(x, ts, cond_neg, offset)?;
    let e_null = model.predict_noise(x, ts, cond_null, offset)?;
    let l1: F = fl(g.lambda1);
    let l2: F = fl(g.lambda2);
    let l0 = F::one() - l1 - l2;
    let mut out = e_pos;
    ndarray::Zip::from(&mut out)
        .and(&e_neg)
        .and(&e_null)
        .for_each(|o, &n, &u| {
            *o = l1 * *o - l2 * n + l0 * u;
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::tiny_hyper;
    use crate::rng::rng_from_seed;
    use crate::world::{AttributeSchema, Vocabulary};
    use ndarray::Array4;
    use rand::Rng as _;

    fn setup() -> (DenoiserModel<f64>, Array4<f64>, Vec<usize>, [Array2<f64>; 3]) {
        let vocab = Vocabulary::from_schema(&AttributeSchema::default_world());
        let model = DenoiserModel::<f64>::new(tiny_hyper(&vocab), 42).unwrap();
        let mut rng = rng_from_seed(1);
        let r = model.hyper.resolution;
        let x = Array4::from_shape_fn((2, 3, r, r), |_| rng.gen::<f64>() - 0.5);
        let ts = vec![3, 7];
        let mk = |rng: &mut crate::rng::Rng| {
            Array2::from_shape_fn((2, model.hyper.d_cond), |_| rng.gen::<f64>() - 0.5)
        };
        let pos = mk(&mut rng);
        let neg = mk(&mut rng);
        let null = Array2::zeros((2, model.hyper.d_cond));
        (model, x, ts, [pos, neg, null])
    }

    #[test]
    fn lambda2_zero_reduces_to_two_term_cfg_exactly() {
        let (model, x, ts, [pos, neg, null]) = setup();
        let g = GuidanceParams::new(7.5, 0.0).unwrap();
        let zero = model.zero_offset();
        let off = HOffset::Shared(zero.view());
        let guided = guided_noise(&model, &x.view(), &ts, &pos, &neg, &null, &g, &off).unwrap();
        let e_pos = model.predict_noise(&x.view(), &ts, &pos, &off).unwrap();
        let e_null = model.predict_noise(&x.view(), &ts, &null, &off).unwrap();
        let manual = cfg_two_term(&e_pos, &e_null, 7.5);
        assert_eq!(guided, manual);
    }

    #[test]
    fn lambda1_one_is_the_conditional_branch() {
        let (model, x, ts, [pos, neg, null]) = setup();
        let g = GuidanceParams::conditional();
        let zero = model.zero_offset();
        let off = HOffset::Shared(zero.view());
        let guided = guided_noise(&model, &x.view(), &ts, &pos, &neg, &null, &g, &off).unwrap();
        let e_pos = model.predict_noise(&x.view(), &ts, &pos, &off).unwrap();
        assert_eq!(guided, e_pos);
    }

    #[test]
    fn three_term_formula_matches_hand_combination() {
        let (model, x, ts, [pos, neg, null]) = setup();
        let g = GuidanceParams::new(7.5, 6.5).unwrap();
        let zero = model.zero_offset();
        let off = HOffset::Shared(zero.view());
        let guided = guided_noise(&model, &x.view(), &ts, &pos, &neg, &null, &g, &off).unwrap();
        let e_pos = model.predict_noise(&x.view(), &ts, &pos, &off).unwrap();
        let e_neg = model.predict_noise(&x.view(), &ts, &neg, &off).unwrap();
        let e_null = model.predict_noise(&x.view(), &ts, &null, &off).unwrap();
        let mut worst = 0.0f64;
        for (((g, p), n), u) in guided.iter().zip(&e_pos).zip(&e_neg).zip(&e_null) {
            let want = 7.5 * p - 6.5 * n + (1.0 - 7.5 - 6.5) * u;
            let rel = (g - want).abs() / want.abs().max(1e-12);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-12, "worst rel err {worst}");
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(GuidanceParams::new(0.0, 0.0).is_err());
        assert!(GuidanceParams::new(-1.0, 0.0).is_err());
        assert!(GuidanceParams::new(1.0, -0.5).is_err());
        assert!(GuidanceParams::new(7.5, 0.0).is_ok());
    }
}
