//! Uniform access to named parameters.
//!
//! Gradient buffers, Adam moments, and checkpoint serialization all reuse the
//! owning struct's own type: a gradient sink for a model is just another
//! zeroed instance of the model, and the visitor pairs them up by position.

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::scalar::Scalar;

pub trait Params<F: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>);

    fn named(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, v)| v.len()).sum()
    }

    fn set_zero(&mut self) {
        for (_, mut view) in self.named_mut() {
            view.fill(F::zero());
        }
    }
}

/// Clones a container and zeroes it, for use as a gradient or moment buffer.
pub fn zeroed_like<F: Scalar, P: Params<F> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.set_zero();
    z
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
