use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    /// `(out, in)`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

pub struct LinearCache<F: Scalar> {
    x: Array2<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(w: Array2<F>, b: Array1<F>) -> Self {
        Self { w, b }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> (Array2<F>, LinearCache<F>) {
        let mut y = x.dot(&self.w.t());
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        (y, LinearCache { x: x.to_owned() })
    }

    pub fn backward(
        &self,
        cache: &LinearCache<F>,
        dy: &ArrayView2<F>,
        grad: Option<&mut Linear<F>>,
    ) -> Array2<F> {
        if let Some(g) = grad {
            g.w += &dy.t().dot(&cache.x);
            g.b += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w)
    }
}
