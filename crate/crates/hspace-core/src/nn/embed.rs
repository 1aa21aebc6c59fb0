//! Learned token-embedding table with mean pooling.
//!
//! The pooled vector is the prompt conditioning; pooling over the mean makes
//! it order-invariant, and the empty prompt pools to the all-zero vector,
//! which doubles as the distinguished null conditioning.

use ndarray::{Array2, ArrayView2};

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct EmbeddingPool<F: Scalar> {
    /// `(vocab, dim)`
    pub table: Array2<F>,
}

impl<F: Scalar> EmbeddingPool<F> {
    pub fn new(table: Array2<F>) -> Self {
        Self { table }
    }

    pub fn dim(&self) -> usize {
        self.table.dim().1
    }

    /// Mean of the token rows; the empty list yields zeros.
    pub fn forward(&self, token_ids: &[Vec<usize>]) -> Array2<F> {
        let d = self.dim();
        let mut out = Array2::<F>::zeros((token_ids.len(), d));
        for (bi, ids) in token_ids.iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let inv = F::one() / F::from_usize(ids.len()).unwrap();
            let mut row = out.row_mut(bi);
            for &id in ids {
                row.scaled_add(inv, &self.table.row(id));
            }
        }
        out
    }

    pub fn backward(
        &self,
        token_ids: &[Vec<usize>],
        dy: &ArrayView2<F>,
        grad: Option<&mut EmbeddingPool<F>>,
    ) {
        let Some(g) = grad else { return };
        for (bi, ids) in token_ids.iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let inv = F::one() / F::from_usize(ids.len()).unwrap();
            for &id in ids {
                g.table.row_mut(id).scaled_add(inv, &dy.row(bi));
            }
        }
    }
}
