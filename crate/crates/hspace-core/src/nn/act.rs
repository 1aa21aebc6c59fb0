//! Elementwise activations and the nearest-neighbor up-sampler.

use ndarray::{Array, Array4, ArrayView, ArrayView4, Dimension};

use crate::scalar::Scalar;

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `silu(x) = x * sigmoid(x)`; the returned cache is the input itself.
pub fn silu<F: Scalar, D: Dimension>(x: &ArrayView<F, D>) -> (Array<F, D>, Array<F, D>) {
    let y = x.mapv(|v| v * sigmoid(v));
    (y, x.to_owned())
}

/// Like [`silu`] but takes ownership of the input, avoiding the cache copy.
pub fn silu_own<F: Scalar, D: Dimension>(x: Array<F, D>) -> (Array<F, D>, Array<F, D>) {
    let y = x.mapv(|v| v * sigmoid(v));
    (y, x)
}

pub fn silu_backward<F: Scalar, D: Dimension>(
    cache_x: &Array<F, D>,
    dy: &ArrayView<F, D>,
) -> Array<F, D> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(cache_x).for_each(|d, &x| {
        let s = sigmoid(x);
        *d = *d * (s * (F::one() + x * (F::one() - s)));
    });
    dx
}

/// Nearest-neighbor 2x upsample.
pub fn upsample2<F: Scalar>(x: &ArrayView4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((b, c, h * 2, w * 2));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    let w2 = 2 * w;
    for plane in 0..b * c {
        let src_base = plane * h * w;
        let dst_base = plane * h * w * 4;
        for i in 0..h {
            let src = &xs[src_base + i * w..src_base + (i + 1) * w];
            let row0 = dst_base + 2 * i * w2;
            for (j, &v) in src.iter().enumerate() {
                ys[row0 + 2 * j] = v;
                ys[row0 + 2 * j + 1] = v;
            }
            ys.copy_within(row0..row0 + w2, row0 + w2);
        }
    }
    y
}

/// Backward of [`upsample2`]: 2x2 sum pooling of the output gradient.
pub fn upsample2_backward<F: Scalar>(dy: &ArrayView4<F>) -> Array4<F> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<F>::zeros((b, c, h, w));
    let dy_std = dy.as_standard_layout();
    let ds = dy_std.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    for plane in 0..b * c {
        let src_base = plane * h2 * w2;
        let dst_base = plane * h * w;
        for i in 0..h {
            let r0 = src_base + 2 * i * w2;
            let r1 = r0 + w2;
            let dst = dst_base + i * w;
            for j in 0..w {
                xs[dst + j] = ds[r0 + 2 * j] + ds[r0 + 2 * j + 1] + ds[r1 + 2 * j] + ds[r1 + 2 * j + 1];
            }
        }
    }
    dx
}
