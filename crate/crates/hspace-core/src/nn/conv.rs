//! 2D convolution via im2col + GEMM, with explicit backward.
//!
//! The patch matrix is stored transposed, `(k, b*ho*wo)`, so both im2col and
//! col2im move contiguous pixel runs, and each sample's GEMM writes straight
//! into the `(b, cout, ho, wo)` output buffer with no layout permutes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};

use crate::scalar::Scalar;

/// `(batch, cin, h, w)` -> `(cin*kh*kw, batch*ho*wo)` patch matrix.
///
/// Row index is `c*kh*kw + ky*kw + kx`; column index is `b*ho*wo + oh*wo + ow`.
pub fn im2col<F: Scalar>(
    x: &ArrayView4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (b, cin, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let k = cin * kh * kw;
    let how = ho * wo;
    let mut col = Array2::<F>::zeros((k, b * how));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let cs = col.as_slice_mut().unwrap();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let kcol = (c * kh + ky) * kw + kx;
                let row = kcol * (b * how);
                for bi in 0..b {
                    let x_base = (bi * cin + c) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * stride + ky) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_base = row + bi * how + oh * wo;
                        let x_row = x_base + ih as usize * w;
                        if stride == 1 {
                            let lo = pad.saturating_sub(kx);
                            let hi = (w + pad - kx).min(wo);
                            if lo >= hi {
                                continue;
                            }
                            let src0 = x_row + lo + kx - pad;
                            cs[dst_base + lo..dst_base + hi]
                                .copy_from_slice(&xs[src0..src0 + (hi - lo)]);
                        } else {
                            for ow in 0..wo {
                                let iw = (ow * stride + kx) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                cs[dst_base + ow] = xs[x_row + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of the patch-matrix gradient back to input layout.
pub fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let how = ho * wo;
    let mut dx = Array4::<F>::zeros((b, cin, h, w));
    let ds = dcol.as_slice().expect("col2im expects standard layout");
    let xs = dx.as_slice_mut().unwrap();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let kcol = (c * kh + ky) * kw + kx;
                let row = kcol * (b * how);
                for bi in 0..b {
                    let x_base = (bi * cin + c) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * stride + ky) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_base = row + bi * how + oh * wo;
                        let x_row = x_base + ih as usize * w;
                        if stride == 1 {
                            let lo = pad.saturating_sub(kx);
                            let hi = (w + pad - kx).min(wo);
                            if lo >= hi {
                                continue;
                            }
                            let dst0 = x_row + lo + kx - pad;
                            for d in 0..hi - lo {
                                xs[dst0 + d] += ds[src_base + lo + d];
                            }
                        } else {
                            for ow in 0..wo {
                                let iw = (ow * stride + kx) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                xs[x_row + iw as usize] += ds[src_base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    /// `(cout, cin, kh, kw)`
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache<F: Scalar> {
    /// Input is retained (9x smaller than the patch matrix); backward
    /// recomputes im2col so the large transient buffers free immediately.
    x: Array4<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(w: Array4<F>, b: Array1<F>, stride: usize, pad: usize) -> Self {
        Self { w, b, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.w.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &ArrayView4<F>) -> (Array4<F>, Conv2dCache<F>) {
        (self.infer(x), Conv2dCache { x: x.to_owned() })
    }

    /// Forward without retaining anything for backward.
    pub fn infer(&self, x: &ArrayView4<F>) -> Array4<F> {
        let (b, cin, h, w) = x.dim();
        let (cout, cin_w, kh, kw) = self.w.dim();
        debug_assert_eq!(cin, cin_w);
        let (ho, wo) = self.out_hw(h, w);
        let how = ho * wo;
        let k = cin * kh * kw;
        let col = im2col(x, kh, kw, self.stride, self.pad);
        let wmat = self.w.view().into_shape_with_order((cout, k)).unwrap();
        let mut out = Array4::<F>::zeros((b, cout, ho, wo));
        for bi in 0..b {
            let col_b = col.slice(ndarray::s![.., bi * how..(bi + 1) * how]);
            let mut out_b = out
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((cout, how))
                .unwrap();
            general_mat_mul(F::one(), &wmat, &col_b, F::zero(), &mut out_b);
            for (ci, mut row) in out_b.rows_mut().into_iter().enumerate() {
                let bias = self.b[ci];
                row.mapv_inplace(|v| v + bias);
            }
        }
        out
    }

    /// Propagates `dy` to the input; accumulates parameter grads into `grad`
    /// when given (pass `None` to treat the layer as frozen).
    pub fn backward(
        &self,
        cache: &Conv2dCache<F>,
        dy: &ArrayView4<F>,
        mut grad: Option<&mut Conv2d<F>>,
    ) -> Array4<F> {
        let (b, cin, h, w) = cache.x.dim();
        let (cout, _, kh, kw) = self.w.dim();
        let (ho, wo) = self.out_hw(h, w);
        let how = ho * wo;
        let k = cin * kh * kw;
        let dy_std = dy.as_standard_layout();
        let wmat = self.w.view().into_shape_with_order((cout, k)).unwrap();
        let col = if grad.is_some() {
            Some(im2col(&cache.x.view(), kh, kw, self.stride, self.pad))
        } else {
            None
        };
        let mut dcol = Array2::<F>::zeros((k, b * how));
        for bi in 0..b {
            let dy_b = dy_std
                .index_axis(Axis(0), bi)
                .into_shape_with_order((cout, how))
                .unwrap();
            if let Some(g) = grad.as_deref_mut() {
                let col_b = col
                    .as_ref()
                    .unwrap()
                    .slice(ndarray::s![.., bi * how..(bi + 1) * how]);
                let mut gw = g.w.view_mut().into_shape_with_order((cout, k)).unwrap();
                general_mat_mul(F::one(), &dy_b, &col_b.t(), F::one(), &mut gw);
                for (ci, row) in dy_b.rows().into_iter().enumerate() {
                    g.b[ci] += row.sum();
                }
            }
            let mut dcol_b = dcol.slice_mut(ndarray::s![.., bi * how..(bi + 1) * how]);
            general_mat_mul(F::one(), &wmat.t(), &dy_b, F::zero(), &mut dcol_b);
        }
        col2im(&dcol, b, cin, h, w, kh, kw, self.stride, self.pad)
    }
}
