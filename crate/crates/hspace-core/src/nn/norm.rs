//! Group normalization with affine parameters.
//!
//! Group blocks `(cg * h * w)` are contiguous in standard layout, so all
//! statistics run over flat slices.

use ndarray::{Array1, Array2, Array4, ArrayView4};

use crate::scalar::{fl, Scalar};

#[derive(Debug, Clone)]
pub struct GroupNorm<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub groups: usize,
    pub eps: F,
}

pub struct GroupNormCache<F: Scalar> {
    xhat: Array4<F>,
    invstd: Array2<F>, // (b, groups)
}

impl<F: Scalar> GroupNorm<F> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups,
            eps: fl::<F>(1e-5),
        }
    }

    /// Forward without building the backward cache.
    pub fn infer(&self, x: &ArrayView4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        let cg = c / self.groups;
        let hw = h * w;
        let block = cg * hw;
        let n = F::from_usize(block).unwrap();
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().unwrap();
        let mut y = Array4::<F>::zeros((b, c, h, w));
        let ys = y.as_slice_mut().unwrap();
        for bi in 0..b {
            for g in 0..self.groups {
                let base = (bi * c + g * cg) * hw;
                let xg = &xs[base..base + block];
                let mut mean = F::zero();
                for &v in xg {
                    mean += v;
                }
                mean /= n;
                let mut var = F::zero();
                for &v in xg {
                    let d = v - mean;
                    var += d * d;
                }
                var /= n;
                let istd = F::one() / (var + self.eps).sqrt();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let ga = self.gamma[ch];
                    let be = self.beta[ch];
                    let off = base + ci * hw;
                    for k in 0..hw {
                        ys[off + k] = ga * (xs[off + k] - mean) * istd + be;
                    }
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &ArrayView4<F>) -> (Array4<F>, GroupNormCache<F>) {
        let (b, c, h, w) = x.dim();
        let cg = c / self.groups;
        let hw = h * w;
        let block = cg * hw;
        let n = F::from_usize(block).unwrap();
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().unwrap();
        let mut xhat = Array4::<F>::zeros((b, c, h, w));
        let mut y = Array4::<F>::zeros((b, c, h, w));
        let mut invstd = Array2::<F>::zeros((b, self.groups));
        {
            let xh = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for bi in 0..b {
                for g in 0..self.groups {
                    let base = (bi * c + g * cg) * hw;
                    let xg = &xs[base..base + block];
                    let mut mean = F::zero();
                    for &v in xg {
                        mean += v;
                    }
                    mean /= n;
                    let mut var = F::zero();
                    for &v in xg {
                        let d = v - mean;
                        var += d * d;
                    }
                    var /= n;
                    let istd = F::one() / (var + self.eps).sqrt();
                    invstd[(bi, g)] = istd;
                    for ci in 0..cg {
                        let ch = g * cg + ci;
                        let ga = self.gamma[ch];
                        let be = self.beta[ch];
                        let off = base + ci * hw;
                        for k in 0..hw {
                            let xh_v = (xs[off + k] - mean) * istd;
                            xh[off + k] = xh_v;
                            ys[off + k] = ga * xh_v + be;
                        }
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, invstd })
    }

    pub fn backward(
        &self,
        cache: &GroupNormCache<F>,
        dy: &ArrayView4<F>,
        grad: Option<&mut GroupNorm<F>>,
    ) -> Array4<F> {
        let (b, c, h, w) = dy.dim();
        let cg = c / self.groups;
        let hw = h * w;
        let block = cg * hw;
        let n = F::from_usize(block).unwrap();
        let dy_std = dy.as_standard_layout();
        let ds = dy_std.as_slice().unwrap();
        let xh = cache.xhat.as_slice().unwrap();
        let mut dx = Array4::<F>::zeros((b, c, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        if let Some(g) = grad {
            for ch in 0..c {
                let mut dgamma = F::zero();
                let mut dbeta = F::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * hw;
                    for k in 0..hw {
                        dgamma += ds[off + k] * xh[off + k];
                        dbeta += ds[off + k];
                    }
                }
                g.gamma[ch] += dgamma;
                g.beta[ch] += dbeta;
            }
        }
        for bi in 0..b {
            for gi in 0..self.groups {
                let base = (bi * c + gi * cg) * hw;
                let mut sum_dxhat = F::zero();
                let mut sum_dxhat_xhat = F::zero();
                for ci in 0..cg {
                    let ga = self.gamma[gi * cg + ci];
                    let off = base + ci * hw;
                    for k in 0..hw {
                        let dxh = ds[off + k] * ga;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[off + k];
                    }
                }
                let istd = cache.invstd[(bi, gi)];
                for ci in 0..cg {
                    let ga = self.gamma[gi * cg + ci];
                    let off = base + ci * hw;
                    for k in 0..hw {
                        let dxh = ds[off + k] * ga;
                        dxs[off + k] =
                            istd * (dxh - (sum_dxhat + xh[off + k] * sum_dxhat_xhat) / n);
                    }
                }
            }
        }
        dx
    }
}
