//! Residual block with feature-wise affine (FiLM) conditioning.
//!
//! The conditioning embedding enters only through a per-channel scale/shift
//! after the second normalization, keeping it out of the additive h-space
//! path. Callers pass the already-activated embedding (shared across blocks).

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rand::Rng;

use crate::nn::act::{silu_backward, silu_own};
use crate::nn::conv::{Conv2d, Conv2dCache};
use crate::nn::init;
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::norm::{GroupNorm, GroupNormCache};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct FilmBlock<F: Scalar> {
    pub gn1: GroupNorm<F>,
    pub conv1: Conv2d<F>,
    pub film: Linear<F>,
    pub gn2: GroupNorm<F>,
    pub conv2: Conv2d<F>,
    pub skip: Option<Conv2d<F>>,
}

pub struct FilmBlockCache<F: Scalar> {
    gn1: GroupNormCache<F>,
    silu1_x: Array4<F>,
    conv1: Conv2dCache<F>,
    film: LinearCache<F>,
    gn2: GroupNormCache<F>,
    g1: Array4<F>,
    scale: Array2<F>,
    silu2_x: Array4<F>,
    conv2: Conv2dCache<F>,
    skip: Option<Conv2dCache<F>>,
}

impl<F: Scalar> FilmBlock<F> {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, d_emb: usize, groups: usize) -> Self {
        let skip = if cin != cout {
            Some(Conv2d::new(
                init::conv_kaiming(rng, cout, cin, 1, 1),
                init::zeros1(cout),
                1,
                0,
            ))
        } else {
            None
        };
        Self {
            gn1: GroupNorm::new(cin, groups.min(cin)),
            conv1: Conv2d::new(
                init::conv_kaiming(rng, cout, cin, 3, 3),
                init::zeros1(cout),
                1,
                1,
            ),
            film: Linear::new(
                init::linear_kaiming(rng, 2 * cout, d_emb),
                init::zeros1(2 * cout),
            ),
            gn2: GroupNorm::new(cout, groups.min(cout)),
            // Zero init makes the block start as (near) identity.
            conv2: Conv2d::new(init::conv_zero(cout, cout, 3, 3), init::zeros1(cout), 1, 1),
            skip,
        }
    }

    /// Forward without building backward caches.
    pub fn infer(&self, x: &ArrayView4<F>, emb_act: &ArrayView2<F>) -> Array4<F> {
        let a1 = self.gn1.infer(x);
        let a2 = a1.mapv_into(|v| v * (F::one() / (F::one() + (-v).exp())));
        let h1 = self.conv1.infer(&a2.view());
        drop(a2);
        let (sb, _) = self.film.forward(emb_act);
        let cout = h1.dim().1;
        let g1 = self.gn2.infer(&h1.view());
        drop(h1);
        let (b, _, hh, ww) = g1.dim();
        let hw = hh * ww;
        let mut h3 = g1;
        {
            let hs = h3.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..cout {
                    let s = F::one() + sb[(bi, ci)];
                    let t = sb[(bi, cout + ci)];
                    let off = (bi * cout + ci) * hw;
                    for k in 0..hw {
                        let h2 = hs[off + k] * s + t;
                        hs[off + k] = h2 * (F::one() / (F::one() + (-h2).exp()));
                    }
                }
            }
        }
        let mut h4 = self.conv2.infer(&h3.view());
        drop(h3);
        match &self.skip {
            Some(k) => h4 += &k.infer(x),
            None => h4 += x,
        }
        h4
    }

    /// `emb_act` is the activated conditioning embedding, `(B, d_emb)`.
    pub fn forward(
        &self,
        x: &ArrayView4<F>,
        emb_act: &ArrayView2<F>,
    ) -> (Array4<F>, FilmBlockCache<F>) {
        let (a1, gn1_cache) = self.gn1.forward(x);
        let (a2, silu1_x) = silu_own(a1);
        let (h1, conv1_cache) = self.conv1.forward(&a2.view());
        let (sb, film_cache) = self.film.forward(emb_act);
        let cout = h1.dim().1;
        let scale = sb.slice(ndarray::s![.., 0..cout]).to_owned();
        let shift = sb.slice(ndarray::s![.., cout..2 * cout]).to_owned();
        let (g1, gn2_cache) = self.gn2.forward(&h1.view());
        // h2 = g1 * (1 + s) + t, per (sample, channel)
        let (b, _, hh, ww) = g1.dim();
        let hw = hh * ww;
        let mut h2 = Array4::<F>::zeros(g1.dim());
        {
            let g1s = g1.as_slice().unwrap();
            let h2s = h2.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..cout {
                    let s = F::one() + scale[(bi, ci)];
                    let t = shift[(bi, ci)];
                    let off = (bi * cout + ci) * hw;
                    for k in 0..hw {
                        h2s[off + k] = g1s[off + k] * s + t;
                    }
                }
            }
        }
        let (h3, silu2_x) = silu_own(h2);
        let (mut h4, conv2_cache) = self.conv2.forward(&h3.view());
        let skip_cache = match &self.skip {
            Some(k) => {
                let (xs, c) = k.forward(x);
                h4 += &xs;
                Some(c)
            }
            None => {
                h4 += x;
                None
            }
        };
        (
            h4,
            FilmBlockCache {
                gn1: gn1_cache,
                silu1_x,
                conv1: conv1_cache,
                film: film_cache,
                gn2: gn2_cache,
                g1,
                scale,
                silu2_x,
                conv2: conv2_cache,
                skip: skip_cache,
            },
        )
    }

    /// Returns `(dx, demb_act)`. Parameter grads accumulate into `grad` when
    /// given.
    pub fn backward(
        &self,
        cache: &FilmBlockCache<F>,
        dy: &ArrayView4<F>,
        mut grad: Option<&mut FilmBlock<F>>,
    ) -> (Array4<F>, Array2<F>) {
        let dh3 = self
            .conv2
            .backward(&cache.conv2, dy, grad.as_deref_mut().map(|g| &mut g.conv2));
        let mut dg1 = silu_backward(&cache.silu2_x, &dh3.view());
        // FiLM: h2 = g1 * (1 + s) + t
        let (b, cout, hh, ww) = dg1.dim();
        let hw = hh * ww;
        let mut dsb = Array2::<F>::zeros((b, 2 * cout));
        {
            let dh2s = dg1.as_slice_mut().unwrap();
            let g1s = cache.g1.as_slice().unwrap();
            for bi in 0..b {
                for ci in 0..cout {
                    let s = F::one() + cache.scale[(bi, ci)];
                    let off = (bi * cout + ci) * hw;
                    let mut ds = F::zero();
                    let mut dt = F::zero();
                    for k in 0..hw {
                        let d = dh2s[off + k];
                        ds += d * g1s[off + k];
                        dt += d;
                        dh2s[off + k] = d * s;
                    }
                    dsb[(bi, ci)] = ds;
                    dsb[(bi, cout + ci)] = dt;
                }
            }
        }
        let demb_act = self.film.backward(
            &cache.film,
            &dsb.view(),
            grad.as_deref_mut().map(|g| &mut g.film),
        );
        let dh1 = self.gn2.backward(
            &cache.gn2,
            &dg1.view(),
            grad.as_deref_mut().map(|g| &mut g.gn2),
        );
        let da2 = self.conv1.backward(
            &cache.conv1,
            &dh1.view(),
            grad.as_deref_mut().map(|g| &mut g.conv1),
        );
        let da1 = silu_backward(&cache.silu1_x, &da2.view());
        let mut dx = self.gn1.backward(
            &cache.gn1,
            &da1.view(),
            grad.as_deref_mut().map(|g| &mut g.gn1),
        );
        match (&self.skip, &cache.skip) {
            (Some(k), Some(kc)) => {
                let dxs = k.backward(kc, dy, grad.as_deref_mut().and_then(|g| g.skip.as_mut()));
                dx += &dxs;
            }
            _ => {
                dx += dy;
            }
        }
        (dx, demb_act)
    }
}
