//! Minimal hand-rolled neural-network stack: conv / norm / linear /
//! embedding layers with explicit forward caches and backward passes,
//! an Adam optimizer, and uniform named-parameter access.

pub mod act;
pub mod adam;
pub mod conv;
pub mod embed;
pub mod film;
pub mod init;
pub mod linear;
pub mod norm;
pub mod params;

pub use act::{silu, silu_backward, silu_own, upsample2, upsample2_backward};
pub use adam::Adam;
pub use conv::Conv2d;
pub use embed::EmbeddingPool;
pub use film::FilmBlock;
pub use linear::Linear;
pub use norm::GroupNorm;
pub use params::{zeroed_like, Params};

use crate::scalar::Scalar;
use ndarray::{ArrayViewD, ArrayViewMutD};
use params::join;

impl<F: Scalar> Params<F> for Conv2d<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((join(prefix, "w"), self.w.view().into_dyn()));
        out.push((join(prefix, "b"), self.b.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((join(prefix, "w"), self.w.view_mut().into_dyn()));
        out.push((join(prefix, "b"), self.b.view_mut().into_dyn()));
    }
}

impl<F: Scalar> Params<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((join(prefix, "w"), self.w.view().into_dyn()));
        out.push((join(prefix, "b"), self.b.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((join(prefix, "w"), self.w.view_mut().into_dyn()));
        out.push((join(prefix, "b"), self.b.view_mut().into_dyn()));
    }
}

impl<F: Scalar> Params<F> for GroupNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((join(prefix, "gamma"), self.gamma.view().into_dyn()));
        out.push((join(prefix, "beta"), self.beta.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((join(prefix, "gamma"), self.gamma.view_mut().into_dyn()));
        out.push((join(prefix, "beta"), self.beta.view_mut().into_dyn()));
    }
}

impl<F: Scalar> Params<F> for EmbeddingPool<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((join(prefix, "table"), self.table.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((join(prefix, "table"), self.table.view_mut().into_dyn()));
    }
}

impl<F: Scalar> Params<F> for FilmBlock<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.gn1.visit(&join(prefix, "gn1"), out);
        self.conv1.visit(&join(prefix, "conv1"), out);
        self.film.visit(&join(prefix, "film"), out);
        self.gn2.visit(&join(prefix, "gn2"), out);
        self.conv2.visit(&join(prefix, "conv2"), out);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.gn1.visit_mut(&join(prefix, "gn1"), out);
        self.conv1.visit_mut(&join(prefix, "conv1"), out);
        self.film.visit_mut(&join(prefix, "film"), out);
        self.gn2.visit_mut(&join(prefix, "gn2"), out);
        self.conv2.visit_mut(&join(prefix, "conv2"), out);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::{Array1, Array2, Array4};
    use rand::Rng;

    /// Central-difference check of dL/dx and dL/dparams for a scalar loss
    /// L = sum(y * probe).
    fn rel_err(a: f64, n: f64) -> f64 {
        let denom = a.abs().max(n.abs());
        if denom < 1e-10 {
            0.0
        } else {
            (a - n).abs() / denom
        }
    }

    fn rand4(rng: &mut crate::rng::Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(d, |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(1);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let x = rand4(&mut rng, (2, 3, 6, 6));
            let conv = Conv2d::<f64>::new(
                init::conv_kaiming(&mut rng, 4, 3, 3, 3),
                Array1::from_shape_fn(4, |_| rng.gen::<f64>() - 0.5),
                stride,
                pad,
            );
            let (y, cache) = conv.forward(&x.view());
            let probe = rand4(&mut rng, y.dim());
            let loss = |c: &Conv2d<f64>, xx: &Array4<f64>| {
                let (y, _) = c.forward(&xx.view());
                (&y * &probe).sum()
            };
            let mut grad = zeroed_like(&conv);
            let dx = conv.backward(&cache, &probe.view(), Some(&mut grad));

            let eps = 1e-5;
            // input grad, a few coordinates
            for &idx in &[(0, 0, 0, 0), (1, 2, 3, 4), (0, 1, 5, 5)] {
                let mut xp = x.clone();
                xp[idx] += eps;
                let mut xm = x.clone();
                xm[idx] -= eps;
                let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
                assert!(rel_err(dx[idx], num) < 1e-6, "dx at {idx:?}");
            }
            // weight grad
            for &idx in &[(0, 0, 0, 0), (3, 2, 2, 1)] {
                let mut cp = conv.clone();
                cp.w[idx] += eps;
                let mut cm = conv.clone();
                cm.w[idx] -= eps;
                let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
                assert!(rel_err(grad.w[idx], num) < 1e-6, "dw at {idx:?}");
            }
            let mut cp = conv.clone();
            cp.b[1] += eps;
            let mut cm = conv.clone();
            cm.b[1] -= eps;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!(rel_err(grad.b[1], num) < 1e-6);
        }
    }

    #[test]
    fn groupnorm_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(2);
        let x = rand4(&mut rng, (2, 4, 3, 3));
        let mut gn = GroupNorm::<f64>::new(4, 2);
        gn.gamma = Array1::from_shape_fn(4, |_| rng.gen::<f64>() + 0.5);
        gn.beta = Array1::from_shape_fn(4, |_| rng.gen::<f64>() - 0.5);
        let (y, cache) = gn.forward(&x.view());
        let probe = rand4(&mut rng, y.dim());
        let loss = |g: &GroupNorm<f64>, xx: &Array4<f64>| {
            let (y, _) = g.forward(&xx.view());
            (&y * &probe).sum()
        };
        let mut grad = zeroed_like(&gn);
        let dx = gn.backward(&cache, &probe.view(), Some(&mut grad));
        let eps = 1e-5;
        for &idx in &[(0, 0, 0, 0), (1, 3, 2, 2), (0, 2, 1, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&gn, &xp) - loss(&gn, &xm)) / (2.0 * eps);
            assert!(rel_err(dx[idx], num) < 1e-5, "dx at {idx:?}");
        }
        for ch in 0..4 {
            let mut gp = gn.clone();
            gp.gamma[ch] += eps;
            let mut gm = gn.clone();
            gm.gamma[ch] -= eps;
            let num = (loss(&gp, &x) - loss(&gm, &x)) / (2.0 * eps);
            assert!(rel_err(grad.gamma[ch], num) < 1e-5, "dgamma {ch}");
        }
    }

    #[test]
    fn linear_and_silu_gradients() {
        let mut rng = rng_from_seed(3);
        let x = Array2::from_shape_fn((3, 5), |_| rng.gen::<f64>() - 0.5);
        let lin = Linear::<f64>::new(
            init::linear_kaiming(&mut rng, 4, 5),
            Array1::from_shape_fn(4, |_| rng.gen::<f64>()),
        );
        let probe = Array2::from_shape_fn((3, 4), |_| rng.gen::<f64>() - 0.5);
        let loss = |l: &Linear<f64>, xx: &Array2<f64>| {
            let (y, _) = l.forward(&xx.view());
            let (z, _) = silu(&y.view());
            (&z * &probe).sum()
        };
        let (y, cache) = lin.forward(&x.view());
        let (_, silu_x) = silu(&y.view());
        let dz = silu_backward(&silu_x, &probe.view());
        let mut grad = zeroed_like(&lin);
        let dx = lin.backward(&cache, &dz.view(), Some(&mut grad));
        let eps = 1e-6;
        for &idx in &[(0, 0), (2, 4)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps);
            assert!(rel_err(dx[idx], num) < 1e-6);
        }
        for &idx in &[(0, 0), (3, 2)] {
            let mut lp = lin.clone();
            lp.w[idx] += eps;
            let mut lm = lin.clone();
            lm.w[idx] -= eps;
            let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert!(rel_err(grad.w[idx], num) < 1e-6);
        }
    }

    #[test]
    fn film_block_gradients() {
        let mut rng = rng_from_seed(4);
        let x = rand4(&mut rng, (2, 4, 4, 4));
        let emb = Array2::from_shape_fn((2, 6), |_| rng.gen::<f64>() - 0.5);
        let mut block = FilmBlock::<f64>::new(&mut rng, 4, 8, 6, 2);
        // conv2 is zero-initialized, which would hide most of the graph from
        // the gradient check; randomize it.
        block.conv2.w = init::conv_kaiming(&mut rng, 8, 8, 3, 3);
        let (y, cache) = block.forward(&x.view(), &emb.view());
        let probe = rand4(&mut rng, y.dim());
        let loss = |bl: &FilmBlock<f64>, xx: &Array4<f64>, ee: &Array2<f64>| {
            let (y, _) = bl.forward(&xx.view(), &ee.view());
            (&y * &probe).sum()
        };
        let mut grad = zeroed_like(&block);
        let (dx, demb) = block.backward(&cache, &probe.view(), Some(&mut grad));
        let eps = 1e-5;
        for &idx in &[(0, 0, 0, 0), (1, 3, 2, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&block, &xp, &emb) - loss(&block, &xm, &emb)) / (2.0 * eps);
            assert!(rel_err(dx[idx], num) < 1e-5, "dx {idx:?}");
        }
        for &idx in &[(0, 0), (1, 5)] {
            let mut ep = emb.clone();
            ep[idx] += eps;
            let mut em = emb.clone();
            em[idx] -= eps;
            let num = (loss(&block, &x, &ep) - loss(&block, &x, &em)) / (2.0 * eps);
            assert!(rel_err(demb[idx], num) < 1e-5, "demb {idx:?}");
        }
        // every named parameter, one coordinate each
        let names: Vec<String> = block.named().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let (base, nidx) = {
                let nv = block.named();
                let (_, view) = nv.iter().find(|(n, _)| *n == name).unwrap();
                (view.len(), 0.min(view.len() - 1))
            };
            assert!(base > 0);
            let analytic = {
                let gv = grad.named();
                let (_, view) = gv.iter().find(|(n, _)| *n == name).unwrap();
                view.as_slice().unwrap()[nidx]
            };
            let mut bp = block.clone();
            let mut bm = block.clone();
            for (n, mut v) in bp.named_mut() {
                if n == name {
                    v.as_slice_mut().unwrap()[nidx] += eps;
                }
            }
            for (n, mut v) in bm.named_mut() {
                if n == name {
                    v.as_slice_mut().unwrap()[nidx] -= eps;
                }
            }
            let num = (loss(&bp, &x, &emb) - loss(&bm, &x, &emb)) / (2.0 * eps);
            assert!(
                rel_err(analytic, num) < 1e-4,
                "param {name}: analytic={analytic} numeric={num}"
            );
        }
    }

    #[test]
    fn embedding_pool_mean_and_backward() {
        let mut rng = rng_from_seed(5);
        let table = init::embedding::<f64, _>(&mut rng, 6, 3);
        let emb = EmbeddingPool::new(table);
        let ids = vec![vec![0, 2], vec![], vec![5]];
        let y = emb.forward(&ids);
        assert_eq!(y.row(1).iter().filter(|v| **v != 0.0).count(), 0);
        let want = (&emb.table.row(0) + &emb.table.row(2)) / 2.0;
        assert!(y
            .row(0)
            .iter()
            .zip(want.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let dy = Array2::from_shape_fn((3, 3), |_| rng.gen::<f64>());
        let mut grad = zeroed_like(&emb);
        emb.backward(&ids, &dy.view(), Some(&mut grad));
        assert!((grad.table[(0, 1)] - dy[(0, 1)] / 2.0).abs() < 1e-12);
        assert!((grad.table[(5, 2)] - dy[(2, 2)]).abs() < 1e-12);
        assert_eq!(grad.table.row(1).sum(), 0.0);
    }

    #[test]
    fn upsample_roundtrip_shapes_and_backward() {
        let mut rng = rng_from_seed(6);
        let x = rand4(&mut rng, (1, 2, 3, 3));
        let y = upsample2(&x.view());
        assert_eq!(y.dim(), (1, 2, 6, 6));
        let dy = rand4(&mut rng, (1, 2, 6, 6));
        let dx = upsample2_backward(&dy.view());
        let s = dy[(0, 1, 2, 2)] + dy[(0, 1, 2, 3)] + dy[(0, 1, 3, 2)] + dy[(0, 1, 3, 3)];
        assert!((dx[(0, 1, 1, 1)] - s).abs() < 1e-12);
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut rng = rng_from_seed(7);
        let mut lin = Linear::<f64>::new(
            init::linear_kaiming(&mut rng, 1, 3),
            Array1::zeros(1),
        );
        let target = Array2::from_shape_vec((1, 3), vec![0.3, -0.7, 1.1]).unwrap();
        let mut opt = Adam::new(0.05);
        let mut m = zeroed_like(&lin);
        let mut v = zeroed_like(&lin);
        for _ in 0..400 {
            let mut grad = zeroed_like(&lin);
            grad.w = (&lin.w - &target) * 2.0;
            opt.step(&mut lin, &grad, &mut m, &mut v);
        }
        for (a, b) in lin.w.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}

