//! Finite-difference verification of the concept-vector gradient path.

use ndarray::{Array3, Array4, Axis};

use crate::diffusion::model::HOffset;
use crate::diffusion::{DenoiserModel, NoiseSchedule};
use crate::error::Result;
use crate::rng::stream;
use crate::scalar::{fl, Scalar};
use crate::world::PromptSpec;
use rand::Rng as _;

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub coord: (usize, usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    /// Coordinates whose relative error exceeds `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<&CoordCheck> {
        self.coords
            .iter()
            .filter(|c| c.rel_err > tolerance)
            .collect()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    // zero analytic and zero numeric agree by definition
    if denom < 1e-12 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// Compares the analytic gradient of the reconstruction loss w.r.t. the
/// concept vector against central finite differences on `n_coords` random
/// coordinates. Run this on a small model in f64.
#[allow(clippy::too_many_arguments)]
pub fn grad_check<F: Scalar>(
    model: &DenoiserModel<F>,
    schedule: &NoiseSchedule,
    image: &Array3<F>,
    prompt: &PromptSpec,
    c: &Array3<F>,
    t: usize,
    n_coords: usize,
    fd_step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let r = model.hyper.resolution;
    // fixed corruption so the loss is a deterministic function of c
    let mut eps_rng = stream(seed, "gradcheck-eps", 0);
    let mut eps = Array3::<F>::zeros((3, r, r));
    eps.mapv_inplace(|_| F::standard_normal(&mut eps_rng));
    let xt = schedule
        .add_noise(&image.clone().into_dyn(), t, &eps.clone().into_dyn())?
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let x = xt.insert_axis(Axis(0));
    let eps4 = eps.insert_axis(Axis(0));
    let cond_row = model.embed_prompt(prompt)?;
    let mut cond = ndarray::Array2::zeros((1, model.hyper.d_cond));
    cond.row_mut(0).assign(&cond_row);
    let ts = vec![t];
    let denom = (3 * r * r) as f64;

    let loss = |cv: &Array3<F>| -> Result<f64> {
        let pred = model.predict_noise(&x.view(), &ts, &cond, &HOffset::Shared(cv.view()))?;
        Ok(pred
            .iter()
            .zip(eps4.iter())
            .map(|(p, e)| (p.to_f64_lossy() - e.to_f64_lossy()).powi(2))
            .sum::<f64>()
            / denom)
    };

    // analytic gradient
    let (pred, cache) = model.forward(&x.view(), &ts, &cond, &HOffset::Shared(c.view()), None)?;
    let dout = ndarray::Zip::from(&pred)
        .and(&eps4)
        .map_collect(|&p, &e| fl::<F>(2.0) * (p - e) / fl::<F>(denom));
    let dh = model.backward_to_h(&cache, &dout.view());
    let dc = dh.index_axis(Axis(0), 0).to_owned();

    // random coordinates
    let dim = c.dim();
    let mut coord_rng = stream(seed, "gradcheck-coords", 0);
    let mut coords = Vec::with_capacity(n_coords);
    for _ in 0..n_coords {
        coords.push((
            coord_rng.gen_range(0..dim.0),
            coord_rng.gen_range(0..dim.1),
            coord_rng.gen_range(0..dim.2),
        ));
    }

    let h: F = fl(fd_step);
    let mut checks = Vec::with_capacity(n_coords);
    let mut max_err = 0.0f64;
    for coord in coords {
        let mut cp = c.clone();
        cp[coord] = cp[coord] + h;
        let mut cm = c.clone();
        cm[coord] = cm[coord] - h;
        let numeric = (loss(&cp)? - loss(&cm)?) / (2.0 * fd_step);
        let analytic = dc[coord].to_f64_lossy();
        let err = rel_err(analytic, numeric);
        max_err = max_err.max(err);
        checks.push(CoordCheck {
            coord,
            analytic,
            numeric,
            rel_err: err,
        });
    }
    Ok(GradCheckReport {
        max_rel_err: max_err,
        coords: checks,
    })
}
