//! Ancestral DDPM sampling with per-image RNG streams.
//!
//! Reverse update (epsilon parameterization, posterior mean):
//! `x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
//!            + sqrt(beta_t) * z`, with no injected noise at t = 1.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rayon::prelude::*;

use crate::diffusion::guidance::{guided_noise, GuidanceParams};
use crate::diffusion::model::{DenoiserModel, HOffset};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{fl, Scalar};
use crate::world::PromptSpec;

/// Images per parallel chunk. Fixed (not core-count dependent) so batched
/// outputs do not depend on the machine's parallelism.
pub const SAMPLE_CHUNK: usize = 10;

/// One reverse-diffusion step on a single image. Draws injection noise from
/// `rng` for every step except the terminal one.
pub fn ddpm_step<F: Scalar>(
    x_t: &Array3<F>,
    eps_hat: &Array3<F>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Array3<F>> {
    if t == 0 || t > schedule.t_max {
        return Err(Error::Config(format!(
            "step {t} out of range 1..={}",
            schedule.t_max
        )));
    }
    if x_t.dim() != eps_hat.dim() {
        return Err(Error::Shape("noise estimate shape mismatch".into()));
    }
    let beta = schedule.beta_at(t);
    let alpha = schedule.alpha_at(t);
    let ab = schedule.alpha_bar_at(t);
    let coef: F = fl(beta / (1.0 - ab).sqrt());
    let inv_sqrt_alpha: F = fl(1.0 / alpha.sqrt());
    let mut out = x_t.clone();
    ndarray::Zip::from(&mut out).and(eps_hat).for_each(|o, &e| {
        *o = (*o - coef * e) * inv_sqrt_alpha;
    });
    if t > 1 {
        let sigma: F = fl(beta.sqrt());
        out.mapv_inplace(|v| v + sigma * F::standard_normal(rng));
    }
    Ok(out)
}

/// Raw batched sampling loop. Each image owns an RNG stream (already advanced
/// past any policy draws); its trajectory depends only on that stream, so
/// outputs are identical regardless of chunking or thread count.
///
/// `offsets` is per-image, `(n, c_h, h_h, w_h)`; the same offset is applied at
/// every decoding timestep of its image.
pub fn sample_batch_raw<F: Scalar>(
    model: &DenoiserModel<F>,
    schedule: &NoiseSchedule,
    prompt: &PromptSpec,
    g: &GuidanceParams,
    offsets: &Array4<F>,
    rngs: Vec<Rng>,
) -> Result<Vec<Array3<F>>> {
    let n = rngs.len();
    if offsets.dim().0 != n {
        return Err(Error::Shape(format!(
            "{} offsets for {} images",
            offsets.dim().0,
            n
        )));
    }
    let cond_pos_1 = model.embed_prompt(prompt)?;
    let cond_neg_1 = if prompt.negative.is_empty() {
        model.null_cond()
    } else {
        model.embed_tokens(&prompt.negative)?
    };
    // An empty negative prompt disables the negative term.
    let g_eff = if prompt.negative.is_empty() {
        GuidanceParams {
            lambda1: g.lambda1,
            lambda2: 0.0,
        }
    } else {
        *g
    };

    let jobs: Vec<(usize, Vec<Rng>)> = rngs
        .into_iter()
        .enumerate()
        .collect::<Vec<_>>()
        .chunks(SAMPLE_CHUNK)
        .map(|c| (c[0].0, c.iter().map(|(_, r)| r.clone()).collect()))
        .collect();

    let chunk_results: Vec<Result<Vec<Array3<F>>>> = jobs
        .into_par_iter()
        .map(|(start, mut chunk_rngs)| {
            let b = chunk_rngs.len();
            let off = offsets
                .slice(ndarray::s![start..start + b, .., .., ..])
                .to_owned();
            sample_chunk(model, schedule, &cond_pos_1, &cond_neg_1, &g_eff, &off, &mut chunk_rngs)
        })
        .collect();

    let mut out = Vec::with_capacity(n);
    for r in chunk_results {
        out.extend(r?);
    }
    Ok(out)
}

fn broadcast_rows<F: Scalar>(v: &Array1<F>, b: usize) -> Array2<F> {
    let mut m = Array2::zeros((b, v.len()));
    for mut row in m.rows_mut() {
        row.assign(v);
    }
    m
}

fn sample_chunk<F: Scalar>(
    model: &DenoiserModel<F>,
    schedule: &NoiseSchedule,
    cond_pos_1: &Array1<F>,
    cond_neg_1: &Array1<F>,
    g: &GuidanceParams,
    offsets: &Array4<F>,
    rngs: &mut [Rng],
) -> Result<Vec<Array3<F>>> {
    let b = rngs.len();
    let r = model.hyper.resolution;
    let cond_pos = broadcast_rows(cond_pos_1, b);
    let cond_neg = broadcast_rows(cond_neg_1, b);
    let cond_null = Array2::zeros((b, model.hyper.d_cond));

    let mut x = Array4::<F>::zeros((b, 3, r, r));
    for (bi, rng) in rngs.iter_mut().enumerate() {
        x.index_axis_mut(Axis(0), bi)
            .mapv_inplace(|_| F::standard_normal(rng));
    }
    for t in (1..=schedule.t_max).rev() {
        let ts = vec![t; b];
        let eps_hat = guided_noise(
            model,
            &x.view(),
            &ts,
            &cond_pos,
            &cond_neg,
            &cond_null,
            g,
            &HOffset::PerSample(offsets.view()),
        )?;
        // same update and per-element noise-draw order as `ddpm_step`
        let beta = schedule.beta_at(t);
        let ab = schedule.alpha_bar_at(t);
        let coef: F = fl(beta / (1.0 - ab).sqrt());
        let inv_sqrt_alpha: F = fl(1.0 / schedule.alpha_at(t).sqrt());
        let sigma: F = fl(beta.sqrt());
        for (bi, rng) in rngs.iter_mut().enumerate() {
            let mut xb = x.index_axis_mut(Axis(0), bi);
            let eb = eps_hat.index_axis(Axis(0), bi);
            if t > 1 {
                ndarray::Zip::from(&mut xb).and(&eb).for_each(|o, &e| {
                    *o = (*o - coef * e) * inv_sqrt_alpha + sigma * F::standard_normal(rng);
                });
            } else {
                ndarray::Zip::from(&mut xb).and(&eb).for_each(|o, &e| {
                    *o = (*o - coef * e) * inv_sqrt_alpha;
                });
            }
        }
    }
    let one = F::one();
    Ok((0..b)
        .map(|bi| {
            x.index_axis(Axis(0), bi)
                .mapv(|v| v.max(-one).min(one))
        })
        .collect())
}

/// Two synchronized trajectories sharing the initial state and every injected
/// noise draw: one plain, one with the concept offset, state-averaged at each
/// step. Returns `(averaged, baseline, with_offset)` final images.
pub fn sample_pair_averaged<F: Scalar>(
    model: &DenoiserModel<F>,
    schedule: &NoiseSchedule,
    prompt: &PromptSpec,
    g: &GuidanceParams,
    offset: &Array3<F>,
    mut rng: Rng,
) -> Result<(Array3<F>, Array3<F>, Array3<F>)> {
    let r = model.hyper.resolution;
    let cond_pos = broadcast_rows(&model.embed_prompt(prompt)?, 1);
    let cond_neg = if prompt.negative.is_empty() {
        Array2::zeros((1, model.hyper.d_cond))
    } else {
        broadcast_rows(&model.embed_tokens(&prompt.negative)?, 1)
    };
    let g_eff = if prompt.negative.is_empty() {
        GuidanceParams {
            lambda1: g.lambda1,
            lambda2: 0.0,
        }
    } else {
        *g
    };
    let cond_null = Array2::zeros((1, model.hyper.d_cond));
    let zero = model.zero_offset();

    let mut x_base = Array4::<F>::zeros((1, 3, r, r));
    x_base
        .index_axis_mut(Axis(0), 0)
        .mapv_inplace(|_| F::standard_normal(&mut rng));
    let mut x_conc = x_base.clone();
    let mut avg = Array3::<F>::zeros((3, r, r));

    for t in (1..=schedule.t_max).rev() {
        let ts = vec![t];
        let eps_base = guided_noise(
            model,
            &x_base.view(),
            &ts,
            &cond_pos,
            &cond_neg,
            &cond_null,
            &g_eff,
            &HOffset::Shared(zero.view()),
        )?;
        let eps_conc = guided_noise(
            model,
            &x_conc.view(),
            &ts,
            &cond_pos,
            &cond_neg,
            &cond_null,
            &g_eff,
            &HOffset::Shared(offset.view()),
        )?;
        // shared injection noise: draw once, reuse for both trajectories
        let z: Option<Array3<F>> = if t > 1 {
            let mut z = Array3::<F>::zeros((3, r, r));
            z.mapv_inplace(|_| F::standard_normal(&mut rng));
            Some(z)
        } else {
            None
        };
        let step = |x: &Array4<F>, eps: &Array4<F>| -> Array3<F> {
            let beta = schedule.beta_at(t);
            let ab = schedule.alpha_bar_at(t);
            let coef: F = fl(beta / (1.0 - ab).sqrt());
            let inv_sqrt_alpha: F = fl(1.0 / schedule.alpha_at(t).sqrt());
            let mut out = x.index_axis(Axis(0), 0).to_owned();
            ndarray::Zip::from(&mut out)
                .and(&eps.index_axis(Axis(0), 0))
                .for_each(|o, &e| {
                    *o = (*o - coef * e) * inv_sqrt_alpha;
                });
            if let Some(z) = &z {
                let sigma: F = fl(beta.sqrt());
                ndarray::Zip::from(&mut out).and(z).for_each(|o, &n| {
                    *o = *o + sigma * n;
                });
            }
            out
        };
        let nb = step(&x_base, &eps_base);
        let nc = step(&x_conc, &eps_conc);
        avg = (&nb + &nc) * fl::<F>(0.5);
        x_base.index_axis_mut(Axis(0), 0).assign(&nb);
        x_conc.index_axis_mut(Axis(0), 0).assign(&nc);
    }
    let one = F::one();
    let clamp = |a: Array3<F>| a.mapv(|v| v.max(-one).min(one));
    Ok((
        clamp(avg),
        clamp(x_base.index_axis(Axis(0), 0).to_owned()),
        clamp(x_conc.index_axis(Axis(0), 0).to_owned()),
    ))
}
