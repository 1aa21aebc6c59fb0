//! Denoiser pretraining: noise-prediction regression over the dataset with
//! conditioning dropout so classifier-free guidance has a meaningful null
//! branch.

use ndarray::{Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::model::{DenoiserModel, HOffset};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{params::Params, zeroed_like, Adam};
use crate::rng::stream;
use crate::scalar::{fl, Scalar};
use crate::world::DatasetManifest;
use rand::Rng as _;

/// Fixed chunk count for in-batch gradient parallelism. Grad reduction is
/// ordered, so results do not depend on the thread count.
const PAR_CHUNKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the prompt with the null conditioning.
    pub cond_dropout: f64,
    pub holdout_frac: f64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 48,
            lr: 2e-3,
            cond_dropout: 0.1,
            holdout_frac: 0.1,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, training loss, learning rate)` rows.
    pub curve: Vec<(usize, f64, f64)>,
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
}

impl TrainReport {
    /// Loss-curve log: one `step loss lr` line per row.
    pub fn curve_text(&self) -> String {
        let mut s = String::from("# step loss lr\n");
        for (step, loss, lr) in &self.curve {
            s.push_str(&format!("{step} {loss:.6} {lr:.6}\n"));
        }
        s
    }
}

struct TrainSet<F: Scalar> {
    images: Vec<Array3<F>>,
    token_ids: Vec<Vec<usize>>,
}

fn load_set<F: Scalar>(model: &DenoiserModel<F>, dataset: &DatasetManifest) -> Result<TrainSet<F>> {
    let images = dataset.load_images::<F>()?;
    let token_ids = dataset
        .records
        .iter()
        .map(|r| model.vocab().ids(&r.prompt.positive))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainSet { images, token_ids })
}

fn holdout_loss<F: Scalar>(
    model: &DenoiserModel<F>,
    set: &TrainSet<F>,
    idx: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let r = model.hyper.resolution;
    let zero = model.zero_offset();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in idx.chunks(32) {
        let b = chunk.len();
        let mut x = Array4::<F>::zeros((b, 3, r, r));
        let mut eps = Array4::<F>::zeros((b, 3, r, r));
        let mut ts = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        for (bi, &i) in chunk.iter().enumerate() {
            let mut rng = stream(seed, "holdout-eps", i as u64);
            let t = 1 + (i * 7919) % schedule.t_max;
            ts.push(t);
            eps.index_axis_mut(Axis(0), bi)
                .mapv_inplace(|_| F::standard_normal(&mut rng));
            let xt = schedule.add_noise(
                &set.images[i].clone().into_dyn(),
                t,
                &eps.index_axis(Axis(0), bi).to_owned().into_dyn(),
            )?;
            x.index_axis_mut(Axis(0), bi)
                .assign(&xt.into_dimensionality::<ndarray::Ix3>().unwrap());
            ids.push(set.token_ids[i].clone());
        }
        let cond = model.embed.forward(&ids);
        let pred = model.predict_noise(&x.view(), &ts, &cond, &HOffset::Shared(zero.view()))?;
        let diff = &pred - &eps;
        total += diff.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
        count += diff.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Minimizes mean squared noise-prediction error. Deterministic for a fixed
/// `(dataset, config, seed)`: per-step batches, dropout, and noise come from
/// derived streams, and chunked gradients reduce in index order.
///
/// Emits a loss curve; fails with a training error if the loss goes
/// non-finite.
pub fn pretrain<F: Scalar>(
    model: &mut DenoiserModel<F>,
    dataset: &DatasetManifest,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if dataset.records.is_empty() {
        return Err(Error::Data("pretraining dataset is empty".into()));
    }
    if dataset.resolution != model.hyper.resolution {
        return Err(Error::Shape(format!(
            "dataset resolution {} does not match model resolution {}",
            dataset.resolution, model.hyper.resolution
        )));
    }
    let set = load_set(model, dataset)?;
    let n = set.images.len();

    // deterministic holdout split
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = stream(seed, "pretrain-split", 0);
    for i in (1..n).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_holdout = ((n as f64 * cfg.holdout_frac) as usize).clamp(usize::from(n > 1), n / 2);
    let (holdout_idx, train_idx) = order.split_at(n_holdout);

    let initial_holdout_loss = holdout_loss(model, &set, holdout_idx, schedule, seed)?;

    let r = model.hyper.resolution;
    let zero = model.zero_offset();
    let mut opt = Adam::<F>::new(cfg.lr);
    let mut m_buf = zeroed_like(model);
    let mut v_buf = zeroed_like(model);
    let mut curve = Vec::new();

    for step in 0..cfg.steps {
        let mut rng = stream(seed, "pretrain-step", step as u64);
        let b = cfg.batch;
        let mut x = Array4::<F>::zeros((b, 3, r, r));
        let mut eps = Array4::<F>::zeros((b, 3, r, r));
        let mut ts = Vec::with_capacity(b);
        let mut ids: Vec<Vec<usize>> = Vec::with_capacity(b);
        for bi in 0..b {
            let i = train_idx[rng.gen_range(0..train_idx.len())];
            let t = rng.gen_range(1..=schedule.t_max);
            ts.push(t);
            eps.index_axis_mut(Axis(0), bi)
                .mapv_inplace(|_| F::standard_normal(&mut rng));
            let dropped = rng.gen::<f64>() < cfg.cond_dropout;
            ids.push(if dropped {
                Vec::new()
            } else {
                set.token_ids[i].clone()
            });
            let xt = schedule.add_noise(
                &set.images[i].clone().into_dyn(),
                t,
                &eps.index_axis(Axis(0), bi).to_owned().into_dyn(),
            )?;
            x.index_axis_mut(Axis(0), bi)
                .assign(&xt.into_dimensionality::<ndarray::Ix3>().unwrap());
        }

        let chunk_size = b.div_ceil(PAR_CHUNKS);
        let ranges: Vec<(usize, usize)> = (0..b)
            .step_by(chunk_size)
            .map(|s| (s, (s + chunk_size).min(b)))
            .collect();
        let denom = fl::<F>((b * 3 * r * r) as f64);
        let results: Vec<Result<(DenoiserModel<F>, f64)>> = ranges
            .par_iter()
            .map(|&(s, e)| {
                let xe = x.slice(ndarray::s![s..e, .., .., ..]);
                let ee = eps.slice(ndarray::s![s..e, .., .., ..]);
                let tse = &ts[s..e];
                let idse = &ids[s..e];
                let cond = model.embed.forward(idse);
                let (pred, cache) =
                    model.forward(&xe, tse, &cond, &HOffset::Shared(zero.view()), None)?;
                let diff = &pred - &ee;
                let loss_sum = diff.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
                let dout = diff.mapv(|v| fl::<F>(2.0) * v / denom);
                let mut grads = zeroed_like(model);
                let dcond = model.backward_params(&cache, &dout.view(), &mut grads);
                model
                    .embed
                    .backward(idse, &dcond.view(), Some(&mut grads.embed));
                Ok((grads, loss_sum))
            })
            .collect();

        let mut grads = zeroed_like(model);
        let mut loss_sum = 0.0f64;
        for res in results {
            let (g, l) = res?;
            add_assign(&mut grads, &g);
            loss_sum += l;
        }
        let loss = loss_sum / (b * 3 * r * r) as f64;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "loss became non-finite at step {step} (loss = {loss}); \
                 lower the learning rate or check the dataset"
            )));
        }
        opt.step(model, &grads, &mut m_buf, &mut v_buf);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step, loss, cfg.lr));
        }
    }

    let final_holdout_loss = holdout_loss(model, &set, holdout_idx, schedule, seed)?;
    Ok(TrainReport {
        curve,
        initial_holdout_loss,
        final_holdout_loss,
    })
}

fn add_assign<F: Scalar, P: Params<F>>(dst: &mut P, src: &P) {
    let ds = dst.named_mut();
    let ss = src.named();
    for ((dn, mut d), (sn, s)) in ds.into_iter().zip(ss) {
        debug_assert_eq!(dn, sn);
        d += &s;
    }
}
