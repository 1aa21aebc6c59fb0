//! Concept-vector optimization.
//!
//! The frozen model reconstructs concept-bearing images from noise under an
//! information-deficient prompt; the vector added to the h-space is the only
//! free parameter, so it is forced to encode the missing concept.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptProvenance, ConceptSpec, ConceptVector, DataSource};
use crate::diffusion::model::HOffset;
use crate::diffusion::{sample_batch_raw, DenoiserModel, GuidanceParams, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::{fl, Scalar};
use crate::world::dataset::{save_image_png, DatasetManifest, ManifestRecord};
use crate::world::PromptSpec;
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Std of the random initialization of the vector.
    pub init_sigma: f64,
    pub holdout_frac: f64,
    pub log_every: usize,
    /// Enforce that the learned vector beats the zero vector on held-out
    /// reconstruction loss. On by default; unit tests of the optimization
    /// mechanics on untrained models may disable it.
    pub check_improvement: bool,
}

impl Default for ConceptTrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            lr: 1e-2,
            batch: 8,
            init_sigma: 0.01,
            holdout_frac: 0.1,
            log_every: 200,
            check_improvement: true,
        }
    }
}

impl ConceptTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("concept training needs at least 1 step".into()));
        }
        if self.init_sigma < 0.0 {
            return Err(Error::Config("init sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Samples `spec.n` images from the frozen model conditioned on the positive
/// prompt (honoring its negative tokens through guided prediction) and
/// persists them paired with the information-deficient prompt.
pub fn generate_concept_dataset<F: Scalar>(
    model: &DenoiserModel<F>,
    schedule: &NoiseSchedule,
    spec: &ConceptSpec,
    g: &GuidanceParams,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let n = spec.n;
    let zero = model.zero_offset();
    let mut offsets = Array4::<F>::zeros((n, zero.dim().0, zero.dim().1, zero.dim().2));
    let _ = &mut offsets; // all-zero offsets: plain generation
    let rngs: Vec<_> = (0..n)
        .map(|i| stream(seed, "concept-data-image", i as u64))
        .collect();
    let images = sample_batch_raw(model, schedule, &spec.y_plus, g, &offsets, rngs)?;
    let mut records = Vec::with_capacity(n);
    for (i, img) in images.iter().enumerate() {
        let file = format!("img_{i:05}.png");
        save_image_png(&out_dir.join(&file), img)?;
        records.push(ManifestRecord {
            path: file,
            label: None,
            prompt: spec.y_minus.clone(),
        });
    }
    let manifest = DatasetManifest {
        schema_hash: format!("model:{}", model.arch_hash()),
        seed,
        resolution: model.hyper.resolution,
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

struct ConceptData<F: Scalar> {
    images: Vec<Array3<F>>,
    conds: Vec<Vec<usize>>,
}

fn heldout_reconstruction_loss<F: Scalar>(
    model: &DenoiserModel<F>,
    data: &ConceptData<F>,
    idx: &[usize],
    schedule: &NoiseSchedule,
    offset: &Array3<F>,
    seed: u64,
) -> Result<f64> {
    let r = model.hyper.resolution;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(16) {
        let b = chunk.len();
        let mut x = Array4::<F>::zeros((b, 3, r, r));
        let mut eps = Array4::<F>::zeros((b, 3, r, r));
        let mut ts = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        for (bi, &i) in chunk.iter().enumerate() {
            let mut rng = stream(seed, "concept-holdout-eps", i as u64);
            let t = 1 + (i * 6151) % schedule.t_max;
            ts.push(t);
            eps.index_axis_mut(Axis(0), bi)
                .mapv_inplace(|_| F::standard_normal(&mut rng));
            let xt = schedule.add_noise(
                &data.images[i].clone().into_dyn(),
                t,
                &eps.index_axis(Axis(0), bi).to_owned().into_dyn(),
            )?;
            x.index_axis_mut(Axis(0), bi)
                .assign(&xt.into_dimensionality::<ndarray::Ix3>().unwrap());
            ids.push(data.conds[i].clone());
        }
        let cond = model.embed.forward(&ids);
        let pred = model.predict_noise(&x.view(), &ts, &cond, &HOffset::Shared(offset.view()))?;
        total += pred
            .iter()
            .zip(eps.iter())
            .map(|(p, e)| (p.to_f64_lossy() - e.to_f64_lossy()).powi(2))
            .sum::<f64>();
        count += pred.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Optimizes one h-space vector by reconstruction under the deficient
/// prompts. The model is frozen (asserted via its parameter hash); one vector
/// is shared across all timesteps, drawn uniformly.
pub fn learn_concept<F: Scalar>(
    model: &DenoiserModel<F>,
    data: &DatasetManifest,
    spec: &ConceptSpec,
    cfg: &ConceptTrainConfig,
    seed: u64,
) -> Result<ConceptVector<F>> {
    learn_concept_with_schedule(model, data, spec, cfg, &NoiseSchedule::default_schedule(), seed)
}

pub fn learn_concept_with_schedule<F: Scalar>(
    model: &DenoiserModel<F>,
    data: &DatasetManifest,
    spec: &ConceptSpec,
    cfg: &ConceptTrainConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ConceptVector<F>> {
    if data.records.is_empty() {
        return Err(Error::Data("concept dataset is empty".into()));
    }
    if cfg.init_sigma < 0.0 {
        return Err(Error::Config("init sigma must be non-negative".into()));
    }
    let param_hash_before = model.param_hash();

    let images = data.load_images::<F>()?;
    let conds = data
        .records
        .iter()
        .map(|r| model.vocab().ids(&r.prompt.positive))
        .collect::<Result<Vec<_>>>()?;
    let set = ConceptData { images, conds };
    let n = set.images.len();

    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = stream(seed, "concept-split", 0);
    for i in (1..n).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_holdout = ((n as f64 * cfg.holdout_frac) as usize).clamp(usize::from(n > 1), n / 2 + 1);
    let (holdout_idx, train_idx) = order.split_at(n_holdout.min(n.saturating_sub(1)));
    let train_idx = if train_idx.is_empty() { &order[..] } else { train_idx };

    // initialization: Normal(0, sigma)
    let h_shape = model.h_shape();
    let mut init_rng = stream(seed, "concept-init", 0);
    let mut c = Array3::<F>::zeros(h_shape);
    if cfg.init_sigma > 0.0 {
        let sigma: F = fl(cfg.init_sigma);
        c.mapv_inplace(|_| F::standard_normal(&mut init_rng) * sigma);
    }

    // Adam state over the single tensor
    let mut m = Array3::<F>::zeros(h_shape);
    let mut v = Array3::<F>::zeros(h_shape);
    let (b1, b2, eps_adam): (F, F, F) = (fl(0.9), fl(0.999), fl(1e-8));
    let lr: F = fl(cfg.lr);

    let r = model.hyper.resolution;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let mut rng = stream(seed, "concept-step", step as u64);
        let b = cfg.batch.min(train_idx.len()).max(1);
        let mut x = Array4::<F>::zeros((b, 3, r, r));
        let mut eps = Array4::<F>::zeros((b, 3, r, r));
        let mut ts = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        for bi in 0..b {
            let i = train_idx[rng.gen_range(0..train_idx.len())];
            let t = rng.gen_range(1..=schedule.t_max);
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
            ids.push(set.conds[i].clone());
        }
        let cond = model.embed.forward(&ids);
        // unguided conditional prediction: guidance is inference-time only
        let (pred, cache) =
            model.forward(&x.view(), &ts, &cond, &HOffset::Shared(c.view()), None)?;
        let denom = fl::<F>((b * 3 * r * r) as f64);
        let diff = &pred - &eps;
        let loss = diff.iter().map(|d| d.to_f64_lossy().powi(2)).sum::<f64>()
            / (b * 3 * r * r) as f64;
        if !loss.is_finite() {
            return Err(Error::Optimization(format!(
                "concept `{}`: loss became non-finite at step {step}",
                spec.name
            )));
        }
        final_loss = loss;
        let dout = diff.mapv(|d| fl::<F>(2.0) * d / denom);
        let dh = model.backward_to_h(&cache, &dout.view());
        let dc = dh.sum_axis(Axis(0));
        // Adam update
        let t_adam = (step + 1) as i32;
        let bc1 = F::one() - b1.powi(t_adam);
        let bc2 = F::one() - b2.powi(t_adam);
        ndarray::Zip::from(&mut c)
            .and(&dc)
            .and(&mut m)
            .and(&mut v)
            .for_each(|c, &g, m, v| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *c = *c - lr * mhat / (vhat.sqrt() + eps_adam);
            });
    }

    if model.param_hash() != param_hash_before {
        return Err(Error::Provenance(
            "model parameters changed during concept learning".into(),
        ));
    }

    let zero = model.zero_offset();
    let heldout_zero = heldout_reconstruction_loss(model, &set, holdout_idx, schedule, &zero, seed)?;
    let heldout_learned = heldout_reconstruction_loss(model, &set, holdout_idx, schedule, &c, seed)?;
    if cfg.check_improvement && cfg.steps > 0 && heldout_learned >= heldout_zero {
        return Err(Error::Optimization(format!(
            "concept `{}`: held-out loss with the learned vector ({heldout_learned:.6}) \
             is not below the zero-vector loss ({heldout_zero:.6})",
            spec.name
        )));
    }

    Ok(ConceptVector {
        name: spec.name.clone(),
        family: spec.family.clone(),
        tensor: c,
        provenance: ConceptProvenance {
            spec: Some(spec.clone()),
            arch_hash: model.arch_hash(),
            param_hash: Some(param_hash_before),
            steps: cfg.steps,
            final_loss,
            heldout_loss_zero: heldout_zero,
            heldout_loss_learned: heldout_learned,
            seed,
            constituents: vec![],
        },
    })
}

/// The negative-prompt route to a suppression direction: data is generated
/// under `(base, negative_token)`, the deficient prompt is `base` alone, and
/// the learned vector is named `anti-<token>`.
pub fn learn_anti_concept<F: Scalar>(
    model: &DenoiserModel<F>,
    schedule: &NoiseSchedule,
    base_prompt: &PromptSpec,
    negative_token: &str,
    family: Option<String>,
    n: usize,
    g: &GuidanceParams,
    cfg: &ConceptTrainConfig,
    seed: u64,
    data_dir: &Path,
) -> Result<ConceptVector<F>> {
    let spec = ConceptSpec {
        name: format!("anti-{negative_token}"),
        family,
        y_plus: PromptSpec::new(base_prompt.positive.clone(), vec![negative_token.to_string()])?,
        y_minus: PromptSpec::new(base_prompt.positive.clone(), vec![])?,
        source: DataSource::ModelGenerated,
        n,
    };
    let data = generate_concept_dataset(model, schedule, &spec, g, seed, data_dir)?;
    learn_concept_with_schedule(model, &data, &spec, cfg, schedule, seed)
}

/// Learning from an externally labeled dataset: every record must carry the
/// positive attribute; optimization is unchanged.
pub fn learn_from_labeled_dataset<F: Scalar>(
    model: &DenoiserModel<F>,
    manifest: &DatasetManifest,
    family: &str,
    category: &str,
    y_minus: &PromptSpec,
    cfg: &ConceptTrainConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ConceptVector<F>> {
    if manifest.records.is_empty() {
        return Err(Error::Data("labeled dataset is empty".into()));
    }
    for r in &manifest.records {
        let ok = r
            .label
            .as_ref()
            .map(|l| l.get(family) == Some(category))
            .unwrap_or(false);
        if !ok {
            return Err(Error::Data(format!(
                "record `{}` does not carry {family}={category}; \
                 filter the manifest to the positive attribute first",
                r.path
            )));
        }
    }
    // rebind every record to the deficient prompt
    let rebound = DatasetManifest {
        schema_hash: manifest.schema_hash.clone(),
        seed: manifest.seed,
        resolution: manifest.resolution,
        records: manifest
            .records
            .iter()
            .map(|r| ManifestRecord {
                path: r.path.clone(),
                label: r.label.clone(),
                prompt: y_minus.clone(),
            })
            .collect(),
        root: manifest.root.clone(),
    };
    let spec = ConceptSpec {
        name: category.to_string(),
        family: Some(family.to_string()),
        y_plus: PromptSpec::new(vec!["a".into(), category.into()], vec![])?,
        y_minus: y_minus.clone(),
        source: DataSource::ExternalLabeled,
        n: rebound.records.len(),
    };
    learn_concept_with_schedule(model, &rebound, &spec, cfg, schedule, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::tiny_hyper;
    use crate::world::{build_dataset, AttributeSchema, BiasSpec, BuildConfig, Vocabulary};

    fn tiny_setup(
        dir: &std::path::Path,
    ) -> (DenoiserModel<f32>, DatasetManifest, NoiseSchedule, AttributeSchema) {
        let schema = AttributeSchema::default_world();
        let vocab = Vocabulary::from_schema(&schema);
        let mut hyper = tiny_hyper(&vocab);
        hyper.resolution = 16;
        let mut model = DenoiserModel::<f32>::new(hyper, 7).unwrap();
        // untrained models have a zero-initialized output conv, which blocks
        // all gradient flow to the concept vector; randomize it
        let mut rng = crate::rng::rng_from_seed(70);
        model.conv_out.w =
            crate::nn::init::conv_kaiming(&mut rng, 3, 2 * model.hyper.stem, 3, 3);
        let cfg = BuildConfig {
            resolution: 16,
            caption_omit_prob: 0.3,
        };
        let manifest = build_dataset(&schema, &BiasSpec::uniform(), &cfg, 16, 5, dir).unwrap();
        let schedule = NoiseSchedule::linear(8, 1e-3, 0.1).unwrap();
        (model, manifest, schedule, schema)
    }

    fn red_spec(n: usize) -> ConceptSpec {
        ConceptSpec {
            name: "red".into(),
            family: Some("color".into()),
            y_plus: PromptSpec::positive_only(&["a", "red", "circle"]),
            y_minus: PromptSpec::positive_only(&["a", "circle"]),
            source: DataSource::Renderer,
            n,
        }
    }

    #[test]
    fn zero_steps_zero_sigma_returns_zero_vector() {
        let dir = tempfile::tempdir().unwrap();
        let (model, manifest, schedule, _) = tiny_setup(dir.path());
        let cfg = ConceptTrainConfig {
            steps: 0,
            init_sigma: 0.0,
            ..Default::default()
        };
        let v =
            learn_concept_with_schedule(&model, &manifest, &red_spec(16), &cfg, &schedule, 1)
                .unwrap();
        assert!(v.tensor.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn learning_is_deterministic_and_leaves_model_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let (model, manifest, schedule, _) = tiny_setup(dir.path());
        let hash_before = model.param_hash();
        let cfg = ConceptTrainConfig {
            steps: 12,
            batch: 4,
            check_improvement: false,
            ..Default::default()
        };
        let a = learn_concept_with_schedule(&model, &manifest, &red_spec(16), &cfg, &schedule, 9)
            .unwrap();
        let b = learn_concept_with_schedule(&model, &manifest, &red_spec(16), &cfg, &schedule, 9)
            .unwrap();
        assert_eq!(a.tensor, b.tensor);
        assert_eq!(model.param_hash(), hash_before);
        assert_eq!(a.provenance.arch_hash, model.arch_hash());
    }

    #[test]
    fn labeled_dataset_requires_uniform_attribute() {
        let dir = tempfile::tempdir().unwrap();
        let (model, manifest, schedule, _) = tiny_setup(dir.path());
        let y_minus = PromptSpec::positive_only(&["a", "circle"]);
        let cfg = ConceptTrainConfig {
            steps: 2,
            batch: 2,
            check_improvement: false,
            ..Default::default()
        };
        // mixed manifest is rejected
        let r = learn_from_labeled_dataset(
            &model, &manifest, "color", "red", &y_minus, &cfg, &schedule, 1,
        );
        assert!(matches!(r, Err(Error::Data(_))));
        // filtered manifest passes the precondition
        let red_records: Vec<_> = manifest
            .filter_by_attribute("color", "red")
            .into_iter()
            .cloned()
            .collect();
        if !red_records.is_empty() {
            let filtered = DatasetManifest {
                schema_hash: manifest.schema_hash.clone(),
                seed: manifest.seed,
                resolution: manifest.resolution,
                records: red_records,
                root: manifest.root.clone(),
            };
            // may or may not beat the zero loss on a random tiny model; only
            // the precondition path is under test here
            let _ = learn_from_labeled_dataset(
                &model, &filtered, "color", "red", &y_minus, &cfg, &schedule, 1,
            );
        }
    }

    #[test]
    fn generated_dataset_has_deficient_prompts() {
        let dir = tempfile::tempdir().unwrap();
        let (model, _, schedule, _) = tiny_setup(dir.path());
        let out = dir.path().join("gen");
        let spec = ConceptSpec { n: 3, ..red_spec(3) };
        let g = GuidanceParams::default();
        let m = generate_concept_dataset(&model, &schedule, &spec, &g, 4, &out).unwrap();
        assert_eq!(m.records.len(), 3);
        for r in &m.records {
            assert_eq!(r.prompt, spec.y_minus);
            assert!(r.label.is_none());
        }
        // zero samples rejected
        let bad = ConceptSpec { n: 0, ..red_spec(0) };
        assert!(generate_concept_dataset(&model, &schedule, &bad, &g, 4, &out).is_err());
    }
}
