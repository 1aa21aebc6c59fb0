//! Dataset building and the line-delimited manifest format.
//!
//! Manifest layout: one header line carrying the schema hash, generator seed,
//! record count, resolution, and pixel scaling, then one record per line:
//!
//! ```text
//! #hspace-manifest v1 schema=<hex> seed=<u64> count=<n> resolution=<r> channels=rgb scale=minus1to1
//! img_00000.png<TAB>size=small color=red ... seed=<u64>|-<TAB>caption tokens<TAB>negative tokens|-
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::scalar::{fl, Scalar};
use crate::world::{caption, render_sample, sample_label};
use crate::world::{AttributeSchema, BiasSpec, PromptSpec, SampleLabel};
use rand::Rng as _;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_MAGIC: &str = "#hspace-manifest v1";

/// Stores a `(3, r, r)` tensor in [-1, 1] as an 8-bit RGB PNG.
pub fn save_image_png<F: Scalar>(path: &Path, img: &Array3<F>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = |ch: usize| {
                let v = img[(ch, i, j)].to_f64_lossy().clamp(-1.0, 1.0);
                ((v + 1.0) * 0.5 * 255.0).round() as u8
            };
            buf.put_pixel(j as u32, i as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))
}

/// Loads a PNG back into a `(3, r, r)` tensor in [-1, 1].
pub fn load_image_png<F: Scalar>(path: &Path) -> Result<Array3<F>> {
    let img = image::open(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<F>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch, y as usize, x as usize)] = fl(px.0[ch] as f64 / 255.0 * 2.0 - 1.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Path relative to the manifest directory.
    pub path: String,
    /// Ground-truth label; absent for model-generated images.
    pub label: Option<SampleLabel>,
    pub prompt: PromptSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub schema_hash: String,
    pub seed: u64,
    pub resolution: usize,
    pub records: Vec<ManifestRecord>,
    /// Directory the record paths are relative to (not serialized).
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn save(&self) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "{MANIFEST_MAGIC} schema={} seed={} count={} resolution={} channels=rgb scale=minus1to1\n",
            self.schema_hash,
            self.seed,
            self.records.len(),
            self.resolution
        ));
        for r in &self.records {
            let label = match &r.label {
                Some(l) => {
                    let mut parts: Vec<String> = l
                        .assignments
                        .iter()
                        .map(|(f, c)| format!("{f}={c}"))
                        .collect();
                    parts.push(format!("seed={}", l.seed));
                    parts.join(" ")
                }
                None => "-".to_string(),
            };
            let neg = if r.prompt.negative.is_empty() {
                "-".to_string()
            } else {
                r.prompt.negative.join(" ")
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.path,
                label,
                r.prompt.positive.join(" "),
                neg
            ));
        }
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))?;
        if !header.starts_with(MANIFEST_MAGIC) {
            return Err(Error::Format(format!(
                "bad manifest header, expected `{MANIFEST_MAGIC} ...`"
            )));
        }
        let mut schema_hash = None;
        let mut seed = None;
        let mut count = None;
        let mut resolution = None;
        for kv in header[MANIFEST_MAGIC.len()..].split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field `{kv}`")))?;
            match k {
                "schema" => schema_hash = Some(v.to_string()),
                "seed" => seed = Some(parse_u64(v, "seed")?),
                "count" => count = Some(parse_u64(v, "count")? as usize),
                "resolution" => resolution = Some(parse_u64(v, "resolution")? as usize),
                "channels" | "scale" => {}
                other => return Err(Error::Format(format!("unknown header field `{other}`"))),
            }
        }
        let schema_hash = schema_hash.ok_or_else(|| Error::Format("header misses schema".into()))?;
        let seed = seed.ok_or_else(|| Error::Format("header misses seed".into()))?;
        let count = count.ok_or_else(|| Error::Format("header misses count".into()))?;
        let resolution =
            resolution.ok_or_else(|| Error::Format("header misses resolution".into()))?;
        let mut records = Vec::with_capacity(count);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let path = fields
                .next()
                .ok_or_else(|| Error::Format("record misses path".into()))?
                .to_string();
            let label_str = fields
                .next()
                .ok_or_else(|| Error::Format("record misses label".into()))?;
            let pos = fields
                .next()
                .ok_or_else(|| Error::Format("record misses caption".into()))?;
            let neg = fields
                .next()
                .ok_or_else(|| Error::Format("record misses negative tokens".into()))?;
            let label = if label_str == "-" {
                None
            } else {
                let mut assignments = Vec::new();
                let mut lseed = None;
                for kv in label_str.split_whitespace() {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Format(format!("bad label field `{kv}`")))?;
                    if k == "seed" {
                        lseed = Some(parse_u64(v, "label seed")?);
                    } else {
                        assignments.push((k.to_string(), v.to_string()));
                    }
                }
                Some(SampleLabel {
                    assignments,
                    seed: lseed.ok_or_else(|| Error::Format("label misses seed".into()))?,
                })
            };
            let positive: Vec<String> = pos.split_whitespace().map(|s| s.to_string()).collect();
            let negative: Vec<String> = if neg == "-" {
                Vec::new()
            } else {
                neg.split_whitespace().map(|s| s.to_string()).collect()
            };
            records.push(ManifestRecord {
                path,
                label,
                prompt: PromptSpec::new(positive, negative)?,
            });
        }
        if records.len() != count {
            return Err(Error::Format(format!(
                "header count {} does not match {} records",
                count,
                records.len()
            )));
        }
        for r in &records {
            let p = dir.join(&r.path);
            if !p.exists() {
                return Err(Error::Data(format!(
                    "manifest references missing file {}",
                    p.display()
                )));
            }
        }
        Ok(Self {
            schema_hash,
            seed,
            resolution,
            records,
            root: dir.to_path_buf(),
        })
    }

    /// Loads every referenced image into memory.
    pub fn load_images<F: Scalar>(&self) -> Result<Vec<Array3<F>>> {
        self.records
            .iter()
            .map(|r| load_image_png(&self.image_path(r)))
            .collect()
    }

    /// Records whose label carries `family == category`.
    pub fn filter_by_attribute(&self, family: &str, category: &str) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| {
                r.label
                    .as_ref()
                    .map(|l| l.get(family) == Some(category))
                    .unwrap_or(false)
            })
            .collect()
    }
}

fn parse_u64(v: &str, what: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Format(format!("bad {what} `{v}`")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub resolution: usize,
    /// Probability that a family's word is dropped from the caption, drawn
    /// independently per family per record. Varied-specificity captions make
    /// information-deficient prompts in-distribution for the trained model.
    pub caption_omit_prob: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            caption_omit_prob: 0.3,
        }
    }
}

/// Renders `n` samples under the bias and persists them with a manifest.
/// Fully reproducible from `(schema, bias, cfg, seed)`; per-record work is
/// parallel with per-record derived seeds.
pub fn build_dataset(
    schema: &AttributeSchema,
    bias: &BiasSpec,
    cfg: &BuildConfig,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    schema.validate()?;
    bias.validate(schema)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let results: Vec<Result<ManifestRecord>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng: Rng = stream(seed, "world-record", i as u64);
            let label = sample_label(schema, bias, &mut rng);
            let mut omit = BTreeSet::new();
            for fam in &schema.families {
                if rng.gen::<f64>() < cfg.caption_omit_prob {
                    omit.insert(fam.name.clone());
                }
            }
            let prompt = caption(schema, &label, &omit)?;
            let img = render_sample::<f32>(schema, &label, cfg.resolution)?;
            let file = format!("img_{i:05}.png");
            save_image_png(&out_dir.join(&file), &img)?;
            Ok(ManifestRecord {
                path: file,
                label: Some(label),
                prompt,
            })
        })
        .collect();
    let records: Result<Vec<ManifestRecord>> = results.into_iter().collect();
    let manifest = DatasetManifest {
        schema_hash: schema.hash(),
        seed,
        resolution: cfg.resolution,
        records: records?,
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}
