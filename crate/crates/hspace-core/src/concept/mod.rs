//! Self-discovered concept vectors: types, provenance, and the on-disk
//! format.
//!
//! A concept vector is a single h-space direction, learned once per concept
//! and shared across all timesteps. File layout: one JSON header line, then
//! the raw little-endian f32 payload (`shape` product x 4 bytes).

pub mod gradcheck;
pub mod learn;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::diffusion::DenoiserModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::world::PromptSpec;

pub use gradcheck::{grad_check, GradCheckReport};
pub use learn::{
    generate_concept_dataset, learn_anti_concept, learn_concept, learn_from_labeled_dataset,
    ConceptTrainConfig,
};

/// Where the positive images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Sampled from the frozen model under the positive prompt.
    ModelGenerated,
    /// Rendered ground truth.
    Renderer,
    /// Externally provided labeled images.
    ExternalLabeled,
}

/// Recipe for one concept: the prompt pair and the data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    /// Family tag for fairness grouping (e.g. `color`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    /// Prompt expressing the concept (may carry negative tokens).
    pub y_plus: PromptSpec,
    /// Information-deficient prompt: the concept word is absent.
    pub y_minus: PromptSpec,
    pub source: DataSource,
    /// Number of training images.
    pub n: usize,
}

impl ConceptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config(format!(
                "concept `{}`: sample count must be at least 1",
                self.name
            )));
        }
        if self.y_minus.positive.is_empty() {
            return Err(Error::Config(format!(
                "concept `{}`: y_minus must be non-empty",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptProvenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ConceptSpec>,
    /// Architecture hash of the model the vector was trained against.
    pub arch_hash: String,
    /// Parameter hash of that checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_hash: Option<String>,
    pub steps: usize,
    pub final_loss: f64,
    /// Held-out reconstruction loss with the zero vector / the learned one.
    pub heldout_loss_zero: f64,
    pub heldout_loss_learned: f64,
    pub seed: u64,
    /// Names of constituent vectors, for composed vectors.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constituents: Vec<String>,
}

/// A learned h-space direction with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVector<F: Scalar> {
    pub name: String,
    pub family: Option<String>,
    pub tensor: Array3<F>,
    pub provenance: ConceptProvenance,
}

impl<F: Scalar> ConceptVector<F> {
    /// Checks the vector against a model before it may be applied.
    pub fn check_compatible(&self, model: &DenoiserModel<F>) -> Result<()> {
        if self.provenance.arch_hash != model.arch_hash() {
            return Err(Error::Provenance(format!(
                "concept `{}` was trained against architecture {}, model has {}",
                self.name,
                self.provenance.arch_hash,
                model.arch_hash()
            )));
        }
        if self.tensor.dim() != model.h_shape() {
            return Err(Error::Provenance(format!(
                "concept `{}` shape {:?} does not match model h-space {:?}",
                self.name,
                self.tensor.dim(),
                model.h_shape()
            )));
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensor
            .iter()
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

const CONCEPT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ConceptHeader {
    format_version: u32,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    family: Option<String>,
    shape: Vec<usize>,
    provenance: ConceptProvenance,
}

pub fn save_concept<F: Scalar>(vector: &ConceptVector<F>, path: &Path) -> Result<()> {
    let header = ConceptHeader {
        format_version: CONCEPT_FORMAT_VERSION,
        name: vector.name.clone(),
        family: vector.family.clone(),
        shape: vector.tensor.shape().to_vec(),
        provenance: vector.provenance.clone(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    out.push(b'\n');
    for v in vector.tensor.iter() {
        out.write_all(&v.to_f32_lossy().to_le_bytes()).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_concept<F: Scalar>(path: &Path) -> Result<ConceptVector<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("concept file has no header line".into()))?;
    let header: ConceptHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad concept header: {e}")))?;
    if header.format_version != CONCEPT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "field format_version: expected {CONCEPT_FORMAT_VERSION}, found {}",
            header.format_version
        )));
    }
    if header.shape.len() != 3 {
        return Err(Error::Format(format!(
            "field shape: expected 3 dims, found {:?}",
            header.shape
        )));
    }
    let n: usize = header.shape.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() != n * 4 {
        return Err(Error::Format(format!(
            "field payload: expected {} bytes for shape {:?}, found {}",
            n * 4,
            header.shape,
            payload.len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for k in 0..n {
        let f = f32::from_le_bytes(payload[k * 4..k * 4 + 4].try_into().unwrap());
        values.push(F::from_f32_exact(f));
    }
    let tensor =
        Array3::from_shape_vec((header.shape[0], header.shape[1], header.shape[2]), values)
            .unwrap();
    Ok(ConceptVector {
        name: header.name,
        family: header.family,
        tensor,
        provenance: header.provenance,
    })
}
