//! Checkpoint file format.
//!
//! Layout: `HSPCKPT1\n`, a little-endian u32 header length, a JSON header
//! (format version, architecture hash, hyperparameters, named sections), then
//! the flat little-endian f32 parameter payload. Loading reconstructs the
//! architecture from the header and verifies the hash and payload length.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::model::{DenoiserHyper, DenoiserModel};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::scalar::Scalar;

const MAGIC: &[u8] = b"HSPCKPT1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SectionMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    arch_hash: String,
    hyper: DenoiserHyper,
    sections: Vec<SectionMeta>,
}

pub fn save_checkpoint<F: Scalar>(model: &DenoiserModel<F>, path: &Path) -> Result<()> {
    let mut sections = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, view) in model.named() {
        let len = view.len();
        sections.push(SectionMeta {
            name,
            shape: view.shape().to_vec(),
            offset,
            len,
        });
        for v in view.iter() {
            payload.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
        offset += len;
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        arch_hash: model.arch_hash(),
        hyper: model.hyper.clone(),
        sections,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<DenoiserModel<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let hlen =
        u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().unwrap()) as usize;
    let hstart = MAGIC.len() + 4;
    if bytes.len() < hstart + hlen {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[hstart..hstart + hlen])
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "field format_version: expected {FORMAT_VERSION}, found {}",
            header.format_version
        )));
    }
    let mut model = DenoiserModel::<F>::new(header.hyper.clone(), 0)?;
    if model.arch_hash() != header.arch_hash {
        return Err(Error::Format(format!(
            "field arch_hash: stored {} does not match reconstructed {}",
            header.arch_hash,
            model.arch_hash()
        )));
    }
    let payload = &bytes[hstart + hlen..];
    let total: usize = header.sections.iter().map(|s| s.len).sum();
    if payload.len() != total * 4 {
        return Err(Error::Format(format!(
            "field payload: expected {} bytes, found {}",
            total * 4,
            payload.len()
        )));
    }
    let named = model.named_mut();
    if named.len() != header.sections.len() {
        return Err(Error::Format("field sections: count mismatch".into()));
    }
    for ((pname, mut view), meta) in named.into_iter().zip(&header.sections) {
        if pname != meta.name {
            return Err(Error::Format(format!(
                "field sections: expected `{pname}`, found `{}`",
                meta.name
            )));
        }
        if view.shape() != meta.shape.as_slice() {
            return Err(Error::Format(format!(
                "field sections[{pname}].shape: expected {:?}, found {:?}",
                view.shape(),
                meta.shape
            )));
        }
        let base = meta.offset * 4;
        for (k, v) in view.iter_mut().enumerate() {
            let b = base + k * 4;
            let f = f32::from_le_bytes(payload[b..b + 4].try_into().unwrap());
            *v = F::from_f32_exact(f);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::tiny_hyper;
    use crate::world::{AttributeSchema, Vocabulary};

    #[test]
    fn checkpoint_roundtrip_preserves_params() {
        let vocab = Vocabulary::from_schema(&AttributeSchema::default_world());
        let model = DenoiserModel::<f32>::new(tiny_hyper(&vocab), 33).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model, &p).unwrap();
        let back = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(model.param_hash(), back.param_hash());
        assert_eq!(model.arch_hash(), back.arch_hash());
    }

    #[test]
    fn truncated_payload_is_named_error() {
        let vocab = Vocabulary::from_schema(&AttributeSchema::default_world());
        let model = DenoiserModel::<f32>::new(tiny_hyper(&vocab), 33).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&p, bytes).unwrap();
        match load_checkpoint::<f32>(&p) {
            Err(Error::Format(msg)) => assert!(msg.contains("payload"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Format(_))));
    }
}
