//! Binary checkpoints.
//!
//! ```text
//! magic   8 bytes  "PDCKPT01"
//! hlen    u64 LE   header length in bytes
//! header  JSON     {"format_version", "config", "tensors": [{name, shape, offset, len}]}
//! data    f64 LE   tensor values, concatenated in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, NamedTensors};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 8] = b"PDCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in params.named() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", header.format_version)));
    }
    let data = &body[hlen..];
    if !data.len().is_multiple_of(8) {
        return Err(bad("data section is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let tensors = header
        .tensors
        .iter()
        .map(|e| {
            let end = e.offset.checked_add(e.len).filter(|end| *end <= values.len());
            let Some(end) = end else {
                return Err(bad(format!("tensor {} runs past the data section", e.name)));
            };
            if e.shape.iter().product::<usize>() != e.len {
                return Err(bad(format!(
                    "tensor {} has shape {:?} but {} values",
                    e.name, e.shape, e.len
                )));
            }
            Ok((
                e.name.clone(),
                Tensor {
                    shape: e.shape.clone(),
                    data: values[e.offset..end].to_vec(),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_named(&header.config, tensors).map_err(|e| bad(e.to_string()))
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::simcc::SimCCConfig;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            backbone_channels: vec![2, 3],
            feature_dim: 4,
            head_hidden: 5,
            num_keypoints: 2,
            simcc: SimCCConfig::new(8, 8),
            init_seed: 0,
            distill_tap: None,
        };
        init_model(&cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let bytes = to_bytes(&p);
        assert_eq!(from_bytes(&bytes, Path::new("x")).unwrap(), p);
        assert_eq!(to_bytes(&from_bytes(&bytes, Path::new("x")).unwrap()), bytes);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = to_bytes(&params());
        for broken in [&b"nope"[..], &bytes[..20], &bytes[..bytes.len() - 3]] {
            assert!(matches!(from_bytes(broken, Path::new("x")), Err(Error::Format { .. })));
        }
    }
}
