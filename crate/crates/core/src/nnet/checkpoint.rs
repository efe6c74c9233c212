//! Model checkpoints: a length-prefixed JSON header followed by the raw
//! parameter block.
//!
//! ```text
//! u32 LE header length | header JSON | n_params x f32 LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{Model, ModelSpec, NnetError};

const FORMAT: &str = "scaar-model";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a model checkpoint: {0}")]
    Format(String),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] NnetError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: ModelSpec,
    seed: u64,
    epoch: usize,
    n_params: usize,
    #[serde(default)]
    extra: Value,
}

/// A trained model and what is needed to use it again.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Number of completed training epochs.
    pub epoch: usize,
    /// Free-form settings stored alongside the model (e.g. the trace
    /// conditioning the model was trained with).
    pub extra: Value,
}

pub fn write_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        spec: ck.model.spec().clone(),
        seed: ck.model.spec().seed,
        epoch: ck.epoch,
        n_params: ck.model.n_params(),
        extra: ck.extra.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(4 + json.len() + 4 * ck.model.n_params());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in ck.model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let truncated = |expected| CheckpointError::Truncated {
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = bytes.get(4..4 + hlen).ok_or_else(|| truncated(4 + hlen))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CheckpointError::Format(format!(
            "{} version {}",
            header.format, header.version
        )));
    }
    let expected = 4 + hlen + 4 * header.n_params;
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let params = bytes[4 + hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Checkpoint {
        model: Model::from_params(header.spec, params)?,
        epoch: header.epoch,
        extra: header.extra,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, write_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_exact() {
        let ck = Checkpoint {
            model: Model::new(ModelSpec::default_cnn(200, 4, 9)).unwrap(),
            epoch: 12,
            extra: json!({"decimate": 4}),
        };
        let bytes = write_checkpoint(&ck).unwrap();
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert!(matches!(
            read_checkpoint(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            read_checkpoint(b"\x02\0\0\0{}"),
            Err(CheckpointError::Format(_))
        ));
    }
}
