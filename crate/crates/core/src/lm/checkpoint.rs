//! Binary parameter checkpoints: magic, a length-prefixed JSON header, then
//! the parameters as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, DifferentiableLm, Model};
use crate::corpus::write_atomic;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NLFTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: Arch,
    pub vocab_size: usize,
    pub seed: u64,
    pub param_count: usize,
}

pub fn save_params(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let arch = model.arch();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        vocab_size: arch.vocab_size(),
        seed: arch.seed(),
        arch,
        param_count: model.params().len(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + header_json.len() + 8 * header.param_count);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    write_atomic(path.as_ref(), &buf)
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a parameter checkpoint".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok((header, end))
}

/// Loads a checkpoint; `expected_vocab` rejects checkpoints built for a
/// different vocabulary.
pub fn load_params(path: impl AsRef<Path>, expected_vocab: Option<usize>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, start) = read_header(&bytes)?;
    if let Some(v) = expected_vocab {
        if v != header.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary size mismatch: checkpoint {} was trained with {} tokens, current vocabulary has {v}",
                path.display(),
                header.vocab_size
            )));
        }
    }
    if header.arch.vocab_size() != header.vocab_size {
        return Err(Error::Checkpoint("header vocab size disagrees with architecture".into()));
    }
    let mut model = Model::from_arch(&header.arch);
    let n = model.params().len();
    if n != header.param_count || bytes.len() - start != 8 * n {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: architecture needs {n}, file holds {}",
            (bytes.len() - start) / 8
        )));
    }
    for (p, chunk) in model.params_mut().iter_mut().zip(bytes[start..].chunks_exact(8)) {
        *p = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSequence;
    use crate::lm::{conditional_logprobs, TabularConfig, TabularLm, TinyTransformer, TransformerConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::Transformer(TinyTransformer::new(TransformerConfig {
            d_model: 8,
            context_window: 32,
            ..TransformerConfig::small(13, 5)
        }));
        save_params(&m, &path).unwrap();
        let back = load_params(&path, Some(13)).unwrap();
        assert_eq!(back, m);
        let prompt = TokenSequence::from_ids(vec![4, 5, 6]);
        let y = TokenSequence::from_ids(vec![7, 8, 2]);
        assert_eq!(
            conditional_logprobs(&m, &prompt, &y).unwrap(),
            conditional_logprobs(&back, &prompt, &y).unwrap()
        );
    }

    #[test]
    fn wrong_vocab_is_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::Tabular(TabularLm::new(TabularConfig::bigram(7, 1, 1.0)));
        save_params(&m, &path).unwrap();
        let err = load_params(&path, Some(9)).unwrap_err().to_string();
        assert!(err.contains("vocabulary size mismatch"), "{err}");
        assert!(err.contains('7') && err.contains('9'));
    }

    #[test]
    fn header_carries_format_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::Tabular(TabularLm::new(TabularConfig::bigram(5, 1, 0.0)));
        save_params(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let (header, _) = read_header(&bytes).unwrap();
        assert_eq!(header.format_version, FORMAT_VERSION);
        assert_eq!(header.vocab_size, 5);
        let text = String::from_utf8_lossy(&bytes[16..]);
        assert!(text.contains("\"format_version\":1"));
    }
}
