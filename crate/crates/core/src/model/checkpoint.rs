//! Checkpoint file format.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON manifest of
//! `{name, shape, offset}` entries sorted by parameter name, then the
//! payload: little-endian 64-bit floats concatenated in manifest order.
//! Save followed by load reproduces parameter values byte-exactly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn save_checkpoint(params: &Params, path: &Path) -> Result<()> {
    let mut named = params.named();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let mut manifest = Vec::with_capacity(named.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in &named {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape(),
            offset: payload.len() as u64,
        });
        for v in tensor.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating checkpoint {}", path.display()), e))?;
    let write_err = |e| Error::io(format!("writing checkpoint {}", path.display()), e);
    file.write_all(&(header.len() as u64).to_le_bytes())
        .map_err(write_err)?;
    file.write_all(&header).map_err(write_err)?;
    file.write_all(&payload).map_err(write_err)?;
    Ok(())
}

/// Rebuilds parameters for `config` from a checkpoint. Every tensor the
/// config expects must be present with a matching shape; unknown extras are
/// rejected.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Params> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening checkpoint {}", path.display()), e))?;
    let read_err = |e| Error::io(format!("reading checkpoint {}", path.display()), e);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(read_err)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header).map_err(read_err)?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(read_err)?;

    let mut entries: HashMap<&str, &ManifestEntry> =
        manifest.iter().map(|e| (e.name.as_str(), e)).collect();

    // Structure comes from the config; the checkpoint only supplies values.
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    let params = Params::init(config, &mut rng);
    for (name, tensor) in params.named() {
        let entry = entries.remove(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("missing parameter '{name}' in {}", path.display()))
        })?;
        if entry.shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, config expects {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        let count = tensor.numel();
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload truncated for parameter '{name}'"
            )));
        }
        let values = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensor.set_values(values);
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint contains unknown parameter '{extra}'"
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip_is_exact_and_rerun_identical() {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            token_layers: 1,
            sentence_layers: 1,
            decoder_layers: 1,
            max_tokens: 16,
            max_sentences: 4,
            vocab_size: 11,
            ..ModelConfig::default()
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let params = Params::init(&config, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path, &config).unwrap();
        for ((n1, t1), (n2, t2)) in params.named().iter().zip(loaded.named().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.values(), t2.values(), "{n1} differs");
        }
        // byte-identical on re-save
        let path2 = dir.path().join("ck2.bin");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            token_layers: 1,
            sentence_layers: 1,
            decoder_layers: 1,
            max_tokens: 16,
            max_sentences: 4,
            vocab_size: 11,
            ..ModelConfig::default()
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let params = Params::init(&config, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&params, &path).unwrap();
        let bigger = ModelConfig { vocab_size: 12, ..config };
        assert!(matches!(
            load_checkpoint(&path, &bigger),
            Err(Error::Checkpoint(_))
        ));
    }
}
