//! Binary weight container.
//!
//! Layout: magic "RPW1", version u32 LE, u64 LE length-prefixed UTF-8 JSON
//! index (model config plus tensor name/shape/offset list), then all tensor
//! data as raw f64 LE in index order. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use recon_core::model::{ModelConfig, WeightSet};
use recon_core::rng::Rng;

const MAGIC: &[u8; 4] = b"RPW1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_weights(config: &ModelConfig, weights: &WeightSet, path: &Path) -> Result<()> {
    let params = weights.params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for p in &params {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: [p.value.rows, p.value.cols],
            offset,
        });
        offset += (p.value.data.len() * 8) as u64;
    }
    let index = serde_json::to_vec(&Index { config: config.clone(), tensors })?;

    let mut out = Vec::with_capacity(16 + index.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    for p in &params {
        for v in &p.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, WeightSet)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let take = |range: std::ops::Range<usize>| -> Result<&[u8]> {
        bytes
            .get(range)
            .ok_or_else(|| anyhow::anyhow!("truncated weight file {}", path.display()))
    };
    if take(0..4)? != MAGIC {
        bail!("{} is not a weight container (bad magic)", path.display());
    }
    let version = u32::from_le_bytes(take(4..8)?.try_into().unwrap());
    if version != VERSION {
        bail!("unsupported weight container version {version}");
    }
    let index_len = u64::from_le_bytes(take(8..16)?.try_into().unwrap()) as usize;
    let index: Index = serde_json::from_slice(take(16..16 + index_len)?)
        .context("parsing weight container index")?;
    index.config.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    let data = &bytes[16 + index_len..];

    // Build the skeleton, then overwrite every tensor from the file.
    let mut weights = WeightSet::random(&index.config, &mut Rng::from_seed(0))
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut params = weights.params_mut();
    if params.len() != index.tensors.len() {
        bail!(
            "index lists {} tensors, model needs {}",
            index.tensors.len(),
            params.len()
        );
    }
    for (param, entry) in params.iter_mut().zip(&index.tensors) {
        if param.name != entry.name {
            bail!("unexpected tensor {} (wanted {})", entry.name, param.name);
        }
        if [param.value.rows, param.value.cols] != entry.shape {
            bail!(
                "tensor {} has shape {:?}, expected [{}, {}]",
                entry.name,
                entry.shape,
                param.value.rows,
                param.value.cols
            );
        }
        let start = entry.offset as usize;
        let end = start + param.value.data.len() * 8;
        let slice = data
            .get(start..end)
            .ok_or_else(|| anyhow::anyhow!("tensor {} data out of bounds", entry.name))?;
        for (dst, chunk) in param.value.data.iter_mut().zip(slice.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if !param.value.is_finite() {
            bail!("tensor {} contains non-finite values", entry.name);
        }
    }
    Ok((index.config, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            hidden: 8,
            ff_dim: 16,
            vocab: 19,
            max_positions: 12,
            layernorm_eps: 1e-12,
        }
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let config = small_config();
        let weights = WeightSet::random(&config, &mut Rng::from_seed(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rpw");
        save_weights(&config, &weights, &path).unwrap();
        let (config2, weights2) = load_weights(&path).unwrap();
        assert_eq!(config, config2);
        for (a, b) in weights.params().iter().zip(weights2.params()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u64> = a.value.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{}", a.name);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let config = small_config();
        let weights = WeightSet::random(&config, &mut Rng::from_seed(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rpw");
        save_weights(&config, &weights, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_weights(&path).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rpw");
        fs::write(&path, b"NOPE____________").unwrap();
        let err = load_weights(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn wrong_shape_names_the_tensor() {
        let config = small_config();
        let weights = WeightSet::random(&config, &mut Rng::from_seed(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rpw");
        save_weights(&config, &weights, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let index_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[16..16 + index_len].to_vec()).unwrap();
        // Same byte length keeps every offset valid.
        let patched = text.replacen("\"shape\":[19,8]", "\"shape\":[19,9]", 1);
        assert_ne!(text, patched);
        bytes.splice(16..16 + index_len, patched.into_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_weights(&path).unwrap_err().to_string();
        assert!(err.contains("token_embedding"), "{err}");
    }
}
