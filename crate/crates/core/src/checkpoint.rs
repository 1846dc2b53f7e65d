//! Checkpoint persistence: a directory holding `manifest.json` (config plus
//! an ordered tensor table) and `params.bin` (raw little-endian f32 values
//! concatenated in table order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{tensor_layout, ModelConfig, ModelParams};
use crate::scalar::Scalar;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const PARAMS_NAME: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into params.bin (not bytes).
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub total_len: usize,
}

impl Manifest {
    pub fn for_config(config: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        for (name, shape) in tensor_layout(config) {
            let numel: usize = shape.iter().product();
            tensors.push(TensorEntry { name, shape, offset });
            offset += numel;
        }
        Manifest {
            format_version: 1,
            dtype: "f32".to_string(),
            config: config.clone(),
            tensors,
            total_len: offset,
        }
    }
}

/// Writes `manifest.json` and `params.bin` into `dir`, creating it if needed.
/// Values are stored as f32 regardless of the in-memory precision.
pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    config: &ModelConfig,
    params: &ModelParams<S>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest::for_config(config);
    let mut bytes = Vec::with_capacity(manifest.total_len * 4);
    for (_, tensor) in params.blocks() {
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    if bytes.len() != manifest.total_len * 4 {
        return Err(Error::data(format!(
            "checkpoint save: params hold {} bytes but layout expects {}",
            bytes.len(),
            manifest.total_len * 4
        )));
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_NAME), json)?;
    fs::write(dir.join(PARAMS_NAME), bytes)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))
        .map_err(|e| Error::data(format!("checkpoint {}: {}", dir.display(), e)))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.dtype != "f32" {
        return Err(Error::data(format!("checkpoint dtype {} unsupported", manifest.dtype)));
    }
    Ok(manifest)
}

/// Reads a checkpoint back. The manifest's tensor table must match the
/// layout derived from its own config, and every stored value must be finite.
pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<(ModelConfig, ModelParams<S>)> {
    let manifest = load_manifest(dir)?;
    manifest.config.validate()?;
    let expected = Manifest::for_config(&manifest.config);
    if manifest.tensors.len() != expected.tensors.len() || manifest.total_len != expected.total_len
    {
        return Err(Error::data("checkpoint manifest does not match its config"));
    }
    for (got, want) in manifest.tensors.iter().zip(&expected.tensors) {
        if got.name != want.name || got.shape != want.shape || got.offset != want.offset {
            return Err(Error::data(format!(
                "checkpoint tensor {} has unexpected shape or offset",
                got.name
            )));
        }
    }
    let bytes = fs::read(dir.join(PARAMS_NAME))
        .map_err(|e| Error::data(format!("checkpoint {}: {}", dir.display(), e)))?;
    if bytes.len() != manifest.total_len * 4 {
        return Err(Error::data(format!(
            "checkpoint params.bin holds {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total_len * 4
        )));
    }
    let mut params = ModelParams::<S>::zeros(&manifest.config);
    let mut cursor = 0usize;
    for (name, tensor) in params.blocks_mut() {
        for v in tensor.data_mut() {
            let raw = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            if !raw.is_finite() {
                return Err(Error::data(format!("checkpoint tensor {} holds a non-finite value", name)));
            }
            *v = S::from_f64(raw as f64);
            cursor += 4;
        }
    }
    Ok((manifest.config, params))
}
