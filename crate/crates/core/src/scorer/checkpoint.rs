//! Checkpoint files: one JSON header line, then the parameters as
//! little-endian `f32`. The header carries a SHA-256 of the parameter block.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{param_count, EpochLog, InputDims, InputNorm, ScorerConfig, ScorerError, ScorerModel};

const FORMAT: &str = "intensity-scorer/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub dims: InputDims,
    pub hidden_units: usize,
    pub config: ScorerConfig,
    pub seed: u64,
    pub n_params: usize,
    /// Hex SHA-256 of the parameter block.
    pub checksum: String,
    #[serde(default)]
    pub input_norm: Option<InputNorm>,
    pub log: Vec<EpochLog>,
}

fn param_block(model: &ScorerModel) -> Vec<u8> {
    model
        .params()
        .iter()
        .flat_map(|p| (*p as f32).to_le_bytes())
        .collect()
}

/// Serialized checkpoint. Parameters are narrowed to `f32`.
pub fn write_checkpoint(model: &ScorerModel, config: &ScorerConfig) -> Vec<u8> {
    let block = param_block(model);
    let header = CheckpointHeader {
        format: FORMAT.into(),
        dims: model.dims(),
        hidden_units: model.hidden_units(),
        config: config.clone(),
        seed: config.seed,
        n_params: model.n_params(),
        checksum: hex::encode(Sha256::digest(&block)),
        input_norm: model.input_norm().cloned(),
        log: model.log.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&block);
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ScorerModel), ScorerError> {
    let bad = |m: String| ScorerError::Checkpoint(m);
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown format `{}`", header.format)));
    }
    let expected = param_count(header.dims, header.hidden_units);
    if header.n_params != expected {
        return Err(bad(format!(
            "header declares {} parameters, dims imply {expected}",
            header.n_params
        )));
    }
    let block = &bytes[nl + 1..];
    if block.len() != expected * 4 {
        return Err(bad(format!(
            "parameter block is {} bytes, expected {}",
            block.len(),
            expected * 4
        )));
    }
    let sum = hex::encode(Sha256::digest(block));
    if sum != header.checksum {
        return Err(bad(format!("checksum mismatch: header {}, block {sum}", header.checksum)));
    }
    let params: Vec<f64> = block
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(bad("non-finite parameter".into()));
    }
    let mut model = ScorerModel::from_params(header.dims, header.hidden_units, params)?;
    model
        .set_input_norm(header.input_norm.clone())
        .map_err(|e| bad(format!("header: {e}")))?;
    model.log = header.log.clone();
    Ok((header, model))
}

pub fn save_checkpoint(path: &Path, model: &ScorerModel, config: &ScorerConfig) -> Result<(), ScorerError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&write_checkpoint(model, config))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ScorerModel), ScorerError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}
