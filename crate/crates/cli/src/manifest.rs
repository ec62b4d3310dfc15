use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "run-manifest.json";

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: &'static str,
    /// SHA-256 of the compact JSON of the effective config.
    pub config_sha256: String,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub model_versions: Vec<u64>,
    pub config: Value,
}

#[derive(Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn digest(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::from_io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn seeds(cfg: &RunConfig) -> Vec<(String, u64)> {
    [
        ("suite.seed", cfg.suite.seed),
        ("train.seed", cfg.train.seed),
        ("transfer.split_seed", cfg.transfer.split_seed),
        ("transfer.adapt.seed", cfg.transfer.adapt.seed),
        ("adapt.field_seed", cfg.adapt.field_seed),
        ("adapt.holdout_seed", cfg.adapt.holdout_seed),
        ("adapt.evolution.seed", cfg.adapt.evolution.seed),
        ("fleet.seed", cfg.fleet.seed),
        ("fleet.evolution.seed", cfg.fleet.evolution.seed),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Writes `run-manifest.json` into `dir`.
pub fn write(dir: &Path, command: &str, cfg: &RunConfig, raw: &Value, inputs: &[&Path], outputs: &[&Path], model_versions: Vec<u64>) -> Result<(), CliError> {
    let m = RunManifest {
        command: command.into(),
        tool_version: env!("CARGO_PKG_VERSION"),
        config_sha256: sha256_hex(serde_json::to_string(raw).expect("json value").as_bytes()),
        seeds: seeds(cfg),
        inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
        outputs: outputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
        model_versions,
        config: raw.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&m).expect("manifest serializes")).map_err(|e| CliError::from_io(&path, e))
}
