use std::fs;
use std::path::Path;

use afci_core::adapt::EvolutionConfig;
use afci_core::detector::{DetectorConfig, TrainConfig};
use afci_core::fleet::FleetSpec;
use afci_core::synth::SuiteConfig;
use afci_core::transfer::TransferConfig;
use afci_core::{ArchSpec, DriftSpec, FeatureConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const CONFIG_ENV: &str = "AFCI_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSection {
    pub fractions: Vec<f64>,
}

impl Default for ScaleSection {
    fn default() -> Self {
        ScaleSection {
            fractions: vec![0.05, 0.1, 0.2, 0.4, 0.8, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    /// Source-data fractions; one source model is trained per entry.
    pub source_fractions: Vec<f64>,
    /// Target-data fractions swept from every source model.
    pub target_fractions: Vec<f64>,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub adapt: TransferConfig,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            source_fractions: vec![0.3, 0.8],
            target_fractions: vec![0.01, 0.05, 0.1, 0.5],
            test_fraction: 0.2,
            split_seed: 3,
            adapt: TransferConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    /// Profile the drifted field devices start from.
    pub profile: String,
    pub drift: DriftSpec,
    pub field_seed: u64,
    pub holdout_seed: u64,
    pub batch_threshold: usize,
    pub stage2: bool,
    pub evolution: EvolutionConfig,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            profile: "inv-a".into(),
            drift: FleetSpec::field_drift(),
            field_seed: 77,
            holdout_seed: 78,
            batch_threshold: 64,
            stage2: false,
            evolution: EvolutionConfig::default(),
        }
    }
}

/// Everything a run consumes, in one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    pub features: FeatureConfig,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub scale: ScaleSection,
    pub transfer: TransferSection,
    pub adapt: AdaptSection,
    pub fleet: FleetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            suite: SuiteConfig::default(),
            features: FeatureConfig::default(),
            arch: ArchSpec::default(),
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            scale: ScaleSection::default(),
            transfer: TransferSection::default(),
            adapt: AdaptSection::default(),
            fleet: FleetSpec::default(),
        }
    }
}

fn section(name: &str, r: afci_core::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| match e {
        afci_core::Error::InvalidConfig { field, reason } => CliError::Config(format!("{name}.{field}: {reason}")),
        other => CliError::Config(format!("{name}: {other}")),
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        section("suite", self.suite.validate())?;
        section("features", self.features.validate())?;
        section("arch", self.arch.validate())?;
        section("train", self.train.validate())?;
        section("detector", self.detector.validate())?;
        section("transfer.adapt", self.transfer.adapt.validate())?;
        section("adapt.evolution", self.adapt.evolution.validate())?;
        section("adapt.drift", self.adapt.drift.validate())?;
        section("fleet", self.fleet.validate())?;
        if self.suite.frame_len != self.features.frame_len {
            return Err(CliError::Config("suite.frame_len: must equal features.frame_len".into()));
        }
        if self.arch.input_dim != self.features.dim() {
            return Err(CliError::Config(format!(
                "arch.input_dim: {} does not match the {}-band feature vector",
                self.arch.input_dim,
                self.features.dim()
            )));
        }
        if !self.suite.profiles.iter().any(|p| p.profile_id == self.adapt.profile) {
            return Err(CliError::Config(format!("adapt.profile: {:?} is not in suite.profiles", self.adapt.profile)));
        }
        let fractions = |name: &str, f: &[f64]| {
            if f.is_empty() || f.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) || f.windows(2).any(|w| w[1] <= w[0]) {
                Err(CliError::Config(format!("{name}: need strictly increasing values in (0, 1]")))
            } else {
                Ok(())
            }
        };
        fractions("scale.fractions", &self.scale.fractions)?;
        fractions("transfer.source_fractions", &self.transfer.source_fractions)?;
        fractions("transfer.target_fractions", &self.transfer.target_fractions)?;
        if !(self.transfer.test_fraction > 0.0 && self.transfer.test_fraction < 1.0) {
            return Err(CliError::Config("transfer.test_fraction: must be in (0, 1)".into()));
        }
        if self.adapt.batch_threshold == 0 {
            return Err(CliError::Config("adapt.batch_threshold: must be >= 1".into()));
        }
        Ok(())
    }

    /// Defaults, overlaid with `file` (if any), then with `key.path=value`
    /// overrides. Values parse as JSON and fall back to plain strings.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<(RunConfig, Value), CliError> {
        let mut v = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
            let file_v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut v, file_v);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
            let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, val)?;
        }
        let cfg: RunConfig = serde_json::from_value(v.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok((cfg, v))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, val: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(m) => {
                if !m.contains_key(*p) {
                    return Err(CliError::Config(format!("unknown key {key:?}")));
                }
                m.get_mut(*p).unwrap()
            }
            Value::Array(a) => {
                let idx: usize = p.parse().map_err(|_| CliError::Config(format!("{key:?}: {p:?} is not an index")))?;
                a.get_mut(idx).ok_or_else(|| CliError::Config(format!("{key:?}: index {idx} out of range")))?
            }
            _ => return Err(CliError::Config(format!("{key:?}: cannot descend into a scalar"))),
        };
        if last {
            *cur = val;
            return Ok(());
        }
    }
    Err(CliError::Config("empty override key".into()))
}
