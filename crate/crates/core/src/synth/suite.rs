//! Labeled dataset suites: every nuisance sub-condition plus arcs, per profile.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trace_io::{read_trace_samples, write_trace_samples};
use super::{synth_arc, synth_normal, ArcParams, Category, HardwareProfile, Label, ScenarioSpec, SignalTrace};
use crate::error::{Error, Result};
use crate::rng;

/// Arc onsets fall uniformly in this fraction of the trace.
const ONSET_RANGE: (f64, f64) = (0.2, 0.5);
/// Broadband gain multiplier per arc operating condition.
const ARC_GAIN_SCALE: [f64; super::recipes::ARC_CONDITIONS] = [0.8, 1.0, 1.2, 0.9, 1.1, 1.0, 0.85, 1.15];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub profiles: Vec<HardwareProfile>,
    /// Traces per nuisance sub-condition.
    pub per_category_count: usize,
    pub arc_traces_per_profile: usize,
    /// Seconds per trace.
    pub trace_duration: f64,
    /// Template for arc traces; `onset_index` is drawn per trace.
    pub arc: ArcParams,
    pub frame_len: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            profiles: vec![HardwareProfile::reference_a(), HardwareProfile::reference_b()],
            per_category_count: 1,
            arc_traces_per_profile: 16,
            trace_duration: 0.82,
            arc: ArcParams::default(),
            frame_len: 1024,
            seed: 2024,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::config("profiles", "at least one profile is required"));
        }
        if self.per_category_count < 1 {
            return Err(Error::config("per_category_count", "must be >= 1"));
        }
        if !(self.trace_duration > 0.0) {
            return Err(Error::config("trace_duration", "must be > 0"));
        }
        if self.frame_len == 0 {
            return Err(Error::config("frame_len", "must be > 0"));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            p.validate().map_err(|e| prefix(e, &format!("profiles[{i}]")))?;
            if self.arc_traces_per_profile > 0 {
                self.arc.validate(p).map_err(|e| prefix(e, "arc"))?;
            }
        }
        Ok(())
    }
}

fn prefix(e: Error, at: &str) -> Error {
    match e {
        Error::InvalidConfig { field, reason } => Error::InvalidConfig {
            field: format!("{at}.{field}"),
            reason,
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub file: String,
    pub profile_id: String,
    pub category: Category,
    pub variant: usize,
    pub label: Label,
    pub seed: u64,
    pub sample_count: usize,
    pub onset_index: Option<usize>,
    /// One character per frame, `0` normal and `1` arc.
    pub frame_labels: String,
}

impl TraceEntry {
    pub fn labels(&self) -> Vec<Label> {
        self.frame_labels
            .bytes()
            .map(|b| if b == b'1' { Label::Arc } else { Label::Normal })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub normal_traces: usize,
    pub arc_traces: usize,
    pub normal_frames: usize,
    pub arc_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub frame_len: usize,
    pub profiles: Vec<HardwareProfile>,
    pub traces: Vec<TraceEntry>,
    pub balance: ClassBalance,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn profile(&self, id: &str) -> Option<&HardwareProfile> {
        self.profiles.iter().find(|p| p.profile_id == id)
    }
}

/// A generated suite held in memory.
#[derive(Clone, Debug)]
pub struct Suite {
    pub manifest: DatasetManifest,
    pub traces: Vec<SignalTrace>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Suite {
    /// Writes `manifest.json` and one `.afci` file per trace under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("traces"))?;
        for (entry, trace) in self.manifest.traces.iter().zip(&self.traces) {
            write_trace_samples(&dir.join(&entry.file), trace.sample_rate, &trace.samples)?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_json()?)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let mut traces = Vec::with_capacity(manifest.traces.len());
        for e in &manifest.traces {
            let (rate, samples) = read_trace_samples(&dir.join(&e.file))?;
            if samples.len() != e.sample_count {
                return Err(Error::Format(format!(
                    "{}: manifest lists {} samples, file has {}",
                    e.file,
                    e.sample_count,
                    samples.len()
                )));
            }
            traces.push(SignalTrace {
                samples,
                sample_rate: rate,
                onset_index: e.onset_index,
                profile_id: e.profile_id.clone(),
                category: e.category,
            });
        }
        Ok(Suite { manifest, traces })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&TraceEntry, &SignalTrace)> {
        self.manifest.traces.iter().zip(&self.traces)
    }
}

fn frame_label_string(labels: &[Label]) -> String {
    labels.iter().map(|&l| if l == Label::Arc { '1' } else { '0' }).collect()
}

/// Every nuisance sub-condition as `(category, variant)`, in suite order.
pub fn nuisance_conditions() -> Vec<(Category, usize)> {
    Category::NUISANCE
        .iter()
        .flat_map(|&c| (0..c.sub_conditions()).map(move |v| (c, v)))
        .collect()
}

/// An arc trace of the given variant with the onset drawn from `seed`
/// between 20% and 50% of the trace.
pub fn arc_trace(profile: &HardwareProfile, template: &ArcParams, variant: usize, duration: f64, seed: u64) -> Result<SignalTrace> {
    let variant = variant % Category::Arc.sub_conditions();
    let s = ScenarioSpec::new(Category::Arc, variant, duration, seed);
    let n = s.sample_count(profile.sample_rate);
    let mut r = rng::derive_rng(seed, u64::MAX);
    let frac: f64 = r.random_range(ONSET_RANGE.0..ONSET_RANGE.1);
    let arc = ArcParams {
        onset_index: (frac * n as f64) as usize,
        broadband_gain: template.broadband_gain * ARC_GAIN_SCALE[variant],
        ..template.clone()
    };
    synth_arc(profile, &arc, &s)
}

/// Generates every nuisance sub-condition `per_category_count` times per
/// profile, then `arc_traces_per_profile` arc traces cycling through the arc
/// operating conditions.
pub fn synth_suite(cfg: &SuiteConfig) -> Result<Suite> {
    cfg.validate()?;
    let mut entries = Vec::new();
    let mut traces = Vec::new();
    let mut balance = ClassBalance::default();
    let mut index = 0u64;

    for profile in &cfg.profiles {
        let mut push = |trace: SignalTrace, variant: usize, seed: u64, entries: &mut Vec<TraceEntry>| {
            let labels = trace.frame_labels(cfg.frame_len);
            let arc_frames = labels.iter().filter(|&&l| l == Label::Arc).count();
            balance.arc_frames += arc_frames;
            balance.normal_frames += labels.len() - arc_frames;
            let label = if trace.onset_index.is_some() { Label::Arc } else { Label::Normal };
            match label {
                Label::Arc => balance.arc_traces += 1,
                Label::Normal => balance.normal_traces += 1,
            }
            entries.push(TraceEntry {
                file: format!("traces/{:04}_{}_{}_{}.afci", entries.len(), profile.profile_id, trace.category.name(), variant),
                profile_id: profile.profile_id.clone(),
                category: trace.category,
                variant,
                label,
                seed,
                sample_count: trace.samples.len(),
                onset_index: trace.onset_index,
                frame_labels: frame_label_string(&labels),
            });
            traces.push(trace);
        };

        for cat in Category::NUISANCE {
            for variant in 0..cat.sub_conditions() {
                for _ in 0..cfg.per_category_count {
                    let seed = rng::derive(cfg.seed, index);
                    index += 1;
                    let s = ScenarioSpec::new(cat, variant, cfg.trace_duration, seed);
                    push(synth_normal(profile, &s)?, variant, seed, &mut entries);
                }
            }
        }
        for k in 0..cfg.arc_traces_per_profile {
            let seed = rng::derive(cfg.seed, index);
            index += 1;
            let variant = k % Category::Arc.sub_conditions();
            push(arc_trace(profile, &cfg.arc, variant, cfg.trace_duration, seed)?, variant, seed, &mut entries);
        }
    }

    Ok(Suite {
        manifest: DatasetManifest {
            seed: cfg.seed,
            frame_len: cfg.frame_len,
            profiles: cfg.profiles.clone(),
            traces: entries,
            balance,
        },
        traces,
    })
}
