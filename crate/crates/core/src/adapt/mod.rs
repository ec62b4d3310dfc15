//! Field adaptation: alarm capture and verification, the novel-regime batch,
//! two-stage evolutionary updating, temporal validation and canary rules.

mod canary;
mod evolve;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::{detect_step, DetectorConfig, DetectorState};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureSet, Featurizer};
use crate::nn::Model;
use crate::synth::{Category, Label, SignalTrace};

pub use canary::{canary_decide, CanaryConfig, CanaryDecision, CanaryOutcome, CanaryStats, RuleCheck};
pub use evolve::{
    mutate_arch, propose_stage2, stage1_evolve, stage2_evolve, EvolutionConfig, Genome, NoveltyData, SearchRecord, Stage1Outcome,
    Stage2Outcome, Stage2Proposal, Stage2Space,
};
pub use validate::{temporal_validate, StreamOutcome, TemporalReport};

/// Where and under which conditions an alarm fired.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmContext {
    pub trace_id: u64,
    pub frame_index: u32,
    pub profile_id: String,
    pub category: Category,
}

/// Everything needed to re-run inference on an alarm in the cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub device_id: u32,
    pub timestamp_ns: u64,
    pub context: AlarmContext,
    pub model_version: u64,
    pub frame: Vec<f32>,
    pub vector: Vec<f32>,
}

/// Emits a record when `state` has latched on `frame`.
pub fn capture_alarm(
    state: &DetectorState,
    device_id: u32,
    timestamp_ns: u64,
    model: &Model,
    featurizer: &Featurizer,
    frame: &[f32],
    context: AlarmContext,
) -> Result<Option<AlarmRecord>> {
    if !state.latched {
        return Ok(None);
    }
    let v = featurizer.featurize(frame)?;
    if v.bands.len() != model.arch.input_dim {
        return Err(Error::ShapeMismatch {
            name: "alarm vector".into(),
            expected: vec![model.arch.input_dim],
            got: vec![v.bands.len()],
        });
    }
    Ok(Some(AlarmRecord {
        device_id,
        timestamp_ns,
        context,
        model_version: model.version(),
        frame: frame.to_vec(),
        vector: v.bands,
    }))
}

/// Streams `trace` through `model` and the counter, capturing one record per
/// alarm. The counter restarts after each alarm. Timestamps are the end of
/// the alarmed frame, offset by `start_ns`.
pub fn capture_trace_alarms(
    model: &Model,
    trace: &SignalTrace,
    trace_id: u64,
    device_id: u32,
    start_ns: u64,
    fcfg: &FeatureConfig,
    dcfg: &DetectorConfig,
) -> Result<Vec<AlarmRecord>> {
    dcfg.validate()?;
    let fz = Featurizer::new(fcfg)?;
    let l = fcfg.frame_len;
    let frames: Vec<&[f32]> = trace.samples.chunks_exact(l).collect();
    let mut rows = Vec::with_capacity(frames.len() * fcfg.dim());
    for f in &frames {
        rows.extend_from_slice(&fz.featurize(f)?.bands);
    }
    let p = model.predict_proba(&rows)?;
    let mut state = DetectorState::default();
    let mut out = Vec::new();
    for (i, (&pi, frame)) in p.iter().zip(&frames).enumerate() {
        let (s, _) = detect_step(state, pi as f64, dcfg);
        state = s;
        let t = start_ns + ((i + 1) * l) as u64 * 1_000_000_000 / trace.sample_rate as u64;
        let ctx = AlarmContext {
            trace_id,
            frame_index: i as u32,
            profile_id: trace.profile_id.clone(),
            category: trace.category,
        };
        if let Some(rec) = capture_alarm(&state, device_id, t, model, &fz, frame, ctx)? {
            out.push(rec);
            state.reset();
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TrueArc,
    FalseAlarm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationSource {
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub verdict: Verdict,
    pub source: VerificationSource,
}

/// Ground truth for alarmed frames. Stands in for expert review.
pub trait LabelOracle {
    fn label(&self, trace_id: u64, frame_index: u32) -> Option<Label>;
}

/// Frame labels of known traces, keyed by trace id.
#[derive(Clone, Debug, Default)]
pub struct TraceOracle {
    labels: BTreeMap<u64, Vec<Label>>,
}

impl TraceOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, trace_id: u64, trace: &SignalTrace, frame_len: usize) {
        self.labels.insert(trace_id, trace.frame_labels(frame_len));
    }

    pub fn insert_labels(&mut self, trace_id: u64, labels: Vec<Label>) {
        self.labels.insert(trace_id, labels);
    }
}

impl LabelOracle for TraceOracle {
    fn label(&self, trace_id: u64, frame_index: u32) -> Option<Label> {
        self.labels.get(&trace_id)?.get(frame_index as usize).copied()
    }
}

pub fn verify(record: &AlarmRecord, oracle: &dyn LabelOracle) -> Result<VerificationResult> {
    let c = &record.context;
    let label = oracle
        .label(c.trace_id, c.frame_index)
        .ok_or_else(|| Error::OutsideCoverage(format!("trace {} frame {}", c.trace_id, c.frame_index)))?;
    let verdict = match label {
        Label::Arc => Verdict::TrueArc,
        Label::Normal => Verdict::FalseAlarm,
    };
    Ok(VerificationResult {
        verdict,
        source: VerificationSource::Oracle,
    })
}

/// Verified false alarms waiting for adaptation, plus confirmed arcs to mix
/// in as exemplars.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationBatch {
    pub records: Vec<AlarmRecord>,
    pub threshold: usize,
    #[serde(default)]
    pub arc_exemplars: Vec<AlarmRecord>,
}

impl AdaptationBatch {
    pub const DEFAULT_THRESHOLD: usize = 64;

    pub fn new(threshold: usize) -> Self {
        AdaptationBatch {
            records: Vec::new(),
            threshold,
            arc_exemplars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_ready(&self) -> bool {
        self.records.len() >= self.threshold
    }

    /// The captured vectors, all labeled normal.
    pub fn features(&self, dim: usize) -> Result<FeatureSet> {
        let mut s = FeatureSet::new(dim);
        for r in &self.records {
            s.push(&r.vector, Label::Normal as u8)?;
        }
        Ok(s)
    }

    /// The exemplar vectors, all labeled arc.
    pub fn exemplar_features(&self, dim: usize) -> Result<FeatureSet> {
        let mut s = FeatureSet::new(dim);
        for r in &self.arc_exemplars {
            s.push(&r.vector, Label::Arc as u8)?;
        }
        Ok(s)
    }
}

/// Routes verified alarms: confirmed arcs to the archive log, false alarms
/// to the adaptation batch.
#[derive(Clone, Debug, Default)]
pub struct AlarmTriage {
    pub archive: Vec<AlarmRecord>,
    pub batch: AdaptationBatch,
}

impl AlarmTriage {
    pub fn new(threshold: usize) -> Self {
        AlarmTriage {
            archive: Vec::new(),
            batch: AdaptationBatch::new(threshold),
        }
    }

    pub fn route(&mut self, record: AlarmRecord, oracle: &dyn LabelOracle) -> Result<Verdict> {
        let v = verify(&record, oracle)?.verdict;
        match v {
            Verdict::TrueArc => self.archive.push(record),
            Verdict::FalseAlarm => self.batch.records.push(record),
        }
        Ok(v)
    }

    pub fn total(&self) -> usize {
        self.archive.len() + self.batch.len()
    }

    /// Hands over the batch, with copies of the most recent archived arcs
    /// (up to one per false alarm) as exemplars, and starts a new one.
    pub fn take_batch(&mut self) -> AdaptationBatch {
        let threshold = self.batch.threshold;
        let mut b = std::mem::replace(&mut self.batch, AdaptationBatch::new(threshold));
        let n = b.records.len().min(self.archive.len());
        b.arc_exemplars = self.archive[self.archive.len() - n..].to_vec();
        b
    }
}
