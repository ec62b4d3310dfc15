use serde::{Deserialize, Serialize};

use crate::detector::{run_detector, ArcScorer, DetectorConfig};
use crate::error::Result;
use crate::features::FeatureConfig;
use crate::synth::{Category, SignalTrace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamOutcome {
    pub profile_id: String,
    pub category: Category,
    pub is_arc: bool,
    /// Alarms on normal streams, or before the onset on arc streams.
    pub false_alarms: usize,
    pub detected: bool,
    pub latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub streams: Vec<StreamOutcome>,
    pub nuisance_streams: usize,
    pub streams_with_false_alarms: usize,
    pub arc_streams: usize,
    pub arcs_detected: usize,
    pub pass: bool,
}

/// Runs the full streaming detector over held-out traces. Passes iff no
/// stream raises a false alarm and every arc stream is detected.
pub fn temporal_validate(model: &dyn ArcScorer, streams: &[SignalTrace], fcfg: &FeatureConfig, dcfg: &DetectorConfig) -> Result<TemporalReport> {
    let mut out = Vec::with_capacity(streams.len());
    for t in streams {
        let r = run_detector(model, t, fcfg, dcfg)?;
        out.push(StreamOutcome {
            profile_id: t.profile_id.clone(),
            category: t.category,
            is_arc: t.onset_index.is_some(),
            false_alarms: r.false_alarms,
            detected: r.detected(),
            latency_ms: r.latency_ms,
        });
    }
    let nuisance_streams = out.iter().filter(|s| !s.is_arc).count();
    let streams_with_false_alarms = out.iter().filter(|s| s.false_alarms > 0).count();
    let arc_streams = out.iter().filter(|s| s.is_arc).count();
    let arcs_detected = out.iter().filter(|s| s.is_arc && s.detected).count();
    Ok(TemporalReport {
        pass: streams_with_false_alarms == 0 && arcs_detected == arc_streams,
        streams: out,
        nuisance_streams,
        streams_with_false_alarms,
        arc_streams,
        arcs_detected,
    })
}
