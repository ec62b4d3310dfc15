use serde::{Deserialize, Serialize};

use super::ArcScorer;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, Featurizer};
use crate::synth::{Label, SignalTrace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterPolicy {
    /// A negative frame clears the counter.
    #[default]
    Reset,
    /// A negative frame lowers the counter by one (leaky variant).
    Decrement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub p_threshold: f64,
    pub count_threshold: u32,
    #[serde(default)]
    pub policy: CounterPolicy,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            p_threshold: 0.5,
            count_threshold: 8,
            policy: CounterPolicy::Reset,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_threshold > 0.0 && self.p_threshold < 1.0) {
            return Err(Error::config("p_threshold", "must be in (0, 1)"));
        }
        if self.count_threshold < 1 {
            return Err(Error::config("count_threshold", "must be >= 1"));
        }
        Ok(())
    }
}

/// Consecutive-positive counter and alarm latch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorState {
    pub counter: u32,
    pub latched: bool,
}

impl DetectorState {
    pub fn reset(&mut self) {
        *self = DetectorState::default();
    }
}

/// Advances the counter by one frame. A latched detector ignores input until
/// it is reset.
pub fn detect_step(state: DetectorState, p_arc: f64, cfg: &DetectorConfig) -> (DetectorState, bool) {
    if state.latched {
        return (state, false);
    }
    let mut s = state;
    if p_arc > cfg.p_threshold {
        s.counter = (s.counter + 1).min(cfg.count_threshold);
    } else {
        s.counter = match cfg.policy {
            CounterPolicy::Reset => 0,
            CounterPolicy::Decrement => s.counter.saturating_sub(1),
        };
    }
    if s.counter >= cfg.count_threshold {
        s.latched = true;
        return (s, true);
    }
    (s, false)
}

/// Alarm frame indices for a probability stream; the detector is reset after
/// each alarm.
pub fn stream_alarms(p_arc: &[f32], cfg: &DetectorConfig) -> Vec<usize> {
    let mut state = DetectorState::default();
    let mut alarms = Vec::new();
    for (i, &p) in p_arc.iter().enumerate() {
        let (next, alarm) = detect_step(state, p as f64, cfg);
        state = next;
        if alarm {
            alarms.push(i);
            state.reset();
        }
    }
    alarms
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub frames: usize,
    pub alarm_frames: Vec<usize>,
    pub first_arc_frame: Option<usize>,
    /// First alarm at or after the first arc frame, relative to it.
    pub latency_frames: Option<usize>,
    pub latency_ms: Option<f64>,
    /// Alarms raised before the first arc frame (or anywhere on a normal trace).
    pub false_alarms: usize,
    pub p_arc: Vec<f32>,
}

impl EventReport {
    pub fn detected(&self) -> bool {
        self.latency_frames.is_some()
    }
}

/// Featurizes every frame, scores them in infer mode and streams the scores
/// through the counter.
pub fn run_detector(scorer: &dyn ArcScorer, trace: &SignalTrace, fcfg: &FeatureConfig, dcfg: &DetectorConfig) -> Result<EventReport> {
    dcfg.validate()?;
    let fz = Featurizer::new(fcfg)?;
    let (vectors, labels) = fz.featurize_trace(trace)?;
    let mut rows = Vec::with_capacity(vectors.len() * fcfg.dim());
    for v in &vectors {
        rows.extend_from_slice(&v.bands);
    }
    let p_arc = scorer.score(&rows, fcfg.dim())?;
    let alarm_frames = stream_alarms(&p_arc, dcfg);
    let first_arc_frame = labels.iter().position(|&l| l == Label::Arc);
    let latency_frames = first_arc_frame.and_then(|a| alarm_frames.iter().find(|&&f| f >= a).map(|&f| f - a));
    let false_alarms = match first_arc_frame {
        Some(a) => alarm_frames.iter().filter(|&&f| f < a).count(),
        None => alarm_frames.len(),
    };
    let frame_ms = fcfg.frame_len as f64 * 1000.0 / trace.sample_rate as f64;
    Ok(EventReport {
        frames: labels.len(),
        alarm_frames,
        first_arc_frame,
        latency_frames,
        latency_ms: latency_frames.map(|f| f as f64 * frame_ms),
        false_alarms,
        p_arc,
    })
}
