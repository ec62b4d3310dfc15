use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::events::EventQueue;
use super::metrics::{collect_fleet_metrics, GroupMetrics};
use super::protocol::{self, decode_message, encode_message, Message, MessageKind, OtaAck, SegmentMetrics};
use crate::adapt::{
    canary_decide, capture_alarm, stage1_evolve, stage2_evolve, temporal_validate, AdaptationBatch, AlarmContext, AlarmRecord, AlarmTriage,
    CanaryConfig, CanaryDecision, CanaryOutcome, EvolutionConfig, TemporalReport, TraceOracle,
};
use crate::detector::{detect_step, DetectorConfig, DetectorState};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureSet, Featurizer};
use crate::nn::Model;
use crate::rng;
use crate::synth::{
    apply_drift, arc_trace, nuisance_conditions, synth_normal, ArcParams, DriftSpec, HardwareProfile, Label, Resonance, ScenarioSpec, SignalTrace,
};

pub const CLOUD_ID: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub device_id: u32,
    /// `profile_id` of one of the fleet's profiles.
    pub profile: String,
    #[serde(default)]
    pub drift: Option<DriftSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    /// Segments each device runs back to back.
    pub segments: usize,
    /// Seconds per segment.
    pub segment_duration: f64,
    /// Every `arc_every`-th segment is an arc event.
    pub arc_every: usize,
    pub nuisance_only: bool,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            segments: 30,
            segment_duration: 0.41,
            arc_every: 5,
            nuisance_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetSpec {
    pub profiles: Vec<HardwareProfile>,
    pub devices: Vec<DeviceSpec>,
    pub schedule: ScheduleSpec,
    pub arc: ArcParams,
    pub features: FeatureConfig,
    pub detector: DetectorConfig,
    pub latency_ms: f64,
    pub canary: CanaryConfig,
    pub batch_threshold: usize,
    pub evolution: EvolutionConfig,
    /// Let the cloud escalate to architecture search once stage 1 saturates.
    pub stage2: bool,
    /// Temporal-validation streams per distinct device profile.
    pub holdout_nuisance: usize,
    pub holdout_arcs: usize,
    pub seed: u64,
}

impl Default for FleetSpec {
    /// Ten devices; devices 1, 4 and 7 run a drifted inv-a front end.
    fn default() -> Self {
        let devices = (0..10)
            .map(|i| {
                let drifted = [1, 4, 7].contains(&i);
                DeviceSpec {
                    device_id: i,
                    profile: if drifted || i % 2 == 0 { "inv-a" } else { "inv-b" }.into(),
                    drift: drifted.then(FleetSpec::field_drift),
                }
            })
            .collect();
        FleetSpec {
            profiles: vec![HardwareProfile::reference_a(), HardwareProfile::reference_b()],
            devices,
            schedule: ScheduleSpec::default(),
            arc: ArcParams::default(),
            features: FeatureConfig::default(),
            detector: DetectorConfig::default(),
            latency_ms: 10.0,
            canary: CanaryConfig::default(),
            batch_threshold: AdaptationBatch::DEFAULT_THRESHOLD,
            evolution: EvolutionConfig::default(),
            stage2: false,
            holdout_nuisance: 8,
            holdout_arcs: 4,
            seed: 31,
        }
    }
}

impl FleetSpec {
    /// A field regime the lab data never showed: a noisier front end and a
    /// strong resonance near 60 kHz.
    pub fn field_drift() -> DriftSpec {
        DriftSpec {
            noise_floor_scale: 4.0,
            harmonic_shift: 0.0,
            added_resonance: Some(Resonance {
                center_hz: 60_000.0,
                amplitude: 1.0,
                q: 5.0,
            }),
            season_gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::config("devices", "need at least one device"));
        }
        let ids: BTreeSet<u32> = self.devices.iter().map(|d| d.device_id).collect();
        if ids.len() != self.devices.len() || ids.contains(&CLOUD_ID) {
            return Err(Error::config("devices", "device ids must be unique and below u32::MAX"));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if !self.profiles.iter().any(|p| p.profile_id == d.profile) {
                return Err(Error::config(format!("devices[{i}].profile"), format!("unknown profile {:?}", d.profile)));
            }
            if let Some(dr) = &d.drift {
                dr.validate()?;
            }
        }
        for p in &self.profiles {
            p.validate()?;
        }
        let s = &self.schedule;
        if s.segments == 0 || s.arc_every == 0 {
            return Err(Error::config("schedule", "segments and arc_every must be >= 1"));
        }
        if !(s.segment_duration.is_finite() && s.segment_duration > 0.0) {
            return Err(Error::config("schedule.segment_duration", "must be > 0"));
        }
        for p in &self.profiles {
            if ((s.segment_duration * p.sample_rate as f64) as usize) < self.features.frame_len {
                return Err(Error::config("schedule.segment_duration", "shorter than one frame"));
            }
        }
        if !(self.latency_ms >= 0.0 && self.latency_ms.is_finite()) {
            return Err(Error::config("latency_ms", "must be >= 0"));
        }
        if self.batch_threshold == 0 {
            return Err(Error::config("batch_threshold", "must be >= 1"));
        }
        self.features.validate()?;
        self.detector.validate()?;
        self.canary.validate()?;
        self.evolution.validate()
    }

    fn segment_ns(&self) -> u64 {
        (self.schedule.segment_duration * 1e9).round() as u64
    }

    fn latency_ns(&self) -> u64 {
        (self.latency_ms * 1e6).round() as u64
    }

    /// The devices' effective profiles, drift applied.
    fn device_profiles(&self) -> Result<Vec<HardwareProfile>> {
        self.devices
            .iter()
            .map(|d| {
                let base = self.profiles.iter().find(|p| p.profile_id == d.profile).expect("validated");
                match &d.drift {
                    Some(dr) => {
                        let mut p = apply_drift(base, dr)?;
                        p.profile_id = format!("{}+drift", base.profile_id);
                        Ok(p)
                    }
                    None => Ok(base.clone()),
                }
            })
            .collect()
    }
}

/// Produces a candidate model from a ready batch.
pub trait CandidateSource {
    fn propose(&mut self, deployed: &Model, batch: &AdaptationBatch, archive: &FeatureSet) -> Result<Candidate>;
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub model: Model,
    pub stage: u8,
    pub fitness: f64,
    pub baseline_fitness: f64,
}

/// Stage-1 evolution, escalating to stage 2 when enabled and saturated.
pub struct EvolutionSource {
    pub cfg: EvolutionConfig,
    pub stage2: bool,
}

impl CandidateSource for EvolutionSource {
    fn propose(&mut self, deployed: &Model, batch: &AdaptationBatch, archive: &FeatureSet) -> Result<Candidate> {
        let s1 = stage1_evolve(deployed, batch, archive, &self.cfg)?;
        let mut best = Candidate {
            model: s1.model.clone(),
            stage: 1,
            fitness: s1.fitness,
            baseline_fitness: s1.baseline_fitness,
        };
        if self.stage2 && s1.saturated {
            let s2 = stage2_evolve(deployed, &s1, &self.cfg)?;
            if s2.fitness > best.fitness {
                best = Candidate {
                    model: s2.model,
                    stage: 2,
                    fitness: s2.fitness,
                    baseline_fitness: s1.baseline_fitness,
                };
            }
        }
        Ok(best)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub sender: u32,
    pub receiver: u32,
    pub sent_ns: u64,
    pub latency_ns: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug)]
enum Event {
    FrameTick { device: usize, segment: usize },
    Deliver(Envelope),
    WindowClose,
}

struct Device {
    id: u32,
    profile: HardwareProfile,
    drifted: bool,
    model: Model,
    state: DetectorState,
    uploads: VecDeque<AlarmRecord>,
    versions: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq)]
enum Phase {
    Idle,
    Canary {
        version: u64,
        awaiting: BTreeSet<u32>,
        open_ns: Option<u64>,
        close_ns: Option<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRound {
    pub at_ns: u64,
    pub false_alarms: usize,
    pub arc_exemplars: usize,
    pub stage: u8,
    pub fitness: f64,
    pub baseline_fitness: f64,
    pub temporal: TemporalSummary,
    /// Registry version of the candidate, if it went to canary.
    pub version: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalSummary {
    pub pass: bool,
    pub nuisance_streams: usize,
    pub streams_with_false_alarms: usize,
    pub arc_streams: usize,
    pub arcs_detected: usize,
}

impl From<&TemporalReport> for TemporalSummary {
    fn from(r: &TemporalReport) -> Self {
        TemporalSummary {
            pass: r.pass,
            nuisance_streams: r.nuisance_streams,
            streams_with_false_alarms: r.streams_with_false_alarms,
            arc_streams: r.arc_streams,
            arcs_detected: r.arcs_detected,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub version: u64,
    pub baseline_version: u64,
    pub window_start_ns: u64,
    pub window_end_ns: u64,
    pub decision: CanaryDecision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device_id: u32,
    pub profile_id: String,
    pub drifted: bool,
    pub canary: bool,
    pub final_version: u64,
    /// `(time_ns, version)` for every installation.
    pub versions: Vec<(u64, u64)>,
    pub alarms: u64,
    pub before: GroupMetrics,
    pub after: Option<GroupMetrics>,
    pub precision_before: Option<f64>,
    pub precision_after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetReport {
    pub seed: u64,
    pub initial_version: u64,
    pub final_version: u64,
    pub registry: Vec<u64>,
    pub rejected: Vec<u64>,
    pub canary_roster: Vec<u32>,
    pub devices: Vec<DeviceReport>,
    pub before: GroupMetrics,
    pub after: Option<GroupMetrics>,
    pub rounds: Vec<AdaptationRound>,
    pub decisions: Vec<DecisionRecord>,
    pub alarms_archived: usize,
    pub alarms_batched: usize,
    pub messages: BTreeMap<String, u64>,
    /// No device outside the canary roster ever installed a rejected version.
    pub containment_ok: bool,
    pub events: u64,
    pub event_log_sha256: String,
}

impl FleetReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `device_id,alarms,precision_before,precision_after`; undefined
    /// precision is left empty.
    pub fn to_csv(&self) -> String {
        let f = |p: Option<f64>| p.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut s = String::from("device_id,alarms,precision_before,precision_after\n");
        for d in &self.devices {
            s.push_str(&format!("{},{},{},{}\n", d.device_id, d.alarms, f(d.precision_before), f(d.precision_after)));
        }
        s
    }
}

pub struct FleetRun {
    pub report: FleetReport,
    /// One line per processed event; the report's hash also covers every
    /// delivered message body.
    pub event_log: Vec<String>,
    pub metrics: Vec<SegmentMetrics>,
    pub end_ns: u64,
}

struct Cloud {
    registry: BTreeMap<u64, Vec<u8>>,
    baseline: u64,
    rejected: BTreeSet<u64>,
    oracle: TraceOracle,
    triage: AlarmTriage,
    metrics: Vec<SegmentMetrics>,
    phase: Phase,
    roster: Vec<u32>,
    rounds: Vec<AdaptationRound>,
    decisions: Vec<DecisionRecord>,
    holdout: Vec<SignalTrace>,
}

struct Sim<'a> {
    spec: &'a FleetSpec,
    archive: &'a FeatureSet,
    source: &'a mut dyn CandidateSource,
    queue: EventQueue<Event>,
    devices: Vec<Device>,
    index: BTreeMap<u32, usize>,
    cloud: Cloud,
    fz: Featurizer,
    log: Vec<String>,
    messages: BTreeMap<String, u64>,
    nuisance: Vec<(crate::synth::Category, usize)>,
}

impl Sim<'_> {
    fn send(&mut self, at_ns: u64, sender: u32, receiver: u32, m: &Message) -> Result<()> {
        let latency_ns = self.spec.latency_ns();
        *self.messages.entry(format!("{:?}", m.kind)).or_default() += 1;
        let env = Envelope {
            sender,
            receiver,
            sent_ns: at_ns,
            latency_ns,
            bytes: encode_message(m),
        };
        self.queue.schedule(at_ns + latency_ns, Event::Deliver(env))?;
        Ok(())
    }

    fn trace_for(&self, device: usize, segment: usize) -> Result<SignalTrace> {
        let d = &self.devices[device];
        let s = &self.spec.schedule;
        let seed = rng::derive(rng::derive(self.spec.seed, d.id as u64 + 1), segment as u64);
        if !s.nuisance_only && (segment + 1) % s.arc_every == 0 {
            let variant = (segment + 1) / s.arc_every + device;
            arc_trace(&d.profile, &self.spec.arc, variant, s.segment_duration, seed)
        } else {
            let (cat, v) = self.nuisance[(device * 7 + segment) % self.nuisance.len()];
            synth_normal(&d.profile, &ScenarioSpec::new(cat, v, s.segment_duration, seed))
        }
    }

    fn frame_tick(&mut self, now: u64, device: usize, segment: usize) -> Result<()> {
        let trace = self.trace_for(device, segment)?;
        let trace_id = ((self.devices[device].id as u64) << 32) | segment as u64;
        let l = self.spec.features.frame_len;
        self.cloud.oracle.insert(trace_id, &trace, l);
        let labels = trace.frame_labels(l);
        let frames: Vec<&[f32]> = trace.samples.chunks_exact(l).collect();
        let mut rows = Vec::with_capacity(frames.len() * self.spec.features.dim());
        for f in &frames {
            rows.extend_from_slice(&self.fz.featurize(f)?.bands);
        }
        let frame_ns = l as u64 * 1_000_000_000 / trace.sample_rate as u64;
        let dev = &mut self.devices[device];
        let p = dev.model.predict_proba(&rows)?;
        dev.state = DetectorState::default();
        let mut m = SegmentMetrics {
            device_id: dev.id,
            version: dev.model.version(),
            segment: segment as u32,
            start_ns: now,
            frames: frames.len() as u32,
            normal_frames: labels.iter().filter(|&&x| x == Label::Normal).count() as u32,
            arc_event: trace.onset_index.is_some(),
            ..SegmentMetrics::default()
        };
        let first_arc = labels.iter().position(|&x| x == Label::Arc);
        let mut detected = false;
        for (i, (&pi, frame)) in p.iter().zip(&frames).enumerate() {
            let (s, _) = detect_step(dev.state, pi as f64, &self.spec.detector);
            dev.state = s;
            let ctx = AlarmContext {
                trace_id,
                frame_index: i as u32,
                profile_id: dev.profile.profile_id.clone(),
                category: trace.category,
            };
            if let Some(rec) = capture_alarm(&dev.state, dev.id, now + (i as u64 + 1) * frame_ns, &dev.model, &self.fz, frame, ctx)? {
                m.alarms += 1;
                if labels[i] == Label::Arc {
                    m.true_alarms += 1;
                }
                if first_arc.is_some_and(|a| i >= a) {
                    detected = true;
                }
                dev.uploads.push_back(rec);
                dev.state.reset();
            }
        }
        m.missed = m.arc_event && !detected;
        let id = dev.id;
        while let Some(rec) = self.devices[device].uploads.pop_front() {
            self.send(rec.timestamp_ns, id, CLOUD_ID, &protocol::alarm_upload(&rec))?;
        }
        let end = now + self.spec.segment_ns();
        self.send(end, id, CLOUD_ID, &protocol::metrics_report(&m))?;
        if segment + 1 < self.spec.schedule.segments {
            self.queue.schedule(end, Event::FrameTick { device, segment: segment + 1 })?;
        }
        Ok(())
    }

    fn deliver(&mut self, now: u64, env: Envelope) -> Result<()> {
        let msg = decode_message(&env.bytes).map_err(|e| Error::Format(e.to_string()))?;
        if env.receiver == CLOUD_ID {
            self.cloud_receive(now, &msg)
        } else {
            self.device_receive(now, env.receiver, &msg)
        }
    }

    fn device_receive(&mut self, now: u64, id: u32, msg: &Message) -> Result<()> {
        if msg.kind != MessageKind::OtaPush {
            return Err(Error::Format(format!("device {id} cannot handle {:?}", msg.kind)));
        }
        let model = Model::from_bytes(&msg.body)?;
        let version = model.version();
        if !self.cloud.registry.contains_key(&version) {
            return Err(Error::UnknownVersion(version));
        }
        let d = self.index[&id];
        let dev = &mut self.devices[d];
        dev.model = model;
        dev.versions.push((now, version));
        self.send(now, id, CLOUD_ID, &protocol::ota_ack(&OtaAck { device_id: id, version }))
    }

    fn cloud_receive(&mut self, now: u64, msg: &Message) -> Result<()> {
        let fmt = |e: protocol::DecodeError| Error::Format(e.to_string());
        match msg.kind {
            MessageKind::AlarmUpload => {
                let rec = protocol::read_alarm_upload(msg).map_err(fmt)?;
                self.cloud.triage.route(rec, &self.cloud.oracle)?;
                self.maybe_adapt(now)
            }
            MessageKind::MetricsReport => {
                let m = protocol::read_metrics_report(msg).map_err(fmt)?;
                self.cloud.metrics.push(m);
                Ok(())
            }
            MessageKind::OtaAck => {
                let ack = protocol::read_ota_ack(msg).map_err(fmt)?;
                let close = self.window_close_time(now);
                if let Phase::Canary {
                    version,
                    awaiting,
                    open_ns,
                    close_ns,
                } = &mut self.cloud.phase
                {
                    if ack.version == *version && awaiting.remove(&ack.device_id) && awaiting.is_empty() {
                        *open_ns = Some(now);
                        *close_ns = Some(close);
                        self.queue.schedule(close, Event::WindowClose)?;
                    }
                }
                Ok(())
            }
            MessageKind::OtaPush => Err(Error::Format("the cloud does not accept OTA pushes".into())),
        }
    }

    /// First segment boundary at or after `open`, plus enough whole
    /// segments for the canary group to reach the window, plus delivery.
    fn window_close_time(&self, open: u64) -> u64 {
        let seg = self.spec.segment_ns();
        let boundary = open.div_ceil(seg) * seg;
        let frames_per_segment = (self.spec.schedule.segment_duration * self.devices[0].profile.sample_rate as f64) as u64
            / self.spec.features.frame_len as u64;
        let per_round = (self.cloud.roster.len() as u64 * frames_per_segment).max(1);
        let n = self.spec.canary.window_frames.div_ceil(per_round);
        boundary + n * seg + self.spec.latency_ns() + 1
    }

    fn maybe_adapt(&mut self, now: u64) -> Result<()> {
        if self.cloud.phase != Phase::Idle {
            return Ok(());
        }
        let baseline = self.cloud.baseline;
        self.cloud.triage.batch.records.retain(|r| r.model_version == baseline);
        if !self.cloud.triage.batch.is_ready() {
            return Ok(());
        }
        let batch = self.cloud.triage.take_batch();
        let deployed = Model::from_bytes(&self.cloud.registry[&baseline])?;
        let cand = self.source.propose(&deployed, &batch, self.archive)?;
        let report = temporal_validate(&cand.model, &self.cloud.holdout, &self.spec.features, &self.spec.detector)?;
        let mut round = AdaptationRound {
            at_ns: now,
            false_alarms: batch.len(),
            arc_exemplars: batch.arc_exemplars.len(),
            stage: cand.stage,
            fitness: cand.fitness,
            baseline_fitness: cand.baseline_fitness,
            temporal: TemporalSummary::from(&report),
            version: None,
        };
        if report.pass {
            let version = self.cloud.registry.keys().next_back().copied().unwrap_or(0) + 1;
            let mut model = cand.model;
            model.params.version = version;
            self.cloud.registry.insert(version, model.to_bytes());
            round.version = Some(version);
            let roster = self.cloud.roster.clone();
            self.ota_deploy(now, version, &roster, true)?;
            self.cloud.phase = Phase::Canary {
                version,
                awaiting: roster.into_iter().collect(),
                open_ns: None,
                close_ns: None,
            };
        }
        self.cloud.rounds.push(round);
        Ok(())
    }

    /// Pushes `version` to `targets`; with `canary` only roster devices are
    /// reached.
    fn ota_deploy(&mut self, now: u64, version: u64, targets: &[u32], canary: bool) -> Result<Vec<u32>> {
        let body = self.cloud.registry.get(&version).ok_or(Error::UnknownVersion(version))?.clone();
        let reached: Vec<u32> = targets
            .iter()
            .copied()
            .filter(|id| self.index.contains_key(id) && (!canary || self.cloud.roster.contains(id)))
            .collect();
        for &id in &reached {
            self.send(now, CLOUD_ID, id, &protocol::ota_push(body.clone()))?;
        }
        Ok(reached)
    }

    fn window_close(&mut self, now: u64) -> Result<()> {
        let Phase::Canary {
            version,
            open_ns: Some(open),
            close_ns: Some(close),
            ..
        } = self.cloud.phase.clone()
        else {
            return Ok(());
        };
        let baseline = self.cloud.baseline;
        let roster: BTreeSet<u32> = self.cloud.roster.iter().copied().collect();
        let in_window = |s: &&SegmentMetrics| s.start_ns >= open && s.start_ns < close;
        let cand = GroupMetrics::from_segments(
            self.cloud.metrics.iter().filter(in_window).filter(|s| roster.contains(&s.device_id) && s.version == version),
        );
        let base = GroupMetrics::from_segments(
            self.cloud.metrics.iter().filter(in_window).filter(|s| !roster.contains(&s.device_id) && s.version == baseline),
        );
        let decision = match canary_decide(&cand.canary_stats(), &base.canary_stats(), &self.spec.canary) {
            // The fleet has stopped; the candidate stays undecided.
            Err(Error::IncompleteWindow { .. }) if self.queue.is_empty() => return Ok(()),
            Err(Error::IncompleteWindow { .. }) => {
                let next = now + self.spec.segment_ns();
                if let Phase::Canary { close_ns, .. } = &mut self.cloud.phase {
                    *close_ns = Some(next);
                }
                self.queue.schedule(next, Event::WindowClose)?;
                return Ok(());
            }
            other => other?,
        };
        self.cloud.decisions.push(DecisionRecord {
            version,
            baseline_version: baseline,
            window_start_ns: open,
            window_end_ns: close,
            decision: decision.clone(),
        });
        match decision.outcome {
            CanaryOutcome::Promote => {
                let rest: Vec<u32> = self.devices.iter().map(|d| d.id).filter(|id| !roster.contains(id)).collect();
                self.ota_deploy(now, version, &rest, false)?;
                self.cloud.baseline = version;
            }
            CanaryOutcome::Rollback => {
                self.cloud.rejected.insert(version);
                let r: Vec<u32> = roster.into_iter().collect();
                self.ota_deploy(now, baseline, &r, true)?;
            }
        }
        self.cloud.phase = Phase::Idle;
        Ok(())
    }

    fn run(mut self) -> Result<FleetRun> {
        for d in 0..self.devices.len() {
            self.queue.schedule(0, Event::FrameTick { device: d, segment: 0 })?;
        }
        let mut hasher = Sha256::new();
        let mut events = 0u64;
        while let Some((t, seq, ev)) = self.queue.pop() {
            events += 1;
            let line = match &ev {
                Event::FrameTick { device, segment } => format!("{t} {seq} frame_tick device={} segment={segment}", self.devices[*device].id),
                Event::Deliver(e) => format!(
                    "{t} {seq} {} {}->{} bytes={}",
                    match e.bytes.first().copied().map(MessageKind::from_tag) {
                        Some(Ok(MessageKind::AlarmUpload)) => "upload_arrive",
                        Some(Ok(MessageKind::OtaPush)) => "ota_arrive",
                        Some(Ok(MessageKind::OtaAck)) => "ack_arrive",
                        Some(Ok(MessageKind::MetricsReport)) => "metrics_arrive",
                        _ => "unknown",
                    },
                    e.sender,
                    e.receiver,
                    e.bytes.len()
                ),
                Event::WindowClose => format!("{t} {seq} window_close"),
            };
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
            if let Event::Deliver(e) = &ev {
                hasher.update(&e.bytes);
            }
            self.log.push(line);
            match ev {
                Event::FrameTick { device, segment } => self.frame_tick(t, device, segment)?,
                Event::Deliver(env) => self.deliver(t, env)?,
                Event::WindowClose => self.window_close(t)?,
            }
        }
        let end_ns = self.queue.now();
        let hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>();
        self.finish(end_ns, events, hash)
    }

    fn finish(self, end_ns: u64, events: u64, hash: String) -> Result<FleetRun> {
        let c = &self.cloud;
        let initial = *c.registry.keys().next().expect("registry holds the initial model");
        let final_version = c.baseline;
        let all = collect_fleet_metrics(&c.metrics, 0, end_ns, end_ns)?;
        let roster: BTreeSet<u32> = c.roster.iter().copied().collect();
        let mut devices = Vec::new();
        for d in &self.devices {
            let mine: Vec<&SegmentMetrics> = c.metrics.iter().filter(|s| s.device_id == d.id).collect();
            let before = GroupMetrics::from_segments(mine.iter().copied().filter(|s| s.version == initial));
            let after = (final_version != initial).then(|| GroupMetrics::from_segments(mine.iter().copied().filter(|s| s.version == final_version)));
            devices.push(DeviceReport {
                device_id: d.id,
                profile_id: d.profile.profile_id.clone(),
                drifted: d.drifted,
                canary: roster.contains(&d.id),
                final_version: d.model.version(),
                versions: d.versions.clone(),
                alarms: all.devices.get(&d.id).map(|g| g.alarms).unwrap_or(0),
                precision_before: before.precision,
                precision_after: after.as_ref().and_then(|a| a.precision),
                before,
                after,
            });
        }
        let containment_ok = self
            .devices
            .iter()
            .filter(|d| !roster.contains(&d.id))
            .all(|d| d.versions.iter().all(|(_, v)| !c.rejected.contains(v)));
        let before = GroupMetrics::from_segments(c.metrics.iter().filter(|s| s.version == initial));
        let after = (final_version != initial).then(|| GroupMetrics::from_segments(c.metrics.iter().filter(|s| s.version == final_version)));
        let report = FleetReport {
            seed: self.spec.seed,
            initial_version: initial,
            final_version,
            registry: c.registry.keys().copied().collect(),
            rejected: c.rejected.iter().copied().collect(),
            canary_roster: c.roster.clone(),
            devices,
            before,
            after,
            rounds: c.rounds.clone(),
            decisions: c.decisions.clone(),
            alarms_archived: c.triage.archive.len(),
            alarms_batched: c.triage.batch.len() + c.rounds.iter().map(|r| r.false_alarms).sum::<usize>(),
            messages: self.messages.clone(),
            containment_ok,
            events,
            event_log_sha256: hash,
        };
        Ok(FleetRun {
            report,
            event_log: self.log,
            metrics: self.cloud.metrics,
            end_ns,
        })
    }
}

fn holdout_streams(spec: &FleetSpec, profiles: &[HardwareProfile]) -> Result<Vec<SignalTrace>> {
    let mut seen: Vec<&HardwareProfile> = Vec::new();
    for p in profiles {
        if !seen.iter().any(|q| *q == p) {
            seen.push(p);
        }
    }
    let nuisance = nuisance_conditions();
    let mut out = Vec::new();
    for (pi, p) in seen.into_iter().enumerate() {
        let base = rng::derive(spec.seed, 0x401d + pi as u64);
        for k in 0..spec.holdout_nuisance {
            let (cat, v) = nuisance[(k * 5 + pi) % nuisance.len()];
            let s = ScenarioSpec::new(cat, v, spec.schedule.segment_duration, rng::derive(base, k as u64));
            out.push(synth_normal(p, &s)?);
        }
        for k in 0..spec.holdout_arcs {
            out.push(arc_trace(p, &spec.arc, k, spec.schedule.segment_duration, rng::derive(base, 1000 + k as u64))?);
        }
    }
    Ok(out)
}

/// Runs the fleet with `base` deployed everywhere and `source` producing
/// candidates from the cloud's batches.
pub fn run_sim(spec: &FleetSpec, base: &Model, archive: &FeatureSet, source: &mut dyn CandidateSource) -> Result<FleetRun> {
    spec.validate()?;
    if archive.dim() != base.arch.input_dim || spec.features.dim() != base.arch.input_dim {
        return Err(Error::ShapeMismatch {
            name: "features".into(),
            expected: vec![base.arch.input_dim],
            got: vec![spec.features.dim()],
        });
    }
    let profiles = spec.device_profiles()?;
    let mut devices = Vec::new();
    let mut index = BTreeMap::new();
    for (i, (d, p)) in spec.devices.iter().zip(&profiles).enumerate() {
        index.insert(d.device_id, i);
        devices.push(Device {
            id: d.device_id,
            profile: p.clone(),
            drifted: d.drift.is_some(),
            model: base.clone(),
            state: DetectorState::default(),
            uploads: VecDeque::new(),
            versions: vec![(0, base.version())],
        });
    }
    let mut ids: Vec<u32> = spec.devices.iter().map(|d| d.device_id).collect();
    ids.sort_unstable();
    ids.truncate(spec.canary.canary_count(ids.len()));
    let cloud = Cloud {
        registry: BTreeMap::from([(base.version(), base.to_bytes())]),
        baseline: base.version(),
        rejected: BTreeSet::new(),
        oracle: TraceOracle::new(),
        triage: AlarmTriage::new(spec.batch_threshold),
        metrics: Vec::new(),
        phase: Phase::Idle,
        roster: ids,
        rounds: Vec::new(),
        decisions: Vec::new(),
        holdout: holdout_streams(spec, &profiles)?,
    };
    let sim = Sim {
        spec,
        archive,
        source,
        queue: EventQueue::new(),
        devices,
        index,
        cloud,
        fz: Featurizer::new(&spec.features)?,
        log: Vec::new(),
        messages: BTreeMap::new(),
        nuisance: nuisance_conditions(),
    };
    sim.run()
}

/// [`run_sim`] with the fleet's evolution settings as the candidate source.
pub fn run_fleet(spec: &FleetSpec, base: &Model, archive: &FeatureSet) -> Result<FleetRun> {
    let mut source = EvolutionSource {
        cfg: spec.evolution.clone(),
        stage2: spec.stage2,
    };
    run_sim(spec, base, archive, &mut source)
}
