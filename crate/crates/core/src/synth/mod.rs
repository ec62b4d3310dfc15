//! Synthetic PV string current.
//!
//! Traces are the sum of a DC path (profile DC level shaped by the category
//! envelope and MPPT perturbation) and an AC part (switching harmonics, line
//! ripple, contact pulses, white noise and optional resonances). Arc traces
//! add, from the onset sample on, pink broadband noise, Poisson bursts and a
//! fractional DC drop. Each random component reads its own derived ChaCha8
//! stream, so the normal part of an arc trace matches [`synth_normal`] exactly.

pub mod recipes;
mod suite;
mod trace_io;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::fft::FftPlan;
use crate::rng;
use num_complex::Complex64;
pub use suite::{arc_trace, nuisance_conditions, synth_suite, ClassBalance, DatasetManifest, Suite, SuiteConfig, TraceEntry, MANIFEST_FILE};
pub use trace_io::{decode_trace, encode_trace, read_trace_samples, write_trace_samples, TRACE_MAGIC, TRACE_VERSION};

const STREAM_WHITE: u64 = 0;
const STREAM_RESONANCE: u64 = 1;
const STREAM_PINK: u64 = 100;
const STREAM_BURST: u64 = 101;

/// Burst pulse time constant.
pub const BURST_TAU: f64 = 0.2e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal = 0,
    Arc = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Arc),
            other => Err(Error::InvalidLabel(other)),
        }
    }
}

/// Table I operating categories plus steady operation and arcing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Steady,
    StartUp,
    ParallelStrings,
    DirectConnection,
    BreakerOperation,
    VariableInput,
    LimitedFeedStartStop,
    GridConnection,
    AcLoadSwitching,
    HarmonicGrid,
    Arc,
}

impl Category {
    pub const NUISANCE: [Category; 9] = [
        Category::StartUp,
        Category::ParallelStrings,
        Category::DirectConnection,
        Category::BreakerOperation,
        Category::VariableInput,
        Category::LimitedFeedStartStop,
        Category::GridConnection,
        Category::AcLoadSwitching,
        Category::HarmonicGrid,
    ];

    pub const ALL: [Category; 11] = [
        Category::Steady,
        Category::StartUp,
        Category::ParallelStrings,
        Category::DirectConnection,
        Category::BreakerOperation,
        Category::VariableInput,
        Category::LimitedFeedStartStop,
        Category::GridConnection,
        Category::AcLoadSwitching,
        Category::HarmonicGrid,
        Category::Arc,
    ];

    /// Position in [`Category::ALL`].
    pub fn index(self) -> usize {
        Category::ALL.iter().position(|&c| c == self).expect("ALL lists every category")
    }

    /// Number of distinct operating conditions in the category.
    pub fn sub_conditions(self) -> usize {
        match self {
            Category::StartUp => 7,
            Category::ParallelStrings => 3,
            Category::DirectConnection => 6,
            Category::BreakerOperation => 4,
            Category::VariableInput => 3,
            Category::LimitedFeedStartStop => 2,
            Category::GridConnection => 4,
            Category::AcLoadSwitching => 4,
            Category::HarmonicGrid => 2,
            Category::Steady => 1,
            Category::Arc => recipes::ARC_CONDITIONS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Steady => "steady",
            Category::StartUp => "start_up",
            Category::ParallelStrings => "parallel_strings",
            Category::DirectConnection => "direct_connection",
            Category::BreakerOperation => "breaker_operation",
            Category::VariableInput => "variable_input",
            Category::LimitedFeedStartStop => "limited_feed_start_stop",
            Category::GridConnection => "grid_connection",
            Category::AcLoadSwitching => "ac_load_switching",
            Category::HarmonicGrid => "harmonic_grid",
            Category::Arc => "arc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Harmonic {
    /// Multiple of the switching frequency.
    pub multiple: f64,
    /// Peak amplitude in amperes.
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpptPerturb {
    pub rate_hz: f64,
    /// Fraction of the DC level.
    pub depth: f64,
}

/// Narrow-band component: white noise through a band-pass biquad, scaled to
/// `amplitude` amperes RMS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resonance {
    pub center_hz: f64,
    pub amplitude: f64,
    pub q: f64,
}

/// Spectral fingerprint of one inverter platform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub profile_id: String,
    pub sample_rate: u32,
    pub dc_level: f64,
    pub switching_freq: f64,
    pub harmonics: Vec<Harmonic>,
    /// White noise, amperes RMS.
    pub noise_floor: f64,
    pub mppt: MpptPerturb,
    #[serde(default)]
    pub resonances: Vec<Resonance>,
}

impl HardwareProfile {
    /// Reference source platform: 20 kHz switching.
    pub fn reference_a() -> Self {
        HardwareProfile {
            profile_id: "inv-a".into(),
            sample_rate: 250_000,
            dc_level: 8.0,
            switching_freq: 20_000.0,
            harmonics: vec![
                Harmonic { multiple: 1.0, amplitude: 0.40 },
                Harmonic { multiple: 2.0, amplitude: 0.12 },
                Harmonic { multiple: 3.0, amplitude: 0.06 },
            ],
            noise_floor: 0.01,
            mppt: MpptPerturb { rate_hz: 5.0, depth: 0.02 },
            resonances: Vec::new(),
        }
    }

    /// Second platform: 16 kHz switching, odd harmonics, noisier front end.
    pub fn reference_b() -> Self {
        HardwareProfile {
            profile_id: "inv-b".into(),
            sample_rate: 250_000,
            dc_level: 10.0,
            switching_freq: 16_000.0,
            harmonics: vec![
                Harmonic { multiple: 1.0, amplitude: 0.60 },
                Harmonic { multiple: 3.0, amplitude: 0.20 },
                Harmonic { multiple: 5.0, amplitude: 0.08 },
            ],
            noise_floor: 0.08,
            mppt: MpptPerturb { rate_hz: 8.0, depth: 0.03 },
            resonances: Vec::new(),
        }
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate", "must be > 0"));
        }
        if !(self.dc_level >= 0.0) {
            return Err(Error::config("dc_level", "must be >= 0"));
        }
        if !(self.switching_freq > 0.0) {
            return Err(Error::config("switching_freq", "must be > 0"));
        }
        if self.switching_freq >= self.nyquist() {
            return Err(Error::config(
                "switching_freq",
                format!(
                    "{} Hz is at or above Nyquist ({} Hz)",
                    self.switching_freq,
                    self.nyquist()
                ),
            ));
        }
        for (i, h) in self.harmonics.iter().enumerate() {
            if !(h.multiple > 0.0) || !(h.amplitude >= 0.0) {
                return Err(Error::config(
                    format!("harmonics[{i}]"),
                    "multiple must be > 0 and amplitude >= 0",
                ));
            }
        }
        if !(self.noise_floor >= 0.0) {
            return Err(Error::config("noise_floor", "must be >= 0"));
        }
        if !(self.mppt.rate_hz >= 0.0) {
            return Err(Error::config("mppt.rate_hz", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.mppt.depth) {
            return Err(Error::config("mppt.depth", "must be in [0, 1)"));
        }
        for (i, r) in self.resonances.iter().enumerate() {
            if !(r.center_hz > 0.0 && r.center_hz < self.nyquist()) {
                return Err(Error::config(
                    format!("resonances[{i}].center_hz"),
                    "must be in (0, Nyquist)",
                ));
            }
            if !(r.amplitude >= 0.0) || !(r.q > 0.0) {
                return Err(Error::config(
                    format!("resonances[{i}]"),
                    "amplitude must be >= 0 and q > 0",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcParams {
    pub onset_index: usize,
    /// Wideband arc noise, amperes RMS.
    pub broadband_gain: f64,
    /// Spectral slope of the arc noise, `1/f^gamma` power.
    pub pink_exponent: f64,
    /// Mean burst arrivals per second.
    pub burst_rate: f64,
    pub burst_amp: f64,
    /// Fraction of the DC level lost across the arc.
    pub dc_drop: f64,
}

impl Default for ArcParams {
    fn default() -> Self {
        ArcParams {
            onset_index: 0,
            broadband_gain: 0.25,
            pink_exponent: 1.0,
            burst_rate: 300.0,
            burst_amp: 0.5,
            dc_drop: 0.05,
        }
    }
}

impl ArcParams {
    pub fn validate(&self, profile: &HardwareProfile) -> Result<()> {
        if !(self.broadband_gain >= 0.0) {
            return Err(Error::config("broadband_gain", "must be >= 0"));
        }
        // A noiseless profile with a noiseless arc is allowed so that the DC
        // drop can be checked in isolation.
        let noiseless = profile.noise_floor == 0.0 && self.broadband_gain == 0.0;
        if !noiseless && self.broadband_gain <= profile.noise_floor {
            return Err(Error::config(
                "broadband_gain",
                format!(
                    "{} A must exceed the profile noise floor {} A",
                    self.broadband_gain, profile.noise_floor
                ),
            ));
        }
        if !(self.pink_exponent >= 0.0) {
            return Err(Error::config("pink_exponent", "must be >= 0"));
        }
        if !(self.burst_rate >= 0.0) || !(self.burst_amp >= 0.0) {
            return Err(Error::config("burst_rate", "burst rate and amplitude must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dc_drop) {
            return Err(Error::config("dc_drop", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub category: Category,
    /// Sub-condition index within the category.
    #[serde(default)]
    pub variant: usize,
    /// Seconds.
    pub duration: f64,
    pub seed: u64,
    /// Seconds; category recipes read them in order.
    #[serde(default)]
    pub event_times: Vec<f64>,
}

impl ScenarioSpec {
    /// Scenario with the category's default event times.
    pub fn new(category: Category, variant: usize, duration: f64, seed: u64) -> Self {
        ScenarioSpec {
            category,
            variant,
            duration,
            seed,
            event_times: recipes::default_event_times(category, duration),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::config("duration", "must be > 0"));
        }
        if self.variant >= self.category.sub_conditions() {
            return Err(Error::config(
                "variant",
                format!(
                    "{} has {} sub-conditions",
                    self.category.name(),
                    self.category.sub_conditions()
                ),
            ));
        }
        if self.event_times.iter().any(|&t| !(0.0..=self.duration).contains(&t)) {
            return Err(Error::config("event_times", "must lie within [0, duration]"));
        }
        Ok(())
    }

    pub fn sample_count(&self, sample_rate: u32) -> usize {
        (self.duration * sample_rate as f64).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub noise_floor_scale: f64,
    /// Relative change of the switching frequency.
    pub harmonic_shift: f64,
    #[serde(default)]
    pub added_resonance: Option<Resonance>,
    pub season_gain: f64,
}

impl DriftSpec {
    pub fn identity() -> Self {
        DriftSpec {
            noise_floor_scale: 1.0,
            harmonic_shift: 0.0,
            added_resonance: None,
            season_gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_floor_scale > 0.0) {
            return Err(Error::config("noise_floor_scale", "must be > 0"));
        }
        if !(1.0 + self.harmonic_shift > 0.0) {
            return Err(Error::config("harmonic_shift", "1 + shift must be > 0"));
        }
        if !(self.season_gain > 0.0) {
            return Err(Error::config("season_gain", "must be > 0"));
        }
        Ok(())
    }
}

/// A synthesized current trace with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalTrace {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// First arcing sample, if any.
    pub onset_index: Option<usize>,
    pub profile_id: String,
    pub category: Category,
}

impl SignalTrace {
    /// Frame `i` covers samples `[iL, (i+1)L)`; it is arc iff it reaches the onset.
    pub fn frame_labels(&self, frame_len: usize) -> Vec<Label> {
        let frames = self.samples.len() / frame_len;
        (0..frames)
            .map(|i| match self.onset_index {
                Some(onset) if (i + 1) * frame_len > onset => Label::Arc,
                _ => Label::Normal,
            })
            .collect()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

struct Rendered {
    dc: Vec<f64>,
    ac: Vec<f64>,
}

fn render(profile: &HardwareProfile, scenario: &ScenarioSpec) -> Result<Rendered> {
    profile.validate()?;
    scenario.validate()?;
    let fs = profile.sample_rate as f64;
    let n = scenario.sample_count(profile.sample_rate);
    let recipe = recipes::recipe(scenario, profile.dc_level);
    let tau = std::f64::consts::TAU;
    let nyquist = profile.nyquist();
    let harmonics: Vec<&Harmonic> = profile
        .harmonics
        .iter()
        .filter(|h| h.multiple * profile.switching_freq < nyquist)
        .collect();
    let depth = profile.mppt.depth * recipe.mppt_scale;

    let mut dc = Vec::with_capacity(n);
    let mut ac = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        let mppt = if depth == 0.0 {
            1.0
        } else {
            1.0 + depth * (tau * profile.mppt.rate_hz * t).sin()
        };
        dc.push(profile.dc_level * recipe.dc.at(t) * mppt);

        let mut v = 0.0;
        let gate = recipe.switching.at(t) * recipe.harmonic_scale;
        if gate != 0.0 {
            for h in &harmonics {
                v += gate * h.amplitude * (tau * h.multiple * profile.switching_freq * t).sin();
            }
        }
        for r in &recipe.ripple {
            v += r.amplitude * profile.dc_level * r.envelope.at(t) * (tau * r.freq * t).sin();
        }
        ac.push(v);
    }

    for p in &recipe.pulses {
        add_pulse(&mut ac, fs, p.time, p.amplitude, p.tau);
    }

    if profile.noise_floor > 0.0 {
        let mut white = rng::derive_rng(scenario.seed, STREAM_WHITE);
        for v in ac.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut white);
            *v += profile.noise_floor * z;
        }
    }

    for (j, res) in profile.resonances.iter().enumerate() {
        let mut r = rng::derive_rng(scenario.seed, STREAM_RESONANCE + j as u64);
        let narrow = bandpass_noise(n, fs, res, &mut r);
        for (v, x) in ac.iter_mut().zip(narrow) {
            *v += x;
        }
    }

    Ok(Rendered { dc, ac })
}

fn add_pulse(buf: &mut [f64], fs: f64, time: f64, amplitude: f64, tau: f64) {
    if amplitude == 0.0 {
        return;
    }
    let start = (time * fs).ceil().max(0.0) as usize;
    let len = (10.0 * tau * fs).ceil() as usize + 1;
    for i in start..(start + len).min(buf.len()) {
        let dt = i as f64 / fs - time;
        buf[i] += amplitude * (-dt / tau).exp();
    }
}

/// RBJ constant-peak band-pass biquad driven by white noise, scaled to the
/// requested RMS.
fn bandpass_noise(n: usize, fs: f64, res: &Resonance, rng: &mut rng::SimRng) -> Vec<f64> {
    let w0 = std::f64::consts::TAU * res.center_hz / fs;
    let alpha = w0.sin() / (2.0 * res.q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = StandardNormal.sample(rng);
        let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        out.push(y);
    }
    scale_to_rms(&mut out, res.amplitude);
    out
}

fn scale_to_rms(buf: &mut [f64], target: f64) {
    if buf.is_empty() {
        return;
    }
    let rms = (buf.iter().map(|v| v * v).sum::<f64>() / buf.len() as f64).sqrt();
    let k = if rms > 0.0 { target / rms } else { 0.0 };
    for v in buf.iter_mut() {
        *v *= k;
    }
}

/// White Gaussian noise shaped by `1/f^(gamma/2)` in magnitude, unit RMS
/// scaled to `gain`.
fn pink_noise(len: usize, gamma: f64, fs: f64, gain: f64, rng: &mut rng::SimRng) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    let n = len.next_power_of_two().max(2);
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let plan = FftPlan::new(n);
    plan.forward(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        *b = if k == 0 { Complex64::new(0.0, 0.0) } else { *b * f.powf(-gamma / 2.0) };
    }
    plan.inverse(&mut buf);
    let mut out: Vec<f64> = buf[..len].iter().map(|c| c.re).collect();
    scale_to_rms(&mut out, gain);
    out
}

fn finish(r: Rendered, profile: &HardwareProfile, scenario: &ScenarioSpec, onset: Option<usize>) -> SignalTrace {
    SignalTrace {
        samples: r.dc.iter().zip(&r.ac).map(|(d, a)| (d + a) as f32).collect(),
        sample_rate: profile.sample_rate,
        onset_index: onset,
        profile_id: profile.profile_id.clone(),
        category: scenario.category,
    }
}

/// Normal operation under `scenario`; every frame is labeled normal.
pub fn synth_normal(profile: &HardwareProfile, scenario: &ScenarioSpec) -> Result<SignalTrace> {
    if scenario.category == Category::Arc {
        return Err(Error::config("category", "synth_normal cannot render an arc scenario"));
    }
    let r = render(profile, scenario)?;
    Ok(finish(r, profile, scenario, None))
}

/// Normal operation with an arc starting at `arc.onset_index`.
///
/// Samples before the onset are identical to [`synth_normal`] with the same
/// scenario (the `Arc` category renders like a steady scenario at the
/// variant's operating point).
pub fn synth_arc(profile: &HardwareProfile, arc: &ArcParams, scenario: &ScenarioSpec) -> Result<SignalTrace> {
    profile.validate()?;
    arc.validate(profile)?;
    let mut r = render(profile, scenario)?;
    let n = r.dc.len();
    if arc.onset_index >= n {
        return Err(Error::config(
            "onset_index",
            format!("{} is past the end of a {n}-sample trace", arc.onset_index),
        ));
    }
    let fs = profile.sample_rate as f64;
    let onset = arc.onset_index;

    for d in &mut r.dc[onset..] {
        *d *= 1.0 - arc.dc_drop;
    }

    if arc.broadband_gain > 0.0 {
        let mut pink_rng = rng::derive_rng(scenario.seed, STREAM_PINK);
        let pink = pink_noise(n - onset, arc.pink_exponent, fs, arc.broadband_gain, &mut pink_rng);
        for (v, p) in r.ac[onset..].iter_mut().zip(pink) {
            *v += p;
        }
    }

    if arc.burst_rate > 0.0 && arc.burst_amp > 0.0 {
        let mut burst_rng = rng::derive_rng(scenario.seed, STREAM_BURST);
        let gap = Exp::new(arc.burst_rate).expect("burst rate checked positive");
        let end = n as f64 / fs;
        let mut t = onset as f64 / fs;
        loop {
            t += gap.sample(&mut burst_rng);
            if t >= end {
                break;
            }
            let sign = if burst_rng.random::<bool>() { 1.0 } else { -1.0 };
            let scale: f64 = burst_rng.random_range(0.5..1.5);
            add_pulse(&mut r.ac, fs, t, sign * scale * arc.burst_amp, BURST_TAU);
        }
    }

    Ok(finish(r, profile, scenario, Some(onset)))
}

/// Returns a drifted copy of `profile`.
pub fn apply_drift(profile: &HardwareProfile, drift: &DriftSpec) -> Result<HardwareProfile> {
    drift.validate()?;
    let mut out = profile.clone();
    out.noise_floor *= drift.noise_floor_scale;
    out.switching_freq *= 1.0 + drift.harmonic_shift;
    out.dc_level *= drift.season_gain;
    if let Some(res) = &drift.added_resonance {
        out.resonances.push(res.clone());
    }
    out.validate()?;
    Ok(out)
}
