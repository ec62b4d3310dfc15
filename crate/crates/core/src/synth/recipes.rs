//! Waveform recipes for each operating-condition category.
//!
//! Every category is a small parametric description: a piecewise-linear
//! envelope on the DC path, a gate on the inverter switching harmonics,
//! low-frequency line ripple, and short one-sided exponential pulses for
//! relay and breaker contacts. The sub-condition index (`variant`) selects
//! parameters within a category. All numbers are placeholders chosen to keep
//! the qualitative contrasts between normal transients and arcing.

use super::{Category, ScenarioSpec};

/// Relay click time constant; wideband but much shorter than a frame.
const RELAY_TAU: f64 = 50e-6;
/// Relay click peak as a fraction of the profile DC level.
const RELAY_AMP: f64 = 0.08;
/// Number of operating conditions for arc scenarios.
pub const ARC_CONDITIONS: usize = 8;

const ARC_DC_MULT: [f64; ARC_CONDITIONS] = [0.4, 0.6, 0.8, 1.0, 1.2, 0.5, 0.9, 1.1];

/// Piecewise-linear function of time; constant outside the breakpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope(Vec<(f64, f64)>);

impl Envelope {
    pub fn constant(v: f64) -> Self {
        Envelope(vec![(0.0, v)])
    }

    pub fn points(points: Vec<(f64, f64)>) -> Self {
        debug_assert!(points.windows(2).all(|w| w[0].0 <= w[1].0));
        Envelope(points)
    }

    pub fn at(&self, t: f64) -> f64 {
        let pts = &self.0;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let (t0, v0) = w[0];
            let (t1, v1) = w[1];
            if t <= t1 {
                if t1 == t0 {
                    return v1;
                }
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        pts[pts.len() - 1].1
    }

    /// Step from `a` to `b` at `t0` with a linear transition of length `rise`.
    fn step(a: f64, b: f64, t0: f64, rise: f64) -> Self {
        Envelope(vec![(t0, a), (t0 + rise, b)])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pulse {
    pub time: f64,
    /// Peak in amperes.
    pub amplitude: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ripple {
    pub freq: f64,
    /// Peak as a fraction of the profile DC level.
    pub amplitude: f64,
    pub envelope: Envelope,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub dc: Envelope,
    pub switching: Envelope,
    pub harmonic_scale: f64,
    pub mppt_scale: f64,
    pub pulses: Vec<Pulse>,
    pub ripple: Vec<Ripple>,
}

impl Recipe {
    fn steady() -> Self {
        Recipe {
            dc: Envelope::constant(1.0),
            switching: Envelope::constant(1.0),
            harmonic_scale: 1.0,
            mppt_scale: 1.0,
            pulses: Vec::new(),
            ripple: Vec::new(),
        }
    }
}

fn relay(time: f64, dc_level: f64, scale: f64) -> Pulse {
    Pulse {
        time,
        amplitude: RELAY_AMP * dc_level * scale,
        tau: RELAY_TAU,
    }
}

/// Contact bounce: `n` clicks spaced 0.3 ms apart.
fn bounce(time: f64, n: usize, dc_level: f64) -> Vec<Pulse> {
    (0..n)
        .map(|i| relay(time + i as f64 * 3e-4, dc_level, 1.0 / (1.0 + i as f64)))
        .collect()
}

/// Event times used when a scenario does not carry its own.
pub fn default_event_times(category: Category, duration: f64) -> Vec<f64> {
    match category {
        Category::Steady | Category::Arc | Category::DirectConnection | Category::HarmonicGrid => {
            Vec::new()
        }
        Category::StartUp | Category::ParallelStrings | Category::GridConnection => {
            vec![0.25 * duration]
        }
        Category::VariableInput | Category::LimitedFeedStartStop => Vec::new(),
        Category::BreakerOperation | Category::AcLoadSwitching => {
            vec![0.3 * duration, 0.65 * duration]
        }
    }
}

fn event(s: &ScenarioSpec, i: usize, frac: f64) -> f64 {
    s.event_times.get(i).copied().unwrap_or(frac * s.duration)
}

pub fn recipe(s: &ScenarioSpec, dc_level: f64) -> Recipe {
    let v = s.variant;
    let d = s.duration;
    let mut r = Recipe::steady();
    match s.category {
        Category::Steady => {}
        Category::Arc => {
            r.dc = Envelope::constant(ARC_DC_MULT[v % ARC_CONDITIONS]);
        }
        // Inverter idle, pre-charge relay, then DC ramp with switching soft-start.
        // Variants: ramp 10..70 ms, MPPT search depth grows with variant.
        Category::StartUp => {
            let t0 = event(s, 0, 0.25);
            let ramp = 0.01 * (1 + v) as f64;
            let soft = 0.005 * (1 + v % 3) as f64;
            r.dc = Envelope::points(vec![(t0, 0.0), (t0 + ramp, 1.0)]);
            r.switching = Envelope::points(vec![(t0, 0.0), (t0 + soft, 1.0)]);
            r.mppt_scale = 1.0 + 0.5 * v as f64;
            r.pulses.push(relay((t0 - 0.002).max(0.0), dc_level, 1.0 + (v % 3) as f64 * 0.5));
        }
        // A second string is paralleled in; current steps up by 1/k.
        Category::ParallelStrings => {
            let t0 = event(s, 0, 0.25);
            let k = [0.5, 0.33, 0.67][v % 3];
            r.dc = Envelope::step(k, 1.0, t0, 1e-3);
            r.pulses.push(relay(t0, dc_level, 1.0));
        }
        // Fixed operating point per mode; odd modes bypass MPPT.
        Category::DirectConnection => {
            let m = [0.3, 0.5, 0.7, 0.9, 1.1, 1.3][v % 6];
            r.dc = Envelope::constant(m);
            r.harmonic_scale = 0.6 + 0.16 * v as f64;
            r.mppt_scale = if v % 2 == 1 { 0.0 } else { 2.0 };
        }
        // Breaker opens then recloses; contact bounce on both edges.
        Category::BreakerOperation => {
            let t0 = event(s, 0, 0.3);
            let t1 = event(s, 1, 0.65);
            let edge = 2e-4;
            let env = vec![(t0, 1.0), (t0 + edge, 0.0), (t1, 0.0), (t1 + edge, 1.0)];
            r.dc = Envelope::points(env.clone());
            r.switching = Envelope::points(env);
            r.pulses.extend(bounce(t0, 2 + v, dc_level));
            r.pulses.extend(bounce(t1, 2 + v, dc_level));
        }
        // Irradiance change: ramp up, ramp down, or passing clouds.
        Category::VariableInput => {
            r.dc = match v % 3 {
                0 => Envelope::points(vec![(0.0, 0.4), (d, 1.0)]),
                1 => Envelope::points(vec![(0.0, 1.0), (d, 0.4)]),
                _ => Envelope::points(vec![
                    (0.0, 1.0),
                    (0.25 * d, 0.6),
                    (0.5 * d, 0.9),
                    (0.75 * d, 0.5),
                    (d, 1.0),
                ]),
            };
        }
        // Export limit cycling: on for 60% of each period with 5 ms ramps.
        Category::LimitedFeedStartStop => {
            let period = [0.1, 0.15][v % 2];
            let mut pts = Vec::new();
            let mut t = 0.0;
            while t < d {
                let on_end = t + 0.6 * period;
                pts.extend([(t, 0.0), (t + 0.005, 1.0), (on_end, 1.0), (on_end + 0.005, 0.0)]);
                r.pulses.push(relay(t, dc_level, 0.5));
                t += period;
            }
            r.dc = Envelope::points(pts.clone());
            r.switching = Envelope::points(pts);
        }
        // Grid relay closes (even) or opens (odd); double-line ripple follows.
        Category::GridConnection => {
            let t0 = event(s, 0, 0.25);
            let freq = if v < 2 { 100.0 } else { 120.0 };
            let env = if v % 2 == 0 {
                Envelope::step(0.0, 1.0, t0, 1e-3)
            } else {
                Envelope::step(1.0, 0.0, t0, 1e-3)
            };
            r.ripple.push(Ripple {
                freq,
                amplitude: 0.03,
                envelope: env,
            });
            r.pulses.push(relay(t0, dc_level, 1.0));
        }
        // AC load steps reflected on the DC side.
        Category::AcLoadSwitching => {
            let t0 = event(s, 0, 0.3);
            let t1 = event(s, 1, 0.65);
            let (a, b, c) = [(1.0, 0.6, 1.0), (0.6, 1.0, 0.6), (1.0, 0.8, 0.4), (0.5, 0.9, 0.7)][v % 4];
            r.dc = Envelope::points(vec![(t0, a), (t0 + 5e-4, b), (t1, b), (t1 + 5e-4, c)]);
            r.ripple.push(Ripple {
                freq: 100.0,
                amplitude: 0.02,
                envelope: Envelope::constant(1.0),
            });
        }
        // Distorted grid: 3rd/5th/7th line harmonics (50 or 60 Hz base) plus
        // double-line ripple.
        Category::HarmonicGrid => {
            let base = if v % 2 == 0 { 50.0 } else { 60.0 };
            for (h, amp) in [(2.0, 0.03), (3.0, 0.04), (5.0, 0.025), (7.0, 0.015)] {
                r.ripple.push(Ripple {
                    freq: h * base,
                    amplitude: amp,
                    envelope: Envelope::constant(1.0),
                });
            }
        }
    }
    r
}
