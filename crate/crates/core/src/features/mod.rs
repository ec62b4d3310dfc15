//! Frame-level spectral features.
//!
//! A trace is cut into non-overlapping frames of `L` samples. Each frame is
//! Hanning-windowed, transformed, stripped of its DC bin, converted to
//! `10 log10(|X[k]| / L)` and summed over groups of `S` adjacent bins of the
//! half spectrum, giving an `L / (2S)`-band vector.

mod dataset;
pub mod fft;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Label, SignalTrace};
pub use dataset::{FeatureSet, FeatureSidecar, FEATURE_MAGIC, FEATURE_VERSION};
use fft::FftPlan;

/// How adjacent bins are merged into one band.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Sum of per-bin dB values.
    #[default]
    SumDb,
    /// Sum of linear magnitudes, converted to dB afterwards. Not the reference
    /// pipeline; kept for comparison runs.
    SumMagnitudeDb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub frame_len: usize,
    pub aggregation: usize,
    pub db_floor: f64,
    #[serde(default)]
    pub mode: AggregationMode,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_len: 1024,
            aggregation: 2,
            db_floor: 1e-12,
            mode: AggregationMode::SumDb,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || !self.frame_len.is_power_of_two() {
            return Err(Error::config("frame_len", "must be a power of two >= 2"));
        }
        if self.aggregation == 0 || (self.frame_len / 2) % self.aggregation != 0 {
            return Err(Error::config("aggregation", "must divide frame_len / 2"));
        }
        if !(self.db_floor > 0.0) {
            return Err(Error::config("db_floor", "must be > 0"));
        }
        Ok(())
    }

    /// Output dimension `L / (2S)`.
    pub fn dim(&self) -> usize {
        self.frame_len / (2 * self.aggregation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub samples: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralVector {
    pub bands: Vec<f32>,
}

/// Splits samples into consecutive frames `samples[iL .. (i+1)L]`; the tail
/// shorter than `L` is dropped.
pub fn segment(samples: &[f32], cfg: &FeatureConfig) -> Result<Vec<Frame>> {
    let l = cfg.frame_len;
    if samples.len() < l {
        return Err(Error::EmptyInput {
            needed: l,
            got: samples.len(),
        });
    }
    Ok(samples
        .chunks_exact(l)
        .map(|c| Frame { samples: c.to_vec() })
        .collect())
}

pub fn segment_trace(trace: &SignalTrace, cfg: &FeatureConfig) -> Result<Vec<Frame>> {
    segment(&trace.samples, cfg)
}

/// Symmetric Hanning window `0.5 (1 - cos(2 pi n / (L - 1)))`.
///
/// # Panics
/// If `len < 2`.
pub fn hanning(len: usize) -> Vec<f64> {
    assert!(len >= 2, "window length must be at least 2");
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / denom).cos()))
        .collect()
}

/// DFT of a real sequence. Power-of-two lengths use the radix-2 FFT; other
/// lengths fall back to direct summation.
pub fn dft<S: Copy + Into<f64>>(x: &[S]) -> Spectrum {
    let n = x.len();
    let mut bins: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v.into(), 0.0)).collect();
    if n.is_power_of_two() {
        FftPlan::new(n).forward(&mut bins);
        return Spectrum { bins };
    }
    let input = bins;
    let bins = (0..n)
        .map(|k| {
            input.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (t, v)| {
                let theta = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                acc + v * Complex64::new(theta.cos(), theta.sin())
            })
        })
        .collect();
    Spectrum { bins }
}

/// Per-bin log magnitude over the half spectrum, with the DC bin removed:
/// `B[k] = 10 log10(max(|X[k]|, floor) / L)` for `k < L/2`.
pub fn to_db(spectrum: &Spectrum, cfg: &FeatureConfig) -> Vec<f64> {
    let l = spectrum.bins.len();
    let norm = l as f64;
    (0..l / 2)
        .map(|k| {
            let mag = if k == 0 { 0.0 } else { spectrum.bins[k].norm() };
            10.0 * (mag.max(cfg.db_floor) / norm).log10()
        })
        .collect()
}

/// Sums groups of `S` consecutive values: `B_s[m] = sum_{k=mS}^{(m+1)S-1} B[k]`.
pub fn aggregate(per_bin: &[f64], cfg: &FeatureConfig) -> Result<SpectralVector> {
    let s = cfg.aggregation;
    if s == 0 || per_bin.len() % s != 0 {
        return Err(Error::config(
            "aggregation",
            format!("{} bins are not divisible by {s}", per_bin.len()),
        ));
    }
    Ok(SpectralVector {
        bands: per_bin
            .chunks_exact(s)
            .map(|c| c.iter().sum::<f64>() as f32)
            .collect(),
    })
}

fn aggregate_magnitudes(spectrum: &Spectrum, cfg: &FeatureConfig) -> SpectralVector {
    let l = spectrum.bins.len();
    let bands = (0..l / 2)
        .collect::<Vec<_>>()
        .chunks_exact(cfg.aggregation)
        .map(|ks| {
            let sum: f64 = ks
                .iter()
                .map(|&k| if k == 0 { 0.0 } else { spectrum.bins[k].norm() })
                .sum();
            (10.0 * (sum.max(cfg.db_floor) / l as f64).log10()) as f32
        })
        .collect();
    SpectralVector { bands }
}

/// Reusable window + FFT plan for one [`FeatureConfig`].
#[derive(Clone, Debug)]
pub struct Featurizer {
    cfg: FeatureConfig,
    window: Vec<f64>,
    plan: FftPlan,
}

impl Featurizer {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            window: hanning(cfg.frame_len),
            plan: FftPlan::new(cfg.frame_len),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn spectrum(&self, frame: &[f32]) -> Result<Spectrum> {
        if frame.len() != self.cfg.frame_len {
            return Err(Error::ShapeMismatch {
                name: "frame".into(),
                expected: vec![self.cfg.frame_len],
                got: vec![frame.len()],
            });
        }
        let mut bins: Vec<Complex64> = frame
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| Complex64::new(x as f64 * w, 0.0))
            .collect();
        self.plan.forward(&mut bins);
        Ok(Spectrum { bins })
    }

    pub fn featurize(&self, frame: &[f32]) -> Result<SpectralVector> {
        let spectrum = self.spectrum(frame)?;
        match self.cfg.mode {
            AggregationMode::SumDb => aggregate(&to_db(&spectrum, &self.cfg), &self.cfg),
            AggregationMode::SumMagnitudeDb => Ok(aggregate_magnitudes(&spectrum, &self.cfg)),
        }
    }

    /// Featurizes every full frame of `trace` and pairs it with its label.
    pub fn featurize_trace(&self, trace: &SignalTrace) -> Result<(Vec<SpectralVector>, Vec<Label>)> {
        let frames = segment_trace(trace, &self.cfg)?;
        let labels = trace.frame_labels(self.cfg.frame_len);
        let vectors = frames
            .iter()
            .map(|f| self.featurize(&f.samples))
            .collect::<Result<Vec<_>>>()?;
        Ok((vectors, labels))
    }
}

/// Window, transform, dB-scale and aggregate one frame.
pub fn featurize(frame: &Frame, cfg: &FeatureConfig) -> Result<SpectralVector> {
    Featurizer::new(cfg)?.featurize(&frame.samples)
}

/// Featurizes a set of traces into one labeled dataset.
pub fn featurize_traces<'a>(
    traces: impl IntoIterator<Item = &'a SignalTrace>,
    cfg: &FeatureConfig,
) -> Result<FeatureSet> {
    let fz = Featurizer::new(cfg)?;
    let mut set = FeatureSet::new(cfg.dim());
    for trace in traces {
        let (vectors, labels) = fz.featurize_trace(trace)?;
        for (v, l) in vectors.iter().zip(labels) {
            set.push(&v.bands, l as u8)?;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (t, &v)| {
                    let th = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    acc + Complex64::new(v * th.cos(), v * th.sin())
                })
            })
            .collect()
    }

    #[test]
    fn segment_counts_and_offsets() {
        let cfg = FeatureConfig::default();
        let samples: Vec<f32> = (0..2048).map(|i| i as f32).collect();
        let frames = segment(&samples, &cfg).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].samples[0], 1024.0);

        let frames = segment(&vec![0.0; 3000], &cfg).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(3000 - frames.len() * 1024, 952);

        assert!(matches!(
            segment(&vec![0.0; 1023], &cfg),
            Err(Error::EmptyInput { needed: 1024, got: 1023 })
        ));
    }

    #[test]
    fn hanning_endpoints_symmetry_and_midpoint() {
        let w = hanning(1024);
        assert_eq!(w[0], 0.0);
        assert!(w[1023].abs() < 1e-15);
        for n in 0..1024 {
            assert!((w[n] - w[1023 - n]).abs() < 1e-15);
        }
        let expected = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * 512.0 / 1023.0).cos());
        assert_eq!(w[512], expected);
    }

    #[test]
    fn dft_of_zeros_and_bin_aligned_cosine() {
        let zeros = dft(&vec![0.0f64; 64]);
        assert!(zeros.bins.iter().all(|c| c.norm() == 0.0));

        let l = 1024;
        let x: Vec<f64> = (0..l)
            .map(|n| (2.0 * std::f64::consts::PI * 8.0 * n as f64 / l as f64).cos())
            .collect();
        let s = dft(&x);
        assert!((s.bins[8].norm() - l as f64 / 2.0).abs() < 1e-9);
        assert!((s.bins[l - 8].norm() - l as f64 / 2.0).abs() < 1e-9);
        for k in (0..l).filter(|&k| k != 8 && k != l - 8) {
            assert!(s.bins[k].norm() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn dft_non_power_of_two_matches_naive() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() + 0.3).collect();
        let fast = dft(&x);
        for (a, b) in fast.bins.iter().zip(naive_dft(&x)) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn db_scaling_examples() {
        let cfg = FeatureConfig::default();
        let l = 1024usize;
        let mut bins = vec![Complex64::new(0.0, 0.0); l];
        bins[1] = Complex64::new(l as f64, 0.0);
        bins[2] = Complex64::new(0.0, l as f64 / 10.0);
        bins[0] = Complex64::new(5.0, 0.0);
        let b = to_db(&Spectrum { bins }, &cfg);
        assert_eq!(b.len(), l / 2);
        assert_eq!(b[1], 0.0);
        assert!((b[2] + 10.0).abs() < 1e-12);
        let floor = 10.0 * (1e-12f64 / 1024.0).log10();
        assert_eq!(b[0], floor, "DC bin is removed before magnitude");
        assert_eq!(b[3], floor);
    }

    #[test]
    fn aggregation_examples() {
        let mut cfg = FeatureConfig::default();
        let v = aggregate(&[1.0, 2.0, 3.0, 4.0], &cfg).unwrap();
        assert_eq!(v.bands, vec![3.0, 7.0]);
        cfg.aggregation = 1;
        let v = aggregate(&[1.0, 2.0, 3.0], &cfg).unwrap();
        assert_eq!(v.bands, vec![1.0, 2.0, 3.0]);
        cfg.aggregation = 2;
        assert!(aggregate(&[1.0, 2.0, 3.0], &cfg).is_err());
        assert_eq!(FeatureConfig::default().dim(), 256);
    }

    #[test]
    fn zero_frame_features_sit_at_the_floor() {
        let cfg = FeatureConfig::default();
        let v = featurize(&Frame { samples: vec![0.0; 1024] }, &cfg).unwrap();
        let expected = (2.0 * 10.0 * (1e-12f64 / 1024.0).log10()) as f32;
        assert_eq!(v.bands.len(), 256);
        assert!(v.bands.iter().all(|&b| b == expected));
    }

    #[test]
    fn doubling_amplitude_shifts_every_non_dc_band() {
        let cfg = FeatureConfig::default();
        let x: Vec<f32> = (0..1024)
            .map(|n| (2.0 * std::f64::consts::PI * 37.3 * n as f64 / 1024.0).cos() as f32)
            .collect();
        let x2: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
        let a = featurize(&Frame { samples: x }, &cfg).unwrap();
        let b = featurize(&Frame { samples: x2 }, &cfg).unwrap();
        let shift = 2.0 * 10.0 * 2f64.log10();
        for m in 1..256 {
            let d = (b.bands[m] - a.bands[m]) as f64;
            assert!((d - shift).abs() < 1e-3, "band {m}: {d}");
        }
        // band 0 holds the floored DC bin, which does not move
        let d0 = (b.bands[0] - a.bands[0]) as f64;
        assert!((d0 - 10.0 * 2f64.log10()).abs() < 1e-3);
    }

    #[test]
    fn featurize_is_deterministic() {
        let cfg = FeatureConfig::default();
        let x: Vec<f32> = (0..1024).map(|n| ((n * 7919) % 113) as f32 * 0.01).collect();
        let a = featurize(&Frame { samples: x.clone() }, &cfg).unwrap();
        let b = featurize(&Frame { samples: x }, &cfg).unwrap();
        assert_eq!(
            a.bands.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.bands.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn magnitude_mode_differs_from_reference() {
        let mut cfg = FeatureConfig::default();
        let x: Vec<f32> = (0..1024).map(|n| ((n * 31) % 17) as f32 * 0.1).collect();
        let a = featurize(&Frame { samples: x.clone() }, &cfg).unwrap();
        cfg.mode = AggregationMode::SumMagnitudeDb;
        let b = featurize(&Frame { samples: x }, &cfg).unwrap();
        assert_eq!(b.bands.len(), 256);
        assert_ne!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FeatureConfig::default();
        cfg.frame_len = 1000;
        assert!(cfg.validate().is_err());
        cfg.frame_len = 1024;
        cfg.aggregation = 3;
        assert!(cfg.validate().is_err());
        cfg.aggregation = 2;
        cfg.db_floor = 0.0;
        assert!(cfg.validate().is_err());
    }
}
