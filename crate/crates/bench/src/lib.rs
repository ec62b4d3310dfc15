//! Shared inputs for the benchmarks.

use afci_core::synth::{synth_normal, HardwareProfile, ScenarioSpec};
use afci_core::{Category, FeatureConfig, SignalTrace};

/// A steady-operation trace of `seconds` on the first reference inverter.
pub fn steady_trace(seconds: f64) -> SignalTrace {
    synth_normal(&HardwareProfile::reference_a(), &ScenarioSpec::new(Category::Steady, 0, seconds, 1)).expect("reference profile is valid")
}

/// `n` feature rows of the default width, cut from a steady trace.
pub fn feature_rows(n: usize) -> Vec<f32> {
    let cfg = FeatureConfig::default();
    let fz = afci_core::features::Featurizer::new(&cfg).expect("default config");
    let rate = HardwareProfile::reference_a().sample_rate as f64;
    let trace = steady_trace((n * cfg.frame_len) as f64 / rate + 0.01);
    trace
        .samples
        .chunks_exact(cfg.frame_len)
        .take(n)
        .flat_map(|f| fz.featurize(f).expect("frame length matches").bands)
        .collect()
}
