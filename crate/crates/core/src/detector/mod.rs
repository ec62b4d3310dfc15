//! Detector training, evaluation, the streaming alarm counter and the
//! data-scaling experiment.

mod metrics;
mod scaling;
mod stream;
mod train;

pub use metrics::{auc, metrics_from_scores, AucKind, Confusion, Metrics};
pub use scaling::{fit_scaling_law, heldout_loss, scale_sweep, ScalePoint, ScalingFit};
pub use stream::{detect_step, run_detector, stream_alarms, CounterPolicy, DetectorConfig, DetectorState, EventReport};
pub use train::{
    fit, nested_prefixes, nested_subsets, stratified_folds, stratified_split, stratified_subsample, train, train_holdout, val_macro_f1, EpochLog,
    FitHistory, FoldReport, PlateauSchedule, PlateauStep, TrainConfig, TrainOutcome, MIN_IMPROVEMENT,
};

use crate::error::Result;
use crate::features::FeatureSet;

/// Anything that maps feature rows to `P(arc)`.
pub trait ArcScorer: Sync {
    /// `rows` holds `rows.len() / dim` feature vectors back to back.
    fn score(&self, rows: &[f32], dim: usize) -> Result<Vec<f32>>;
}

/// Emits the same probability for every frame.
#[derive(Clone, Copy, Debug)]
pub struct ConstantScorer(pub f32);

impl ArcScorer for ConstantScorer {
    fn score(&self, rows: &[f32], dim: usize) -> Result<Vec<f32>> {
        Ok(vec![self.0; rows.len() / dim.max(1)])
    }
}

/// Metrics of `scorer` on `data` at threshold 0.5.
pub fn evaluate(scorer: &dyn ArcScorer, data: &FeatureSet) -> Result<Metrics> {
    let p = scorer.score(data.rows(), data.dim())?;
    Ok(metrics_from_scores(&p, data.labels(), 0.5))
}
