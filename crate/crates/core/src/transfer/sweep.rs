use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adapt, TransferConfig};
use crate::detector::{metrics_from_scores, nested_prefixes, nested_subsets, stratified_split, train_holdout, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::nn::{ArchSpec, Model};

/// Source and target data split once so every sweep point shares the same
/// test sets.
#[derive(Clone, Debug)]
pub struct TransferSplits {
    pub source_pool: FeatureSet,
    pub source_test: FeatureSet,
    pub target_pool: FeatureSet,
    pub target_test: FeatureSet,
}

impl TransferSplits {
    pub fn new(source: &FeatureSet, target: &FeatureSet, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must be in (0, 1)"));
        }
        if !source.has_both_classes() || !target.has_both_classes() {
            return Err(Error::SingleClass);
        }
        let s: Vec<usize> = (0..source.len()).collect();
        let (sp, st) = stratified_split(&s, source.labels(), test_fraction, seed);
        let t: Vec<usize> = (0..target.len()).collect();
        let (tp, tt) = stratified_split(&t, target.labels(), test_fraction, seed ^ 0x7a);
        Ok(TransferSplits {
            source_pool: source.subset(&sp),
            source_test: source.subset(&st),
            target_pool: target.subset(&tp),
            target_test: target.subset(&tt),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePoint {
    pub fraction: f64,
    pub train_rows: usize,
    pub macro_f1: f64,
}

/// Trains an independent source model per fraction of `pool` (nested
/// stratified subsets) and scores each on `test`. Models are returned in
/// fraction order.
pub fn source_fraction_sweep(
    pool: &FeatureSet,
    test: &FeatureSet,
    fractions: &[f64],
    arch: &ArchSpec,
    cfg: &TrainConfig,
) -> Result<Vec<(SourcePoint, Model)>> {
    cfg.validate()?;
    check_increasing(fractions)?;
    let labels = pool.labels();
    let all: Vec<usize> = (0..pool.len()).collect();
    let subsets = nested_subsets(&all, labels, fractions, cfg.seed)?;
    subsets
        .into_par_iter()
        .zip(fractions.par_iter())
        .map(|(idx, &fraction)| {
            let (tr, va) = stratified_split(&idx, labels, cfg.val_fraction, cfg.seed);
            let (model, _) = train_holdout(&pool.subset(&tr), &pool.subset(&va), arch, cfg, cfg.seed)?;
            let p = model.predict_proba(test.rows())?;
            let m = metrics_from_scores(&p, test.labels(), 0.5);
            Ok((
                SourcePoint {
                    fraction,
                    train_rows: idx.len(),
                    macro_f1: m.macro_f1,
                },
                model,
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub target_rows: usize,
    pub target_macro_f1: f64,
    pub source_macro_f1: f64,
    /// Recall on the arc class of the target test set.
    pub arc_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Fractions that could not be run, with the reason.
    pub skipped: Vec<(f64, String)>,
}

impl SweepResult {
    pub fn point(&self, fraction: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| (p.fraction - fraction).abs() < 1e-12)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,target_macro_f1,source_macro_f1,arc_accuracy\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                p.fraction, p.target_macro_f1, p.source_macro_f1, p.arc_accuracy
            ));
        }
        s
    }
}

fn check_increasing(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::EmptyInput { needed: 1, got: 0 });
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::config("fractions", format!("{f} is outside (0, 1]")));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("fractions", "must be strictly increasing"));
    }
    Ok(())
}

/// One [`adapt`] run per fraction of the target pool, all scored on the
/// shared target and source test sets. Fractions whose subset lacks two rows
/// of either class are skipped and reported.
pub fn target_fraction_sweep(source_model: &Model, splits: &TransferSplits, fractions: &[f64], cfg: &TransferConfig) -> Result<SweepResult> {
    cfg.validate()?;
    check_increasing(fractions)?;
    let pool = &splits.target_pool;
    let all: Vec<usize> = (0..pool.len()).collect();
    let subsets = nested_prefixes(&all, pool.labels(), fractions, cfg.seed);

    let mut runnable = Vec::new();
    let mut skipped = Vec::new();
    for (&f, idx) in fractions.iter().zip(subsets) {
        let arcs = idx.iter().filter(|&&i| pool.label(i) == 1).count();
        let normals = idx.len() - arcs;
        if arcs < 2 || normals < 2 {
            skipped.push((f, format!("target subset has {normals} normal and {arcs} arc rows; need 2 of each")));
        } else {
            runnable.push((f, idx));
        }
    }

    let points = runnable
        .into_par_iter()
        .map(|(fraction, idx)| {
            let (model, _) = adapt(source_model, &splits.source_pool, &pool.subset(&idx), cfg)?;
            let pt = model.predict_proba(splits.target_test.rows())?;
            let mt = metrics_from_scores(&pt, splits.target_test.labels(), 0.5);
            let ps = model.predict_proba(splits.source_test.rows())?;
            let ms = metrics_from_scores(&ps, splits.source_test.labels(), 0.5);
            Ok(SweepPoint {
                fraction,
                target_rows: idx.len(),
                target_macro_f1: mt.macro_f1,
                source_macro_f1: ms.macro_f1,
                arc_accuracy: mt.recall,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { points, skipped })
}
