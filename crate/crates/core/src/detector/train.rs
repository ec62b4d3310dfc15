use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics_from_scores, Metrics};
use super::ArcScorer;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::nn::{backward, commit_bn_stats, forward, softmax_cross_entropy, ArchSpec, LrMap, Mode, Model, Sgd};
use crate::rng::{self, SimRng};

/// Minimum validation macro-F1 gain that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Upper bound on epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier applied at each plateau.
    pub lr_decay: f64,
    /// Epochs without improvement that make a plateau.
    pub plateau_patience: usize,
    /// Plateaus tolerated before stopping.
    pub early_stop_patience: usize,
    /// Share of each training split held back for validation.
    pub val_fraction: f64,
    /// Held-out share when `folds == 1`.
    pub test_fraction: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 64,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay: 0.5,
            plateau_patience: 2,
            early_stop_patience: 2,
            val_fraction: 0.1,
            test_fraction: 0.2,
            folds: 5,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.folds < 1 {
            return Err(Error::config("folds", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must be in (0, 1]"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction", "must be in (0, 1)"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must be in (0, 1)"));
        }
        if self.plateau_patience < 1 || self.early_stop_patience < 1 {
            return Err(Error::config("plateau_patience", "patience values must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauStep {
    Improved,
    Wait,
    /// Plateau reached: decay the learning rates.
    Decay,
    Stop,
}

/// Plateau detection on a metric that should increase.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub max_plateaus: usize,
    best: f64,
    since_best: usize,
    plateaus: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, max_plateaus: usize) -> Self {
        PlateauSchedule {
            patience,
            max_plateaus,
            best: f64::NEG_INFINITY,
            since_best: 0,
            plateaus: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn plateaus(&self) -> usize {
        self.plateaus
    }

    pub fn observe(&mut self, metric: f64) -> PlateauStep {
        if metric >= self.best + MIN_IMPROVEMENT || self.best == f64::NEG_INFINITY {
            self.best = metric;
            self.since_best = 0;
            return PlateauStep::Improved;
        }
        self.since_best += 1;
        if self.since_best < self.patience {
            return PlateauStep::Wait;
        }
        self.since_best = 0;
        self.plateaus += 1;
        if self.plateaus >= self.max_plateaus {
            PlateauStep::Stop
        } else {
            PlateauStep::Decay
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    #[serde(default)]
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

/// One pass of mini-batch SGD over `order`.
pub(crate) fn run_epoch(
    model: &mut Model,
    data: &FeatureSet,
    order: &[usize],
    batch_size: usize,
    opt: &mut Sgd,
    lr: &LrMap,
    weight_decay: f64,
    rng: &mut SimRng,
) -> Result<f64> {
    let dim = data.dim();
    let mut total = 0.0;
    let mut x = Vec::with_capacity(batch_size * dim);
    let mut y = Vec::with_capacity(batch_size);
    for chunk in order.chunks(batch_size) {
        x.clear();
        y.clear();
        for &i in chunk {
            x.extend_from_slice(data.row(i));
            y.push(data.label(i));
        }
        let cache = forward(&model.arch, &model.params, &x, chunk.len(), Mode::train(rng))?;
        let (loss, grads) = backward(&model.arch, &model.params, &cache, &y, None)?;
        commit_bn_stats(&mut model.params, &cache)?;
        opt.step(&mut model.params, &grads, lr, weight_decay)?;
        total += loss as f64 * chunk.len() as f64;
    }
    Ok(total / order.len().max(1) as f64)
}

/// Validation macro-F1 at the default 0.5 threshold.
pub fn val_macro_f1(model: &Model, val: &FeatureSet) -> Result<f64> {
    let p = model.predict_proba(val.rows())?;
    Ok(metrics_from_scores(&p, val.labels(), 0.5).macro_f1)
}

fn val_f1_and_loss(model: &Model, val: &FeatureSet) -> Result<(f64, f64)> {
    let logits = model.logits(val.rows())?;
    let (loss, _) = softmax_cross_entropy(&logits, val.labels(), None)?;
    let p: Vec<f32> = logits.chunks_exact(2).map(|l| (1.0 / (1.0 + ((l[0] - l[1]) as f64).exp())) as f32).collect();
    Ok((metrics_from_scores(&p, val.labels(), 0.5).macro_f1, loss as f64))
}

/// Trains `model` in place and leaves it at the best-validation snapshot:
/// highest macro-F1, ties broken by lower validation cross-entropy.
pub fn fit(model: &mut Model, train: &FeatureSet, val: &FeatureSet, cfg: &TrainConfig, seed: u64) -> Result<FitHistory> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput { needed: 1, got: 0 });
    }
    let mut rng = rng::derive_rng(seed, 0x7a11);
    let mut lr = LrMap::uniform(&model.params, cfg.base_lr);
    let mut opt = Sgd::new(cfg.momentum);
    let mut sched = PlateauSchedule::new(cfg.plateau_patience, cfg.early_stop_patience);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.params.clone();
    let mut history = FitHistory::default();
    let mut best_key = (f64::NEG_INFINITY, f64::INFINITY);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let train_loss = run_epoch(model, train, &order, cfg.batch_size, &mut opt, &lr, cfg.weight_decay, &mut rng)?;
        let (f1, val_loss) = val_f1_and_loss(model, val)?;
        history.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_macro_f1: f1,
            val_loss,
            lr: lr.head_lr().unwrap_or(cfg.base_lr),
        });
        if f1 > best_key.0 || (f1 == best_key.0 && val_loss < best_key.1) {
            best_key = (f1, val_loss);
            best = model.params.clone();
            history.best_epoch = epoch;
            history.best_val_macro_f1 = f1;
        }
        match sched.observe(f1) {
            PlateauStep::Improved | PlateauStep::Wait => {}
            PlateauStep::Decay => lr.scale(cfg.lr_decay),
            PlateauStep::Stop => break,
        }
    }
    model.params = best;
    Ok(history)
}

/// Shuffles each class with `seed` and deals it round-robin into `k` folds.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut folds = vec![Vec::new(); k];
    let mut rng = rng::derive_rng(seed, 0xf01d);
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            folds[j % k].push(i);
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    folds
}

/// Splits `indices` per class, putting `round(frac * class size)` rows
/// (at least one when the class has two or more) into the second part.
pub fn stratified_split(indices: &[usize], labels: &[u8], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::derive_rng(seed, 0x5b17);
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let mut n = (frac * idx.len() as f64).round() as usize;
        if n == 0 && idx.len() >= 2 {
            n = 1;
        }
        held.extend_from_slice(&idx[..n]);
        keep.extend_from_slice(&idx[n..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    (keep, held)
}

/// Stratified subsample of `pool` with `round(frac * class size)` rows per class.
pub fn stratified_subsample(pool: &[usize], labels: &[u8], frac: f64, seed: u64) -> Vec<usize> {
    if frac >= 1.0 {
        return pool.to_vec();
    }
    stratified_split(pool, labels, frac, seed).1
}

/// Stratified subsets of `pool`, one per fraction, that nest: each class is
/// shuffled once and every fraction takes a prefix of `round(f * class size)`.
pub fn nested_prefixes(pool: &[usize], labels: &[u8], fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng::derive_rng(seed, 0x5ca1e);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in pool {
        by_class[labels[i] as usize].push(i);
    }
    for c in by_class.iter_mut() {
        c.shuffle(&mut r);
    }
    fractions
        .iter()
        .map(|&f| {
            let mut idx = Vec::new();
            for c in &by_class {
                let n = ((f.clamp(0.0, 1.0) * c.len() as f64).round() as usize).min(c.len());
                idx.extend_from_slice(&c[..n]);
            }
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// [`nested_prefixes`], failing on fractions outside (0, 1] or subsets with
/// fewer than two rows of a class.
pub fn nested_subsets(pool: &[usize], labels: &[u8], fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::config("fractions", format!("{f} is outside (0, 1]")));
    }
    let subsets = nested_prefixes(pool, labels, fractions, seed);
    for (f, idx) in fractions.iter().zip(&subsets) {
        let arcs = idx.iter().filter(|&&i| labels[i] == 1).count();
        if arcs < 2 || idx.len() - arcs < 2 {
            return Err(Error::config(
                "fractions",
                format!("fraction {f} leaves fewer than 2 rows of a class"),
            ));
        }
    }
    Ok(subsets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub metrics: Metrics,
    pub history: FitHistory,
    pub train_rows: usize,
    pub test_rows: usize,
    #[serde(skip)]
    pub test_indices: Vec<usize>,
}

pub struct TrainOutcome {
    /// Model of the fold with the best validation macro-F1.
    pub model: Model,
    pub best_fold: usize,
    pub folds: Vec<FoldReport>,
}

/// Initializes a model and fits it on `train`, validating on `val`.
pub fn train_holdout(train: &FeatureSet, val: &FeatureSet, arch: &ArchSpec, cfg: &TrainConfig, seed: u64) -> Result<(Model, FitHistory)> {
    let mut model = Model::init(arch, rng::derive(seed, 1))?;
    let h = fit(&mut model, train, val, cfg, rng::derive(seed, 2))?;
    Ok((model, h))
}

/// Stratified k-fold training; with `folds == 1` a single stratified holdout
/// of `test_fraction`. Folds run in parallel, each fully determined by its
/// own derived seed.
pub fn train(data: &FeatureSet, arch: &ArchSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if !data.has_both_classes() {
        return Err(Error::SingleClass);
    }
    if data.dim() != arch.input_dim {
        return Err(Error::ShapeMismatch {
            name: "features".into(),
            expected: vec![arch.input_dim],
            got: vec![data.dim()],
        });
    }
    let labels = data.labels();
    let all: Vec<usize> = (0..data.len()).collect();
    let splits: Vec<(Vec<usize>, Vec<usize>)> = if cfg.folds == 1 {
        vec![stratified_split(&all, labels, cfg.test_fraction, cfg.seed)]
    } else {
        let folds = stratified_folds(labels, cfg.folds, cfg.seed);
        (0..cfg.folds)
            .map(|f| {
                let rest: Vec<usize> = (0..cfg.folds)
                    .filter(|&g| g != f)
                    .flat_map(|g| folds[g].iter().copied())
                    .collect();
                let mut rest = rest;
                rest.sort_unstable();
                (rest, folds[f].clone())
            })
            .collect()
    };

    let results: Vec<(Model, FoldReport)> = splits
        .into_par_iter()
        .enumerate()
        .map(|(f, (rest, test))| {
            let fold_seed = rng::derive(cfg.seed, 100 + f as u64);
            let (tr, va) = stratified_split(&rest, labels, cfg.val_fraction, fold_seed);
            let (model, history) = train_holdout(&data.subset(&tr), &data.subset(&va), arch, cfg, fold_seed)?;
            let test_set = data.subset(&test);
            let metrics = super::evaluate(&model, &test_set)?;
            Ok((
                model,
                FoldReport {
                    fold: f,
                    metrics,
                    history,
                    train_rows: tr.len(),
                    test_rows: test.len(),
                    test_indices: test,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut best_fold = 0;
    for (i, (_, r)) in results.iter().enumerate() {
        if r.history.best_val_macro_f1 > results[best_fold].1.history.best_val_macro_f1 {
            best_fold = i;
        }
    }
    let mut models = Vec::new();
    let mut folds = Vec::new();
    for (m, r) in results {
        models.push(m);
        folds.push(r);
    }
    Ok(TrainOutcome {
        model: models.swap_remove(best_fold),
        best_fold,
        folds,
    })
}

impl ArcScorer for Model {
    fn score(&self, rows: &[f32], dim: usize) -> Result<Vec<f32>> {
        if dim != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                name: "features".into(),
                expected: vec![self.arch.input_dim],
                got: vec![dim],
            });
        }
        self.predict_proba(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{blobs, small_arch};

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let data = blobs(400, 16, 1);
        let cfg = TrainConfig {
            epochs: 20,
            folds: 2,
            batch_size: 16,
            base_lr: 0.05,
            ..TrainConfig::default()
        };
        let out = train(&data, &small_arch(), &cfg).unwrap();
        for f in &out.folds {
            assert_eq!(f.metrics.accuracy, 1.0, "fold {}", f.fold);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(200, 16, 2);
        let cfg = TrainConfig { epochs: 3, folds: 2, ..TrainConfig::default() };
        let a = train(&data, &small_arch(), &cfg).unwrap();
        let b = train(&data, &small_arch(), &cfg).unwrap();
        assert_eq!(a.folds, b.folds);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn snapshot_prefers_lower_loss_among_equal_f1() {
        let data = blobs(400, 16, 3);
        let (tr, va) = stratified_split(&(0..400).collect::<Vec<_>>(), data.labels(), 0.25, 1);
        let (train_set, val) = (data.subset(&tr), data.subset(&va));
        let cfg = TrainConfig { epochs: 8, batch_size: 16, base_lr: 0.05, ..TrainConfig::default() };
        let mut model = Model::init(&small_arch(), 4).unwrap();
        let h = fit(&mut model, &train_set, &val, &cfg, 5).unwrap();
        let top = h.epochs.iter().map(|e| e.val_macro_f1).fold(f64::NEG_INFINITY, f64::max);
        let want = h
            .epochs
            .iter()
            .filter(|e| e.val_macro_f1 == top)
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
            .unwrap();
        assert_eq!(h.best_epoch, want.epoch);
        let (f1, loss) = val_f1_and_loss(&model, &val).unwrap();
        assert_eq!(f1, top);
        assert_eq!(loss, want.val_loss);
        assert_eq!(f1, val_macro_f1(&model, &val).unwrap());
    }

    #[test]
    fn single_class_is_rejected() {
        let mut data = FeatureSet::new(16);
        for _ in 0..10 {
            data.push(&[0.0; 16], 0).unwrap();
        }
        assert!(matches!(train(&data, &small_arch(), &TrainConfig::default()), Err(Error::SingleClass)));
    }

    #[test]
    fn folds_partition_and_stratify() {
        let labels: Vec<u8> = (0..103).map(|i| (i % 4 == 0) as u8).collect();
        let folds = stratified_folds(&labels, 5, 3);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        for f in &folds {
            let pos = f.iter().filter(|&&i| labels[i] == 1).count();
            assert!((5..=6).contains(&pos));
        }
    }

    #[test]
    fn plateau_schedule() {
        let mut s = PlateauSchedule::new(2, 2);
        assert_eq!(s.observe(0.5), PlateauStep::Improved);
        assert_eq!(s.observe(0.5005), PlateauStep::Wait);
        assert_eq!(s.observe(0.5), PlateauStep::Decay);
        assert_eq!(s.observe(0.6), PlateauStep::Improved);
        assert_eq!(s.observe(0.6), PlateauStep::Wait);
        assert_eq!(s.observe(0.6), PlateauStep::Stop);
    }
}
