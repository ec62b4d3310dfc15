//! Cross-hardware fine-tuning.
//!
//! The objective per step is `alpha * L_tgt + beta * L_src + lambda * L2SP`,
//! where `L_tgt` is the mean cross-entropy over the target rows of the batch,
//! `L_src` the mean over replayed source rows and `L2SP = sum ||w - w0||^2`
//! over every trainable tensor, anchored at the starting model. The backbone
//! runs at `backbone_lr_ratio` times the head learning rate; both halve on a
//! validation plateau.

mod sweep;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detector::{stratified_split, val_macro_f1, PlateauSchedule, PlateauStep};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::nn::{backward, commit_bn_stats, forward, l2_sp, Gradients, LrMap, Mode, Model, ModelParams, Sgd};
use crate::rng::{self, SimRng};

pub use sweep::{source_fraction_sweep, target_fraction_sweep, SourcePoint, SweepPoint, SweepResult, TransferSplits};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub head_lr: f64,
    pub backbone_lr_ratio: f64,
    /// Replayed source rows per target row.
    pub mix_ratio: f64,
    /// Target rows per step.
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Share of the target rows held back for validation.
    pub val_fraction: f64,
    /// Source rows kept aside for source-side validation.
    pub source_val_rows: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            alpha: 1.0,
            beta: 0.5,
            lambda: 1e-4,
            head_lr: 0.01,
            backbone_lr_ratio: 0.1,
            mix_ratio: 1.0,
            batch_size: 32,
            momentum: 0.9,
            lr_decay: 0.5,
            plateau_patience: 3,
            early_stop_patience: 5,
            max_epochs: 30,
            val_fraction: 0.2,
            source_val_rows: 1000,
            seed: 11,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda), ("mix_ratio", self.mix_ratio)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be a finite value >= 0"));
            }
        }
        if !(self.backbone_lr_ratio > 0.0 && self.backbone_lr_ratio <= 1.0) {
            return Err(Error::config("backbone_lr_ratio", "must be in (0, 1]"));
        }
        if !(self.head_lr >= 0.0) {
            return Err(Error::config("head_lr", "must be >= 0"));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::config("batch_size", "batch_size and max_epochs must be >= 1"));
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
        if self.plateau_patience < 1 || self.early_stop_patience < 1 {
            return Err(Error::config("plateau_patience", "patience values must be >= 1"));
        }
        Ok(())
    }
}

/// Source rows replayed during fine-tuning. Rows are drawn without
/// replacement; when the pass is exhausted the order is reshuffled.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    data: FeatureSet,
    order: Vec<usize>,
    pos: usize,
    rng: SimRng,
}

impl ReplayBuffer {
    pub fn new(data: FeatureSet, seed: u64) -> Self {
        let mut rng = rng::derive_rng(seed, 0x4e91);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        ReplayBuffer { data, order, pos: 0, rng }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &FeatureSet {
        &self.data
    }

    /// Next `n` row indices.
    pub fn draw(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Target,
    Source,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub dim: usize,
    pub rows: Vec<f32>,
    pub labels: Vec<u8>,
    pub domains: Vec<Domain>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, d: Domain) -> usize {
        self.domains.iter().filter(|&&x| x == d).count()
    }

    /// `alpha / N_t` on target rows and `beta / N_s` on source rows, so the
    /// weighted cross-entropy equals `alpha * L_tgt + beta * L_src`.
    pub fn sample_weights(&self, alpha: f64, beta: f64) -> Vec<f32> {
        let nt = self.count(Domain::Target).max(1) as f64;
        let ns = self.count(Domain::Source).max(1) as f64;
        self.domains
            .iter()
            .map(|d| match d {
                Domain::Target => (alpha / nt) as f32,
                Domain::Source => (beta / ns) as f32,
            })
            .collect()
    }
}

/// Target rows followed by `ceil(mix_ratio * |target|)` replayed source rows.
pub fn mixed_batch(replay: &mut ReplayBuffer, target: &FeatureSet, target_rows: &[usize], mix_ratio: f64) -> MixedBatch {
    let dim = target.dim();
    let mut b = MixedBatch {
        dim,
        rows: Vec::new(),
        labels: Vec::new(),
        domains: Vec::new(),
    };
    for &i in target_rows {
        b.rows.extend_from_slice(target.row(i));
        b.labels.push(target.label(i));
        b.domains.push(Domain::Target);
    }
    let n = (mix_ratio * target_rows.len() as f64).ceil() as usize;
    for i in replay.draw(n) {
        b.rows.extend_from_slice(replay.data.row(i));
        b.labels.push(replay.data.label(i));
        b.domains.push(Domain::Source);
    }
    b
}

/// The three objective terms for one batch, recomputed separately.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub target: f64,
    pub source: f64,
    pub l2_sp: f64,
    pub total: f64,
}

fn mean_ce(model: &Model, batch: &MixedBatch, domain: Domain, mode_seed: u64) -> Result<f64> {
    let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.domains[i] == domain).collect();
    if idx.is_empty() {
        return Ok(0.0);
    }
    // Same dropout stream and batch composition as the training step, so the
    // per-domain means come from the exact logits of that step.
    let mut r = rng::seeded(mode_seed);
    let cache = forward(&model.arch, &model.params, &batch.rows, batch.len(), Mode::train(&mut r))?;
    let mut w = vec![0.0f32; batch.len()];
    for &i in &idx {
        w[i] = 1.0 / idx.len() as f32;
    }
    let (loss, _) = crate::nn::softmax_cross_entropy(&cache.logits, &batch.labels, Some(&w))?;
    Ok(loss as f64)
}

/// Audits the objective on `batch`: each term is computed on its own and
/// `total` combines them with the configured weights.
pub fn loss_terms(model: &Model, anchor: &ModelParams, batch: &MixedBatch, cfg: &TransferConfig, dropout_seed: u64) -> Result<LossTerms> {
    let target = mean_ce(model, batch, Domain::Target, dropout_seed)?;
    let source = mean_ce(model, batch, Domain::Source, dropout_seed)?;
    let (pen, _) = l2_sp(&model.params, anchor, &model.params.trainable_names())?;
    Ok(LossTerms {
        target,
        source,
        l2_sp: pen,
        total: cfg.alpha * target + cfg.beta * source + cfg.lambda * pen,
    })
}

/// The combined objective and its gradient for one step.
pub fn step_objective(
    model: &Model,
    anchor: &ModelParams,
    batch: &MixedBatch,
    cfg: &TransferConfig,
    dropout_seed: u64,
) -> Result<(f64, Gradients, Option<crate::nn::Cache<f32>>)> {
    let trainable = model.params.trainable_names();
    let (pen, pen_grad) = l2_sp(&model.params, anchor, &trainable)?;
    let mut total = cfg.lambda * pen;
    let mut grads = Gradients::zeros_like(&model.params);
    let mut cache = None;
    if cfg.alpha + cfg.beta > 0.0 {
        let mut r = rng::seeded(dropout_seed);
        let c = forward(&model.arch, &model.params, &batch.rows, batch.len(), Mode::train(&mut r))?;
        let w = batch.sample_weights(cfg.alpha, cfg.beta);
        let (ce, g) = backward(&model.arch, &model.params, &c, &batch.labels, Some(&w))?;
        total += ce as f64;
        grads = g;
        cache = Some(c);
    }
    if cfg.lambda > 0.0 {
        grads.add_scaled(&pen_grad, cfg.lambda as f32);
    }
    Ok((total, grads, cache))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub target_macro_f1: f64,
    pub source_macro_f1: Option<f64>,
    pub plateau_metric: f64,
    pub head_lr: f64,
    pub backbone_lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptHistory {
    pub epochs: Vec<AdaptEpoch>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Fine-tunes a copy of `source_model` on `target`, replaying `source`.
pub fn adapt(source_model: &Model, source: &FeatureSet, target: &FeatureSet, cfg: &TransferConfig) -> Result<(Model, AdaptHistory)> {
    adapt_from(source_model, &source_model.params, source, target, cfg)
}

/// [`adapt`] starting from `start` with the L2-SP anchor at `anchor`.
pub fn adapt_from(
    start: &Model,
    anchor: &ModelParams,
    source: &FeatureSet,
    target: &FeatureSet,
    cfg: &TransferConfig,
) -> Result<(Model, AdaptHistory)> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::EmptyInput { needed: 1, got: 0 });
    }
    if !target.has_both_classes() {
        return Err(Error::SingleClass);
    }
    let use_replay = cfg.beta > 0.0 && cfg.mix_ratio > 0.0;
    if use_replay && source.is_empty() {
        return Err(Error::EmptyInput { needed: 1, got: 0 });
    }

    let t_all: Vec<usize> = (0..target.len()).collect();
    let (t_train, t_val) = stratified_split(&t_all, target.labels(), cfg.val_fraction, cfg.seed);
    let t_val = target.subset(&t_val);

    // Source rows are split into a validation slice and the replay pool.
    let (replay_rows, source_val) = if source.is_empty() {
        (Vec::new(), None)
    } else {
        let s_all: Vec<usize> = (0..source.len()).collect();
        let frac = (cfg.source_val_rows as f64 / source.len() as f64).min(0.5);
        let (pool, val) = stratified_split(&s_all, source.labels(), frac, rng::derive(cfg.seed, 1));
        (pool, Some(source.subset(&val)))
    };
    let mut replay = ReplayBuffer::new(source.subset(&replay_rows), rng::derive(cfg.seed, 2));

    let mut model = start.clone();
    let mut lr = LrMap::layerwise(&model.params, cfg.head_lr, cfg.backbone_lr_ratio);
    let mut opt = Sgd::new(cfg.momentum);
    let mut sched = PlateauSchedule::new(cfg.plateau_patience, cfg.early_stop_patience);
    let mut shuffle = rng::derive_rng(cfg.seed, 3);
    let mut order = t_train.clone();
    let mut best = model.params.clone();
    let mut history = AdaptHistory::default();
    let weight_sum = cfg.alpha + cfg.beta;
    let mix = if use_replay { cfg.mix_ratio } else { 0.0 };

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = mixed_batch(&mut replay, target, chunk, mix);
            let seed = rng::derive(cfg.seed, 1000 + history.steps as u64);
            let (loss, grads, cache) = step_objective(&model, anchor, &batch, cfg, seed)?;
            if let Some(c) = &cache {
                commit_bn_stats(&mut model.params, c)?;
            }
            opt.step(&mut model.params, &grads, &lr, 0.0)?;
            loss_sum += loss;
            batches += 1;
            history.steps += 1;
        }
        let tf1 = val_macro_f1(&model, &t_val)?;
        let sf1 = match &source_val {
            Some(v) if v.has_both_classes() => Some(val_macro_f1(&model, v)?),
            _ => None,
        };
        let metric = if weight_sum > 0.0 {
            (cfg.alpha * tf1 + cfg.beta * sf1.unwrap_or(tf1)) / weight_sum
        } else {
            tf1
        };
        history.epochs.push(AdaptEpoch {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            target_macro_f1: tf1,
            source_macro_f1: sf1,
            plateau_metric: metric,
            head_lr: lr.head_lr().unwrap_or(0.0),
            backbone_lr: lr.backbone_lr().unwrap_or(0.0),
        });
        if weight_sum == 0.0 {
            // Pure anchor pull: nothing to validate, keep the latest weights.
            best = model.params.clone();
            history.best_epoch = epoch;
            continue;
        }
        match sched.observe(metric) {
            PlateauStep::Improved => {
                best = model.params.clone();
                history.best_epoch = epoch;
            }
            PlateauStep::Wait => {}
            PlateauStep::Decay => lr.scale(cfg.lr_decay),
            PlateauStep::Stop => break,
        }
    }
    model.params = best;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(n: usize, dim: usize, offset: f32) -> FeatureSet {
        let mut s = FeatureSet::new(dim);
        for i in 0..n {
            let row: Vec<f32> = (0..dim).map(|j| (i * dim + j) as f32 + offset).collect();
            s.push(&row, (i % 2) as u8).unwrap();
        }
        s
    }

    #[test]
    fn replay_is_a_permutation_per_pass() {
        let mut r = ReplayBuffer::new(set(10, 2, 0.0), 1);
        let mut first = r.draw(10);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut second = r.draw(10);
        second.sort_unstable();
        assert_eq!(second, first);
    }

    #[test]
    fn replay_frequencies_are_uniform() {
        let mut r = ReplayBuffer::new(set(40, 2, 0.0), 5);
        let mut counts = [0usize; 40];
        for _ in 0..1000 {
            for i in r.draw(3) {
                counts[i] += 1;
            }
        }
        let expect = 3000.0 / 40.0;
        for c in counts {
            assert!((c as f64 - expect).abs() <= 0.2 * expect, "{c}");
        }
    }

    #[test]
    fn batch_composition() {
        let target = set(16, 2, 100.0);
        let idx: Vec<usize> = (0..16).collect();
        let mut r = ReplayBuffer::new(set(50, 2, 0.0), 2);
        let b = mixed_batch(&mut r, &target, &idx, 0.0);
        assert_eq!(b.len(), 16);
        assert_eq!(b.count(Domain::Source), 0);
        let b = mixed_batch(&mut r, &target, &idx, 1.0);
        assert_eq!(b.len(), 32);
        assert_eq!(b.count(Domain::Source), 16);
        let b = mixed_batch(&mut r, &target, &idx[..3], 0.5);
        assert_eq!(b.count(Domain::Source), 2);
    }

    #[test]
    fn weights_compose_the_objective() {
        let target = set(4, 2, 0.0);
        let mut r = ReplayBuffer::new(set(6, 2, 0.0), 2);
        let b = mixed_batch(&mut r, &target, &[0, 1, 2, 3], 0.5);
        let w = b.sample_weights(1.0, 0.5);
        assert_eq!(w[..4], [0.25; 4]);
        assert_eq!(w[4..], [0.25; 2]);
    }

    #[test]
    fn config_validation() {
        assert!(TransferConfig::default().validate().is_ok());
        let c = TransferConfig { backbone_lr_ratio: 0.0, ..TransferConfig::default() };
        assert!(c.validate().is_err());
        let c = TransferConfig { alpha: -1.0, ..TransferConfig::default() };
        assert!(c.validate().is_err());
    }

    use crate::detector::{train_holdout, TrainConfig};
    use crate::testutil::{blobs, small_arch};

    fn source_model() -> Model {
        let cfg = TrainConfig { epochs: 10, batch_size: 16, base_lr: 0.05, ..TrainConfig::default() };
        train_holdout(&blobs(200, 16, 1), &blobs(60, 16, 2), &small_arch(), &cfg, 3).unwrap().0
    }

    fn perturbed(m: &Model, seed: u64) -> Model {
        let other = Model::init(&m.arch, seed).unwrap();
        let mut out = m.clone();
        for name in out.params.trainable_names() {
            let o = other.params.get(&name).unwrap().data.clone();
            for (w, d) in out.params.get_mut(&name).unwrap().data.iter_mut().zip(o) {
                *w += 0.5 * d;
            }
        }
        out
    }

    #[test]
    fn pure_anchor_pull_returns_to_anchor() {
        let src = source_model();
        let start = perturbed(&src, 9);
        assert!(start.params.distance(&src.params) > 0.5);
        let cfg = TransferConfig {
            alpha: 0.0,
            beta: 0.0,
            lambda: 1.0,
            head_lr: 0.1,
            backbone_lr_ratio: 1.0,
            max_epochs: 100,
            ..TransferConfig::default()
        };
        let (m, _) = adapt_from(&start, &src.params, &FeatureSet::new(16), &blobs(64, 16, 4), &cfg).unwrap();
        assert!(m.params.distance(&src.params) < 1e-3, "{}", m.params.distance(&src.params));
    }

    #[test]
    fn strong_anchor_limits_displacement() {
        let src = source_model();
        let target = crate::testutil::blobs_with(320, 16, 2.0, 5);
        let run = |lambda: f64| {
            let cfg = TransferConfig {
                lambda,
                head_lr: 5e-7,
                backbone_lr_ratio: 1.0,
                batch_size: 8,
                max_epochs: 1,
                ..TransferConfig::default()
            };
            let (m, _) = adapt(&src, &blobs(100, 16, 6), &target, &cfg).unwrap();
            m.params.distance(&src.params)
        };
        let free = run(0.0);
        let anchored = run(1e6);
        assert!(free > 0.0);
        assert!(anchored * 10.0 <= free, "free {free} anchored {anchored}");
    }

    #[test]
    fn same_domain_adaptation_keeps_source_quality() {
        let src = source_model();
        let test = blobs(400, 16, 7);
        let before = val_macro_f1(&src, &test).unwrap();
        let (m, _) = adapt(&src, &blobs(200, 16, 8), &blobs(80, 16, 9), &TransferConfig::default()).unwrap();
        let after = val_macro_f1(&m, &test).unwrap();
        assert!((after - before).abs() <= 0.005, "{before} -> {after}");
    }

    #[test]
    fn objective_matches_recomputed_terms() {
        let src = source_model();
        let moved = perturbed(&src, 12);
        let target = blobs(24, 16, 10);
        let mut r = ReplayBuffer::new(blobs(40, 16, 11), 3);
        let idx: Vec<usize> = (0..24).collect();
        let batch = mixed_batch(&mut r, &target, &idx, 0.5);
        let cfg = TransferConfig { lambda: 0.3, ..TransferConfig::default() };

        let at_anchor = loss_terms(&src, &src.params, &batch, &cfg, 5).unwrap();
        assert_eq!(at_anchor.l2_sp, 0.0);

        let terms = loss_terms(&moved, &src.params, &batch, &cfg, 5).unwrap();
        let (total, _, _) = step_objective(&moved, &src.params, &batch, &cfg, 5).unwrap();
        assert!(terms.l2_sp > 0.0);
        assert!((terms.total - total).abs() <= 1e-5 * total.abs().max(1.0), "{} vs {total}", terms.total);
        let manual = cfg.alpha * terms.target + cfg.beta * terms.source + cfg.lambda * terms.l2_sp;
        assert!((manual - terms.total).abs() < 1e-12);
    }

    #[test]
    fn learning_rates_decay_together() {
        let src = source_model();
        let cfg = TransferConfig {
            plateau_patience: 1,
            early_stop_patience: 4,
            max_epochs: 12,
            ..TransferConfig::default()
        };
        let (_, h) = adapt(&src, &blobs(100, 16, 13), &blobs(60, 16, 14), &cfg).unwrap();
        let mut prev = cfg.head_lr;
        let mut decays = 0;
        for e in &h.epochs {
            assert!((e.backbone_lr / e.head_lr - cfg.backbone_lr_ratio).abs() < 1e-12);
            if e.head_lr < prev {
                assert!((e.head_lr / prev - cfg.lr_decay).abs() < 1e-12);
                decays += 1;
            }
            prev = e.head_lr;
        }
        assert!(decays >= 1);
    }

    #[test]
    fn precondition_errors() {
        let src = source_model();
        let cfg = TransferConfig::default();
        let target = blobs(20, 16, 15);
        assert!(matches!(adapt(&src, &blobs(20, 16, 1), &FeatureSet::new(16), &cfg), Err(Error::EmptyInput { .. })));
        assert!(matches!(adapt(&src, &FeatureSet::new(16), &target, &cfg), Err(Error::EmptyInput { .. })));
        let one_class = target.subset(&[0, 2, 4, 6]);
        assert!(matches!(adapt(&src, &blobs(20, 16, 1), &one_class, &cfg), Err(Error::SingleClass)));
        let no_replay = TransferConfig { beta: 0.0, ..cfg };
        assert!(adapt(&src, &FeatureSet::new(16), &target, &no_replay).is_ok());
    }

    #[test]
    fn adaptation_is_deterministic() {
        let src = source_model();
        let a = adapt(&src, &blobs(50, 16, 1), &blobs(40, 16, 2), &TransferConfig::default()).unwrap();
        let b = adapt(&src, &blobs(50, 16, 1), &blobs(40, 16, 2), &TransferConfig::default()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
