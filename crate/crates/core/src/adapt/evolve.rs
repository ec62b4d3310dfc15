use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AdaptationBatch;
use crate::detector::{metrics_from_scores, stratified_split, train_holdout, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::nn::{ArchSpec, Model};
use crate::rng::{self, SimRng};
use crate::synth::Label;
use crate::transfer::{adapt_from, TransferConfig};

/// Stage-2 micro-architecture moves, all relative to the deployed arch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Space {
    pub kernel_delta: usize,
    pub channel_scales: Vec<f64>,
    pub fc_delta: usize,
    pub dropout_choices: Vec<f64>,
}

impl Default for Stage2Space {
    fn default() -> Self {
        Stage2Space {
            kernel_delta: 2,
            channel_scales: vec![0.75, 1.0, 1.25],
            fc_delta: 32,
            dropout_choices: vec![0.1, 0.2, 0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub head_lr_grid: Vec<f64>,
    pub backbone_ratio_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub mix_ratio_grid: Vec<f64>,
    pub epochs_grid: Vec<usize>,
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub mutation_rate: f64,
    pub elitism: usize,
    /// Stage 1 counts as saturated when the best fitness gains less than
    /// this over the final two generations.
    pub saturation_tol: f64,
    /// Share of the false alarms held out for fitness.
    pub val_fraction: f64,
    /// Archive rows held out for fitness.
    pub archive_val_rows: usize,
    /// False alarms used per round; a larger batch is subsampled.
    pub max_novel_rows: usize,
    /// Fixed fine-tuning settings not under search.
    pub transfer: TransferConfig,
    pub stage2: Stage2Space,
    pub stage2_population: usize,
    pub stage2_generations: usize,
    pub stage2_train: TrainConfig,
    /// Archive rows used to retrain stage-2 candidates.
    pub stage2_archive_rows: usize,
    pub flops_bound: f64,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            head_lr_grid: vec![0.003, 0.01, 0.03],
            backbone_ratio_grid: vec![0.05, 0.1, 0.3],
            alpha_grid: vec![0.5, 1.0, 2.0],
            beta_grid: vec![0.25, 0.5, 1.0],
            lambda_grid: vec![1e-5, 1e-4, 1e-3],
            mix_ratio_grid: vec![0.5, 1.0, 2.0],
            epochs_grid: vec![5, 10, 20],
            population: 8,
            generations: 5,
            tournament: 2,
            mutation_rate: 0.3,
            elitism: 1,
            saturation_tol: 1e-3,
            val_fraction: 0.25,
            archive_val_rows: 1000,
            max_novel_rows: 128,
            transfer: TransferConfig {
                source_val_rows: 500,
                ..TransferConfig::default()
            },
            stage2: Stage2Space::default(),
            stage2_population: 6,
            stage2_generations: 2,
            stage2_train: TrainConfig {
                epochs: 6,
                folds: 1,
                ..TrainConfig::default()
            },
            stage2_archive_rows: 4000,
            flops_bound: 1.05,
            seed: 23,
        }
    }
}

impl EvolutionConfig {
    fn grid_lens(&self) -> [usize; 7] {
        [
            self.head_lr_grid.len(),
            self.backbone_ratio_grid.len(),
            self.alpha_grid.len(),
            self.beta_grid.len(),
            self.lambda_grid.len(),
            self.mix_ratio_grid.len(),
            self.epochs_grid.len(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_lens().contains(&0) {
            return Err(Error::config("grid", "every stage-1 grid needs at least one value"));
        }
        if self.population < 2 {
            return Err(Error::config("population", "must be >= 2"));
        }
        if self.generations < 1 || self.stage2_generations < 1 || self.stage2_population < 1 {
            return Err(Error::config("generations", "must be >= 1"));
        }
        if self.tournament < 1 || self.tournament > self.population {
            return Err(Error::config("tournament", "must be in [1, population]"));
        }
        if self.elitism >= self.population {
            return Err(Error::config("elitism", "must be below population"));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::config("mutation_rate", "must be in [0, 1]"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction", "must be in (0, 1)"));
        }
        if !(self.flops_bound > 0.0) {
            return Err(Error::config("flops_bound", "must be > 0"));
        }
        if self.stage2.channel_scales.is_empty() || self.stage2.dropout_choices.is_empty() {
            return Err(Error::config("stage2", "channel_scales and dropout_choices must be non-empty"));
        }
        self.transfer.validate()?;
        self.stage2_train.validate()
    }
}

/// Indices into the stage-1 grids: head LR, backbone ratio, alpha, beta,
/// lambda, mix ratio, epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Genome(pub [usize; 7]);

impl Genome {
    /// The middle of every grid.
    pub fn centre(cfg: &EvolutionConfig) -> Genome {
        Genome(cfg.grid_lens().map(|n| n / 2))
    }

    pub fn random(cfg: &EvolutionConfig, r: &mut SimRng) -> Genome {
        Genome(cfg.grid_lens().map(|n| r.random_range(0..n)))
    }

    /// Each gene moves one grid step with probability `mutation_rate`.
    pub fn mutate(self, cfg: &EvolutionConfig, r: &mut SimRng) -> Genome {
        let lens = cfg.grid_lens();
        let mut g = self.0;
        for (v, n) in g.iter_mut().zip(lens) {
            if n > 1 && r.random_bool(cfg.mutation_rate) {
                *v = if *v == 0 {
                    1
                } else if *v == n - 1 || r.random_bool(0.5) {
                    *v - 1
                } else {
                    *v + 1
                };
            }
        }
        Genome(g)
    }

    pub fn transfer_config(&self, cfg: &EvolutionConfig) -> TransferConfig {
        let g = self.0;
        let key = g.iter().fold(cfg.seed, |acc, &v| rng::mix64(acc ^ v as u64));
        TransferConfig {
            head_lr: cfg.head_lr_grid[g[0]],
            backbone_lr_ratio: cfg.backbone_ratio_grid[g[1]],
            alpha: cfg.alpha_grid[g[2]],
            beta: cfg.beta_grid[g[3]],
            lambda: cfg.lambda_grid[g[4]],
            mix_ratio: cfg.mix_ratio_grid[g[5]],
            max_epochs: cfg.epochs_grid[g[6]],
            seed: key,
            ..cfg.transfer.clone()
        }
    }
}

/// Training and fitness data for one adaptation round.
#[derive(Clone, Debug)]
pub struct NoveltyData {
    /// False alarms (normal) plus an equal number of confirmed or archived arcs.
    pub train: FeatureSet,
    /// Archive rows replayed as the source domain.
    pub replay: FeatureSet,
    /// Held-out false alarms plus an equal number of held-out arcs.
    pub novel_val: FeatureSet,
    pub archive_val: FeatureSet,
}

impl NoveltyData {
    pub fn build(batch: &AdaptationBatch, archive: &FeatureSet, cfg: &EvolutionConfig) -> Result<Self> {
        if !batch.is_ready() {
            return Err(Error::BatchNotReady {
                have: batch.len(),
                need: batch.threshold,
            });
        }
        let dim = archive.dim();
        let novel = batch.features(dim)?;
        if archive.class_counts()[1] == 0 {
            return Err(Error::Precondition("archive has no arc exemplars to mix with false alarms".into()));
        }
        let mut r = rng::derive_rng(cfg.seed, 0xad);

        let all: Vec<usize> = (0..archive.len()).collect();
        let frac = (cfg.archive_val_rows as f64 / archive.len() as f64).min(0.5);
        let (pool, aval) = stratified_split(&all, archive.labels(), frac, rng::derive(cfg.seed, 1));
        let archive_val = archive.subset(&aval);

        let mut order: Vec<usize> = (0..novel.len()).collect();
        order.shuffle(&mut r);
        order.truncate(cfg.max_novel_rows.max(2));
        let n_val = ((cfg.val_fraction * order.len() as f64).round() as usize).clamp(1, order.len().saturating_sub(1).max(1));
        let (val_idx, train_idx) = order.split_at(n_val);

        // Field-confirmed arcs come first, then archive arcs fill the rest.
        let field = batch.exemplar_features(dim)?;
        let mut f_order: Vec<usize> = (0..field.len()).collect();
        f_order.shuffle(&mut r);
        let f_val = ((cfg.val_fraction * f_order.len() as f64).round() as usize).min(f_order.len());
        let (f_val_idx, f_train_idx) = f_order.split_at(f_val);

        let mut pool_arcs: Vec<usize> = pool.iter().copied().filter(|&i| archive.label(i) == 1).collect();
        pool_arcs.shuffle(&mut r);
        let mut val_arcs: Vec<usize> = aval.iter().copied().filter(|&i| archive.label(i) == 1).collect();
        val_arcs.shuffle(&mut r);
        if val_arcs.is_empty() {
            val_arcs = pool_arcs.clone();
        }

        let mix = |base: FeatureSet, n: usize, field_idx: &[usize], fill: &[usize]| -> Result<FeatureSet> {
            let mut out = base;
            for k in 0..n {
                match field_idx.get(k) {
                    Some(&i) => out.push(field.row(i), Label::Arc as u8)?,
                    None => out.push(archive.row(fill[k % fill.len()]), Label::Arc as u8)?,
                }
            }
            Ok(out)
        };
        let train = mix(novel.subset(train_idx), train_idx.len(), f_train_idx, &pool_arcs)?;
        let novel_val = mix(novel.subset(val_idx), val_idx.len(), f_val_idx, &val_arcs)?;
        Ok(NoveltyData {
            train,
            replay: archive.subset(&pool),
            novel_val,
            archive_val,
        })
    }

    /// Equal-weight blend of macro-F1 on the novel and archive validation sets.
    pub fn fitness(&self, model: &Model) -> Result<f64> {
        let f = |s: &FeatureSet| -> Result<f64> {
            let p = model.predict_proba(s.rows())?;
            Ok(metrics_from_scores(&p, s.labels(), 0.5).macro_f1)
        };
        if self.archive_val.is_empty() {
            return f(&self.novel_val);
        }
        Ok(0.5 * f(&self.novel_val)? + 0.5 * f(&self.archive_val)?)
    }
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub stage: u8,
    pub generation: usize,
    pub candidate: serde_json::Value,
    pub fitness: Option<f64>,
    pub flops_ratio: f64,
    pub rejected: bool,
}

pub struct Stage1Outcome {
    pub model: Model,
    pub genome: Genome,
    pub config: TransferConfig,
    pub fitness: f64,
    pub baseline_fitness: f64,
    /// Best fitness so far after each generation.
    pub best_per_generation: Vec<f64>,
    pub saturated: bool,
    pub log: Vec<SearchRecord>,
    pub data: NoveltyData,
}

fn tournament<'a, T>(pop: &'a [(T, f64)], k: usize, r: &mut SimRng) -> &'a T {
    let mut best: Option<&(T, f64)> = None;
    for _ in 0..k {
        let c = pop.choose(r).expect("population is non-empty");
        if best.is_none_or(|b| c.1 > b.1) {
            best = Some(c);
        }
    }
    &best.unwrap().0
}

/// Sorted by fitness, best first; ties keep insertion order.
fn rank<T: Clone>(pop: &[(T, f64)]) -> Vec<(T, f64)> {
    let mut v = pop.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1));
    v
}

/// Searches fine-tuning settings; each candidate adapts a copy of `model`
/// anchored at its current weights. Architecture is never changed.
pub fn stage1_evolve(model: &Model, batch: &AdaptationBatch, archive: &FeatureSet, cfg: &EvolutionConfig) -> Result<Stage1Outcome> {
    cfg.validate()?;
    let data = NoveltyData::build(batch, archive, cfg)?;
    let baseline_fitness = data.fitness(model)?;
    let mut r = rng::derive_rng(cfg.seed, 0x51);

    let mut cache: BTreeMap<Genome, (f64, Model)> = BTreeMap::new();
    let mut log = Vec::new();
    let mut genomes = vec![Genome::centre(cfg)];
    while genomes.len() < cfg.population {
        genomes.push(Genome::random(cfg, &mut r));
    }
    let mut best_per_generation = Vec::new();
    let mut pop: Vec<(Genome, f64)> = Vec::new();

    for generation in 0..cfg.generations {
        if generation > 0 {
            let ranked = rank(&pop);
            genomes = ranked.iter().take(cfg.elitism).map(|p| p.0).collect();
            while genomes.len() < cfg.population {
                let parent = *tournament(&pop, cfg.tournament, &mut r);
                genomes.push(parent.mutate(cfg, &mut r));
            }
        }
        let mut fresh: Vec<Genome> = genomes.iter().copied().filter(|g| !cache.contains_key(g)).collect();
        fresh.sort_unstable();
        fresh.dedup();
        let trained = fresh
            .par_iter()
            .map(|g| {
                let tc = g.transfer_config(cfg);
                let (m, _) = adapt_from(model, &model.params, &data.replay, &data.train, &tc)?;
                Ok((*g, data.fitness(&m)?, m))
            })
            .collect::<Result<Vec<_>>>()?;
        for (g, f, m) in trained {
            cache.insert(g, (f, m));
        }
        pop = genomes.iter().map(|g| (*g, cache[g].0)).collect();
        for (g, f) in &pop {
            log.push(SearchRecord {
                stage: 1,
                generation,
                candidate: serde_json::to_value(g.transfer_config(cfg))?,
                fitness: Some(*f),
                flops_ratio: 1.0,
                rejected: false,
            });
        }
        let best = pop.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let prev = best_per_generation.last().copied().unwrap_or(f64::NEG_INFINITY);
        best_per_generation.push(best.max(prev));
    }

    let (genome, fitness) = rank(&pop)[0];
    let n = best_per_generation.len();
    let back = n.saturating_sub(3);
    let saturated = best_per_generation[n - 1] - best_per_generation[back] < cfg.saturation_tol;
    let model = cache.remove(&genome).expect("best genome was trained").1;
    Ok(Stage1Outcome {
        model,
        genome,
        config: genome.transfer_config(cfg),
        fitness,
        baseline_fitness,
        best_per_generation,
        saturated,
        log,
        data,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Proposal {
    pub arch: ArchSpec,
    pub flops_ratio: f64,
    pub feasible: bool,
}

fn odd_at_least_one(k: isize) -> usize {
    let k = k.max(1) as usize;
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

/// Mutates `parent` within the stage-2 space around `base`. Kernel sizes
/// are clamped to stay non-increasing along the network.
pub fn mutate_arch(base: &ArchSpec, parent: &ArchSpec, space: &Stage2Space, rate: f64, r: &mut SimRng) -> ArchSpec {
    let mut a = parent.clone();
    let kd = space.kernel_delta as isize;
    for (i, b) in a.conv_blocks.iter_mut().enumerate() {
        let bb = base.conv_blocks[i];
        if r.random_bool(rate) {
            let d = [-kd, 0, kd][r.random_range(0..3)];
            b.kernel = odd_at_least_one(bb.kernel as isize + d);
        }
        if r.random_bool(rate) {
            let s = space.channel_scales[r.random_range(0..space.channel_scales.len())];
            b.channels = ((bb.channels as f64 * s).round() as usize).max(1);
        }
    }
    for i in 1..a.conv_blocks.len() {
        let prev = a.conv_blocks[i - 1].kernel;
        if a.conv_blocks[i].kernel > prev {
            a.conv_blocks[i].kernel = prev;
        }
    }
    if r.random_bool(rate) {
        let fd = space.fc_delta as isize;
        let d = [-fd, 0, fd][r.random_range(0..3)];
        a.fc_hidden = (base.fc_hidden as isize + d).max(1) as usize;
    }
    if r.random_bool(rate) {
        a.dropout_p = space.dropout_choices[r.random_range(0..space.dropout_choices.len())];
    }
    a
}

/// A mutated arch with its FLOPs ratio against `base`; infeasible proposals
/// must not be trained.
pub fn propose_stage2(base: &ArchSpec, parent: &ArchSpec, cfg: &EvolutionConfig, r: &mut SimRng) -> Stage2Proposal {
    let arch = mutate_arch(base, parent, &cfg.stage2, cfg.mutation_rate, r);
    let flops_ratio = arch.flops().ratio_to(&base.flops());
    let feasible = flops_ratio <= cfg.flops_bound && arch.validate().is_ok();
    Stage2Proposal { arch, flops_ratio, feasible }
}

pub struct Stage2Outcome {
    pub model: Model,
    pub fitness: f64,
    pub flops_ratio: f64,
    pub trained: usize,
    pub rejected: usize,
    pub log: Vec<SearchRecord>,
}

/// FLOPs-bounded micro-architecture search, reachable only once stage 1 has
/// saturated. Every candidate is trained from scratch on the novel data plus
/// an archive sample.
pub fn stage2_evolve(base: &Model, stage1: &Stage1Outcome, cfg: &EvolutionConfig) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if !stage1.saturated {
        return Err(Error::Precondition("stage 1 has not saturated".into()));
    }
    let data = &stage1.data;
    let mut r = rng::derive_rng(cfg.seed, 0x52);
    let base_arch = &base.arch;
    if 1.0 > cfg.flops_bound {
        return Err(Error::Infeasible("the deployed arch already exceeds the FLOPs bound".into()));
    }

    let mut train = data.train.clone();
    let mut pool: Vec<usize> = (0..data.replay.len()).collect();
    pool.shuffle(&mut r);
    pool.truncate(cfg.stage2_archive_rows);
    pool.sort_unstable();
    train.extend(&data.replay.subset(&pool))?;
    let all: Vec<usize> = (0..train.len()).collect();
    let (tr, va) = stratified_split(&all, train.labels(), cfg.stage2_train.val_fraction, cfg.seed);
    let (train, val) = (train.subset(&tr), train.subset(&va));

    let mut log = Vec::new();
    let mut rejected = 0;
    let mut scored: Vec<(ArchSpec, f64)> = Vec::new();
    let mut models: Vec<Model> = Vec::new();
    let mut parents = vec![base_arch.clone()];

    for generation in 0..cfg.stage2_generations {
        let mut batch = Vec::new();
        if generation == 0 {
            batch.push(base_arch.clone());
        }
        let mut attempts = 0;
        while batch.len() < cfg.stage2_population && attempts < 50 * cfg.stage2_population {
            attempts += 1;
            let parent = parents[r.random_range(0..parents.len())].clone();
            let p = propose_stage2(base_arch, &parent, cfg, &mut r);
            if !p.feasible {
                rejected += 1;
                log.push(SearchRecord {
                    stage: 2,
                    generation,
                    candidate: serde_json::to_value(&p.arch)?,
                    fitness: None,
                    flops_ratio: p.flops_ratio,
                    rejected: true,
                });
                continue;
            }
            if !batch.contains(&p.arch) && !scored.iter().any(|s| s.0 == p.arch) {
                batch.push(p.arch);
            }
        }
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(i, arch)| {
                let ratio = arch.flops().ratio_to(&base_arch.flops());
                assert!(ratio <= cfg.flops_bound, "candidate over the FLOPs bound reached training");
                let seed = rng::derive(cfg.seed, 1000 * generation as u64 + i as u64);
                let (m, _) = train_holdout(&train, &val, arch, &cfg.stage2_train, seed)?;
                Ok((arch.clone(), ratio, data.fitness(&m)?, m))
            })
            .collect::<Result<Vec<_>>>()?;
        for (arch, ratio, fitness, m) in results {
            log.push(SearchRecord {
                stage: 2,
                generation,
                candidate: serde_json::to_value(&arch)?,
                fitness: Some(fitness),
                flops_ratio: ratio,
                rejected: false,
            });
            scored.push((arch, fitness));
            models.push(m);
        }
        let ranked = rank(&scored);
        parents = ranked.iter().take(2).map(|s| s.0.clone()).collect();
    }
    let best = (0..scored.len())
        .max_by(|&a, &b| scored[a].1.total_cmp(&scored[b].1).then(b.cmp(&a)))
        .ok_or_else(|| Error::Infeasible("no candidate satisfied the FLOPs bound".into()))?;
    let model = models.swap_remove(best);
    Ok(Stage2Outcome {
        flops_ratio: model.arch.flops().ratio_to(&base_arch.flops()),
        fitness: scored[best].1,
        model,
        trained: scored.len(),
        rejected,
        log,
    })
}
