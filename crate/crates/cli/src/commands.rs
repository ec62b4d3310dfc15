use std::fs;
use std::path::{Path, PathBuf};

use afci_core::adapt::{capture_trace_alarms, temporal_validate, AlarmTriage, TemporalReport, TraceOracle};
use afci_core::detector::{self, fit_scaling_law, metrics_from_scores, run_detector, scale_sweep, EventReport, Metrics, ScalePoint, ScalingFit};
use afci_core::features::{featurize_traces, FeatureSidecar};
use afci_core::fleet::{run_fleet, CandidateSource, EvolutionSource};
use afci_core::synth::{apply_drift, read_trace_samples, synth_suite, Suite, SuiteConfig, MANIFEST_FILE};
use afci_core::transfer::{source_fraction_sweep, target_fraction_sweep, SourcePoint, SweepResult, TransferSplits};
use afci_core::{Category, FeatureSet, Model, SignalTrace};
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::{manifest, CliError};

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub raw: &'a Value,
}

pub const FEATURES_FILE: &str = "features.afcf";
pub const MODEL_FILE: &str = "model.afcm";
pub const HELDOUT_FILE: &str = "heldout.afcf";

fn out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    fs::write(path, contents).map_err(|e| CliError::from_io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<PathBuf, CliError> {
    write(path, serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?)
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Model::load(path).map_err(|e| CliError::reading(path, e))
}

fn load_features(ctx: &Ctx, path: &Path) -> Result<FeatureSet, CliError> {
    let set = FeatureSet::read(path).map_err(|e| CliError::reading(path, e))?;
    if set.dim() != ctx.cfg.arch.input_dim {
        return Err(CliError::Format(format!(
            "{}: rows have {} bands, arch.input_dim is {}",
            path.display(),
            set.dim(),
            ctx.cfg.arch.input_dim
        )));
    }
    Ok(set)
}

fn paths(p: &[PathBuf]) -> Vec<&Path> {
    p.iter().map(PathBuf::as_path).collect()
}

pub fn synth(ctx: &Ctx, out: &Path) -> Result<(), CliError> {
    out_dir(out)?;
    let suite = synth_suite(&ctx.cfg.suite)?;
    let m = suite.write(out)?;
    let b = suite.manifest.balance;
    println!(
        "{} traces ({} normal, {} arc), {} frames ({} arc)",
        suite.traces.len(),
        b.normal_traces,
        b.arc_traces,
        b.normal_frames + b.arc_frames,
        b.arc_frames
    );
    manifest::write(out, "synth", ctx.cfg, ctx.raw, &[], &[&m], vec![])
}

pub fn featurize(ctx: &Ctx, suite_dir: &Path, out: &Path, profiles: &[String]) -> Result<(), CliError> {
    let suite = Suite::load(suite_dir).map_err(|e| CliError::reading(&suite_dir.join(MANIFEST_FILE), e))?;
    for p in profiles {
        if suite.manifest.profile(p).is_none() {
            return Err(CliError::Config(format!("--profile {p:?} is not in the suite")));
        }
    }
    let keep = |t: &&SignalTrace| profiles.is_empty() || profiles.contains(&t.profile_id);
    let set = featurize_traces(suite.traces.iter().filter(keep), &ctx.cfg.features)?;
    out_dir(out)?;
    let f = out.join(FEATURES_FILE);
    set.write(&f)?;
    let mut used: Vec<String> = suite.traces.iter().filter(keep).map(|t| t.profile_id.clone()).collect();
    used.dedup();
    let side = FeatureSidecar {
        feature_config: ctx.cfg.features.clone(),
        count: set.len(),
        arc_rows: set.class_counts()[1],
        source_manifest: Some(suite_dir.join(MANIFEST_FILE).display().to_string()),
        profiles: used,
    };
    let s = write_json(&out.join("features.json"), &side)?;
    println!("{} rows x {} bands ({} arc)", set.len(), set.dim(), side.arc_rows);
    manifest::write(out, "featurize", ctx.cfg, ctx.raw, &[&suite_dir.join(MANIFEST_FILE)], &[&f, &s], vec![])
}

#[derive(Serialize)]
struct TrainReport<'a> {
    best_fold: usize,
    mean_accuracy: f64,
    mean_f1: f64,
    folds: &'a [detector::FoldReport],
}

pub fn train(ctx: &Ctx, features: &Path, out: &Path) -> Result<(), CliError> {
    let data = load_features(ctx, features)?;
    let outcome = detector::train(&data, &ctx.cfg.arch, &ctx.cfg.train)?;
    out_dir(out)?;
    let k = outcome.folds.len() as f64;
    let report = TrainReport {
        best_fold: outcome.best_fold,
        mean_accuracy: outcome.folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / k,
        mean_f1: outcome.folds.iter().map(|f| f.metrics.f1).sum::<f64>() / k,
        folds: &outcome.folds,
    };
    let m = out.join(MODEL_FILE);
    outcome.model.save(&m)?;
    let h = out.join(HELDOUT_FILE);
    data.subset(&outcome.folds[outcome.best_fold].test_indices).write(&h)?;
    let r = write_json(&out.join("train_report.json"), &report)?;
    for f in &outcome.folds {
        println!("fold {}: accuracy {:.6} f1 {:.6} macro-f1 {:.6}", f.fold, f.metrics.accuracy, f.metrics.f1, f.metrics.macro_f1);
    }
    println!("best fold {} -> {}", outcome.best_fold, m.display());
    manifest::write(out, "train", ctx.cfg, ctx.raw, &[features], &[&m, &h, &r], vec![outcome.model.version()])
}

pub fn eval(ctx: &Ctx, model: &Path, features: &Path, out: &Path) -> Result<(), CliError> {
    let m = load_model(model)?;
    let data = load_features(ctx, features)?;
    let metrics: Metrics = detector::evaluate(&m, &data)?;
    out_dir(out)?;
    let r = write_json(&out.join("metrics.json"), &metrics)?;
    println!(
        "accuracy {:.6} f1 {:.6} macro-f1 {:.6} roc-auc {} pr-auc {}",
        metrics.accuracy,
        metrics.f1,
        metrics.macro_f1,
        fmt_opt(metrics.roc_auc),
        fmt_opt(metrics.pr_auc)
    );
    manifest::write(out, "eval", ctx.cfg, ctx.raw, &[model, features], &[&r], vec![m.version()])
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into())
}

pub fn detect(ctx: &Ctx, model: &Path, trace: &Path, onset: Option<usize>, out: &Path) -> Result<(), CliError> {
    let m = load_model(model)?;
    let (sample_rate, samples) = read_trace_samples(trace).map_err(|e| CliError::reading(trace, e))?;
    if onset.is_some_and(|o| o >= samples.len()) {
        return Err(CliError::Config(format!("--onset is past the trace's {} samples", samples.len())));
    }
    let t = SignalTrace {
        samples,
        sample_rate,
        onset_index: onset,
        profile_id: String::new(),
        category: if onset.is_some() { Category::Arc } else { Category::Steady },
    };
    let report: EventReport = run_detector(&m, &t, &ctx.cfg.features, &ctx.cfg.detector)?;
    out_dir(out)?;
    let r = write_json(&out.join("detect_report.json"), &report)?;
    println!("{} alarms", report.alarm_frames.len());
    if let Some(ms) = report.latency_ms {
        println!("latency {ms:.1} ms");
    }
    manifest::write(out, "detect", ctx.cfg, ctx.raw, &[model, trace], &[&r], vec![m.version()])
}

#[derive(Serialize)]
struct SourceSweep {
    source_fraction: f64,
    result: SweepResult,
}

#[derive(Serialize)]
struct TransferReport {
    source_points: Vec<SourcePoint>,
    target_sweeps: Vec<SourceSweep>,
}

pub fn transfer(ctx: &Ctx, source: &Path, target: &Path, out: &Path) -> Result<(), CliError> {
    let tc = &ctx.cfg.transfer;
    let s = load_features(ctx, source)?;
    let t = load_features(ctx, target)?;
    let splits = TransferSplits::new(&s, &t, tc.test_fraction, tc.split_seed)?;
    let sources = source_fraction_sweep(&splits.source_pool, &splits.source_test, &tc.source_fractions, &ctx.cfg.arch, &ctx.cfg.train)?;
    out_dir(out)?;
    let mut files = Vec::new();
    let mut report = TransferReport {
        source_points: Vec::new(),
        target_sweeps: Vec::new(),
    };
    let mut csv = String::from("fraction,train_rows,macro_f1\n");
    for (point, model) in &sources {
        println!("source {:.3}: {} rows, macro-f1 {:.6}", point.fraction, point.train_rows, point.macro_f1);
        csv.push_str(&format!("{},{},{:.6}\n", point.fraction, point.train_rows, point.macro_f1));
        let result = target_fraction_sweep(model, &splits, &tc.target_fractions, &tc.adapt)?;
        for p in &result.points {
            println!(
                "  target {:.3}: target macro-f1 {:.6} source macro-f1 {:.6} arc accuracy {:.6}",
                p.fraction, p.target_macro_f1, p.source_macro_f1, p.arc_accuracy
            );
        }
        for (f, why) in &result.skipped {
            println!("  target {f:.3}: skipped ({why})");
        }
        files.push(write(&out.join(format!("target_sweep_source_{}.csv", point.fraction)), result.to_csv())?);
        report.source_points.push(point.clone());
        report.target_sweeps.push(SourceSweep {
            source_fraction: point.fraction,
            result,
        });
    }
    files.push(write(&out.join("source_sweep.csv"), csv)?);
    files.push(write_json(&out.join("transfer_report.json"), &report)?);
    manifest::write(out, "transfer", ctx.cfg, ctx.raw, &[source, target], &paths(&files), vec![])
}

#[derive(Serialize)]
struct AdaptReport {
    drifted_profile: String,
    false_alarms: usize,
    confirmed_arcs: usize,
    stage: u8,
    fitness: f64,
    baseline_fitness: f64,
    novel_before: Metrics,
    novel_after: Metrics,
    archive_macro_f1_before: f64,
    archive_macro_f1_after: f64,
    temporal: TemporalReport,
    adapted_version: u64,
}

pub fn adapt(ctx: &Ctx, model_path: &Path, features: &Path, out: &Path) -> Result<(), CliError> {
    let ac = &ctx.cfg.adapt;
    let model = load_model(model_path)?;
    let archive = load_features(ctx, features)?;
    let base = ctx.cfg.suite.profiles.iter().find(|p| p.profile_id == ac.profile).expect("validated");
    let mut drifted = apply_drift(base, &ac.drift)?;
    drifted.profile_id = format!("{}+drift", base.profile_id);
    let suite_for = |seed| SuiteConfig {
        profiles: vec![drifted.clone()],
        seed,
        ..ctx.cfg.suite.clone()
    };
    let field = synth_suite(&suite_for(ac.field_seed))?;
    let holdout = synth_suite(&suite_for(ac.holdout_seed))?;
    let fc = &ctx.cfg.features;
    let holdout_set = featurize_traces(holdout.traces.iter(), fc)?;
    let score = |m: &Model, s: &FeatureSet| -> Result<Metrics, CliError> { Ok(metrics_from_scores(&m.predict_proba(s.rows())?, s.labels(), 0.5)) };
    let novel_before = score(&model, &holdout_set)?;

    let mut oracle = TraceOracle::new();
    let mut triage = AlarmTriage::new(ac.batch_threshold);
    for (i, tr) in field.traces.iter().enumerate() {
        oracle.insert(i as u64, tr, fc.frame_len);
        for rec in capture_trace_alarms(&model, tr, i as u64, 0, 0, fc, &ctx.cfg.detector)? {
            triage.route(rec, &oracle)?;
        }
    }
    let false_alarms = triage.batch.len();
    let confirmed_arcs = triage.archive.len();
    println!("{false_alarms} false alarms, {confirmed_arcs} confirmed arcs; precision on the drifted regime {:.4}", novel_before.precision);
    let batch = triage.take_batch();
    let mut source = EvolutionSource {
        cfg: ac.evolution.clone(),
        stage2: ac.stage2,
    };
    let cand = source.propose(&model, &batch, &archive)?;
    let mut adapted = cand.model;
    adapted.params.version = model.version() + 1;
    let novel_after = score(&adapted, &holdout_set)?;
    let temporal = temporal_validate(&adapted, &holdout.traces, fc, &ctx.cfg.detector)?;
    let report = AdaptReport {
        drifted_profile: drifted.profile_id.clone(),
        false_alarms,
        confirmed_arcs,
        stage: cand.stage,
        fitness: cand.fitness,
        baseline_fitness: cand.baseline_fitness,
        archive_macro_f1_before: score(&model, &archive)?.macro_f1,
        archive_macro_f1_after: score(&adapted, &archive)?.macro_f1,
        novel_before,
        novel_after,
        temporal,
        adapted_version: adapted.version(),
    };
    println!(
        "stage {} fitness {:.4} (baseline {:.4}); drifted precision {:.4} -> {:.4}; archive macro-f1 {:.4} -> {:.4}; temporal validation {}",
        report.stage,
        report.fitness,
        report.baseline_fitness,
        report.novel_before.precision,
        report.novel_after.precision,
        report.archive_macro_f1_before,
        report.archive_macro_f1_after,
        if report.temporal.pass { "passed" } else { "failed" }
    );
    out_dir(out)?;
    let m = out.join(MODEL_FILE);
    adapted.save(&m)?;
    let r = write_json(&out.join("adapt_report.json"), &report)?;
    manifest::write(out, "adapt", ctx.cfg, ctx.raw, &[model_path, features], &[&m, &r], vec![model.version(), adapted.version()])
}

pub fn fleet(ctx: &Ctx, model_path: &Path, features: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let archive = load_features(ctx, features)?;
    let run = run_fleet(&ctx.cfg.fleet, &model, &archive)?;
    let r = &run.report;
    out_dir(out)?;
    let files = vec![
        write(&out.join("fleet_report.json"), r.to_json()?)?,
        write(&out.join("fleet_report.csv"), r.to_csv())?,
        write(&out.join("events.log"), run.event_log.join("\n") + "\n")?,
    ];
    print!("{}", r.to_csv());
    println!(
        "rounds {}, decisions {:?}, final version {}, containment {}",
        r.rounds.len(),
        r.decisions.iter().map(|d| (d.version, d.decision.outcome)).collect::<Vec<_>>(),
        r.final_version,
        if r.containment_ok { "ok" } else { "VIOLATED" }
    );
    manifest::write(out, "fleet", ctx.cfg, ctx.raw, &[model_path, features], &paths(&files), r.registry.clone())
}

#[derive(Serialize)]
struct ScaleReport {
    points: Vec<ScalePoint>,
    fit: ScalingFit,
}

pub fn scale(ctx: &Ctx, features: &Path, out: &Path) -> Result<(), CliError> {
    let data = load_features(ctx, features)?;
    let points = scale_sweep(&data, &ctx.cfg.scale.fractions, &ctx.cfg.arch, &ctx.cfg.train)?;
    let fit = fit_scaling_law(&points.iter().map(|p| (p.n as f64, p.loss)).collect::<Vec<_>>())?;
    out_dir(out)?;
    let mut csv = String::from("fraction,n,loss\n");
    for p in &points {
        csv.push_str(&format!("{},{},{:.8}\n", p.fraction, p.n, p.loss));
    }
    print!("{csv}");
    println!("fit: a {:.4} alpha {:.4} l_inf {:.6} rmse {:.6}", fit.a, fit.alpha, fit.l_inf, fit.rmse);
    let files = vec![write(&out.join("scale.csv"), csv)?, write_json(&out.join("scaling_fit.json"), &ScaleReport { points, fit })?];
    manifest::write(out, "scale", ctx.cfg, ctx.raw, &[features], &paths(&files), vec![])
}
