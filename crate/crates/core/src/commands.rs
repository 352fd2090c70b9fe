//! Batch entry points behind the command-line tool. Each command writes its
//! primary outputs into one directory together with a `manifest.json`
//! describing how they were produced. A failing command leaves a `FAILED`
//! marker holding the error instead of a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::checkpoint::{read_config_hash, write_atomic, Checkpoint};
use crate::config::RunConfig;
use crate::error::{ensure, Error, Result};
use crate::evalmetrics::{evaluate_model, EvalConfig, EvalReport};
use crate::synthdata::{generate_dataset, load_dataset, write_dataset};
use crate::trainer::{init_params, RoundMetrics, TrainConfig, Trainer, Variant};
use crate::types::ImageSample;
use crate::verify::{report_csv, run_all, CheckResult, VerifyOptions};

pub const MANIFEST: &str = "manifest.json";
pub const FAILED: &str = "FAILED";
pub const TRAIN_DATA: &str = "train.jsonl";
pub const EVAL_DATA: &str = "eval.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.csv";
pub const TIMING: &str = "timing.csv";
pub const REPORT: &str = "report.csv";
pub const VERIFY_REPORT: &str = "verify.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    Train,
    Eval,
    Ablate,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Verify => "verify",
        }
    }
}

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    /// Sets both the scene seed and the training seed.
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub epsilon: Option<f64>,
    /// Applies to evaluation for `eval`, to sample post-processing otherwise.
    pub score_threshold: Option<f64>,
    /// Applies to evaluation for `eval`, to sample post-processing otherwise.
    pub nms_iou: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig, command: Command) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.scene.seed = s;
            cfg.train.seed = s;
        }
        let t = &mut cfg.train;
        t.outer_rounds = self.rounds.unwrap_or(t.outer_rounds);
        t.lambda = self.lambda.unwrap_or(t.lambda);
        t.gamma = self.gamma.unwrap_or(t.gamma);
        t.k = self.k.unwrap_or(t.k);
        t.epsilon = self.epsilon.unwrap_or(t.epsilon);
        if command == Command::Eval {
            let e = &mut cfg.eval;
            e.score_threshold = self.score_threshold.unwrap_or(e.score_threshold);
            e.nms_iou = self.nms_iou.unwrap_or(e.nms_iou);
        } else {
            t.score_threshold = self.score_threshold.unwrap_or(t.score_threshold);
            t.nms_iou = self.nms_iou.unwrap_or(t.nms_iou);
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Seeds {
    pub scene: u64,
    pub prototype: u64,
    pub train: u64,
    pub ablate: Vec<u64>,
}

/// Provenance of one output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: Command,
    pub version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: Vec<String>,
    /// File names inside the output directory.
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct Run<'a> {
    command: Command,
    cfg: &'a RunConfig,
    out: &'a Path,
    inputs: Vec<String>,
    artifacts: Vec<String>,
    started: u64,
}

impl<'a> Run<'a> {
    fn start(command: Command, cfg: &'a RunConfig, out: &'a Path, inputs: &[&Path]) -> Result<Self> {
        ensure!(!out.as_os_str().is_empty(), "an output directory is required");
        fs::create_dir_all(out)?;
        for stale in [MANIFEST, FAILED] {
            let p = out.join(stale);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        Ok(Self {
            command,
            cfg,
            out,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            artifacts: Vec::new(),
            started: unix_now(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes)?;
        self.note(name);
        Ok(())
    }

    fn note(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    fn finish(self) -> Result<RunManifest> {
        let m = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            seeds: Seeds {
                scene: self.cfg.scene.seed,
                prototype: self.cfg.scene.prototype_seed,
                train: self.cfg.train.seed,
                ablate: self.cfg.ablate.seeds.clone(),
            },
            inputs: self.inputs,
            artifacts: self.artifacts,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Contract(e.to_string()))?;
        write_atomic(&self.out.join(MANIFEST), format!("{json}\n").as_bytes())?;
        Ok(m)
    }
}

/// Runs `body`, leaving a `FAILED` marker in `out` if it errors.
fn guarded<T>(out: &Path, body: impl FnOnce() -> Result<T>) -> Result<T> {
    let result = body();
    if let Err(e) = &result {
        if out.is_dir() {
            let _ = fs::write(out.join(FAILED), format!("{e}\n"));
        }
    }
    result
}

fn dataset_bytes(data: &[ImageSample]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_dataset(data, &mut buf)?;
    Ok(buf)
}

/// Generates the training and evaluation sets: one scene stream, with the
/// evaluation images taking the ids after the training images.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut run = Run::start(Command::GenData, cfg, out, &[])?;
    guarded(out, || {
        let all = generate_dataset(&cfg.scene, cfg.data.train_images + cfg.data.eval_images)?;
        let (train, eval) = all.split_at(cfg.data.train_images);
        run.write(TRAIN_DATA, &dataset_bytes(train)?)?;
        run.write(EVAL_DATA, &dataset_bytes(eval)?)?;
        run.finish()
    })
}

fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", RoundMetrics::HEADER);
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

fn timing_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("round,seconds\n");
    for (round, secs) in rows {
        let _ = writeln!(s, "{round},{secs:.3}");
    }
    s
}

/// Coordinate descent on `dataset`, optionally resuming from a checkpoint.
/// The checkpoint and metrics are rewritten after every round; wall-clock
/// timings go to a separate file so the metrics stay reproducible.
pub fn train(cfg: &RunConfig, dataset: &Path, resume: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let mut inputs = vec![dataset];
    inputs.extend(resume);
    let mut run = Run::start(Command::Train, cfg, out, &inputs)?;
    guarded(out, || {
        let data = load_dataset(dataset)?;
        let mut trainer = match resume {
            Some(p) => {
                let ck = Checkpoint::load(p)?;
                Trainer::resume(&data, cfg.train.clone(), ck.pred, ck.cond, ck.rounds_done)?
            }
            None => Trainer::new(&data, cfg.train.clone())?,
        };
        let hash = cfg.hash();
        let ck_path = run.path(CHECKPOINT);
        let save = |t: &Trainer| {
            Checkpoint { pred: t.pred.clone(), cond: t.cond.clone(), rounds_done: t.rounds_done }.save(&ck_path, &hash)
        };
        save(&trainer)?;
        run.note(CHECKPOINT);
        run.note(&format!("{CHECKPOINT}.txt"));
        let (mut rows, mut times) = (Vec::new(), Vec::new());
        run.write(METRICS, metrics_csv(&rows).as_bytes())?;
        while !trainer.is_finished() {
            let t0 = Instant::now();
            let m = trainer.step_round()?;
            times.push((m.round, t0.elapsed().as_secs_f64()));
            rows.push(m);
            save(&trainer)?;
            run.write(METRICS, metrics_csv(&rows).as_bytes())?;
        }
        run.write(TIMING, timing_csv(&times).as_bytes())?;
        run.finish()
    })
}

fn check_shape(ck: &Checkpoint, data: &[ImageSample]) -> Result<()> {
    for s in data {
        let (c, d) = (s.annotation.num_classes(), s.feature_dim().unwrap_or(0));
        ensure!(
            c == ck.num_classes() && d == ck.feature_dim(),
            "checkpoint expects {} classes and {} features; image {} has {c} classes and {d} features",
            ck.num_classes(),
            ck.feature_dim(),
            s.id
        );
    }
    Ok(())
}

/// AP and CorLoc of a checkpoint's prediction head.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<(RunManifest, EvalReport)> {
    let mut run = Run::start(Command::Eval, cfg, out, &[checkpoint, dataset])?;
    guarded(out, || {
        let ck = Checkpoint::load(checkpoint)?;
        let data = load_dataset(dataset)?;
        ensure!(!data.is_empty(), "evaluation dataset is empty");
        ensure!(data.iter().all(|s| s.ground_truth.is_some()), "evaluation needs ground truth on every image");
        check_shape(&ck, &data)?;
        let report = evaluate_model(&ck.pred, &data, &cfg.eval)?;
        run.write(REPORT, report.to_csv().as_bytes())?;
        if let Ok(h) = read_config_hash(checkpoint) {
            run.inputs.push(format!("checkpoint config_hash={h}"));
        }
        Ok((run.finish()?, report))
    })
}

/// Mean and sample standard deviation; the deviation of one value is zero.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One trained-and-evaluated configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunScore {
    pub map: f64,
    pub corloc: f64,
}

/// Trains on `train` and evaluates the prediction head on `eval`.
pub fn train_and_score(
    train: &[ImageSample],
    eval: &[ImageSample],
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<RunScore> {
    let mut trainer = Trainer::new(train, cfg.clone())?;
    while !trainer.is_finished() {
        trainer.step_round()?;
    }
    let r = evaluate_model(&trainer.pred, eval, eval_cfg)?;
    Ok(RunScore { map: r.map.unwrap_or(f64::NAN), corloc: r.corloc.mean.unwrap_or(f64::NAN) })
}

/// Untrained prediction head scored on `eval`.
pub fn baseline_score(eval: &[ImageSample], cfg: &TrainConfig, eval_cfg: &EvalConfig) -> Result<RunScore> {
    ensure!(!eval.is_empty(), "evaluation dataset is empty");
    let c = eval[0].annotation.num_classes();
    let d = eval[0].feature_dim().unwrap_or(0);
    let (pred, _) = init_params(cfg, c, d);
    let r = evaluate_model(&pred, eval, eval_cfg)?;
    Ok(RunScore { map: r.map.unwrap_or(f64::NAN), corloc: r.corloc.mean.unwrap_or(f64::NAN) })
}

/// Runs every configuration, spreading them over the available cores.
/// Results come back in input order, independent of scheduling.
pub fn score_all(
    train: &[ImageSample],
    eval: &[ImageSample],
    cfgs: &[TrainConfig],
    eval_cfg: &EvalConfig,
) -> Result<Vec<RunScore>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cfgs.len()).max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<RunScore>>> = (0..cfgs.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= cfgs.len() {
                    break;
                }
                let r = train_and_score(train, eval, &cfgs[i], eval_cfg);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub variant: Variant,
    pub seed: u64,
    pub score: RunScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub map: (f64, f64),
    pub corloc: (f64, f64),
}

/// Mean-mAP ordering checks: full strictly above both-pointwise, and at
/// least each single removal.
pub fn ordering_checks(summary: &[VariantSummary]) -> Vec<(String, f64, f64, bool)> {
    let mean = |v: Variant| summary.iter().find(|s| s.variant == v).map_or(f64::NAN, |s| s.map.0);
    let full = mean(Variant::Full);
    vec![
        ("full > pw_both".to_string(), full, mean(Variant::PwBoth), full > mean(Variant::PwBoth)),
        ("full >= pw_cond".to_string(), full, mean(Variant::PwCond), full >= mean(Variant::PwCond)),
        ("full >= pw_pred".to_string(), full, mean(Variant::PwPred), full >= mean(Variant::PwPred)),
    ]
}

/// Every variant over every seed, then per-variant summaries.
pub fn ablate_variants(
    train: &[ImageSample],
    eval: &[ImageSample],
    cfg: &RunConfig,
) -> Result<(Vec<VariantRow>, Vec<VariantSummary>)> {
    let mut keys = Vec::new();
    let mut cfgs = Vec::new();
    for v in Variant::ALL {
        for &seed in &cfg.ablate.seeds {
            keys.push((v, seed));
            cfgs.push(TrainConfig { variant: v, seed, ..cfg.train.clone() });
        }
    }
    let scores = score_all(train, eval, &cfgs, &cfg.eval)?;
    let rows: Vec<VariantRow> =
        keys.iter().zip(&scores).map(|(&(variant, seed), &score)| VariantRow { variant, seed, score }).collect();
    let summary = Variant::ALL
        .iter()
        .map(|&v| {
            let mine: Vec<&VariantRow> = rows.iter().filter(|r| r.variant == v).collect();
            let maps: Vec<f64> = mine.iter().map(|r| r.score.map).collect();
            let cls: Vec<f64> = mine.iter().map(|r| r.score.corloc).collect();
            VariantSummary { variant: v, runs: mine.len(), map: mean_sd(&maps), corloc: mean_sd(&cls) }
        })
        .collect();
    Ok((rows, summary))
}

fn sweep_csv(name: &str, values: &[f64], scores: &[RunScore], per_value: usize) -> String {
    let mut s = format!("{name},runs,map_mean,map_sd,corloc_mean,corloc_sd\n");
    for (i, v) in values.iter().enumerate() {
        let chunk = &scores[i * per_value..(i + 1) * per_value];
        let (mm, ms) = mean_sd(&chunk.iter().map(|r| r.map).collect::<Vec<_>>());
        let (cm, cs) = mean_sd(&chunk.iter().map(|r| r.corloc).collect::<Vec<_>>());
        let _ = writeln!(s, "{v},{per_value},{mm:.6},{ms:.6},{cm:.6},{cs:.6}");
    }
    s
}

/// Variant ablation plus the loss-ratio and score-threshold sweeps of the
/// full variant, each over the configured seeds. Returns whether every
/// ordering check held.
pub fn ablate(cfg: &RunConfig, dataset: &Path, eval_dataset: &Path, out: &Path) -> Result<(RunManifest, bool)> {
    let mut run = Run::start(Command::Ablate, cfg, out, &[dataset, eval_dataset])?;
    guarded(out, || {
        let train = load_dataset(dataset)?;
        let eval = load_dataset(eval_dataset)?;
        ensure!(
            !eval.is_empty() && eval.iter().all(|s| s.ground_truth.is_some()),
            "evaluation dataset needs ground truth on every image"
        );
        let (rows, summary) = ablate_variants(&train, &eval, cfg)?;

        let mut s = String::from("variant,label,seed,map,corloc\n");
        for r in &rows {
            let _ = writeln!(
                s,
                "{},\"{}\",{},{:.6},{:.6}",
                r.variant.name(),
                r.variant.label(),
                r.seed,
                r.score.map,
                r.score.corloc
            );
        }
        run.write("ablation_runs.csv", s.as_bytes())?;

        let mut s = String::from("variant,label,runs,map_mean,map_sd,corloc_mean,corloc_sd\n");
        for v in &summary {
            let _ = writeln!(
                s,
                "{},\"{}\",{},{:.6},{:.6},{:.6},{:.6}",
                v.variant.name(),
                v.variant.label(),
                v.runs,
                v.map.0,
                v.map.1,
                v.corloc.0,
                v.corloc.1
            );
        }
        run.write("ablation_summary.csv", s.as_bytes())?;

        let checks = ordering_checks(&summary);
        let mut s = String::from("check,full_map,other_map,status\n");
        for (name, a, b, ok) in &checks {
            let _ = writeln!(s, "{name},{a:.6},{b:.6},{}", if *ok { "pass" } else { "VIOLATION" });
        }
        run.write("ablation_ordering.csv", s.as_bytes())?;

        let seeds = &cfg.ablate.seeds;
        let full = |f: &dyn Fn(&mut TrainConfig)| {
            seeds
                .iter()
                .map(|&seed| {
                    let mut t = TrainConfig { variant: Variant::Full, seed, ..cfg.train.clone() };
                    f(&mut t);
                    t
                })
                .collect::<Vec<_>>()
        };
        let mut cfgs = Vec::new();
        for &l in &cfg.ablate.lambdas {
            cfgs.extend(full(&|t| t.lambda = l));
        }
        let scores = score_all(&train, &eval, &cfgs, &cfg.eval)?;
        run.write("lambda_sweep.csv", sweep_csv("lambda", &cfg.ablate.lambdas, &scores, seeds.len()).as_bytes())?;

        let mut cfgs = Vec::new();
        for &th in &cfg.ablate.score_thresholds {
            cfgs.extend(full(&|t| t.score_threshold = th));
        }
        let scores = score_all(&train, &eval, &cfgs, &cfg.eval)?;
        run.write(
            "threshold_sweep.csv",
            sweep_csv("score_threshold", &cfg.ablate.score_thresholds, &scores, seeds.len()).as_bytes(),
        )?;
        Ok((run.finish()?, checks.iter().all(|c| c.3)))
    })
}

/// Runs every oracle suite and writes the per-check table.
pub fn verify(cfg: &RunConfig, opts: &VerifyOptions, out: &Path) -> Result<(RunManifest, Vec<CheckResult>)> {
    let mut run = Run::start(Command::Verify, cfg, out, &[])?;
    guarded(out, || {
        let results = run_all(opts)?;
        run.write(VERIFY_REPORT, report_csv(&results).as_bytes())?;
        Ok((run.finish()?, results))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.train_images = 12;
        cfg.data.eval_images = 6;
        cfg.train.outer_rounds = 2;
        cfg.train.inner_epochs = 1;
        cfg.ablate.seeds = vec![0];
        cfg.ablate.lambdas = vec![1.0];
        cfg.ablate.score_thresholds = vec![0.2];
        cfg
    }

    #[test]
    fn overrides_route_thresholds_by_command() {
        let o = Overrides { score_threshold: Some(0.4), nms_iou: Some(0.5), seed: Some(7), ..Overrides::default() };
        let mut a = RunConfig::default();
        o.apply(&mut a, Command::Eval).unwrap();
        assert_eq!((a.eval.score_threshold, a.eval.nms_iou), (0.4, 0.5));
        assert_eq!(a.train.score_threshold, 0.2);
        assert_eq!((a.scene.seed, a.train.seed), (7, 7));
        let mut b = RunConfig::default();
        o.apply(&mut b, Command::Train).unwrap();
        assert_eq!((b.train.score_threshold, b.train.nms_iou), (0.4, 0.5));
        assert_eq!(b.eval, EvalConfig::default());
        let bad = Overrides { k: Some(1), ..Overrides::default() };
        assert!(matches!(bad.apply(&mut RunConfig::default(), Command::Train), Err(Error::Config { .. })));
    }

    #[test]
    fn mean_sd_examples() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pipeline_writes_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let data = dir.path().join("data");
        let m = gen_data(&cfg, &data).unwrap();
        assert_eq!(m.artifacts, vec![TRAIN_DATA, EVAL_DATA]);
        let run = dir.path().join("run");
        train(&cfg, &data.join(TRAIN_DATA), None, &run).unwrap();
        let metrics = fs::read_to_string(run.join(METRICS)).unwrap();
        assert_eq!(metrics.lines().count(), 1 + cfg.train.outer_rounds);
        let ev = dir.path().join("eval");
        let (_, report) = eval(&cfg, &run.join(CHECKPOINT), &data.join(EVAL_DATA), &ev).unwrap();
        assert_eq!(report.ap.len(), 3);
        for d in [&data, &run, &ev] {
            assert!(d.join(MANIFEST).exists());
            assert!(!d.join(FAILED).exists());
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let data = dir.path().join("data");
        gen_data(&cfg, &data).unwrap();
        let full = dir.path().join("full");
        train(&cfg, &data.join(TRAIN_DATA), None, &full).unwrap();
        let mut first = cfg.clone();
        first.train.outer_rounds = 1;
        let half = dir.path().join("half");
        train(&first, &data.join(TRAIN_DATA), None, &half).unwrap();
        let rest = dir.path().join("rest");
        train(&cfg, &data.join(TRAIN_DATA), Some(&half.join(CHECKPOINT)), &rest).unwrap();
        assert_eq!(fs::read(full.join(CHECKPOINT)).unwrap(), fs::read(rest.join(CHECKPOINT)).unwrap());
        let last = |p: &Path| fs::read_to_string(p.join(METRICS)).unwrap().lines().last().unwrap().to_string();
        assert_eq!(last(&full), last(&rest));
    }

    #[test]
    fn failures_leave_a_marker() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let err = train(&tiny(), &dir.path().join("missing.jsonl"), None, &out).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
        assert!(out.join(FAILED).exists());
        assert!(!out.join(MANIFEST).exists());
    }

    #[test]
    fn eval_rejects_mismatched_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let data = dir.path().join("data");
        gen_data(&cfg, &data).unwrap();
        let ck_cfg = TrainConfig::default();
        let (pred, cond) = init_params(&ck_cfg, 2, 16);
        let ck = dir.path().join("other.ckpt");
        Checkpoint { pred, cond, rounds_done: 0 }.save(&ck, "x").unwrap();
        let err = eval(&cfg, &ck, &data.join(EVAL_DATA), &dir.path().join("ev")).unwrap_err();
        assert!(err.to_string().contains("checkpoint expects 2 classes"), "{err}");
    }

    #[test]
    fn ablation_writes_every_table() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let data = dir.path().join("data");
        gen_data(&cfg, &data).unwrap();
        let out = dir.path().join("abl");
        ablate(&cfg, &data.join(TRAIN_DATA), &data.join(EVAL_DATA), &out).unwrap();
        let runs = fs::read_to_string(out.join("ablation_runs.csv")).unwrap();
        assert_eq!(runs.lines().count(), 1 + 4);
        for f in ["ablation_summary.csv", "ablation_ordering.csv", "lambda_sweep.csv", "threshold_sweep.csv"] {
            assert!(out.join(f).exists(), "{f}");
        }
    }
}
