use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use gep_core::datagen::LabeledDataset;
use gep_core::gep::{calibrate_threshold, predict_accuracy, true_accuracy, CalibrationInput};
use gep_core::harness::{
    plots, prepare_seed, run_ensemble_sweep, run_fidelity_benchmark, run_shift_benchmark, run_simplicity_bias,
    ExperimentConfig, RunReport, SeedPlan,
};
use gep_core::io::{
    emit_plot, emit_report, ingest_logits, parse_report_json, read_dataset_binary, read_dataset_csv, read_scores_csv,
    to_canonical_json, write_dataset_binary, write_dataset_csv, write_scores_csv,
};
use gep_core::nn::train_sgd;
use gep_core::rng::split_seed;
use gep_core::scoring::{
    conf_score, ensemble_predict, lms_score, ma_score, train_ensemble, AugmentationPolicy, ScoreMethod,
};
use gep_core::{Dataset, Ensemble, Scores, Threshold};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Cli, Command, DataFormat, GlobalArgs, MethodArg};

/// Failure with its exit code: 1 for bad input, 2 for failures while running.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        }
    }
}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Validation(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    config_sha256: String,
    seed: u64,
    seed_roots: Vec<u64>,
    artifacts: Vec<String>,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    verbose: u8,
    artifacts: Vec<String>,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("gep: {}", msg.as_ref());
        }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_owned());
        self.out.join(name)
    }

    fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<(), Failure> {
        let text = to_canonical_json(value).runtime()?;
        let path = self.path(name);
        fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()
    }
}

fn load_config(global: &GlobalArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &global.config {
        None => ExperimentConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))
                .invalid()?;
            serde_json::from_str(&text)
                .with_context(|| format!("invalid config file {}", path.display()))
                .invalid()?
        }
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.validate().context("config validation failed").invalid()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Gen { .. } => "gen",
        Command::Train { .. } => "train",
        Command::Score { .. } => "score",
        Command::Calibrate { .. } => "calibrate",
        Command::Predict { .. } => "predict",
        Command::BenchShift => "bench-shift",
        Command::BenchFidelity => "bench-fidelity",
        Command::SweepEnsemble { .. } => "sweep-ensemble",
        Command::BenchSlab => "bench-slab",
        Command::Report { .. } => "report",
    }
}

pub fn dispatch(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.global)?;
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            return Err(Failure::Validation(anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")
            .runtime()?;
    }
    fs::create_dir_all(&cli.global.out)
        .with_context(|| format!("creating output directory {}", cli.global.out.display()))
        .runtime()?;
    let mut ctx = Ctx {
        cfg,
        out: cli.global.out.clone(),
        verbose: cli.global.verbose,
        artifacts: Vec::new(),
    };
    let name = subcommand_name(&cli.command);
    ctx.log(format!("{name}: seed {}, output {}", ctx.cfg.seed, ctx.out.display()));
    match cli.command {
        Command::Gen { format, no_corruptions } => gen(&mut ctx, format, !no_corruptions)?,
        Command::Train {
            data,
            classes,
            members,
            label_noise,
        } => train(&mut ctx, data.as_deref(), classes, members, label_noise)?,
        Command::Score {
            method,
            models,
            data,
            classes,
            logits,
        } => score(
            &mut ctx,
            method,
            models.as_deref(),
            data.as_deref(),
            classes,
            logits.as_deref(),
        )?,
        Command::Calibrate {
            scores,
            accuracy,
            predictions,
            data,
            classes,
        } => calibrate(
            &mut ctx,
            &scores,
            accuracy,
            predictions.as_deref(),
            data.as_deref(),
            classes,
        )?,
        Command::Predict {
            scores,
            threshold,
            method,
            target,
            predictions,
            data,
            classes,
        } => predict(
            &mut ctx,
            &scores,
            &threshold,
            &method,
            &target,
            predictions.as_deref(),
            data.as_deref(),
            classes,
        )?,
        Command::BenchShift => {
            let report = run_shift_benchmark(&ctx.cfg).runtime()?;
            emit_run(&mut ctx, &report)?;
        }
        Command::BenchFidelity => {
            let report = run_fidelity_benchmark(&ctx.cfg).runtime()?;
            emit_run(&mut ctx, &report)?;
        }
        Command::SweepEnsemble { sizes } => {
            let sizes = sizes.unwrap_or_else(|| ctx.cfg.sweep_sizes.clone());
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Failure::Validation(anyhow!(
                    "--sizes must list positive ensemble sizes"
                )));
            }
            let report = run_ensemble_sweep(&ctx.cfg, &sizes).runtime()?;
            emit_run(&mut ctx, &report)?;
        }
        Command::BenchSlab => {
            let slab = ctx.cfg.slab.clone();
            let report = run_simplicity_bias(&ctx.cfg, &slab).runtime()?;
            emit_run(&mut ctx, &report)?;
        }
        Command::Report { input } => {
            let text = fs::read_to_string(&input)
                .with_context(|| format!("cannot read report {}", input.display()))
                .invalid()?;
            let report = parse_report_json(&text)
                .with_context(|| format!("invalid report {}", input.display()))
                .invalid()?;
            print_summary(&report);
            emit_run(&mut ctx, &report)?;
        }
    }
    let seed_roots = ctx.cfg.seed_plans().iter().map(|p| p.root).collect();
    let manifest = RunManifest {
        tool: "gep",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: name.to_owned(),
        config_sha256: sha256_hex(to_canonical_json(&ctx.cfg).runtime()?.as_bytes()),
        seed: ctx.cfg.seed,
        seed_roots,
        artifacts: ctx.artifacts.clone(),
    };
    ctx.artifacts.clear();
    ctx.write_json("run_manifest.json", &manifest)?;
    ctx.log("done");
    Ok(())
}

fn emit_run(ctx: &mut Ctx, report: &RunReport) -> Result<(), Failure> {
    if let Some(secs) = report.wall_clock_seconds {
        ctx.log(format!("{} records in {secs:.1}s", report.records.len()));
    }
    let written = emit_report(report, &ctx.out).runtime()?;
    ctx.artifacts.extend(written);
    for (name, plot) in plots(report) {
        if plot.series.iter().all(|s| s.points.is_empty()) {
            continue;
        }
        let path = ctx.path(&name);
        emit_plot(&plot, &path).runtime()?;
    }
    Ok(())
}

fn print_summary(report: &RunReport) {
    println!(
        "{:<12} {:<7} {:<16} {:>3} {:>8} {:>8}",
        "condition", "method", "target", "n", "mae", "std"
    );
    for c in &report.summary {
        println!(
            "{:<12} {:<7} {:<16} {:>3} {:>8.4} {:>8.4}",
            c.condition, c.method, c.target, c.n, c.mae, c.std
        );
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect()
}

fn gen(ctx: &mut Ctx, format: DataFormat, corruptions: bool) -> Result<(), Failure> {
    let plan = SeedPlan::new(ctx.cfg.seed, 0);
    let data = prepare_seed(&ctx.cfg, &plan, corruptions).runtime()?;
    let mut sets = vec![("train".to_owned(), data.train), ("val".to_owned(), data.val)];
    sets.extend(
        data.targets
            .into_iter()
            .map(|(name, d)| (format!("target_{}", file_stem(&name)), d)),
    );
    for (name, set) in &sets {
        match format {
            DataFormat::Csv => {
                let path = ctx.path(&format!("{name}.csv"));
                write_dataset_csv(set, &path).runtime()?;
            }
            DataFormat::Bin => {
                let path = ctx.path(&format!("{name}.gepb"));
                write_dataset_binary(set, &path).runtime()?;
            }
        }
        ctx.log(format!("{name}: {} samples", set.n_samples()));
    }
    Ok(())
}

fn read_data(path: &Path, classes: Option<usize>) -> Result<Dataset, Failure> {
    let data = if path.extension().is_some_and(|e| e == "gepb") {
        read_dataset_binary(path, classes)
    } else {
        read_dataset_csv(path, classes)
    };
    data.with_context(|| format!("cannot load dataset {}", path.display()))
        .invalid()
}

fn train(
    ctx: &mut Ctx,
    data: Option<&Path>,
    classes: Option<usize>,
    members: usize,
    label_noise: f64,
) -> Result<(), Failure> {
    if members == 0 {
        return Err(Failure::Validation(anyhow!("--members must be at least 1")));
    }
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(Failure::Validation(anyhow!("--label-noise must lie in [0, 1]")));
    }
    let plan = SeedPlan::new(ctx.cfg.seed, 0);
    let train_set: Dataset = match data {
        Some(path) => read_data(path, classes)?,
        None => prepare_seed(&ctx.cfg, &plan, false).runtime()?.train,
    };
    let arch = ctx.cfg.architecture(train_set.n_features(), train_set.n_classes());
    ctx.log(format!(
        "training {members} member(s) {:?} on {} samples",
        arch.layer_dims,
        train_set.n_samples()
    ));
    // seeds follow the benchmark harness so a CLI pipeline reproduces seed 0
    let ensemble: Ensemble = if members == 1 && label_noise == 0.0 {
        let cfg = ctx.cfg.train.clone().with_seed(plan.single_model());
        Ensemble::new(vec![train_sgd(&train_set, &cfg, &arch).runtime()?], 0.0).runtime()?
    } else {
        let root = if label_noise > 0.0 { plan.ma_eps() } else { plan.ma() };
        let cfg = ctx.cfg.train.clone().with_seed(root);
        train_ensemble(&train_set, &cfg, &arch, members, label_noise).runtime()?
    };
    ctx.write_json("ensemble.json", &ensemble)
}

fn predictions_csv(preds: &[usize]) -> String {
    let mut out = String::from("sample_index,prediction\n");
    for (i, p) in preds.iter().enumerate() {
        out.push_str(&format!("{i},{p}\n"));
    }
    out
}

fn read_predictions(path: &Path) -> Result<Vec<usize>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read predictions {}", path.display()))
        .invalid()?;
    let mut lines = text.lines();
    if lines.next() != Some("sample_index,prediction") {
        return Err(Failure::Validation(anyhow!(
            "{}: header must be sample_index,prediction",
            path.display()
        )));
    }
    lines
        .enumerate()
        .map(|(r, line)| {
            let (idx, pred) = line
                .split_once(',')
                .ok_or_else(|| anyhow!("{}: row {r} is malformed", path.display()))?;
            if idx.trim().parse::<usize>().ok() != Some(r) {
                bail!("{}: row {r} has sample_index {idx}", path.display());
            }
            pred.trim()
                .parse()
                .with_context(|| format!("{}: row {r} prediction '{pred}'", path.display()))
        })
        .collect::<Result<_, _>>()
        .invalid()
}

fn score(
    ctx: &mut Ctx,
    method: MethodArg,
    models: Option<&Path>,
    data: Option<&Path>,
    classes: Option<usize>,
    logits: Option<&Path>,
) -> Result<(), Failure> {
    if logits.is_some() && method == MethodArg::Lms {
        return Err(Failure::Validation(anyhow!(
            "lms needs a model to query; use --models with --data"
        )));
    }
    let (scores, preds, labels): (Scores, Vec<usize>, Option<Vec<usize>>) = if let Some(manifest) = logits {
        let bundle = ingest_logits(manifest)
            .with_context(|| format!("cannot load logits bundle {}", manifest.display()))
            .invalid()?;
        let (scores, kind) = match method {
            MethodArg::Conf => (bundle.conf_scores(), ScoreMethod::Conf),
            MethodArg::Ma => (bundle.ma_scores(), ScoreMethod::Ma),
            MethodArg::Lms => unreachable!("rejected above"),
        };
        ctx.log(format!("{} members, {} samples", bundle.size(), bundle.n_samples()));
        (
            scores.runtime()?,
            bundle.predictions(kind).runtime()?,
            bundle.labels.clone(),
        )
    } else {
        let models = models.expect("clap requires --models or --logits");
        let data = read_data(data.expect("clap requires --data with --models"), classes)?;
        let text = fs::read_to_string(models)
            .with_context(|| format!("cannot read models {}", models.display()))
            .invalid()?;
        let ensemble: Ensemble = serde_json::from_str(&text)
            .with_context(|| format!("invalid models file {}", models.display()))
            .invalid()?;
        let single = &ensemble.members()[0];
        if single.input_dim() != data.n_features() {
            return Err(Failure::Validation(anyhow!(
                "models expect {} features, data has {}",
                single.input_dim(),
                data.n_features()
            )));
        }
        let labels = Some(data.labels().to_vec());
        match method {
            MethodArg::Conf => (
                conf_score(single, &data).runtime()?,
                single.predict_batch(data.features()).runtime()?,
                labels,
            ),
            MethodArg::Lms => {
                let policy = AugmentationPolicy {
                    seed: split_seed(SeedPlan::new(ctx.cfg.seed, 0).augmentation(), 0),
                    ..ctx.cfg.augmentation.clone()
                };
                (
                    lms_score(single, &data, &policy).runtime()?,
                    single.predict_batch(data.features()).runtime()?,
                    labels,
                )
            }
            MethodArg::Ma => (
                ma_score(&ensemble, &data).runtime()?,
                ensemble_predict(&ensemble, &data).runtime()?,
                labels,
            ),
        }
    };
    let path = ctx.path("scores.csv");
    write_scores_csv(&scores, &path).runtime()?;
    ctx.write_text("predictions.csv", &predictions_csv(&preds))?;
    if let Some(labels) = labels {
        let acc = true_accuracy(&preds, &labels).runtime()?;
        ctx.log(format!("accuracy against stored labels: {acc:.4}"));
    }
    Ok(())
}

fn accuracy_from(predictions: &Path, data: &Path, classes: Option<usize>) -> Result<f64, Failure> {
    let preds = read_predictions(predictions)?;
    let data: LabeledDataset<f64> = read_data(data, classes)?;
    true_accuracy(&preds, data.labels())
        .context("predictions do not match the dataset")
        .invalid()
}

fn calibrate(
    ctx: &mut Ctx,
    scores: &Path,
    accuracy: Option<f64>,
    predictions: Option<&Path>,
    data: Option<&Path>,
    classes: Option<usize>,
) -> Result<(), Failure> {
    let scores = read_scores_csv(scores)
        .with_context(|| format!("cannot load scores {}", scores.display()))
        .invalid()?;
    let acc = match (accuracy, predictions, data) {
        (Some(a), _, _) => a,
        (None, Some(p), Some(d)) => accuracy_from(p, d, classes)?,
        _ => {
            return Err(Failure::Validation(anyhow!(
                "give --accuracy or --predictions with --data"
            )))
        }
    };
    let threshold: Threshold = calibrate_threshold(CalibrationInput {
        val_scores: &scores,
        val_accuracy: acc,
    })
    .invalid()?;
    ctx.log(format!(
        "tau = {}, validation error {:.4}",
        threshold.tau, threshold.achieved_val_error
    ));
    ctx.write_json("threshold.json", &threshold)
}

#[derive(Debug, Serialize)]
struct PredictionOutput {
    #[serde(flatten)]
    estimate: gep_core::gep::GepEstimate,
    n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    abs_error: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn predict(
    ctx: &mut Ctx,
    scores: &Path,
    threshold: &Path,
    method: &str,
    target: &str,
    predictions: Option<&Path>,
    data: Option<&Path>,
    classes: Option<usize>,
) -> Result<(), Failure> {
    let scores = read_scores_csv(scores)
        .with_context(|| format!("cannot load scores {}", scores.display()))
        .invalid()?;
    let text = fs::read_to_string(threshold)
        .with_context(|| format!("cannot read threshold {}", threshold.display()))
        .invalid()?;
    let threshold: Threshold = serde_json::from_str(&text)
        .with_context(|| format!("invalid threshold file {}", threshold.display()))
        .invalid()?;
    let estimate = predict_accuracy(&scores, &threshold, method, target).invalid()?;
    let truth = match (predictions, data) {
        (Some(p), Some(d)) => Some(accuracy_from(p, d, classes)?),
        _ => None,
    };
    println!("{target}: predicted accuracy {:.4}", estimate.predicted_accuracy);
    let out = PredictionOutput {
        abs_error: truth.map(|t| (estimate.predicted_accuracy - t).abs()),
        true_accuracy: truth,
        n_samples: scores.len(),
        estimate,
    };
    ctx.write_json("estimate.json", &out)
}
