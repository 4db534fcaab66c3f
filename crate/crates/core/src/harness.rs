//! Benchmark runners: distribution shift, training-data fidelity,
//! ensemble size and simplicity bias, each repeated over seeds.
//!
//! Every seed index `s` gets the root `split_seed(cfg.seed, s)`, and every
//! random ingredient of that seed is a fixed child of the root (see
//! [`SeedPlan`]). Seeds run in parallel; records are sorted canonically
//! afterwards, so scheduling never changes the output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{
    inject_label_noise, inject_measurement_noise, make_corrupted, make_slab, make_source, make_target, split,
    undersample, CorruptionFamily, CorruptionSpec, DataError, LabelNoiseSpec, LabeledDataset, MeasurementNoiseSpec,
    ShiftKind, ShiftSpec, SlabSpec, SourceSpec, SplitFractions, UndersampleSpec,
};
use crate::gep::{calibrate_threshold, predicted_fraction, true_accuracy, CalibrationInput, GepError};
use crate::io::{Plot, PlotPoint, PlotSeries};
use crate::nn::{train_sgd, Activation, Architecture, MlpModel, NnError, TrainConfig};
use crate::rng::split_seed;
use crate::scoring::{
    conf_score, lms_score, ma_score_from_votes, majority_from_votes, train_ensemble, AugmentationPolicy, Ensemble,
    ScoreError,
};

type Dataset = LabeledDataset<f64>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("seed {seed_index} failed: {source}")]
    Seed {
        seed_index: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Gep(#[from] GepError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Conf,
    Lms,
    Ma,
    MaEps,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Conf, Method::Lms, Method::Ma, Method::MaEps];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Conf => "conf",
            Method::Lms => "lms",
            Method::Ma => "ma",
            Method::MaEps => "ma_eps",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training-set condition of the fidelity benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    Clean,
    Ln,
    Mn,
    Us,
}

impl Fidelity {
    pub const ALL: [Fidelity; 4] = [Fidelity::Clean, Fidelity::Ln, Fidelity::Mn, Fidelity::Us];

    pub fn as_str(self) -> &'static str {
        match self {
            Fidelity::Clean => "clean",
            Fidelity::Ln => "ln",
            Fidelity::Mn => "mn",
            Fidelity::Us => "us",
        }
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|&f| f == self).unwrap() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftTarget {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

impl ShiftTarget {
    fn name(&self) -> String {
        if self.magnitude == self.kind.default_magnitude() {
            self.kind.as_str().to_owned()
        } else {
            format!("{}({})", self.kind.as_str(), self.magnitude)
        }
    }
}

fn default_shifts() -> Vec<ShiftTarget> {
    [ShiftKind::Near, ShiftKind::Far]
        .into_iter()
        .map(|kind| ShiftTarget {
            kind,
            magnitude: kind.default_magnitude(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionGrid {
    #[serde(default = "all_families")]
    pub families: Vec<CorruptionFamily>,
    #[serde(default = "all_severities")]
    pub severities: Vec<u8>,
}

fn all_families() -> Vec<CorruptionFamily> {
    CorruptionFamily::ALL.to_vec()
}

fn all_severities() -> Vec<u8> {
    vec![1, 2, 3, 4, 5]
}

impl Default for CorruptionGrid {
    fn default() -> Self {
        Self {
            families: all_families(),
            severities: all_severities(),
        }
    }
}

/// Parameters of the compromised-training-data conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelitySettings {
    #[serde(default = "default_ln_rate")]
    pub label_noise_rate: f64,
    #[serde(default = "default_blur")]
    pub blur_sigma: f64,
    #[serde(default = "default_additive")]
    pub additive_sigma: f64,
    #[serde(default = "default_us_classes")]
    pub undersample_classes: BTreeSet<usize>,
    #[serde(default = "default_us_fraction")]
    pub undersample_fraction: f64,
}

fn default_ln_rate() -> f64 {
    0.05
}
fn default_blur() -> f64 {
    0.5
}
fn default_additive() -> f64 {
    0.07
}
fn default_us_classes() -> BTreeSet<usize> {
    BTreeSet::from([1, 2])
}
fn default_us_fraction() -> f64 {
    0.2
}

impl Default for FidelitySettings {
    fn default() -> Self {
        Self {
            label_noise_rate: default_ln_rate(),
            blur_sigma: default_blur(),
            additive_sigma: default_additive(),
            undersample_classes: default_us_classes(),
            undersample_fraction: default_us_fraction(),
        }
    }
}

fn default_n_seeds() -> usize {
    10
}
fn default_target_samples() -> usize {
    500
}
fn default_fidelity() -> Vec<Fidelity> {
    Fidelity::ALL.to_vec()
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_fidelity_epochs() -> usize {
    250
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_ensemble_size() -> usize {
    10
}
fn default_diversity_noise() -> f64 {
    0.02
}
fn default_sweep_sizes() -> Vec<usize> {
    vec![2, 4, 6, 8, 10]
}
fn default_slab() -> SlabSpec {
    SlabSpec::default()
}
fn default_slab_target_samples() -> usize {
    2000
}

/// Everything a benchmark run depends on. `seed` fields inside nested specs
/// are ignored; all seeds derive from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub source: SourceSpec,
    #[serde(default = "default_target_samples")]
    pub target_samples_per_class: usize,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default = "default_shifts")]
    pub shifts: Vec<ShiftTarget>,
    #[serde(default)]
    pub corruptions: CorruptionGrid,
    #[serde(default = "default_fidelity")]
    pub fidelity: Vec<Fidelity>,
    #[serde(default)]
    pub fidelity_settings: FidelitySettings,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_fidelity_epochs")]
    pub fidelity_epochs: usize,
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    #[serde(default = "default_diversity_noise")]
    pub diversity_noise: f64,
    #[serde(default = "default_sweep_sizes")]
    pub sweep_sizes: Vec<usize>,
    #[serde(default = "default_slab")]
    pub slab: SlabSpec,
    #[serde(default = "default_slab_target_samples")]
    pub slab_target_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n_seeds == 0 {
            return bad("n_seeds must be >= 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods must be nonempty".into());
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be >= 1".into());
        }
        if self.sweep_sizes.is_empty() || self.sweep_sizes.contains(&0) {
            return bad("sweep_sizes must be nonempty with every size >= 1".into());
        }
        if self.target_samples_per_class == 0 || self.slab_target_samples == 0 {
            return bad("target sample counts must be positive".into());
        }
        if self.fidelity_epochs == 0 {
            return bad("fidelity_epochs must be >= 1".into());
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.diversity_noise) {
            return bad(format!(
                "diversity_noise must be in [0, 1], got {}",
                self.diversity_noise
            ));
        }
        for s in &self.shifts {
            ShiftSpec {
                kind: s.kind,
                magnitude: s.magnitude,
                seed: 0,
            }
            .validate()?;
        }
        let names: BTreeSet<String> = self.shifts.iter().map(ShiftTarget::name).collect();
        if names.len() != self.shifts.len() {
            return bad("shift targets must be distinct".into());
        }
        if let Some(s) = self.corruptions.severities.iter().find(|s| !(1..=5).contains(*s)) {
            return bad(format!("corruption severity {s} outside 1..=5"));
        }
        let fs = &self.fidelity_settings;
        for (name, v) in [
            ("label_noise_rate", fs.label_noise_rate),
            ("undersample_fraction", fs.undersample_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if fs.blur_sigma < 0.0 || fs.additive_sigma < 0.0 {
            return bad("measurement noise sigmas must be >= 0".into());
        }
        if fs.undersample_classes.is_empty() {
            return bad("undersample_classes must be nonempty".into());
        }
        if let Some(c) = fs.undersample_classes.iter().find(|&&c| c >= self.source.n_classes) {
            return bad(format!("undersample class {c} >= n_classes {}", self.source.n_classes));
        }
        self.source.validate()?;
        self.split.validate()?;
        self.train.validate()?;
        self.augmentation.validate()?;
        self.slab.validate()?;
        Ok(())
    }

    pub fn architecture(&self, n_features: usize, n_classes: usize) -> Architecture {
        let mut dims = vec![n_features];
        dims.extend(&self.hidden_layers);
        dims.push(n_classes);
        Architecture::new(dims, self.activation)
    }

    /// Seed plans for every seed index, in order.
    pub fn seed_plans(&self) -> Vec<SeedPlan> {
        (0..self.n_seeds).map(|i| SeedPlan::new(self.seed, i)).collect()
    }
}

/// Child seeds of one seed index.
///
/// | child | use                                  |
/// |-------|--------------------------------------|
/// | 0     | source dataset                       |
/// | 1     | train/validation split               |
/// | 2     | single model (Conf, LMS)             |
/// | 3     | MA ensemble root                     |
/// | 4     | MA_eps ensemble root                 |
/// | 5     | in-distribution test set             |
/// | 6     | LMS augmentation root                |
/// | 100+j | shift target `j`                     |
/// | 200+f | corruption family `f`                |
/// | 300+c | fidelity condition `c`               |
/// | 400.. | slab train / split / shifted / id / scrambled |
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub index: usize,
    pub root: u64,
}

impl SeedPlan {
    pub fn new(experiment_seed: u64, index: usize) -> Self {
        Self {
            index,
            root: split_seed(experiment_seed, index as u64),
        }
    }

    fn child(&self, k: u64) -> u64 {
        split_seed(self.root, k)
    }

    pub fn source(&self) -> u64 {
        self.child(0)
    }
    pub fn split(&self) -> u64 {
        self.child(1)
    }
    pub fn single_model(&self) -> u64 {
        self.child(2)
    }
    pub fn ma(&self) -> u64 {
        self.child(3)
    }
    pub fn ma_eps(&self) -> u64 {
        self.child(4)
    }
    pub fn id_target(&self) -> u64 {
        self.child(5)
    }
    pub fn augmentation(&self) -> u64 {
        self.child(6)
    }
    pub fn shift(&self, j: usize) -> u64 {
        self.child(100 + j as u64)
    }
    pub fn corruption(&self, family: CorruptionFamily) -> u64 {
        self.child(200 + family.index() as u64)
    }
    pub fn fidelity(&self, condition: Fidelity) -> u64 {
        self.child(300 + condition.index())
    }
    pub fn slab_train(&self) -> u64 {
        self.child(400)
    }
    pub fn slab_split(&self) -> u64 {
        self.child(401)
    }
    pub fn slab_shifted(&self) -> u64 {
        self.child(402)
    }
    pub fn slab_id(&self) -> u64 {
        self.child(403)
    }
    pub fn slab_scrambled(&self) -> u64 {
        self.child(404)
    }
}

/// One (condition, method, target, seed) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub condition: String,
    pub method: Method,
    pub target: String,
    pub seed: usize,
    pub n_samples: usize,
    pub true_accuracy: f64,
    pub predicted_accuracy: f64,
    pub abs_error: f64,
    pub signed_error: f64,
}

impl EvaluationRecord {
    fn new(
        condition: &str,
        method: Method,
        target: &str,
        seed: usize,
        n_samples: usize,
        truth: f64,
        predicted: f64,
    ) -> Self {
        Self {
            condition: condition.to_owned(),
            method,
            target: target.to_owned(),
            seed,
            n_samples,
            true_accuracy: truth,
            predicted_accuracy: predicted,
            abs_error: (predicted - truth).abs(),
            signed_error: predicted - truth,
        }
    }

    fn sort_key(&self) -> (&str, Method, &str, usize) {
        (&self.condition, self.method, &self.target, self.seed)
    }
}

/// Aggregate over seeds of one (condition, method, target) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub condition: String,
    pub method: Method,
    pub target: String,
    pub n: usize,
    pub mae: f64,
    pub std: f64,
    pub mean_true_accuracy: f64,
    pub mean_predicted_accuracy: f64,
    pub mean_signed_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    Shift,
    Fidelity,
    EnsembleSweep,
    SimplicityBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: BenchKind,
    pub config: ExperimentConfig,
    pub records: Vec<EvaluationRecord>,
    pub summary: Vec<SummaryCell>,
    /// Elapsed time of the run; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub wall_clock_seconds: Option<f64>,
}

impl RunReport {
    fn build(kind: BenchKind, config: &ExperimentConfig, mut records: Vec<EvaluationRecord>, started: Instant) -> Self {
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let summary = aggregate(&records);
        Self {
            kind,
            config: config.clone(),
            records,
            summary,
            wall_clock_seconds: Some(started.elapsed().as_secs_f64()),
        }
    }

    pub fn cell(&self, condition: &str, method: Method, target: &str) -> Option<&SummaryCell> {
        self.summary
            .iter()
            .find(|c| c.condition == condition && c.method == method && c.target == target)
    }

    pub fn records_for<'a>(
        &'a self,
        condition: &'a str,
        method: Method,
        target: &'a str,
    ) -> impl Iterator<Item = &'a EvaluationRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.condition == condition && r.method == method && r.target == target)
    }
}

/// Groups records by (condition, method, target): MAE, sample std (n - 1),
/// and mean accuracies.
pub fn aggregate(records: &[EvaluationRecord]) -> Vec<SummaryCell> {
    let mut groups: BTreeMap<(&str, Method, &str), Vec<&EvaluationRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.condition.as_str(), r.method, r.target.as_str()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((condition, method, target), rs)| {
            let n = rs.len();
            let mean = |f: &dyn Fn(&EvaluationRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n as f64;
            let mae = mean(&|r| r.abs_error);
            let std = if n > 1 {
                (rs.iter().map(|r| (r.abs_error - mae).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryCell {
                condition: condition.to_owned(),
                method,
                target: target.to_owned(),
                n,
                mae,
                std,
                mean_true_accuracy: mean(&|r| r.true_accuracy),
                mean_predicted_accuracy: mean(&|r| r.predicted_accuracy),
                mean_signed_error: mean(&|r| r.signed_error),
            }
        })
        .collect()
}

/// Training split, validation split and named target sets of one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: Dataset,
    pub val: Dataset,
    pub targets: Vec<(String, Dataset)>,
}

/// Source data and targets for one seed. Targets: `id` (fresh in-distribution
/// sample), one per shift, and, when `with_corruptions`, `family@severity`
/// corruptions of the `id` set (one seed per family across severities).
pub fn prepare_seed(cfg: &ExperimentConfig, plan: &SeedPlan, with_corruptions: bool) -> Result<SeedData, HarnessError> {
    let source_spec = SourceSpec {
        seed: plan.source(),
        ..cfg.source.clone()
    };
    let source: Dataset = make_source(&source_spec)?;
    let (train, val) = split(&source, cfg.split, plan.split())?;
    let target_spec = SourceSpec {
        samples_per_class: cfg.target_samples_per_class,
        ..source_spec
    };
    let id: Dataset = make_target(
        &target_spec,
        &ShiftSpec {
            kind: ShiftKind::Near,
            magnitude: 0.0,
            seed: plan.id_target(),
        },
    )?
    .retagged("id");
    let mut targets = Vec::new();
    for (j, s) in cfg.shifts.iter().enumerate() {
        let shift = ShiftSpec {
            kind: s.kind,
            magnitude: s.magnitude,
            seed: plan.shift(j),
        };
        targets.push((s.name(), make_target(&target_spec, &shift)?));
    }
    if with_corruptions {
        for &family in &cfg.corruptions.families {
            for &severity in &cfg.corruptions.severities {
                let spec = CorruptionSpec {
                    family,
                    severity,
                    seed: plan.corruption(family),
                };
                targets.push((format!("{family}@{severity}"), make_corrupted(&id, &spec)?));
            }
        }
    }
    targets.insert(0, ("id".to_owned(), id));
    Ok(SeedData { train, val, targets })
}

/// The training split after applying a fidelity condition.
pub fn fidelity_train_set(
    cfg: &ExperimentConfig,
    plan: &SeedPlan,
    train: &Dataset,
    condition: Fidelity,
) -> Result<Dataset, HarnessError> {
    let fs = &cfg.fidelity_settings;
    let seed = plan.fidelity(condition);
    Ok(match condition {
        Fidelity::Clean => train.clone(),
        Fidelity::Ln => inject_label_noise(
            train,
            &LabelNoiseSpec {
                rate: fs.label_noise_rate,
                seed,
            },
        )?,
        Fidelity::Mn => inject_measurement_noise(
            train,
            &MeasurementNoiseSpec {
                blur_sigma: fs.blur_sigma,
                additive_sigma: fs.additive_sigma,
                seed,
            },
        )?,
        Fidelity::Us => undersample(
            train,
            &UndersampleSpec {
                target_classes: fs.undersample_classes.clone(),
                drop_fraction: fs.undersample_fraction,
                seed,
            },
        )?,
    })
}

/// Models behind the requested methods.
#[derive(Debug, Clone, Default)]
pub struct Predictors {
    pub single: Option<MlpModel<f64>>,
    pub ma: Option<Ensemble<f64>>,
    pub ma_eps: Option<Ensemble<f64>>,
}

pub fn train_predictors(
    cfg: &ExperimentConfig,
    plan: &SeedPlan,
    train: &Dataset,
    epochs: usize,
    methods: &[Method],
) -> Result<Predictors, HarnessError> {
    let arch = cfg.architecture(train.n_features(), train.n_classes());
    let base = cfg.train.clone().with_epochs(epochs);
    let wants = |m: Method| methods.contains(&m);
    let mut p = Predictors::default();
    if wants(Method::Conf) || wants(Method::Lms) {
        p.single = Some(train_sgd(train, &base.clone().with_seed(plan.single_model()), &arch)?);
    }
    if wants(Method::Ma) {
        p.ma = Some(train_ensemble(
            train,
            &base.clone().with_seed(plan.ma()),
            &arch,
            cfg.ensemble_size,
            0.0,
        )?);
    }
    if wants(Method::MaEps) {
        p.ma_eps = Some(train_ensemble(
            train,
            &base.clone().with_seed(plan.ma_eps()),
            &arch,
            cfg.ensemble_size,
            cfg.diversity_noise,
        )?);
    }
    Ok(p)
}

/// Scores and predictions of the deployed predictor behind `method`:
/// the single model for Conf/LMS, the majority vote for MA/MA_eps.
fn score_and_predict(
    cfg: &ExperimentConfig,
    method: Method,
    predictors: &Predictors,
    data: &Dataset,
    augmentation_seed: u64,
) -> Result<(Vec<f64>, Vec<usize>), HarnessError> {
    let missing = || HarnessError::Config(format!("no predictor trained for method {method}"));
    match method {
        Method::Conf | Method::Lms => {
            let model = predictors.single.as_ref().ok_or_else(missing)?;
            let preds = model.predict_batch(data.features())?;
            let scores = if method == Method::Conf {
                conf_score(model, data)?
            } else {
                let policy = AugmentationPolicy {
                    seed: augmentation_seed,
                    ..cfg.augmentation.clone()
                };
                lms_score(model, data, &policy)?
            };
            Ok((scores.scores, preds))
        }
        Method::Ma | Method::MaEps => {
            let ens = if method == Method::Ma {
                predictors.ma.as_ref()
            } else {
                predictors.ma_eps.as_ref()
            }
            .ok_or_else(missing)?;
            let votes = ens.votes(data)?;
            let scores = ma_score_from_votes::<f64>(&votes)?;
            Ok((scores.scores, majority_from_votes(&votes)?))
        }
    }
}

/// Calibrates each method on `val` and evaluates it on `val` itself plus
/// every target.
fn evaluate(
    cfg: &ExperimentConfig,
    plan: &SeedPlan,
    condition: &str,
    methods: &[Method],
    predictors: &Predictors,
    val: &Dataset,
    targets: &[(String, Dataset)],
) -> Result<Vec<EvaluationRecord>, HarnessError> {
    let aug_root = plan.augmentation();
    let mut records = Vec::new();
    for &method in methods {
        let (val_scores, val_preds) = score_and_predict(cfg, method, predictors, val, split_seed(aug_root, 0))?;
        let acc_val = true_accuracy(&val_preds, val.labels())?;
        let threshold = calibrate_threshold(CalibrationInput {
            val_scores: &val_scores,
            val_accuracy: acc_val,
        })?;
        records.push(EvaluationRecord::new(
            condition,
            method,
            "val",
            plan.index,
            val.n_samples(),
            acc_val,
            predicted_fraction(&val_scores, threshold.tau)?,
        ));
        for (j, (name, data)) in targets.iter().enumerate() {
            let (scores, preds) = score_and_predict(cfg, method, predictors, data, split_seed(aug_root, j as u64 + 1))?;
            records.push(EvaluationRecord::new(
                condition,
                method,
                name,
                plan.index,
                data.n_samples(),
                true_accuracy(&preds, data.labels())?,
                predicted_fraction(&scores, threshold.tau)?,
            ));
        }
    }
    Ok(records)
}

fn per_seed<F>(cfg: &ExperimentConfig, f: F) -> Result<Vec<EvaluationRecord>, HarnessError>
where
    F: Fn(&SeedPlan) -> Result<Vec<EvaluationRecord>, HarnessError> + Sync,
{
    cfg.validate()?;
    let per: Vec<Vec<EvaluationRecord>> = cfg
        .seed_plans()
        .par_iter()
        .map(|plan| {
            f(plan).map_err(|e| HarnessError::Seed {
                seed_index: plan.index,
                source: Box::new(e),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Distribution-shift benchmark: in-distribution, near/far shifts and the
/// corruption ladder, condition `clean`.
pub fn run_shift_benchmark(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    let records = per_seed(cfg, |plan| {
        let data = prepare_seed(cfg, plan, true)?;
        let predictors = train_predictors(cfg, plan, &data.train, cfg.train.epochs, &cfg.methods)?;
        evaluate(
            cfg,
            plan,
            Fidelity::Clean.as_str(),
            &cfg.methods,
            &predictors,
            &data.val,
            &data.targets,
        )
    })?;
    Ok(RunReport::build(BenchKind::Shift, cfg, records, started))
}

/// Fidelity benchmark: one block per training condition, trained for
/// `fidelity_epochs`, evaluated on `id` and the shift targets.
pub fn run_fidelity_benchmark(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    if cfg.fidelity.is_empty() {
        return Err(HarnessError::Config("fidelity conditions must be nonempty".into()));
    }
    let started = Instant::now();
    let conditions: BTreeSet<Fidelity> = cfg.fidelity.iter().copied().collect();
    let records = per_seed(cfg, |plan| {
        let data = prepare_seed(cfg, plan, false)?;
        let mut out = Vec::new();
        for &condition in &conditions {
            let train = fidelity_train_set(cfg, plan, &data.train, condition)?;
            let predictors = train_predictors(cfg, plan, &train, cfg.fidelity_epochs, &cfg.methods)?;
            out.extend(evaluate(
                cfg,
                plan,
                condition.as_str(),
                &cfg.methods,
                &predictors,
                &data.val,
                &data.targets,
            )?);
        }
        Ok(out)
    })?;
    Ok(RunReport::build(BenchKind::Fidelity, cfg, records, started))
}

/// Condition tag of ensemble size `k` in sweep reports.
pub fn sweep_condition(k: usize) -> String {
    format!("m={k:02}")
}

/// Trains one `max(sizes)`-member MA ensemble per seed and evaluates its
/// first-`k`-member prefixes.
pub fn run_ensemble_sweep(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<RunReport, HarnessError> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(HarnessError::Config("sweep sizes must be nonempty and >= 1".into()));
    }
    let started = Instant::now();
    let sizes: BTreeSet<usize> = sizes.iter().copied().collect();
    let largest = *sizes.iter().next_back().unwrap();
    let records = per_seed(cfg, |plan| {
        let data = prepare_seed(cfg, plan, true)?;
        let arch = cfg.architecture(data.train.n_features(), data.train.n_classes());
        let full = train_ensemble(
            &data.train,
            &cfg.train.clone().with_seed(plan.ma()),
            &arch,
            largest,
            0.0,
        )?;
        let mut out = Vec::new();
        for &k in &sizes {
            let predictors = Predictors {
                ma: Some(full.prefix(k)?),
                ..Predictors::default()
            };
            out.extend(evaluate(
                cfg,
                plan,
                &sweep_condition(k),
                &[Method::Ma],
                &predictors,
                &data.val,
                &data.targets,
            )?);
        }
        Ok(out)
    })?;
    Ok(RunReport::build(BenchKind::EnsembleSweep, cfg, records, started))
}

/// Slab train/validation splits for the `biased` (simple coordinate
/// predictive) and `scrambled` (simple coordinate randomized) conditions.
pub fn slab_conditions(
    cfg: &ExperimentConfig,
    slab: &SlabSpec,
    plan: &SeedPlan,
) -> Result<Vec<(&'static str, Dataset, Dataset)>, HarnessError> {
    let mut out = Vec::new();
    for (name, seed, shifted) in [
        ("biased", plan.slab_train(), false),
        ("scrambled", plan.slab_scrambled(), true),
    ] {
        let data: Dataset = make_slab(&SlabSpec {
            seed,
            shift_simple_feature: shifted,
            ..slab.clone()
        })?;
        let (train, val) = split(&data, cfg.split, plan.slab_split())?;
        out.push((name, train, val));
    }
    Ok(out)
}

/// Slab targets: `slab_id` (simple coordinate intact) and `slab_shifted`
/// (simple coordinate randomized).
pub fn slab_targets(
    cfg: &ExperimentConfig,
    slab: &SlabSpec,
    plan: &SeedPlan,
) -> Result<Vec<(String, Dataset)>, HarnessError> {
    let make = |seed, shifted| {
        make_slab::<f64>(&SlabSpec {
            n_samples: cfg.slab_target_samples,
            seed,
            shift_simple_feature: shifted,
            ..slab.clone()
        })
    };
    Ok(vec![
        ("slab_id".to_owned(), make(plan.slab_id(), false)?),
        ("slab_shifted".to_owned(), make(plan.slab_shifted(), true)?),
    ])
}

/// Simplicity-bias stress test. `signed_error > 0` on `slab_shifted`
/// flags over-estimation.
pub fn run_simplicity_bias(cfg: &ExperimentConfig, slab: &SlabSpec) -> Result<RunReport, HarnessError> {
    slab.validate()?;
    let started = Instant::now();
    let records = per_seed(cfg, |plan| {
        let targets = slab_targets(cfg, slab, plan)?;
        let mut out = Vec::new();
        for (name, train, val) in slab_conditions(cfg, slab, plan)? {
            let predictors = train_predictors(cfg, plan, &train, cfg.train.epochs, &cfg.methods)?;
            out.extend(evaluate(cfg, plan, name, &cfg.methods, &predictors, &val, &targets)?);
        }
        Ok(out)
    })?;
    let mut report = RunReport::build(BenchKind::SimplicityBias, cfg, records, started);
    report.config.slab = slab.clone();
    Ok(report)
}

fn series_over<'a>(
    label: String,
    cells: impl Iterator<Item = (f64, &'a SummaryCell)>,
    value: impl Fn(&SummaryCell) -> f64,
) -> PlotSeries {
    PlotSeries {
        label,
        points: cells
            .map(|(x, c)| PlotPoint {
                x,
                y: value(c),
                err: Some(c.std),
            })
            .collect(),
    }
}

fn method_list(report: &RunReport) -> Vec<Method> {
    report
        .summary
        .iter()
        .map(|c| c.method)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Figures for a report, as `(file name, plot)` pairs.
pub fn plots(report: &RunReport) -> Vec<(String, Plot)> {
    let methods = method_list(report);
    let mut out = Vec::new();
    match report.kind {
        BenchKind::Shift => {
            let mut cats = vec!["id".to_owned()];
            cats.extend(report.config.shifts.iter().map(ShiftTarget::name));
            let series = methods
                .iter()
                .map(|&m| {
                    let cells = cats
                        .iter()
                        .enumerate()
                        .filter_map(|(i, t)| report.cell("clean", m, t).map(|c| (i as f64, c)));
                    series_over(m.to_string(), cells, |c| c.mae)
                })
                .collect();
            out.push((
                "mae_by_target.svg".to_owned(),
                Plot {
                    title: "GEP error by target".into(),
                    x_label: "target".into(),
                    y_label: "MAE".into(),
                    x_categories: Some(cats),
                    series,
                },
            ));
            for family in &report.config.corruptions.families {
                let series = methods
                    .iter()
                    .map(|&m| {
                        let cells =
                            report.config.corruptions.severities.iter().filter_map(|&s| {
                                report.cell("clean", m, &format!("{family}@{s}")).map(|c| (s as f64, c))
                            });
                        series_over(m.to_string(), cells, |c| c.mae)
                    })
                    .collect();
                out.push((
                    format!("severity_{family}.svg"),
                    Plot {
                        title: format!("GEP error vs severity ({family})"),
                        x_label: "severity".into(),
                        y_label: "MAE".into(),
                        x_categories: None,
                        series,
                    },
                ));
            }
        }
        BenchKind::Fidelity => {
            let conds: Vec<String> = report
                .summary
                .iter()
                .map(|c| c.condition.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let mut targets = vec!["id".to_owned()];
            targets.extend(report.config.shifts.iter().map(ShiftTarget::name));
            for t in targets {
                let series = methods
                    .iter()
                    .map(|&m| {
                        let cells = conds
                            .iter()
                            .enumerate()
                            .filter_map(|(i, cond)| report.cell(cond, m, &t).map(|c| (i as f64, c)));
                        series_over(m.to_string(), cells, |c| c.mae)
                    })
                    .collect();
                out.push((
                    format!("fidelity_{t}.svg"),
                    Plot {
                        title: format!("GEP error by training condition ({t})"),
                        x_label: "training data".into(),
                        y_label: "MAE".into(),
                        x_categories: Some(conds.clone()),
                        series,
                    },
                ));
            }
        }
        BenchKind::EnsembleSweep => {
            let sizes: BTreeSet<usize> = report
                .summary
                .iter()
                .filter_map(|c| c.condition.strip_prefix("m=").and_then(|k| k.parse().ok()))
                .collect();
            let mut targets = vec!["id".to_owned()];
            targets.extend(report.config.shifts.iter().map(ShiftTarget::name));
            let series = targets
                .iter()
                .map(|t| {
                    let cells = sizes
                        .iter()
                        .filter_map(|&k| report.cell(&sweep_condition(k), Method::Ma, t).map(|c| (k as f64, c)));
                    series_over(t.clone(), cells, |c| c.mae)
                })
                .collect();
            out.push((
                "ensemble_size.svg".to_owned(),
                Plot {
                    title: "MA error vs ensemble size".into(),
                    x_label: "ensemble size".into(),
                    y_label: "MAE".into(),
                    x_categories: None,
                    series,
                },
            ));
        }
        BenchKind::SimplicityBias => {
            let cats = vec!["val".to_owned(), "slab_id".to_owned(), "slab_shifted".to_owned()];
            let mut series = Vec::new();
            for cond in ["biased", "scrambled"] {
                for &m in &methods {
                    let cells = cats
                        .iter()
                        .enumerate()
                        .filter_map(|(i, t)| report.cell(cond, m, t).map(|c| (i as f64, c)));
                    series.push(series_over(format!("{m} ({cond})"), cells, |c| c.mean_signed_error));
                }
            }
            out.push((
                "simplicity_bias.svg".to_owned(),
                Plot {
                    title: "Predicted minus true accuracy".into(),
                    x_label: "target".into(),
                    y_label: "predicted - true".into(),
                    x_categories: Some(cats),
                    series,
                },
            ));
        }
    }
    out
}
