//! Synthetic datasets: Gaussian class clusters, near/far shifted targets,
//! a five-level corruption ladder, training-data fidelity injectors and the
//! slab dataset used to provoke simplicity bias.
//!
//! Every generator is a pure function of its spec; randomness comes from
//! [`Rng`] streams derived from the spec's seed. Counts derived from
//! fractions use [`round_count`] (half away from zero).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseMatrix;
use crate::nn::NnError;
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("could not place {n_classes} class means at separation {separation} in {n_features} dimensions")]
    InfeasibleMeans {
        n_classes: usize,
        n_features: usize,
        separation: f64,
    },
    #[error("class {0} is not present in the dataset")]
    MissingClass(usize),
    #[error("class {class} has {count} samples, too few to split {train}/{val}")]
    SplitGranularity {
        class: usize,
        count: usize,
        train: f64,
        val: f64,
    },
    #[error("label {label} at row {row} is outside [0, {n_classes})")]
    LabelOutOfRange { row: usize, label: usize, n_classes: usize },
    #[error(transparent)]
    Matrix(#[from] NnError),
}

/// `round(fraction * n)`, half away from zero.
pub fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Features plus integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct LabeledDataset<T> {
    features: DenseMatrix<T>,
    labels: Vec<usize>,
    n_classes: usize,
    provenance: String,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(
        features: DenseMatrix<T>,
        labels: Vec<usize>,
        n_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        if features.rows() != labels.len() {
            return Err(DataError::InvalidSpec(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(DataError::InvalidSpec("dataset has no samples".into()));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(DataError::LabelOutOfRange { row, label, n_classes });
        }
        if !features.all_finite() {
            return Err(DataError::InvalidSpec("features must be finite".into()));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            provenance: provenance.into(),
        })
    }

    pub fn features(&self) -> &DenseMatrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows of class `c`, ascending.
    pub fn indices_of_class(&self, c: usize) -> Vec<usize> {
        (0..self.n_samples()).filter(|&i| self.labels[i] == c).collect()
    }

    fn tagged(&self, step: &str) -> String {
        format!("{}+{}", self.provenance, step)
    }

    /// Rows `indices` in the given order, provenance extended by `step`.
    pub fn subset(&self, indices: &[usize], step: &str) -> Result<Self, DataError> {
        Self::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.n_classes,
            self.tagged(step),
        )
    }

    /// Same labels with new features (checked for shape and finiteness).
    pub fn with_features(&self, features: DenseMatrix<T>, step: &str) -> Result<Self, DataError> {
        if features.shape() != self.features.shape() {
            return Err(DataError::InvalidSpec(format!(
                "replacement features are {:?}, expected {:?}",
                features.shape(),
                self.features.shape()
            )));
        }
        Self::new(features, self.labels.clone(), self.n_classes, self.tagged(step))
    }

    pub fn with_labels(&self, labels: Vec<usize>, step: &str) -> Result<Self, DataError> {
        Self::new(self.features.clone(), labels, self.n_classes, self.tagged(step))
    }

    /// Same data under a new provenance tag.
    pub fn retagged(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }
}

fn default_n_classes() -> usize {
    4
}
fn default_n_features() -> usize {
    8
}
fn default_samples_per_class() -> usize {
    125
}
fn default_separation() -> f64 {
    4.0
}
fn default_spread() -> f64 {
    1.0
}

/// Gaussian class clusters with seeded means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_n_features")]
    pub n_features: usize,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "default_separation")]
    pub cluster_separation: f64,
    #[serde(default = "default_spread")]
    pub within_class_spread: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            n_classes: default_n_classes(),
            n_features: default_n_features(),
            samples_per_class: default_samples_per_class(),
            cluster_separation: default_separation(),
            within_class_spread: default_spread(),
            seed: 0,
        }
    }
}

impl SourceSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_classes < 2 {
            return Err(DataError::InvalidSpec("n_classes must be >= 2".into()));
        }
        if self.n_features == 0 || self.samples_per_class == 0 {
            return Err(DataError::InvalidSpec(
                "n_features and samples_per_class must be positive".into(),
            ));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(DataError::InvalidSpec("cluster_separation must be > 0".into()));
        }
        if !(self.within_class_spread >= 0.0 && self.within_class_spread.is_finite()) {
            return Err(DataError::InvalidSpec("within_class_spread must be >= 0".into()));
        }
        Ok(())
    }

    /// Class means: points on the sphere of radius `cluster_separation`,
    /// rejection-sampled until all pairwise distances reach the separation.
    /// Drawn from child stream 0 of `seed`.
    pub fn class_means(&self) -> Result<Vec<Vec<f64>>, DataError> {
        self.validate()?;
        const MAX_ATTEMPTS: usize = 1000;
        let mut rng = Rng::new(self.seed).split(0);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(self.n_classes);
        while means.len() < self.n_classes {
            let mut placed = false;
            for _ in 0..MAX_ATTEMPTS {
                let candidate = random_direction(&mut rng, self.n_features, self.cluster_separation);
                if means.iter().all(|m| distance(m, &candidate) >= self.cluster_separation) {
                    means.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(DataError::InfeasibleMeans {
                    n_classes: self.n_classes,
                    n_features: self.n_features,
                    separation: self.cluster_separation,
                });
            }
        }
        Ok(means)
    }
}

/// Gaussian vector rescaled to `norm`. A zero draw (practically impossible)
/// falls back to the first axis.
fn random_direction(rng: &mut Rng, dim: usize, norm: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if len == 0.0 {
        v[0] = 1.0;
        return v.into_iter().map(|x| x * norm).collect();
    }
    v.iter_mut().for_each(|x| *x *= norm / len);
    v
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Class-major sample block: `per_class` rows for each class in order.
fn sample_clusters<T: Scalar>(
    means: &[Vec<f64>],
    per_class: usize,
    spread: f64,
    rng: &mut Rng,
) -> (DenseMatrix<T>, Vec<usize>) {
    let dim = means[0].len();
    let mut data = Vec::with_capacity(means.len() * per_class * dim);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in mean {
                data.push(T::of(mu + spread * rng.normal()));
            }
            labels.push(c);
        }
    }
    let rows = labels.len();
    (
        DenseMatrix::new(rows, dim, data).expect("finite gaussian draws"),
        labels,
    )
}

/// Balanced Gaussian clusters; samples come from child stream 1 of the seed.
pub fn make_source<T: Scalar>(spec: &SourceSpec) -> Result<LabeledDataset<T>, DataError> {
    let means = spec.class_means()?;
    let mut rng = Rng::new(spec.seed).split(1);
    let (features, labels) = sample_clusters(&means, spec.samples_per_class, spec.within_class_spread, &mut rng);
    LabeledDataset::new(features, labels, spec.n_classes, "source")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Near,
    Far,
}

impl ShiftKind {
    pub fn default_magnitude(self) -> f64 {
        match self {
            ShiftKind::Near => 0.5,
            ShiftKind::Far => 2.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::Near => "near",
            ShiftKind::Far => "far",
        }
    }
}

/// Mean translation of norm `magnitude` per class, covariance scaled by
/// `1 + magnitude / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSpec {
    pub fn near(seed: u64) -> Self {
        Self {
            kind: ShiftKind::Near,
            magnitude: ShiftKind::Near.default_magnitude(),
            seed,
        }
    }

    pub fn far(seed: u64) -> Self {
        Self {
            kind: ShiftKind::Far,
            magnitude: ShiftKind::Far.default_magnitude(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(DataError::InvalidSpec("shift magnitude must be >= 0".into()));
        }
        Ok(())
    }
}

/// Shifted copy of the source distribution.
///
/// Uses the source means (from `source_spec.seed`); translation directions
/// come from child stream 0 of `shift.seed` and samples from child stream 1.
/// The sample count follows `source_spec.samples_per_class`.
pub fn make_target<T: Scalar>(source_spec: &SourceSpec, shift: &ShiftSpec) -> Result<LabeledDataset<T>, DataError> {
    shift.validate()?;
    let base = Rng::new(shift.seed);
    let mut dir_rng = base.split(0);
    let means: Vec<Vec<f64>> = source_spec
        .class_means()?
        .into_iter()
        .map(|m| {
            let d = random_direction(&mut dir_rng, m.len(), shift.magnitude);
            m.iter().zip(d).map(|(a, b)| a + b).collect()
        })
        .collect();
    let spread = source_spec.within_class_spread * (1.0 + shift.magnitude / 2.0).sqrt();
    let mut rng = base.split(1);
    let (features, labels) = sample_clusters(&means, source_spec.samples_per_class, spread, &mut rng);
    LabeledDataset::new(
        features,
        labels,
        source_spec.n_classes,
        format!("target:shift={}({})", shift.kind.as_str(), shift.magnitude),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionFamily {
    AdditiveNoise,
    FeatureBlur,
    FeatureDropout,
    AffineWarp,
}

impl CorruptionFamily {
    pub const ALL: [CorruptionFamily; 4] = [
        CorruptionFamily::AdditiveNoise,
        CorruptionFamily::FeatureBlur,
        CorruptionFamily::FeatureDropout,
        CorruptionFamily::AffineWarp,
    ];

    /// Perturbation scale for severities 1..=5.
    ///
    /// | family          | parameter                         | 1    | 2    | 3    | 4    | 5    |
    /// |-----------------|-----------------------------------|------|------|------|------|------|
    /// | additive_noise  | noise std                         | 0.25 | 0.5  | 1.0  | 1.5  | 2.0  |
    /// | feature_blur    | smoothing bandwidth (features)    | 0.5  | 1.0  | 1.5  | 2.0  | 3.0  |
    /// | feature_dropout | per-entry zeroing probability     | 0.05 | 0.1  | 0.2  | 0.3  | 0.5  |
    /// | affine_warp     | warp strength `s`                 | 0.1  | 0.2  | 0.35 | 0.5  | 0.75 |
    pub fn scale_table(self) -> [f64; 5] {
        match self {
            CorruptionFamily::AdditiveNoise => [0.25, 0.5, 1.0, 1.5, 2.0],
            CorruptionFamily::FeatureBlur => [0.5, 1.0, 1.5, 2.0, 3.0],
            CorruptionFamily::FeatureDropout => [0.05, 0.1, 0.2, 0.3, 0.5],
            CorruptionFamily::AffineWarp => [0.1, 0.2, 0.35, 0.5, 0.75],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionFamily::AdditiveNoise => "additive_noise",
            CorruptionFamily::FeatureBlur => "feature_blur",
            CorruptionFamily::FeatureDropout => "feature_dropout",
            CorruptionFamily::AffineWarp => "affine_warp",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).unwrap()
    }
}

impl fmt::Display for CorruptionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CorruptionFamily {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| DataError::InvalidSpec(format!("unknown corruption family '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub family: CorruptionFamily,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(1..=5).contains(&self.severity) {
            return Err(DataError::InvalidSpec(format!(
                "severity must be in 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> Result<f64, DataError> {
        self.validate()?;
        Ok(self.family.scale_table()[self.severity as usize - 1])
    }
}

/// Applies the family's severity-`spec.severity` perturbation; labels are kept.
pub fn make_corrupted<T: Scalar>(
    base: &LabeledDataset<T>,
    spec: &CorruptionSpec,
) -> Result<LabeledDataset<T>, DataError> {
    let scale = spec.scale()?;
    let out = corrupt_at_scale(base, spec.family, scale, spec.seed)?;
    Ok(out.retagged(format!("{}+{}@{}", base.provenance(), spec.family, spec.severity)))
}

/// Applies one corruption family at an explicit scale, drawing from `Rng::new(seed)`.
///
/// Recipes (all draws row-major over the `n x d` feature block):
/// - additive_noise: `x + scale * z`, `z ~ N(0, 1)` per entry.
/// - feature_blur: per-row Gaussian smoothing with bandwidth `scale` (no draws).
/// - feature_dropout: `u ~ U[0, 1)` per entry, entry zeroed when `u < scale`.
/// - affine_warp: `G` (`d x d`, `N(0, 1) / sqrt(d)`) then `h` (`d`, `N(0, 1)`);
///   `x + scale * (x G + h)`.
///
/// Because the draws do not depend on `scale`, the same seed at increasing
/// scales perturbs each sample along a fixed direction.
pub fn corrupt_at_scale<T: Scalar>(
    base: &LabeledDataset<T>,
    family: CorruptionFamily,
    scale: f64,
    seed: u64,
) -> Result<LabeledDataset<T>, DataError> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(DataError::InvalidSpec(format!(
            "corruption scale must be >= 0, got {scale}"
        )));
    }
    let mut rng = Rng::new(seed);
    let (n, d) = base.features().shape();
    let mut features = base.features().clone();
    match family {
        CorruptionFamily::AdditiveNoise => {
            let s = T::of(scale);
            for v in features.data_mut() {
                *v += s * T::of(rng.normal());
            }
        }
        CorruptionFamily::FeatureBlur => {
            for r in 0..n {
                let blurred = gaussian_smooth(base.features().row(r), scale);
                features.row_mut(r).copy_from_slice(&blurred);
            }
        }
        CorruptionFamily::FeatureDropout => {
            for v in features.data_mut() {
                if rng.uniform() < scale {
                    *v = T::zero();
                }
            }
        }
        CorruptionFamily::AffineWarp => {
            let norm = 1.0 / (d as f64).sqrt();
            let g: Vec<f64> = (0..d * d).map(|_| rng.normal() * norm).collect();
            let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for r in 0..n {
                let x: Vec<f64> = base.features().row(r).iter().map(|v| v.as_f64()).collect();
                let out = features.row_mut(r);
                for j in 0..d {
                    let xg: f64 = (0..d).map(|i| x[i] * g[i * d + j]).sum();
                    out[j] = T::of(x[j] + scale * (xg + h[j]));
                }
            }
        }
    }
    base.with_features(features, &format!("{family}({scale})"))
}

/// Normalized Gaussian weights `w[k]` for offsets `k = 0..=radius`, where
/// `radius = floor(3 * sigma)`. Entry 0 is the center tap.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).floor() as usize;
    (0..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// 1-D Gaussian smoothing along a row; taps falling outside the row are
/// dropped and the remaining weights renormalized.
pub fn gaussian_smooth<T: Scalar>(row: &[T], sigma: f64) -> Vec<T> {
    let taps = gaussian_taps(sigma);
    let radius = taps.len() - 1;
    let d = row.len();
    (0..d)
        .map(|j| {
            let lo = j.saturating_sub(radius);
            let hi = (j + radius).min(d - 1);
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (i, v) in row.iter().enumerate().take(hi + 1).skip(lo) {
                let w = taps[i.abs_diff(j)];
                acc += w * v.as_f64();
                norm += w;
            }
            T::of(acc / norm)
        })
        .collect()
}

fn check_rate(name: &str, p: f64) -> Result<(), DataError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::InvalidSpec(format!("{name} must be in [0, 1], got {p}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelNoiseSpec {
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Flips exactly `round(rate * n)` labels.
///
/// Rows are chosen without replacement (`Rng::sample_indices`); then, in that
/// order, each gets `r = below(n_classes - 1)` and the new label
/// `r + (r >= old) as usize`, so a flip always changes the label.
pub fn inject_label_noise<T: Scalar>(
    base: &LabeledDataset<T>,
    spec: &LabelNoiseSpec,
) -> Result<LabeledDataset<T>, DataError> {
    check_rate("label noise rate", spec.rate)?;
    if base.n_classes() < 2 {
        return Err(DataError::InvalidSpec("label noise needs at least 2 classes".into()));
    }
    let n = base.n_samples();
    let k = round_count(spec.rate, n);
    let mut rng = Rng::new(spec.seed);
    let mut labels = base.labels().to_vec();
    for i in rng.sample_indices(n, k) {
        let r = rng.below(base.n_classes() - 1);
        labels[i] = if r >= labels[i] { r + 1 } else { r };
    }
    base.with_labels(labels, &format!("label_noise({})", spec.rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementNoiseSpec {
    pub blur_sigma: f64,
    pub additive_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MeasurementNoiseSpec {
    pub fn paper_default(seed: u64) -> Self {
        Self {
            blur_sigma: 0.5,
            additive_sigma: 0.07,
            seed,
        }
    }
}

/// Blur each row with [`gaussian_smooth`] (`blur_sigma`), then add
/// `additive_sigma * z` with `z ~ N(0, 1)` drawn row-major from `Rng::new(seed)`.
pub fn inject_measurement_noise<T: Scalar>(
    base: &LabeledDataset<T>,
    spec: &MeasurementNoiseSpec,
) -> Result<LabeledDataset<T>, DataError> {
    if !(spec.blur_sigma >= 0.0 && spec.additive_sigma >= 0.0)
        || !(spec.blur_sigma.is_finite() && spec.additive_sigma.is_finite())
    {
        return Err(DataError::InvalidSpec("measurement noise sigmas must be >= 0".into()));
    }
    let mut features = base.features().clone();
    for r in 0..features.rows() {
        let blurred = gaussian_smooth(base.features().row(r), spec.blur_sigma);
        features.row_mut(r).copy_from_slice(&blurred);
    }
    if spec.additive_sigma > 0.0 {
        let mut rng = Rng::new(spec.seed);
        let s = T::of(spec.additive_sigma);
        for v in features.data_mut() {
            *v += s * T::of(rng.normal());
        }
    }
    base.with_features(
        features,
        &format!("measurement_noise({},{})", spec.blur_sigma, spec.additive_sigma),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UndersampleSpec {
    pub target_classes: BTreeSet<usize>,
    pub drop_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Removes `round(drop_fraction * n_c)` rows of each target class `c`.
///
/// Classes are processed in ascending order, each drawing its victims with
/// `Rng::sample_indices` over that class's rows; survivors keep input order.
pub fn undersample<T: Scalar>(
    base: &LabeledDataset<T>,
    spec: &UndersampleSpec,
) -> Result<LabeledDataset<T>, DataError> {
    check_rate("drop_fraction", spec.drop_fraction)?;
    if spec.target_classes.is_empty() {
        return Err(DataError::InvalidSpec(
            "undersample needs at least one target class".into(),
        ));
    }
    let counts = base.class_counts();
    let mut rng = Rng::new(spec.seed);
    let mut keep = vec![true; base.n_samples()];
    for &c in &spec.target_classes {
        if c >= base.n_classes() || counts[c] == 0 {
            return Err(DataError::MissingClass(c));
        }
        let rows = base.indices_of_class(c);
        let k = round_count(spec.drop_fraction, rows.len());
        for i in rng.sample_indices(rows.len(), k) {
            keep[rows[i]] = false;
        }
    }
    let survivors: Vec<usize> = (0..base.n_samples()).filter(|&i| keep[i]).collect();
    if survivors.is_empty() {
        return Err(DataError::InvalidSpec("undersampling removed every sample".into()));
    }
    let classes: Vec<String> = spec.target_classes.iter().map(|c| c.to_string()).collect();
    base.subset(
        &survivors,
        &format!("undersample({};{})", classes.join(","), spec.drop_fraction),
    )
}

fn default_slab_coords() -> usize {
    1
}

/// Binary dataset with one simple (linearly separable) coordinate and
/// `n_slab_coords` coordinates that encode the label through alternating slabs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabSpec {
    pub n_samples: usize,
    pub simple_feature_margin: f64,
    pub n_slabs: usize,
    #[serde(default)]
    pub slab_noise: f64,
    #[serde(default = "default_slab_coords")]
    pub n_slab_coords: usize,
    #[serde(default)]
    pub shift_simple_feature: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SlabSpec {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            simple_feature_margin: 0.1,
            n_slabs: 5,
            slab_noise: 0.0,
            n_slab_coords: 1,
            shift_simple_feature: false,
            seed: 0,
        }
    }
}

impl SlabSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_samples == 0 {
            return Err(DataError::InvalidSpec("slab n_samples must be positive".into()));
        }
        if !(self.simple_feature_margin > 0.0 && self.simple_feature_margin.is_finite()) {
            return Err(DataError::InvalidSpec("simple_feature_margin must be > 0".into()));
        }
        if self.n_slabs < 3 {
            return Err(DataError::InvalidSpec("n_slabs must be >= 3".into()));
        }
        if !(self.slab_noise >= 0.0 && self.slab_noise.is_finite()) {
            return Err(DataError::InvalidSpec("slab_noise must be >= 0".into()));
        }
        if self.n_slab_coords == 0 {
            return Err(DataError::InvalidSpec("n_slab_coords must be >= 1".into()));
        }
        Ok(())
    }

    /// Label encoded by slab `j`: slabs alternate starting with class 0.
    pub fn slab_label(j: usize) -> usize {
        j % 2
    }

    /// `[lo, hi)` of slab `j` on `[-1, 1]`.
    pub fn slab_bounds(&self, j: usize) -> (f64, f64) {
        let w = 2.0 / self.n_slabs as f64;
        (-1.0 + j as f64 * w, -1.0 + (j + 1) as f64 * w)
    }
}

/// Slab dataset; labels alternate `0, 1, 0, ...` by row.
///
/// Per row, from `Rng::new(seed)`: coordinate 0 is `sign * (margin + u)` with
/// `u ~ U[0, 1)`, where `sign = 2y - 1`, or a fair random sign when
/// `shift_simple_feature` is set (drawn before `u`). Each slab coordinate
/// then picks a slab of matching label uniformly, places the value uniformly
/// in the central 80% of that slab and adds `slab_noise * z`.
pub fn make_slab<T: Scalar>(spec: &SlabSpec) -> Result<LabeledDataset<T>, DataError> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let d = 1 + spec.n_slab_coords;
    let by_label: [Vec<usize>; 2] = [
        (0..spec.n_slabs).filter(|&j| SlabSpec::slab_label(j) == 0).collect(),
        (0..spec.n_slabs).filter(|&j| SlabSpec::slab_label(j) == 1).collect(),
    ];
    let mut data = Vec::with_capacity(spec.n_samples * d);
    let mut labels = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let y = i % 2;
        let sign = if spec.shift_simple_feature {
            if rng.uniform() < 0.5 {
                -1.0
            } else {
                1.0
            }
        } else if y == 1 {
            1.0
        } else {
            -1.0
        };
        data.push(T::of(sign * (spec.simple_feature_margin + rng.uniform())));
        for _ in 0..spec.n_slab_coords {
            let slabs = &by_label[y];
            let j = slabs[rng.below(slabs.len())];
            let (lo, hi) = spec.slab_bounds(j);
            let v = lo + (hi - lo) * (0.1 + 0.8 * rng.uniform()) + spec.slab_noise * rng.normal();
            data.push(T::of(v));
        }
        labels.push(y);
    }
    let tag = if spec.shift_simple_feature {
        "slab:simple_shifted"
    } else {
        "slab"
    };
    LabeledDataset::new(DenseMatrix::new(spec.n_samples, d, data)?, labels, 2, tag)
}

/// Train / validation proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.2 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.train > 0.0 && self.val > 0.0) || (self.train + self.val - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSpec(format!(
                "split fractions must be positive and sum to 1, got {} / {}",
                self.train, self.val
            )));
        }
        Ok(())
    }
}

/// Class-stratified split. Each present class is shuffled (ascending class
/// order, one `Rng::new(seed)` stream) and its first `round(train * n_c)`
/// rows go to the training part. Both parts keep input row order.
pub fn split<T: Scalar>(
    base: &LabeledDataset<T>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(LabeledDataset<T>, LabeledDataset<T>), DataError> {
    fractions.validate()?;
    let mut rng = Rng::new(seed);
    let mut in_train = vec![false; base.n_samples()];
    for c in 0..base.n_classes() {
        let mut rows = base.indices_of_class(c);
        if rows.is_empty() {
            continue;
        }
        let k = round_count(fractions.train, rows.len());
        if k == 0 || k == rows.len() {
            return Err(DataError::SplitGranularity {
                class: c,
                count: rows.len(),
                train: fractions.train,
                val: fractions.val,
            });
        }
        rng.shuffle(&mut rows);
        for &r in &rows[..k] {
            in_train[r] = true;
        }
    }
    let train: Vec<usize> = (0..base.n_samples()).filter(|&i| in_train[i]).collect();
    let val: Vec<usize> = (0..base.n_samples()).filter(|&i| !in_train[i]).collect();
    Ok((base.subset(&train, "split(train)")?, base.subset(&val, "split(val)")?))
}
