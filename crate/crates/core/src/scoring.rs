//! Sample-level scoring functions.
//!
//! * Conf: max softmax probability of a single model.
//! * LMS: fraction of augmented copies whose prediction matches the clean
//!   prediction.
//! * MA: fraction of ensemble members voting for the modal class.
//!
//! None of them reads labels. Argmax and modal-class ties resolve to the
//! lowest class index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{inject_label_noise, DataError, LabelNoiseSpec, LabeledDataset};
use crate::linalg::DenseMatrix;
use crate::nn::{argmax, softmax, train_sgd, Architecture, MlpModel, NnError, TrainConfig};
use crate::rng::{split_seed, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("dimension mismatch: model expects {expected} features, data has {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("ensemble member {index} has layer dims {found:?}, expected {expected:?}")]
    HeterogeneousMembers {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Conf,
    Lms,
    Ma,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::Conf => "conf",
            ScoreMethod::Lms => "lms",
            ScoreMethod::Ma => "ma",
        }
    }
}

/// Parameters a score was computed with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augmentations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity_noise: Option<f64>,
}

/// Per-sample scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ScoreVector<T> {
    pub scores: Vec<T>,
    pub method: ScoreMethod,
    pub meta: ScoreMeta,
}

impl<T: Scalar> ScoreVector<T> {
    pub fn new(scores: Vec<T>, method: ScoreMethod, meta: ScoreMeta) -> Result<Self, ScoreError> {
        if let Some((i, s)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !(**s >= T::zero() && **s <= T::one()))
        {
            return Err(ScoreError::InvalidParameter(format!(
                "score {i} = {s} lies outside [0, 1]"
            )));
        }
        Ok(Self { scores, method, meta })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn check_dims<T: Scalar>(model: &MlpModel<T>, data: &LabeledDataset<T>) -> Result<(), ScoreError> {
    if model.input_dim() != data.n_features() {
        return Err(ScoreError::Dimension {
            expected: model.input_dim(),
            actual: data.n_features(),
        });
    }
    Ok(())
}

fn max_probability<T: Scalar>(logits: &[T]) -> T {
    softmax(logits).into_iter().fold(T::zero(), T::max)
}

/// Max softmax probability per sample.
pub fn conf_score<T: Scalar>(model: &MlpModel<T>, data: &LabeledDataset<T>) -> Result<ScoreVector<T>, ScoreError> {
    check_dims(model, data)?;
    let logits = model.forward_batch(data.features())?;
    conf_score_from_logits(&logits)
}

/// Conf scores from precomputed logits (`n_samples x n_classes`).
pub fn conf_score_from_logits<T: Scalar>(logits: &DenseMatrix<T>) -> Result<ScoreVector<T>, ScoreError> {
    let scores = logits.iter_rows().map(max_probability).collect();
    ScoreVector::new(scores, ScoreMethod::Conf, ScoreMeta::default())
}

fn default_k() -> usize {
    10
}

fn default_jitter() -> f64 {
    0.5
}

fn default_scale_range() -> (f64, f64) {
    (0.8, 1.2)
}

/// Jitter-and-scale augmentation used by LMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    #[serde(default = "default_k")]
    pub count: usize,
    #[serde(default = "default_jitter")]
    pub jitter_sigma: f64,
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            count: default_k(),
            jitter_sigma: default_jitter(),
            scale_range: default_scale_range(),
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let (lo, hi) = self.scale_range;
        if self.count == 0 {
            return Err(ScoreError::InvalidParameter("augmentation count must be >= 1".into()));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(ScoreError::InvalidParameter("jitter_sigma must be >= 0".into()));
        }
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(ScoreError::InvalidParameter(format!(
                "scale_range must satisfy 0 < lo <= 1 <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    /// The `count` augmented copies of sample `index`.
    ///
    /// Stream: child `index` of `Rng::new(seed)`. Per copy: `d` standard
    /// normals `z`, then `c ~ U[lo, hi)`; the copy is `c * (x + jitter_sigma * z)`.
    pub fn augment<T: Scalar>(&self, index: usize, x: &[T]) -> Vec<Vec<T>> {
        let mut rng = Rng::new(self.seed).split(index as u64);
        let (lo, hi) = self.scale_range;
        (0..self.count)
            .map(|_| {
                let z: Vec<f64> = x.iter().map(|_| rng.normal()).collect();
                let c = rng.uniform_in(lo, hi);
                x.iter()
                    .zip(z)
                    .map(|(&xi, zi)| T::of(c * (xi.as_f64() + self.jitter_sigma * zi)))
                    .collect()
            })
            .collect()
    }
}

/// Fraction of augmented copies predicted as the clean sample's class.
pub fn lms_score<T: Scalar>(
    model: &MlpModel<T>,
    data: &LabeledDataset<T>,
    policy: &AugmentationPolicy,
) -> Result<ScoreVector<T>, ScoreError> {
    policy.validate()?;
    check_dims(model, data)?;
    let k = T::of_usize(policy.count);
    let scores = data
        .features()
        .iter_rows()
        .enumerate()
        .map(|(i, x)| {
            let reference = argmax(&model.forward_unchecked(x));
            let agree = policy
                .augment(i, x)
                .iter()
                .filter(|copy| argmax(&model.forward_unchecked(copy)) == reference)
                .count();
            T::of_usize(agree) / k
        })
        .collect();
    ScoreVector::new(
        scores,
        ScoreMethod::Lms,
        ScoreMeta {
            augmentations: Some(policy.count),
            ..ScoreMeta::default()
        },
    )
}

/// Members trained from one root seed, optionally on label-noised data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Ensemble<T> {
    members: Vec<MlpModel<T>>,
    diversity_noise: f64,
}

impl<T: Scalar> Ensemble<T> {
    pub fn new(members: Vec<MlpModel<T>>, diversity_noise: f64) -> Result<Self, ScoreError> {
        let first = members.first().ok_or(ScoreError::EmptyEnsemble)?;
        if let Some((index, m)) = members
            .iter()
            .enumerate()
            .find(|(_, m)| m.layer_dims() != first.layer_dims())
        {
            return Err(ScoreError::HeterogeneousMembers {
                index,
                expected: first.layer_dims().to_vec(),
                found: m.layer_dims().to_vec(),
            });
        }
        if !(0.0..=1.0).contains(&diversity_noise) {
            return Err(ScoreError::InvalidParameter(format!(
                "diversity noise must be in [0, 1], got {diversity_noise}"
            )));
        }
        Ok(Self {
            members,
            diversity_noise,
        })
    }

    pub fn members(&self) -> &[MlpModel<T>] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn diversity_noise(&self) -> f64 {
        self.diversity_noise
    }

    /// The first `k` members as an ensemble of their own.
    pub fn prefix(&self, k: usize) -> Result<Self, ScoreError> {
        if k == 0 || k > self.members.len() {
            return Err(ScoreError::InvalidParameter(format!(
                "prefix size {k} outside 1..={}",
                self.members.len()
            )));
        }
        Self::new(self.members[..k].to_vec(), self.diversity_noise)
    }

    /// Arg-max class of every member on every row, member-major.
    pub fn votes(&self, data: &LabeledDataset<T>) -> Result<Vec<Vec<usize>>, ScoreError> {
        self.members
            .iter()
            .map(|m| {
                check_dims(m, data)?;
                Ok(m.predict_batch(data.features())?)
            })
            .collect()
    }
}

/// Seeds used for member `m` of an ensemble rooted at `root`:
/// `(label_noise_seed, train_seed)` = children 0 and 1 of `split_seed(root, m)`.
pub fn member_seeds(root: u64, m: usize) -> (u64, u64) {
    let member_root = split_seed(root, m as u64);
    (split_seed(member_root, 0), split_seed(member_root, 1))
}

/// Trains `size` members in parallel; member `m` sees
/// `inject_label_noise(train, diversity_noise)` and its own init/shuffle seed,
/// both from [`member_seeds`]`(cfg.seed, m)`.
pub fn train_ensemble<T: Scalar>(
    train: &LabeledDataset<T>,
    cfg: &TrainConfig,
    arch: &Architecture,
    size: usize,
    diversity_noise: f64,
) -> Result<Ensemble<T>, ScoreError> {
    if size == 0 {
        return Err(ScoreError::EmptyEnsemble);
    }
    if !(0.0..=1.0).contains(&diversity_noise) {
        return Err(ScoreError::InvalidParameter(format!(
            "diversity noise must be in [0, 1], got {diversity_noise}"
        )));
    }
    let members = (0..size)
        .into_par_iter()
        .map(|m| {
            let (noise_seed, train_seed) = member_seeds(cfg.seed, m);
            let member_cfg = cfg.clone().with_seed(train_seed);
            if diversity_noise > 0.0 {
                let noisy = inject_label_noise(
                    train,
                    &LabelNoiseSpec {
                        rate: diversity_noise,
                        seed: noise_seed,
                    },
                )?;
                Ok(train_sgd(&noisy, &member_cfg, arch)?)
            } else {
                Ok(train_sgd(train, &member_cfg, arch)?)
            }
        })
        .collect::<Result<Vec<_>, ScoreError>>()?;
    Ensemble::new(members, diversity_noise)
}

/// Modal class and its vote count over member-major votes for one sample.
fn modal_vote(votes: &[Vec<usize>], sample: usize, n_classes: usize) -> (usize, usize) {
    let mut tally = vec![0usize; n_classes];
    for member in votes {
        tally[member[sample]] += 1;
    }
    let best = argmax(&tally);
    (best, tally[best])
}

fn n_classes_of(votes: &[Vec<usize>]) -> usize {
    votes.iter().flatten().copied().max().map_or(1, |m| m + 1)
}

fn check_votes(votes: &[Vec<usize>]) -> Result<usize, ScoreError> {
    let first = votes.first().ok_or(ScoreError::EmptyEnsemble)?;
    if let Some(bad) = votes.iter().position(|v| v.len() != first.len()) {
        return Err(ScoreError::InvalidParameter(format!(
            "member {bad} voted on {} samples, member 0 on {}",
            votes[bad].len(),
            first.len()
        )));
    }
    Ok(first.len())
}

/// MA scores from member-major votes.
pub fn ma_score_from_votes<T: Scalar>(votes: &[Vec<usize>]) -> Result<ScoreVector<T>, ScoreError> {
    let n = check_votes(votes)?;
    let k = n_classes_of(votes);
    let m = T::of_usize(votes.len());
    let scores = (0..n).map(|i| T::of_usize(modal_vote(votes, i, k).1) / m).collect();
    ScoreVector::new(
        scores,
        ScoreMethod::Ma,
        ScoreMeta {
            ensemble_size: Some(votes.len()),
            ..ScoreMeta::default()
        },
    )
}

/// Majority vote per sample from member-major votes.
pub fn majority_from_votes(votes: &[Vec<usize>]) -> Result<Vec<usize>, ScoreError> {
    let n = check_votes(votes)?;
    let k = n_classes_of(votes);
    Ok((0..n).map(|i| modal_vote(votes, i, k).0).collect())
}

/// Fraction of members voting for the modal class.
pub fn ma_score<T: Scalar>(ensemble: &Ensemble<T>, data: &LabeledDataset<T>) -> Result<ScoreVector<T>, ScoreError> {
    let mut sv = ma_score_from_votes(&ensemble.votes(data)?)?;
    sv.meta.diversity_noise = Some(ensemble.diversity_noise);
    Ok(sv)
}

/// Majority-vote labels of the ensemble.
pub fn ensemble_predict<T: Scalar>(ensemble: &Ensemble<T>, data: &LabeledDataset<T>) -> Result<Vec<usize>, ScoreError> {
    majority_from_votes(&ensemble.votes(data)?)
}

/// Arg-max per row of a logits matrix.
pub fn predictions_from_logits<T: Scalar>(logits: &DenseMatrix<T>) -> Vec<usize> {
    logits.iter_rows().map(argmax).collect()
}
