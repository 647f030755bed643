//! Multiclass maximum-entropy (multinomial logistic regression) classifier.
//!
//! Training minimizes
//!
//! ```text
//! (1/n) sum_i [ logsumexp(W^T x_i + b) - (W^T x_i + b)_{y_i} ] + (l2/2) (|W|^2 + |b|^2)
//! ```
//!
//! with [`sdca`]. The bias is regularized like a weight on a constant feature.

mod format;
mod sdca;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, SubsecRound, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{featurize, featurize_text, FeatureVector, FEATURE_DIMS, HASH_SEED};
use crate::ingest::ArticleDoc;
use crate::num::Scalar;
use crate::store::{sha1_key, BucketId, ObjectRef, Store};

pub use format::{decode_model, encode_model, MODEL_MAGIC, MODEL_VERSION};

/// Name of the pointer object that records the serving model.
pub const CURRENT_POINTER: &str = "current";

/// Fraction of each label's examples held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2: 1e-4,
            epochs: 30,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 > 0.0 && self.l2.is_finite()) {
            return Err(Error::validation(format!("l2 must be positive, got {}", self.l2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: String,
}

/// Parses JSON-lines training data, one `{"text", "label"}` object per line.
pub fn parse_training_data(bytes: &[u8]) -> Result<Vec<LabeledExample>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse(format!("training data: {e}")))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("training data line {}: {e}", i + 1))))
        .collect()
}

pub fn encode_training_data(examples: &[LabeledExample]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut out, e).expect("LabeledExample serializes");
        out.push(b'\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub label: String,
    pub label_index: usize,
    /// Softmax probabilities, one per label.
    pub scores: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact<T> {
    pub labels: Vec<String>,
    /// Dense feature-major weights: `weights[f * labels.len() + c]`.
    weights: Vec<T>,
    pub bias: Vec<T>,
    pub feature_dims: u32,
    pub hash_seed: u64,
    pub eval_accuracy: f64,
    pub trained_at: DateTime<Utc>,
    pub train_set_sha: String,
}

impl<T: Scalar> ModelArtifact<T> {
    /// All-zero model over `labels`.
    pub fn zeroed(labels: Vec<String>) -> Result<Self> {
        validate_labels(&labels)?;
        let classes = labels.len();
        Ok(ModelArtifact {
            weights: vec![T::zero(); FEATURE_DIMS as usize * classes],
            bias: vec![T::zero(); classes],
            labels,
            feature_dims: FEATURE_DIMS,
            hash_seed: HASH_SEED,
            eval_accuracy: 0.0,
            trained_at: DateTime::<Utc>::UNIX_EPOCH,
            train_set_sha: sha1_key(b""),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn weight(&self, class: usize, feature: u32) -> T {
        self.weights[feature as usize * self.num_classes() + class]
    }

    pub fn set_weight(&mut self, class: usize, feature: u32, value: T) {
        let classes = self.num_classes();
        self.weights[feature as usize * classes + class] = value;
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn check_compatible(&self) -> Result<()> {
        if self.feature_dims != FEATURE_DIMS || self.hash_seed != HASH_SEED {
            return Err(Error::Compatibility(format!(
                "model expects {} dims / seed {:#x}, featurizer produces {} dims / seed {:#x}",
                self.feature_dims, self.hash_seed, FEATURE_DIMS, HASH_SEED
            )));
        }
        Ok(())
    }

    /// Raw class scores `W^T x + b`.
    pub fn logits(&self, x: &FeatureVector<T>) -> Vec<T> {
        let classes = self.num_classes();
        let mut out = self.bias.clone();
        for &(f, v) in x.entries() {
            let row = &self.weights[f as usize * classes..][..classes];
            for (o, &w) in out.iter_mut().zip(row) {
                *o = *o + w * v;
            }
        }
        out
    }

    pub fn predict_features(&self, x: &FeatureVector<T>) -> Prediction<T> {
        let scores = softmax(&self.logits(x));
        let label_index = argmax(&scores);
        Prediction {
            label: self.labels[label_index].clone(),
            label_index,
            scores,
        }
    }

    pub fn predict(&self, doc: &ArticleDoc) -> Result<Prediction<T>> {
        self.check_compatible()?;
        Ok(self.predict_features(&featurize(doc)))
    }

    pub fn predict_text(&self, text: &str) -> Result<Prediction<T>> {
        self.check_compatible()?;
        Ok(self.predict_features(&featurize_text(text)))
    }

    pub(crate) fn raw_weights(&self) -> &[T] {
        &self.weights
    }

    pub(crate) fn from_parts(labels: Vec<String>, weights: Vec<T>, bias: Vec<T>, meta: ModelMeta) -> Self {
        ModelArtifact {
            labels,
            weights,
            bias,
            feature_dims: meta.feature_dims,
            hash_seed: meta.hash_seed,
            eval_accuracy: meta.eval_accuracy,
            trained_at: meta.trained_at,
            train_set_sha: meta.train_set_sha,
        }
    }
}

pub(crate) struct ModelMeta {
    pub feature_dims: u32,
    pub hash_seed: u64,
    pub eval_accuracy: f64,
    pub trained_at: DateTime<Utc>,
    pub train_set_sha: String,
}

fn validate_labels(labels: &[String]) -> Result<()> {
    if labels.len() < 2 {
        return Err(Error::validation(format!(
            "need at least 2 distinct labels, got {}",
            labels.len()
        )));
    }
    let unique: BTreeSet<&String> = labels.iter().collect();
    if unique.len() != labels.len() {
        return Err(Error::validation("labels must be unique"));
    }
    Ok(())
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Featurized examples with label indices.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub xs: Vec<FeatureVector<T>>,
    pub ys: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_examples(examples: &[LabeledExample], labels: &[String]) -> Result<Self> {
        let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut ds = Dataset {
            xs: Vec::with_capacity(examples.len()),
            ys: Vec::with_capacity(examples.len()),
        };
        for e in examples {
            let y = *index
                .get(e.label.as_str())
                .ok_or_else(|| Error::validation(format!("label {:?} not in label set", e.label)))?;
            ds.xs.push(featurize_text(&e.text));
            ds.ys.push(y);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Regularized mean cross-entropy of `model` on `data`.
pub fn objective<T: Scalar>(model: &ModelArtifact<T>, data: &Dataset<T>, l2: f64) -> f64 {
    let mut loss = 0.0;
    for (x, &y) in data.xs.iter().zip(&data.ys) {
        let z: Vec<f64> = model.logits(x).into_iter().map(Scalar::as_f64).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[y];
    }
    if !data.is_empty() {
        loss /= data.len() as f64;
    }
    let reg: f64 = model
        .weights
        .iter()
        .chain(&model.bias)
        .map(|w| w.as_f64() * w.as_f64())
        .sum();
    loss + 0.5 * l2 * reg
}

/// Gradient of [`objective`], with the same layout as the model.
#[derive(Debug, Clone)]
pub struct Gradient {
    /// Feature-major, `weights[f * classes + c]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn gradient<T: Scalar>(model: &ModelArtifact<T>, data: &Dataset<T>, l2: f64) -> Gradient {
    let classes = model.num_classes();
    let mut g = Gradient {
        weights: model.weights.iter().map(|w| l2 * w.as_f64()).collect(),
        bias: model.bias.iter().map(|b| l2 * b.as_f64()).collect(),
    };
    let inv_n = if data.is_empty() { 0.0 } else { 1.0 / data.len() as f64 };
    for (x, &y) in data.xs.iter().zip(&data.ys) {
        let mut residual: Vec<f64> = softmax(&model.logits(x)).into_iter().map(Scalar::as_f64).collect();
        residual[y] -= 1.0;
        for (gb, r) in g.bias.iter_mut().zip(&residual) {
            *gb += inv_n * r;
        }
        for &(f, v) in x.entries() {
            let row = &mut g.weights[f as usize * classes..][..classes];
            for (gw, r) in row.iter_mut().zip(&residual) {
                *gw += inv_n * r * v.as_f64();
            }
        }
    }
    g
}

pub fn accuracy<T: Scalar>(model: &ModelArtifact<T>, data: &Dataset<T>) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .xs
        .iter()
        .zip(&data.ys)
        .filter(|(x, &y)| model.predict_features(x).label_index == y)
        .count();
    correct as f64 / data.len() as f64
}

/// Unweighted mean of per-label F1 scores.
pub fn macro_f1<T: Scalar>(model: &ModelArtifact<T>, data: &Dataset<T>) -> f64 {
    let classes = model.num_classes();
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (x, &y) in data.xs.iter().zip(&data.ys) {
        let p = model.predict_features(x).label_index;
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let f1: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    f1 / classes as f64
}

/// Stratified split: per label, a seeded shuffle then the first
/// `floor(k * EVAL_FRACTION)` examples go to evaluation.
pub fn stratified_split(ys: &[usize], classes: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ys.iter().enumerate() {
        by_label[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for mut members in by_label {
        members.shuffle(&mut rng);
        let n_eval = (members.len() as f64 * EVAL_FRACTION).floor() as usize;
        eval.extend_from_slice(&members[..n_eval]);
        train.extend_from_slice(&members[n_eval..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}

fn subset<T: Scalar>(data: &Dataset<T>, idx: &[usize]) -> Dataset<T> {
    Dataset {
        xs: idx.iter().map(|&i| data.xs[i].clone()).collect(),
        ys: idx.iter().map(|&i| data.ys[i]).collect(),
    }
}

/// Trains on a stratified 80% split and records accuracy on the held-out 20%.
pub fn train<T: Scalar>(examples: &[LabeledExample], config: &TrainConfig) -> Result<ModelArtifact<T>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::validation("no training examples"));
    }
    let labels: Vec<String> = examples
        .iter()
        .map(|e| e.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    validate_labels(&labels)?;

    let data = Dataset::from_examples(examples, &labels)?;
    let (train_idx, eval_idx) = stratified_split(&data.ys, labels.len(), config.seed);
    let train_set = subset(&data, &train_idx);
    let eval_set = subset(&data, &eval_idx);

    let solution = sdca::solve(
        &sdca::Problem {
            xs: &train_set.xs,
            ys: &train_set.ys,
            classes: labels.len(),
            dims: FEATURE_DIMS as usize,
        },
        config.l2,
        config.epochs,
        config.seed,
    );
    let mut model = ModelArtifact::from_parts(
        labels,
        solution.weights,
        solution.bias,
        ModelMeta {
            feature_dims: FEATURE_DIMS,
            hash_seed: HASH_SEED,
            eval_accuracy: 0.0,
            // The model format keeps milliseconds.
            trained_at: Utc::now().trunc_subsecs(3),
            train_set_sha: sha1_key(&encode_training_data(examples)),
        },
    );
    model.eval_accuracy = accuracy(&model, &eval_set);
    Ok(model)
}

pub fn save_model<T: Scalar>(store: &Store, model: &ModelArtifact<T>) -> Result<ObjectRef> {
    store.put_content(BucketId::MlModels, "model", &encode_model(model))
}

pub fn load_model<T: Scalar>(store: &Store, object: &ObjectRef) -> Result<ModelArtifact<T>> {
    decode_model(&store.get(object)?)
}

/// The model the `current` pointer names, if any.
pub fn current_model<T: Scalar>(store: &Store) -> Result<Option<(ObjectRef, ModelArtifact<T>)>> {
    match store.pointer(BucketId::MlModels, CURRENT_POINTER)? {
        Some(object) => {
            let model = load_model(store, &object)?;
            Ok(Some((object, model)))
        }
        None => Ok(None),
    }
}

/// Keeps the model with the higher held-out accuracy; the incumbent wins ties.
/// A winning candidate is saved and becomes `current`; otherwise nothing is
/// written.
pub fn select_model<T: Scalar>(
    store: &Store,
    candidate: ModelArtifact<T>,
    incumbent: Option<ModelArtifact<T>>,
) -> Result<ModelArtifact<T>> {
    if let Some(incumbent) = incumbent {
        let a: BTreeSet<&String> = candidate.labels.iter().collect();
        let b: BTreeSet<&String> = incumbent.labels.iter().collect();
        if a != b {
            return Err(Error::validation(format!(
                "label sets differ (candidate {:?}, incumbent {:?}); migrate the incumbent manually",
                candidate.labels, incumbent.labels
            )));
        }
        if candidate.eval_accuracy <= incumbent.eval_accuracy {
            return Ok(incumbent);
        }
    }
    let object = save_model(store, &candidate)?;
    store.set_pointer(BucketId::MlModels, CURRENT_POINTER, &object.key)?;
    Ok(candidate)
}

/// [`select_model`] against whatever `current` points at.
pub fn select_against_current<T: Scalar>(store: &Store, candidate: ModelArtifact<T>) -> Result<ModelArtifact<T>> {
    let incumbent = current_model(store)?.map(|(_, m)| m);
    select_model(store, candidate, incumbent)
}
