//! Spam-reporting tweet classifier.
//!
//! Bag-of-words counts feed a three-layer network (input, one tanh hidden
//! layer, softmax output over the two labels) trained by mini-batch gradient
//! descent on mean cross-entropy. Training is single-threaded and fully
//! determined by the seed; cross-validation folds are independent and may be
//! run in parallel.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::text;

#[derive(Debug, Error)]
pub enum SrtcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("model file: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("translation failed: {0}")]
    Translation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "spam_report")]
    SpamReporting,
    #[serde(rename = "other")]
    NotSpamReporting,
}

impl Label {
    fn class_index(self) -> usize {
        match self {
            Label::NotSpamReporting => 0,
            Label::SpamReporting => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: Label,
}

/// Token → dense index.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
}

/// Tokens in index order; repeats keep their first index.
impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let mut index = BTreeMap::new();
        for t in tokens {
            let next = index.len();
            index.entry(t).or_insert(next);
        }
        Self { index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        let mut pairs: Vec<(String, usize)> = v.index.into_iter().collect();
        pairs.sort_by_key(|&(_, i)| i);
        pairs.into_iter().map(|(t, _)| t).collect()
    }
}

impl Vocabulary {
    /// Every token in `texts`, indexed in lexicographic order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let tokens: BTreeSet<String> = texts.into_iter().flat_map(text::tokens).collect();
        Self::from(tokens.into_iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

/// Count vector with only the non-zero entries, sorted by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCounts {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseCounts {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, c) in &self.entries {
            v[i] = c;
        }
        v
    }
}

pub fn featurize(text: &str, vocab: &Vocabulary) -> SparseCounts {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for tok in text::tokens(text) {
        if let Some(i) = vocab.get(&tok) {
            *counts.entry(i).or_default() += 1.0;
        }
    }
    SparseCounts {
        dim: vocab.len(),
        entries: counts.into_iter().collect(),
    }
}

/// Duplicate each example of the minority label once. Balanced input is
/// returned unchanged.
pub fn oversample(data: &[LabeledText]) -> Result<Vec<LabeledText>, SrtcError> {
    let pos = data
        .iter()
        .filter(|d| d.label == Label::SpamReporting)
        .count();
    let neg = data.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(SrtcError::InvalidArgument(
            "oversampling needs both labels present".into(),
        ));
    }
    let mut out = data.to_vec();
    if pos == neg {
        return Ok(out);
    }
    let minority = if pos < neg {
        Label::SpamReporting
    } else {
        Label::NotSpamReporting
    };
    out.extend(data.iter().filter(|d| d.label == minority).cloned());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Dense network parameters, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// `[inputs, hidden, 2]`
    pub layer_sizes: [usize; 3],
    pub hidden_activation: Activation,
    pub seed: u64,
    /// `hidden × inputs`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `2 × hidden`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradient of the mean loss. Only input columns that occur in the batch
/// carry a `w1` block.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w1_columns: BTreeMap<usize, Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradient {
    /// `w1` gradient as a full `hidden × inputs` matrix.
    pub fn dense_w1(&self, inputs: usize) -> Vec<f64> {
        let hidden = self.b1.len();
        let mut out = vec![0.0; hidden * inputs];
        for (&v, col) in &self.w1_columns {
            for h in 0..hidden {
                out[h * inputs + v] = col[h];
            }
        }
        out
    }
}

struct Forward {
    hidden: Vec<f64>,
    probs: [f64; 2],
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

impl MlpModel {
    /// Parameters drawn uniformly from [-0.1, 0.1].
    pub fn init(inputs: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.1..=0.1)).collect() };
        let w1 = draw(hidden * inputs);
        let b1 = draw(hidden);
        let w2 = draw(2 * hidden);
        let b2 = draw(2);
        Self {
            layer_sizes: [inputs, hidden, 2],
            hidden_activation: Activation::Tanh,
            seed,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn hidden(&self) -> usize {
        self.layer_sizes[1]
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn forward(&self, x: &SparseCounts) -> Forward {
        let (n_in, n_hid) = (self.inputs(), self.hidden());
        let hidden: Vec<f64> = (0..n_hid)
            .map(|h| {
                let row = &self.w1[h * n_in..(h + 1) * n_in];
                let z = self.b1[h] + x.entries.iter().map(|&(v, c)| row[v] * c).sum::<f64>();
                z.tanh()
            })
            .collect();
        let mut z = [self.b2[0], self.b2[1]];
        for (o, zo) in z.iter_mut().enumerate() {
            *zo += (0..n_hid)
                .map(|h| self.w2[o * n_hid + h] * hidden[h])
                .sum::<f64>();
        }
        Forward {
            hidden,
            probs: softmax2(z),
        }
    }

    /// Class probabilities `[other, spam_report]`.
    pub fn probabilities(&self, x: &SparseCounts) -> [f64; 2] {
        self.forward(x).probs
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, batch: &[(SparseCounts, Label)]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let total: f64 = batch
            .iter()
            .map(|(x, y)| -self.forward(x).probs[y.class_index()].ln())
            .sum();
        total / batch.len() as f64
    }

    /// Analytic gradient of [`MlpModel::loss`].
    pub fn gradient(&self, batch: &[(SparseCounts, Label)]) -> Gradient {
        let n_hid = self.hidden();
        let mut g = Gradient {
            w1_columns: BTreeMap::new(),
            b1: vec![0.0; n_hid],
            w2: vec![0.0; 2 * n_hid],
            b2: vec![0.0; 2],
        };
        if batch.is_empty() {
            return g;
        }
        let scale = 1.0 / batch.len() as f64;
        let mut d_hidden = vec![0.0; n_hid];
        for (x, y) in batch {
            let f = self.forward(x);
            let mut d_out = f.probs;
            d_out[y.class_index()] -= 1.0;
            for (o, d) in d_out.iter_mut().enumerate() {
                *d *= scale;
                g.b2[o] += *d;
                for (gw, hv) in g.w2[o * n_hid..(o + 1) * n_hid].iter_mut().zip(&f.hidden) {
                    *gw += *d * hv;
                }
            }
            for (h, dh) in d_hidden.iter_mut().enumerate() {
                let back = d_out[0] * self.w2[h] + d_out[1] * self.w2[n_hid + h];
                *dh = back * (1.0 - f.hidden[h] * f.hidden[h]);
                g.b1[h] += *dh;
            }
            for &(v, c) in &x.entries {
                let col = g.w1_columns.entry(v).or_insert_with(|| vec![0.0; n_hid]);
                for (cw, dh) in col.iter_mut().zip(&d_hidden) {
                    *cw += dh * c;
                }
            }
        }
        g
    }

    fn step(&mut self, g: &Gradient, lr: f64) {
        let n_in = self.inputs();
        for (&v, col) in &g.w1_columns {
            for (h, d) in col.iter().enumerate() {
                self.w1[h * n_in + v] -= lr * d;
            }
        }
        for (p, d) in self.b1.iter_mut().zip(&g.b1) {
            *p -= lr * d;
        }
        for (p, d) in self.w2.iter_mut().zip(&g.w2) {
            *p -= lr * d;
        }
        for (p, d) in self.b2.iter_mut().zip(&g.b2) {
            *p -= lr * d;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub hidden_size: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 50,
            hidden_size: 32,
            batch_size: 16,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SrtcError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SrtcError::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if self.hidden_size == 0 || self.batch_size == 0 {
            return Err(SrtcError::InvalidArgument(
                "hidden_size and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A trained network together with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub vocabulary: Vocabulary,
    #[serde(flatten)]
    pub network: MlpModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub p_spam_report: f64,
}

impl Classifier {
    pub fn predict(&self, text: &str) -> Prediction {
        let p = self
            .network
            .probabilities(&featurize(text, &self.vocabulary));
        let label = if p[1] > p[0] {
            Label::SpamReporting
        } else {
            Label::NotSpamReporting
        };
        Prediction {
            label,
            p_spam_report: p[1],
        }
    }

    pub fn to_json(&self) -> Result<String, SrtcError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(raw: &str) -> Result<Self, SrtcError> {
        let c: Classifier = serde_json::from_str(raw)?;
        let [v, h, o] = c.network.layer_sizes;
        let shapes_ok = v == c.vocabulary.len()
            && o == 2
            && c.network.w1.len() == h * v
            && c.network.b1.len() == h
            && c.network.w2.len() == 2 * h
            && c.network.b2.len() == 2;
        if !shapes_ok {
            return Err(SrtcError::InvalidArgument(
                "model parameter shapes do not match layer sizes".into(),
            ));
        }
        if !c.network.is_finite() {
            return Err(SrtcError::InvalidArgument(
                "model has non-finite parameters".into(),
            ));
        }
        Ok(c)
    }
}

/// Train on `data` as given (no implicit oversampling).
pub fn train(data: &[LabeledText], config: &TrainConfig) -> Result<Classifier, SrtcError> {
    config.validate()?;
    let has = |l: Label| data.iter().any(|d| d.label == l);
    if !has(Label::SpamReporting) || !has(Label::NotSpamReporting) {
        return Err(SrtcError::InvalidArgument(
            "training data needs both labels".into(),
        ));
    }
    let vocabulary = Vocabulary::build(data.iter().map(|d| d.text.as_str()));
    if vocabulary.is_empty() {
        return Err(SrtcError::Training("empty vocabulary".into()));
    }
    let examples: Vec<(SparseCounts, Label)> = data
        .iter()
        .map(|d| (featurize(&d.text, &vocabulary), d.label))
        .collect();
    let mut network = MlpModel::init(vocabulary.len(), config.hidden_size, config.seed);
    // Separate stream so shuffling does not perturb initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let g = network.gradient(&batch);
            network.step(&g, config.learning_rate);
        }
        if !network.is_finite() {
            return Err(SrtcError::Training(format!(
                "parameters diverged at epoch {epoch}"
            )));
        }
    }
    Ok(Classifier {
        vocabulary,
        network,
    })
}

/// Confusion counts with SpamReporting as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let div = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self {
            accuracy: div(tp + tn, tp + fp + tn + fn_),
            precision: div(tp, tp + fp),
            recall: div(tp, tp + fn_),
            tp,
            fp,
            tn,
            fn_,
        }
    }

    pub fn from_pairs<I: IntoIterator<Item = (Label, Label)>>(truth_predicted: I) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (t, p) in truth_predicted {
            match (t, p) {
                (Label::SpamReporting, Label::SpamReporting) => tp += 1,
                (Label::NotSpamReporting, Label::SpamReporting) => fp += 1,
                (Label::NotSpamReporting, Label::NotSpamReporting) => tn += 1,
                (Label::SpamReporting, Label::NotSpamReporting) => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Train/test index split for one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then contiguous folds of `n / k` items with the
/// remainder spread one each over the first folds.
pub fn kfold_splits(n: usize, k: usize, seed: u64) -> Result<Vec<FoldSplit>, SrtcError> {
    if k < 2 {
        return Err(SrtcError::InvalidArgument(format!(
            "k must be at least 2, got {k}"
        )));
    }
    if k > n {
        return Err(SrtcError::InvalidArgument(format!(
            "k = {k} exceeds the {n} available items"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut splits = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test = order[start..start + len].to_vec();
        let train = order[..start]
            .iter()
            .chain(&order[start + len..])
            .copied()
            .collect();
        splits.push(FoldSplit { train, test });
        start += len;
    }
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub split: FoldSplit,
    pub vocabulary: Vocabulary,
    pub predictions: Vec<Label>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    /// Micro-averaged over every held-out prediction.
    pub pooled: Metrics,
    pub folds: Vec<FoldOutcome>,
}

/// k-fold evaluation. Each fold rebuilds its vocabulary from its training
/// split; an imbalanced training split is oversampled before training.
pub fn kfold_evaluate(
    data: &[LabeledText],
    k: usize,
    config: &TrainConfig,
    exec: Execution,
) -> Result<CrossValidation, SrtcError> {
    let splits = kfold_splits(data.len(), k, config.seed)?;
    let results = exec.map(&splits, |split| -> Result<FoldOutcome, SrtcError> {
        let train_set: Vec<LabeledText> = split.train.iter().map(|&i| data[i].clone()).collect();
        let balanced = oversample(&train_set)?;
        let model = train(&balanced, config)?;
        let predictions: Vec<Label> = split
            .test
            .iter()
            .map(|&i| model.predict(&data[i].text).label)
            .collect();
        let metrics = Metrics::from_pairs(
            split
                .test
                .iter()
                .map(|&i| data[i].label)
                .zip(predictions.iter().copied()),
        );
        Ok(FoldOutcome {
            split: split.clone(),
            vocabulary: model.vocabulary,
            predictions,
            metrics,
        })
    });
    let folds: Vec<FoldOutcome> = results.into_iter().collect::<Result<_, _>>()?;
    let pooled = Metrics::from_pairs(folds.iter().flat_map(|f| {
        f.split
            .test
            .iter()
            .map(|&i| data[i].label)
            .zip(f.predictions.iter().copied())
    }));
    Ok(CrossValidation { pooled, folds })
}

/// Machine translation ahead of classification.
pub trait Translator: Send + Sync {
    fn translate(&self, text: &str, target_lang: &str) -> Result<String, SrtcError>;
}

/// Returns the input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(&self, text: &str, _target_lang: &str) -> Result<String, SrtcError> {
        Ok(text.to_string())
    }
}

/// Tokens that occur in `test` texts but nowhere in `train` texts.
pub fn unseen_tokens<'a>(
    train: impl IntoIterator<Item = &'a str>,
    test: impl IntoIterator<Item = &'a str>,
) -> HashSet<String> {
    let seen: HashSet<String> = train.into_iter().flat_map(text::tokens).collect();
    test.into_iter()
        .flat_map(text::tokens)
        .filter(|t| !seen.contains(t))
        .collect()
}
