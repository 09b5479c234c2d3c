//! Training: focal cross-entropy, Adam with lazily tracked sparse embedding
//! moments, corpus balancing, stratified splits, the epoch loop with
//! best-checkpoint retention, evaluation metrics, and gradient verification.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelGrads, ModelParams, N_CLASSES};
use crate::tensor::Matrix;
use crate::text::{
    normalize, sentence_split, tokenize, Document, Label, TokenRef, VocabOptions, Vocabulary,
};

pub const DEFAULT_LENGTH_THRESHOLD: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimization hyperparameters and data handling knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Focal damping exponent; 0 reduces to plain cross-entropy.
    pub gamma: f64,
    /// Per-class focal weights in {negative, positive} order.
    pub alpha: [f64; N_CLASSES],
    pub seed: u64,
    /// Train/validation/test fractions; must sum to 1.
    pub split: [f64; 3],
    pub vocab: VocabOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            gamma: 2.0,
            alpha: [1.0, 1.0],
            seed: 42,
            split: [0.64, 0.16, 0.20],
            vocab: VocabOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config("class weights must be nonnegative".into()));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be nonnegative and sum to 1, got {:?}",
                self.split
            )));
        }
        Ok(())
    }
}

fn check_probs(p: &[f64; N_CLASSES]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("invalid probability vector {p:?}")));
    }
    Ok(())
}

const PROB_FLOOR: f64 = 1e-12;

/// Focal cross-entropy −α_y (1 − p_y)^γ log p_y with p_y clamped to
/// [1e-12, 1].
pub fn focal_loss(p: &[f64; N_CLASSES], y: Label, gamma: f64, alpha: &[f64; N_CLASSES]) -> Result<f64> {
    check_probs(p)?;
    let p_y = p[y.index()].clamp(PROB_FLOOR, 1.0);
    let q = 1.0 - p_y;
    Ok(-alpha[y.index()] * q.powf(gamma) * p_y.ln())
}

/// Loss plus its gradient with respect to the probability vector. Only the
/// true-class entry is nonzero; the softmax backward distributes it.
pub fn focal_loss_grad(
    p: &[f64; N_CLASSES],
    y: Label,
    gamma: f64,
    alpha: &[f64; N_CLASSES],
) -> Result<(f64, [f64; N_CLASSES])> {
    let loss = focal_loss(p, y, gamma, alpha)?;
    let a = alpha[y.index()];
    let p_y = p[y.index()].clamp(PROB_FLOOR, 1.0);
    let q = 1.0 - p_y;
    // d/dp [−a q^γ ln p] = aγ q^(γ−1) ln p − a q^γ / p, with the power term
    // dropped when γ = 0 and the whole pull vanishing as p → 1 for γ > 0.
    let grad = if gamma == 0.0 {
        -a / p_y
    } else if q <= 0.0 {
        0.0
    } else {
        a * gamma * q.powf(gamma - 1.0) * p_y.ln() - a * q.powf(gamma) / p_y
    };
    let mut dprobs = [0.0; N_CLASSES];
    dprobs[y.index()] = grad;
    Ok((loss, dprobs))
}

/// Corpus rebalancing counters.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceStats {
    pub minority_label: Label,
    pub minority_before: usize,
    pub minority_after: usize,
    pub majority_count: usize,
    pub duplicated: usize,
    pub segmented: usize,
    pub passes: usize,
    pub final_ratio: f64,
}

/// Grows the minority class toward the majority: documents with at least two
/// sentences are segmented into per-sentence documents, shorter-than-threshold
/// ones are duplicated. Passes repeat while the class ratio is below 0.9; a
/// pass stops early once parity is reached, so the ratio lands in [0.9, 1.1]
/// whenever the rules can get it there. The majority class and every label
/// are left untouched.
pub fn balance_corpus(
    corpus: &[Document],
    length_threshold: usize,
) -> Result<(Vec<Document>, BalanceStats)> {
    let mut counts = [0usize; N_CLASSES];
    for (i, doc) in corpus.iter().enumerate() {
        match doc.label {
            Some(label) => counts[label.index()] += 1,
            None => {
                return Err(Error::Data(format!("document {i} has no label; cannot balance")))
            }
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Data("corpus has a single class; cannot balance".into()));
    }
    let minority_label = if counts[0] < counts[1] { Label::Negative } else { Label::Positive };
    let minority_before = counts[minority_label.index()];
    let majority_count = counts.iter().max().copied().unwrap_or(0);
    let below_band = |minority: usize| (minority as f64) < 0.9 * majority_count as f64;
    let at_parity = |minority: usize| minority >= majority_count;

    // Derived documents stay grouped under their original document so the
    // output preserves corpus order.
    let mut groups: Vec<Vec<Document>> = corpus
        .iter()
        .filter(|d| d.label == Some(minority_label))
        .map(|d| vec![d.clone()])
        .collect();
    let mut current = minority_before;
    let mut duplicated = 0usize;
    let mut segmented = 0usize;
    let mut passes = 0usize;

    while below_band(current) {
        let mut applied = false;
        'pass: for group in &mut groups {
            let mut rebuilt = Vec::with_capacity(group.len());
            for (pos, doc) in group.iter().enumerate() {
                if at_parity(current) {
                    rebuilt.extend_from_slice(&group[pos..]);
                    group.clear();
                    group.extend(rebuilt);
                    break 'pass;
                }
                let sentences = sentence_split(&doc.text);
                if sentences.len() >= 2 {
                    current += sentences.len() - 1;
                    segmented += 1;
                    applied = true;
                    rebuilt.extend(sentences.into_iter().map(|text| Document {
                        text,
                        label: doc.label,
                    }));
                } else if sentences.len() < length_threshold {
                    current += 1;
                    duplicated += 1;
                    applied = true;
                    rebuilt.push(doc.clone());
                    rebuilt.push(doc.clone());
                } else {
                    rebuilt.push(doc.clone());
                }
            }
            *group = rebuilt;
        }
        passes += 1;
        if !applied || passes >= 64 {
            if below_band(current) {
                log::warn!(
                    "balance stopped at ratio {:.3} after {passes} passes",
                    current as f64 / majority_count as f64
                );
            }
            break;
        }
    }

    let mut out = Vec::with_capacity(corpus.len() + current - minority_before);
    let mut group_iter = groups.into_iter();
    for doc in corpus {
        if doc.label == Some(minority_label) {
            out.extend(group_iter.next().expect("one group per minority document"));
        } else {
            out.push(doc.clone());
        }
    }
    let stats = BalanceStats {
        minority_label,
        minority_before,
        minority_after: current,
        majority_count,
        duplicated,
        segmented,
        passes,
        final_ratio: current as f64 / majority_count as f64,
    };
    Ok((out, stats))
}

/// Label-stratified, seed-deterministic split by largest-remainder rounding
/// within each class. A fraction of zero may yield an empty split; a positive
/// fraction yielding one is an error.
pub fn split(corpus: &[Document], ratios: [f64; 3], seed: u64) -> Result<[Vec<Document>; 3]> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot split an empty corpus".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !r.is_finite() || r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: [Vec<Document>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in [Label::Negative, Label::Positive] {
        let mut members: Vec<usize> = Vec::new();
        for (i, doc) in corpus.iter().enumerate() {
            match doc.label {
                Some(label) if label == class => members.push(i),
                Some(_) => {}
                None => {
                    return Err(Error::Data(format!(
                        "document {i} has no label; cannot stratify"
                    )))
                }
            }
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let mut take = [0usize; 3];
        let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(3);
        for k in 0..3 {
            let quota = ratios[k] * n as f64;
            take[k] = quota.floor() as usize;
            fractions.push((k, quota - quota.floor()));
        }
        let mut remainder = n - take.iter().sum::<usize>();
        fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(k, _) in &fractions {
            if remainder == 0 {
                break;
            }
            take[k] += 1;
            remainder -= 1;
        }
        let mut offset = 0;
        for k in 0..3 {
            for &idx in &members[offset..offset + take[k]] {
                out[k].push(corpus[idx].clone());
            }
            offset += take[k];
        }
    }
    for (k, part) in out.iter().enumerate() {
        if ratios[k] > 0.0 && part.is_empty() {
            return Err(Error::Data(format!(
                "split {k} has ratio {} but received no documents",
                ratios[k]
            )));
        }
    }
    Ok(out)
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(len: usize) -> Moments {
        Moments { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// Adam with bias correction. Embedding rows keep moments only once touched,
/// so memory tracks the vocabulary actually exercised.
pub struct AdamState {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    dense: BTreeMap<String, Moments>,
    word: HashMap<u32, Moments>,
    ngram: HashMap<u32, Moments>,
}

pub enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Optimizer {
        match config.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(AdamState {
                t: 0,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.adam_eps,
                dense: BTreeMap::new(),
                word: HashMap::new(),
                ngram: HashMap::new(),
            }),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelGrads, lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => {
                for (name, param) in params.dense_entries_mut() {
                    if let Some(g) = grads.dense.get(&name) {
                        if g.shape() != param.shape() {
                            return Err(Error::shape("sgd_step", param.shape(), g.shape()));
                        }
                        for (p, &gv) in param.data_mut().iter_mut().zip(g.data()) {
                            *p -= lr * gv;
                        }
                    }
                }
                sparse_sgd(&mut params.embedding.word, &grads.embedding.word, lr)?;
                sparse_sgd(&mut params.embedding.ngram, &grads.embedding.ngram, lr)?;
                Ok(())
            }
            Optimizer::Adam(state) => {
                state.t += 1;
                let bc1 = 1.0 - state.beta1.powi(state.t as i32);
                let bc2 = 1.0 - state.beta2.powi(state.t as i32);
                for (name, param) in params.dense_entries_mut() {
                    if let Some(g) = grads.dense.get(&name) {
                        if g.shape() != param.shape() {
                            return Err(Error::shape("adam_step", param.shape(), g.shape()));
                        }
                        let mom = state
                            .dense
                            .entry(name)
                            .or_insert_with(|| Moments::zeros(g.data().len()));
                        adam_update(
                            param.data_mut(),
                            g.data(),
                            mom,
                            lr,
                            state.beta1,
                            state.beta2,
                            state.eps,
                            bc1,
                            bc2,
                        );
                    }
                }
                sparse_adam(&mut params.embedding.word, &grads.embedding.word, &mut state.word, lr, state.beta1, state.beta2, state.eps, bc1, bc2)?;
                sparse_adam(&mut params.embedding.ngram, &grads.embedding.ngram, &mut state.ngram, lr, state.beta1, state.beta2, state.eps, bc1, bc2)?;
                Ok(())
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    mom: &mut Moments,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..param.len() {
        let g = grad[i];
        mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
        mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
        let m_hat = mom.m[i] / bc1;
        let v_hat = mom.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn row_mut<'a>(table: &'a mut Matrix, id: u32, op: &'static str) -> Result<&'a mut [f64]> {
    let cols = table.cols();
    let rows = table.rows();
    if id as usize >= rows {
        return Err(Error::InvalidInput(format!("{op}: row {id} outside table of {rows} rows")));
    }
    Ok(&mut table.data_mut()[id as usize * cols..(id as usize + 1) * cols])
}

fn sparse_sgd(table: &mut Matrix, grads: &HashMap<u32, Vec<f64>>, lr: f64) -> Result<()> {
    // Rows are disjoint, so map iteration order cannot affect the result.
    for (&id, grad) in grads {
        let row = row_mut(table, id, "sgd_step")?;
        for (p, &g) in row.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sparse_adam(
    table: &mut Matrix,
    grads: &HashMap<u32, Vec<f64>>,
    moments: &mut HashMap<u32, Moments>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) -> Result<()> {
    for (&id, grad) in grads {
        let row = row_mut(table, id, "adam_step")?;
        let mom = moments.entry(id).or_insert_with(|| Moments::zeros(grad.len()));
        adam_update(row, grad, mom, lr, beta1, beta2, eps, bc1, bc2);
    }
    Ok(())
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_macro_f1: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Documents per split after internal partitioning.
    pub split_sizes: [usize; 3],
}

struct Encoded {
    tokens: Vec<TokenRef>,
    label: Label,
}

fn prepare_tokens(docs: &[Document], what: &str) -> Result<Vec<(Vec<String>, Label)>> {
    let mut out = Vec::with_capacity(docs.len());
    let mut dropped = 0usize;
    for (i, doc) in docs.iter().enumerate() {
        let label = doc
            .label
            .ok_or_else(|| Error::Data(format!("{what} document {i} has no label")))?;
        let tokens = tokenize(&normalize(&doc.text));
        if tokens.is_empty() {
            dropped += 1;
            continue;
        }
        out.push((tokens, label));
    }
    if dropped > 0 {
        log::warn!("{what}: dropped {dropped} documents with no tokens");
    }
    Ok(out)
}

fn encode_docs(vocab: &Vocabulary, docs: &[(Vec<String>, Label)]) -> Vec<Encoded> {
    docs.iter()
        .map(|(tokens, label)| Encoded { tokens: vocab.encode(tokens), label: *label })
        .collect()
}

fn eval_encoded(
    model: &Model,
    docs: &[Encoded],
    gamma: f64,
    alpha: &[f64; N_CLASSES],
) -> Result<(f64, f64, [[u64; N_CLASSES]; N_CLASSES])> {
    let mut loss_sum = 0.0;
    let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
    for doc in docs {
        let out = model.forward(&doc.tokens)?;
        loss_sum += focal_loss(&out.probs, doc.label, gamma, alpha)?;
        confusion[doc.label.index()][out.label().index()] += 1;
    }
    let (_, _, macro_f1) = metrics_from_confusion(&confusion);
    Ok((loss_sum / docs.len() as f64, macro_f1, confusion))
}

/// Splits the corpus per the config ratios, builds the vocabulary from the
/// training portion, and runs the optimizer loop. The returned model carries
/// the parameters of the best validation epoch (macro-F1, ties to the earlier
/// epoch; falls back to train loss when the validation fraction is zero).
pub fn train(
    corpus: &[Document],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    let [train_docs, val_docs, test_docs] = split(corpus, config.split, config.seed)?;
    let split_sizes = [train_docs.len(), val_docs.len(), test_docs.len()];
    let train_tokens = prepare_tokens(&train_docs, "train")?;
    if train_tokens.is_empty() {
        return Err(Error::Data("no trainable documents after preprocessing".into()));
    }
    let val_tokens = prepare_tokens(&val_docs, "validation")?;
    let vocab = Vocabulary::build(
        train_tokens.iter().map(|(tokens, _)| tokens.iter().map(String::as_str)),
        config.vocab.clone(),
    )?;
    let train_set = encode_docs(&vocab, &train_tokens);
    let val_set = encode_docs(&vocab, &val_tokens);

    let mut model = Model::init(model_config.clone(), vocab, config.seed)?;
    let mut optimizer = Optimizer::new(config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, ModelParams)> = None;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_train_loss = f64::INFINITY;

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in indices.chunks(config.batch_size).enumerate() {
            let mut grads = ModelGrads::default();
            let mut batch_loss = 0.0;
            for &doc_idx in batch {
                let doc = &train_set[doc_idx];
                let step = (|| -> Result<f64> {
                    let (out, cache) = model.forward_cached(&doc.tokens)?;
                    let (loss, dprobs) =
                        focal_loss_grad(&out.probs, doc.label, config.gamma, &config.alpha)?;
                    grads.accumulate(model.backward_from(&cache, dprobs)?)?;
                    Ok(loss)
                })();
                batch_loss += step.map_err(|e| diverged(epoch, batch_no, e))?;
            }
            if !batch_loss.is_finite() {
                return Err(diverged(
                    epoch,
                    batch_no,
                    Error::Numeric(format!("batch loss {batch_loss}")),
                ));
            }
            epoch_loss += batch_loss;
            grads.scale(1.0 / batch.len() as f64);
            optimizer.step(model.params_mut(), &grads, config.learning_rate)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let (val_loss, val_macro_f1) = if val_set.is_empty() {
            (None, None)
        } else {
            let (loss, f1, _) = eval_encoded(&model, &val_set, config.gamma, &config.alpha)?;
            (Some(loss), Some(f1))
        };
        history.push(EpochRecord { epoch, train_loss, val_loss, val_macro_f1 });
        let improved = match val_macro_f1 {
            Some(f1) => f1 > best_f1,
            None => train_loss < best_train_loss,
        };
        if improved {
            best_f1 = val_macro_f1.unwrap_or(best_f1);
            best_train_loss = train_loss.min(best_train_loss);
            best = Some((epoch, model.params().clone()));
        }
    }
    let (best_epoch, best_params) = best.expect("at least one epoch ran");
    *model.params_mut() = best_params;
    Ok(TrainOutcome { model, history, best_epoch, split_sizes })
}

fn diverged(epoch: usize, batch: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(_) | Error::Numeric(_) => Error::Numeric(format!(
            "training diverged at epoch {epoch}, batch {batch}: {err}"
        )),
        other => other,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub std_s: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: [ClassMetrics; N_CLASSES],
    pub macro_f1: f64,
    /// confusion[actual][predicted] in {negative, positive} order.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub latency: LatencyStats,
}

fn metrics_from_confusion(
    confusion: &[[u64; N_CLASSES]; N_CLASSES],
) -> (f64, [ClassMetrics; N_CLASSES], f64) {
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..N_CLASSES).map(|k| confusion[k][k]).sum();
    let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let metrics = std::array::from_fn(|k| {
        let predicted: u64 = (0..N_CLASSES).map(|a| confusion[a][k]).sum();
        let actual: u64 = confusion[k].iter().sum();
        let precision = ratio(confusion[k][k], predicted);
        let recall = ratio(confusion[k][k], actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics { label: Label::from_index(k).expect("class index"), precision, recall, f1 }
    });
    let macro_f1 = metrics.iter().map(|m| m.f1).sum::<f64>() / N_CLASSES as f64;
    (accuracy, metrics, macro_f1)
}

const LATENCY_MIN_SAMPLES: usize = 30;
const LATENCY_WARMUP: usize = 3;

/// Classification metrics plus single-threaded per-document latency over at
/// least 30 timed forwards (documents are cycled when the corpus is smaller),
/// with warmup runs excluded.
pub fn evaluate(model: &Model, corpus: &[Document]) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot evaluate an empty corpus".into()));
    }
    let mut encoded = Vec::with_capacity(corpus.len());
    for (i, doc) in corpus.iter().enumerate() {
        let label = doc
            .label
            .ok_or_else(|| Error::Data(format!("evaluation document {i} has no label")))?;
        let tokens = tokenize(&normalize(&doc.text));
        if tokens.is_empty() {
            return Err(Error::Data(format!("evaluation document {i} has no tokens")));
        }
        encoded.push(Encoded { tokens: model.vocab().encode(&tokens), label });
    }
    for _ in 0..LATENCY_WARMUP {
        model.forward(&encoded[0].tokens)?;
    }
    let n = encoded.len();
    let samples = n.max(LATENCY_MIN_SAMPLES);
    let mut timings = Vec::with_capacity(samples);
    let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
    for s in 0..samples {
        let doc = &encoded[s % n];
        let started = Instant::now();
        let out = model.forward(&doc.tokens)?;
        timings.push(started.elapsed().as_secs_f64());
        if s < n {
            confusion[doc.label.index()][out.label().index()] += 1;
        }
    }
    let mean = timings.iter().sum::<f64>() / timings.len() as f64;
    let var = timings.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>()
        / (timings.len() - 1) as f64;
    let (accuracy, per_class, macro_f1) = metrics_from_confusion(&confusion);
    Ok(EvalReport {
        accuracy,
        per_class,
        macro_f1,
        confusion,
        latency: LatencyStats { mean_s: mean, std_s: var.sqrt(), samples },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckGroup {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GradCheckGroup>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

// Relative error with a floor so near-zero pairs compare absolutely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Verifies every analytic gradient against central finite differences on a
/// small seeded model. Dense groups and word rows are checked exhaustively;
/// n-gram buckets are checked on the rows the probe input touches.
pub fn grad_check(
    config: &ModelConfig,
    seed: u64,
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("finite-difference epsilon must be positive, got {eps}")));
    }
    if !(tolerance > 0.0) || !tolerance.is_finite() {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    let vocab = Vocabulary::from_entries(
        vec![("máy".into(), 9), ("tốt".into(), 7), ("quá".into(), 6), ("tệ".into(), 5)],
        VocabOptions { min_count: 1, bucket_count: 32, ..VocabOptions::default() },
    );
    let words = ["máy", "tốt", "zz"];
    let tokens: Vec<TokenRef> = words.iter().map(|w| vocab.encode_token(w)).collect();
    let label = Label::Positive;
    let (gamma, alpha) = (2.0, [1.0, 1.0]);
    let mut model = Model::init(config.clone(), vocab, seed)?;

    let (out, cache) = model.forward_cached(&tokens)?;
    let (_, dprobs) = focal_loss_grad(&out.probs, label, gamma, &alpha)?;
    let analytic = model.backward_from(&cache, dprobs)?;

    let d_emb = model.params().embedding.d_emb();
    // (group, entries as flat indices into the group's matrix)
    let mut plan: Vec<(String, Vec<usize>)> = Vec::new();
    let word_len = model.params().embedding.word.data().len();
    plan.push(("embedding.word".into(), (0..word_len).collect()));
    let mut touched: Vec<u32> = analytic.embedding.ngram.keys().copied().collect();
    touched.sort_unstable();
    let ngram_entries: Vec<usize> = touched
        .iter()
        .flat_map(|&row| (0..d_emb).map(move |j| row as usize * d_emb + j))
        .collect();
    plan.push(("embedding.ngram".into(), ngram_entries));
    for (name, matrix) in model.params().dense_entries() {
        plan.push((name, (0..matrix.data().len()).collect()));
    }

    let mut groups = Vec::with_capacity(plan.len());
    let mut overall: f64 = 0.0;
    for (name, entries) in plan {
        let mut group_max: f64 = 0.0;
        let count = entries.len();
        for idx in entries {
            let a = analytic_entry(&analytic, &name, idx, d_emb);
            let plus = perturbed_loss(&mut model, &name, idx, eps, &tokens, label, gamma, &alpha)?;
            let minus = perturbed_loss(&mut model, &name, idx, -eps, &tokens, label, gamma, &alpha)?;
            let numeric = (plus - minus) / (2.0 * eps);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {name}[{idx}]: analytic {a}, numeric {numeric}"
                )));
            }
            group_max = group_max.max(rel_err(a, numeric));
        }
        overall = overall.max(group_max);
        groups.push(GradCheckGroup { name, entries: count, max_rel_err: group_max });
    }
    Ok(GradCheckReport { groups, max_rel_err: overall, tolerance, passed: overall < tolerance })
}

fn analytic_entry(grads: &ModelGrads, group: &str, idx: usize, d_emb: usize) -> f64 {
    match group {
        "embedding.word" => grads
            .embedding
            .word
            .get(&((idx / d_emb) as u32))
            .map_or(0.0, |row| row[idx % d_emb]),
        "embedding.ngram" => grads
            .embedding
            .ngram
            .get(&((idx / d_emb) as u32))
            .map_or(0.0, |row| row[idx % d_emb]),
        _ => grads.dense.get(group).map_or(0.0, |m| m.data()[idx]),
    }
}

#[allow(clippy::too_many_arguments)]
fn perturbed_loss(
    model: &mut Model,
    group: &str,
    idx: usize,
    delta: f64,
    tokens: &[TokenRef],
    label: Label,
    gamma: f64,
    alpha: &[f64; N_CLASSES],
) -> Result<f64> {
    nudge(model.params_mut(), group, idx, delta)?;
    let result = (|| {
        let out = model.forward(tokens)?;
        focal_loss(&out.probs, label, gamma, alpha)
    })();
    nudge(model.params_mut(), group, idx, -delta)?;
    result
}

fn nudge(params: &mut ModelParams, group: &str, idx: usize, delta: f64) -> Result<()> {
    let matrix = match group {
        "embedding.word" => &mut params.embedding.word,
        "embedding.ngram" => &mut params.embedding.ngram,
        _ => {
            let mut entries = params.dense_entries_mut();
            let pos = entries
                .iter()
                .position(|(n, _)| n == group)
                .ok_or_else(|| Error::Config(format!("unknown parameter group {group}")))?;
            entries.swap_remove(pos).1
        }
    };
    matrix.data_mut()[idx] += delta;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pe::FusionMode;
    use crate::tensor::softmax_rows;

    fn doc(text: &str, label: Label) -> Document {
        Document { text: text.into(), label: Some(label) }
    }

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            d_emb: 8,
            d_pe: 8,
            heads: 4,
            se_reduction: 4,
            max_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn gamma_zero_reduces_to_cross_entropy() {
        for p1 in [0.1, 0.25, 0.5, 0.75, 0.9, 0.99] {
            let p = [1.0 - p1, p1];
            let focal = focal_loss(&p, Label::Positive, 0.0, &[1.0, 1.0]).unwrap();
            assert!((focal - (-p1.ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_known_value_and_edges() {
        // 0.01 · (−ln 0.9)
        let loss = focal_loss(&[0.1, 0.9], Label::Positive, 2.0, &[1.0, 1.0]).unwrap();
        assert!((loss - 1.0536e-3).abs() < 1e-7, "got {loss}");
        let perfect = focal_loss(&[0.0, 1.0], Label::Positive, 2.0, &[1.0, 1.0]).unwrap();
        assert_eq!(perfect, 0.0);
        // The clamp keeps a zero-probability target finite.
        let worst = focal_loss(&[1.0, 0.0], Label::Positive, 2.0, &[1.0, 1.0]).unwrap();
        assert!(worst.is_finite() && worst > 20.0);
        let weighted = focal_loss(&[0.1, 0.9], Label::Positive, 2.0, &[1.0, 0.5]).unwrap();
        assert!((weighted - loss * 0.5).abs() < 1e-15);
    }

    #[test]
    fn focal_is_monotone_in_confidence_and_gamma() {
        let mut prev = f64::INFINITY;
        for p1 in [0.05, 0.2, 0.4, 0.6, 0.8, 0.95, 0.999] {
            let loss = focal_loss(&[1.0 - p1, p1], Label::Positive, 2.0, &[1.0, 1.0]).unwrap();
            assert!(loss < prev, "loss must decrease as p_y grows");
            prev = loss;
        }
        let mut prev = f64::INFINITY;
        for gamma in [0.0, 1.0, 2.0, 5.0] {
            let loss = focal_loss(&[0.1, 0.9], Label::Positive, gamma, &[1.0, 1.0]).unwrap();
            assert!(loss < prev, "raising gamma must damp an easy example");
            prev = loss;
        }
    }

    #[test]
    fn invalid_probability_vectors_are_rejected() {
        for p in [[0.3, 0.3], [-0.1, 1.1], [f64::NAN, 0.5], [0.2, 0.9]] {
            assert!(focal_loss(&p, Label::Positive, 2.0, &[1.0, 1.0]).is_err(), "{p:?}");
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let eps = 1e-7;
        for gamma in [0.0, 0.5, 1.0, 2.0, 5.0] {
            for p1 in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
                let (_, dprobs) =
                    focal_loss_grad(&[1.0 - p1, p1], Label::Positive, gamma, &[1.0, 1.0]).unwrap();
                let f = |p: f64| -1.0 * (1.0 - p).powf(gamma) * p.ln();
                let numeric = (f(p1 + eps) - f(p1 - eps)) / (2.0 * eps);
                let rel = rel_err(dprobs[1], numeric);
                assert!(rel < 1e-6, "gamma {gamma} p {p1}: {} vs {numeric}", dprobs[1]);
                assert_eq!(dprobs[0], 0.0);
            }
        }
        // p_y = 1: zero pull for positive gamma, plain −α for gamma 0.
        let (_, d) = focal_loss_grad(&[0.0, 1.0], Label::Positive, 2.0, &[1.0, 1.0]).unwrap();
        assert_eq!(d[1], 0.0);
        let (_, d) = focal_loss_grad(&[0.0, 1.0], Label::Positive, 0.0, &[1.0, 1.0]).unwrap();
        assert!((d[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_corpus_is_a_fixpoint() {
        let corpus = vec![
            doc("tốt. rất tốt.", Label::Positive),
            doc("tệ quá", Label::Negative),
            doc("ổn", Label::Positive),
            doc("chán. quá chán.", Label::Negative),
        ];
        let (out, stats) = balance_corpus(&corpus, DEFAULT_LENGTH_THRESHOLD).unwrap();
        assert_eq!(out.len(), corpus.len());
        for (a, b) in out.iter().zip(&corpus) {
            assert_eq!(a.text, b.text);
            assert_eq!(a.label, b.label);
        }
        assert_eq!(stats.passes, 0);
        assert_eq!(stats.duplicated + stats.segmented, 0);
    }

    #[test]
    fn short_minority_documents_are_duplicated_to_parity() {
        let mut corpus: Vec<Document> =
            (0..10).map(|i| doc(&format!("tốt {i}"), Label::Positive)).collect();
        for i in 0..5 {
            corpus.push(doc(&format!("tệ {i}"), Label::Negative));
        }
        let (out, stats) = balance_corpus(&corpus, DEFAULT_LENGTH_THRESHOLD).unwrap();
        let neg = out.iter().filter(|d| d.label == Some(Label::Negative)).count();
        let pos = out.iter().filter(|d| d.label == Some(Label::Positive)).count();
        assert_eq!(pos, 10, "majority class must be untouched");
        assert_eq!(neg, 10, "each short negative should be duplicated once");
        assert_eq!(stats.duplicated, 5);
        assert_eq!(stats.segmented, 0);
        assert_eq!(stats.minority_label, Label::Negative);
        assert!((stats.final_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multi_sentence_minority_documents_are_segmented() {
        let corpus = vec![
            doc("tốt a", Label::Positive),
            doc("tốt b", Label::Positive),
            doc("giao chậm. đóng gói tệ.", Label::Negative),
        ];
        let (out, stats) = balance_corpus(&corpus, DEFAULT_LENGTH_THRESHOLD).unwrap();
        let neg: Vec<&Document> =
            out.iter().filter(|d| d.label == Some(Label::Negative)).collect();
        assert_eq!(neg.len(), 2);
        assert_eq!(neg[0].text, "giao chậm.");
        assert_eq!(neg[1].text, "đóng gói tệ.");
        assert_eq!(stats.segmented, 1);
        // Original corpus order is preserved around the expansion.
        assert_eq!(out[0].text, "tốt a");
        assert_eq!(out[1].text, "tốt b");
    }

    #[test]
    fn balance_rejects_degenerate_corpora() {
        let single = vec![doc("tốt", Label::Positive); 4];
        assert!(balance_corpus(&single, 2).is_err());
        let unlabeled = vec![doc("tốt", Label::Positive), Document { text: "?".into(), label: None }];
        assert!(balance_corpus(&unlabeled, 2).is_err());
    }

    #[test]
    fn balance_never_touches_labels_or_majority() {
        let mut corpus: Vec<Document> =
            (0..40).map(|i| doc(&format!("tốt {i}. thật tốt."), Label::Positive)).collect();
        for i in 0..11 {
            corpus.push(doc(&format!("tệ {i}. rất tệ. chán."), Label::Negative));
        }
        let (out, stats) = balance_corpus(&corpus, DEFAULT_LENGTH_THRESHOLD).unwrap();
        let pos_after: Vec<&Document> =
            out.iter().filter(|d| d.label == Some(Label::Positive)).collect();
        assert_eq!(pos_after.len(), 40);
        for (i, d) in pos_after.iter().enumerate() {
            assert_eq!(d.text, format!("tốt {i}. thật tốt."), "majority doc rewritten");
        }
        assert!(out.iter().all(|d| d.label.is_some()));
        assert!(stats.final_ratio >= 0.9);
        let neg_after = out.len() - 40;
        assert_eq!(neg_after, stats.minority_after);
    }

    #[test]
    fn split_puts_everything_in_train_when_asked() {
        let corpus: Vec<Document> = (0..10)
            .map(|i| doc(&format!("d{i}"), if i % 2 == 0 { Label::Positive } else { Label::Negative }))
            .collect();
        let [train, val, test] = split(&corpus, [1.0, 0.0, 0.0], 7).unwrap();
        assert_eq!(train.len(), 10);
        assert!(val.is_empty() && test.is_empty());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let mut corpus = Vec::new();
        for i in 0..70 {
            corpus.push(doc(&format!("p{i}"), Label::Positive));
        }
        for i in 0..30 {
            corpus.push(doc(&format!("n{i}"), Label::Negative));
        }
        let ratios = [0.64, 0.16, 0.20];
        let [train, val, test] = split(&corpus, ratios, 123).unwrap();
        // Largest-remainder arithmetic: 70 → 45/11/14, 30 → 19/5/6.
        let count = |part: &[Document], label: Label| {
            part.iter().filter(|d| d.label == Some(label)).count()
        };
        assert_eq!(count(&train, Label::Positive), 45);
        assert_eq!(count(&val, Label::Positive), 11);
        assert_eq!(count(&test, Label::Positive), 14);
        assert_eq!(count(&train, Label::Negative), 19);
        assert_eq!(count(&val, Label::Negative), 5);
        assert_eq!(count(&test, Label::Negative), 6);
        // Disjoint and exhaustive.
        let mut seen: Vec<&str> = train
            .iter()
            .chain(&val)
            .chain(&test)
            .map(|d| d.text.as_str())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 100);
        let [train2, val2, test2] = split(&corpus, ratios, 123).unwrap();
        for (a, b) in [(&train, &train2), (&val, &val2), (&test, &test2)] {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.text, y.text);
            }
        }
    }

    #[test]
    fn positive_ratio_with_empty_split_is_an_error() {
        let corpus = vec![doc("a", Label::Positive), doc("b", Label::Negative)];
        assert!(split(&corpus, [0.64, 0.16, 0.20], 1).is_err());
        let four = vec![
            doc("a", Label::Positive),
            doc("b", Label::Positive),
            doc("c", Label::Negative),
            doc("d", Label::Negative),
        ];
        let [train, val, test] = split(&four, [0.5, 0.5, 0.0], 1).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (2, 2, 0));
        assert!(split(&corpus, [0.6, 0.6, -0.2], 1).is_err());
        assert!(split(&[], [1.0, 0.0, 0.0], 1).is_err());
    }

    fn toy_corpus() -> Vec<Document> {
        // Keyword-separable by design; filler varies so memorization is easy
        // but not degenerate.
        let fillers = ["giao hàng nhanh", "đóng gói ổn", "shop phản hồi", "dùng một tuần"];
        let mut corpus = Vec::new();
        for i in 0..16 {
            let f = fillers[i % fillers.len()];
            corpus.push(doc(&format!("{f} máy tốt lắm {i}"), Label::Positive));
            corpus.push(doc(&format!("{f} quá tệ hỏng {i}"), Label::Negative));
        }
        corpus
    }

    fn toy_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 7,
            split: [1.0, 0.0, 0.0],
            vocab: VocabOptions { min_count: 1, bucket_count: 256, ..VocabOptions::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn toy_corpus_is_overfit_within_two_hundred_epochs() {
        let corpus = toy_corpus();
        let outcome = train(&corpus, &tiny_model_config(), &toy_train_config()).unwrap();
        assert_eq!(outcome.split_sizes, [32, 0, 0]);
        assert!(
            outcome.history[0].train_loss < (2.0_f64).ln(),
            "first-epoch mean loss {} should beat the coin-flip bound",
            outcome.history[0].train_loss
        );
        let report = evaluate(&outcome.model, &corpus).unwrap();
        assert_eq!(report.accuracy, 1.0, "toy corpus must be memorized");
        assert_eq!(report.macro_f1, 1.0);
    }

    #[test]
    fn same_seed_gives_identical_history() {
        let corpus = toy_corpus();
        let config = TrainConfig { epochs: 5, ..toy_train_config() };
        let a = train(&corpus, &tiny_model_config(), &config).unwrap();
        let b = train(&corpus, &tiny_model_config(), &config).unwrap();
        assert_eq!(a.history, b.history, "training must be seed-deterministic");
        assert_eq!(a.best_epoch, b.best_epoch);
        let c = train(
            &corpus,
            &tiny_model_config(),
            &TrainConfig { seed: 8, ..config },
        )
        .unwrap();
        assert_ne!(a.history, c.history, "different seed should change the run");
    }

    #[test]
    fn validation_checkpoint_tracks_best_macro_f1() {
        // With a validation set present the recorded best epoch must carry
        // the highest macro-F1, earliest on ties.
        let corpus = toy_corpus();
        let config = TrainConfig {
            epochs: 6,
            split: [0.75, 0.25, 0.0],
            ..toy_train_config()
        };
        let outcome = train(&corpus, &tiny_model_config(), &config).unwrap();
        let best_f1 = outcome.history[outcome.best_epoch - 1].val_macro_f1.unwrap();
        for record in &outcome.history {
            let f1 = record.val_macro_f1.unwrap();
            assert!(f1 <= best_f1);
            if record.epoch < outcome.best_epoch {
                assert!(f1 < best_f1, "an earlier tie should have won");
            }
        }
    }

    #[test]
    fn single_sgd_step_decreases_single_example_loss() {
        let config = tiny_model_config();
        let vocab = Vocabulary::from_entries(
            vec![("máy".into(), 9), ("tốt".into(), 7)],
            VocabOptions { min_count: 1, bucket_count: 64, ..VocabOptions::default() },
        );
        let mut model = Model::init(config, vocab, 3).unwrap();
        let tokens = model.vocab().encode(&["máy".into(), "tốt".into()]);
        let label = Label::Positive;
        let (out, cache) = model.forward_cached(&tokens).unwrap();
        let (before, dprobs) = focal_loss_grad(&out.probs, label, 2.0, &[1.0, 1.0]).unwrap();
        let grads = model.backward_from(&cache, dprobs).unwrap();
        let mut sgd = Optimizer::Sgd;
        sgd.step(model.params_mut(), &grads, 1e-4).unwrap();
        let after = focal_loss(&model.forward(&tokens).unwrap().probs, label, 2.0, &[1.0, 1.0]).unwrap();
        assert!(after < before, "loss went {before} -> {after}");
    }

    #[test]
    fn training_divergence_is_reported_with_location() {
        // Layer norm keeps merely-huge parameters finite, so overflow f64
        // outright to trigger the non-finite guards.
        let corpus = toy_corpus();
        let config = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e200,
            epochs: 3,
            ..toy_train_config()
        };
        match train(&corpus, &tiny_model_config(), &config) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("epoch"), "missing location: {msg}"),
            Err(other) => panic!("expected numeric divergence error, got {other}"),
            Ok(_) => panic!("training at lr 1e12 should diverge"),
        }
    }

    #[test]
    fn degenerate_model_metrics_match_closed_form() {
        let config = tiny_model_config();
        let vocab = Vocabulary::from_entries(
            vec![("a".into(), 9)],
            VocabOptions { min_count: 1, bucket_count: 64, ..VocabOptions::default() },
        );
        let mut model = Model::init(config, vocab, 5).unwrap();
        // Zero features into the head plus a huge positive bias: the model
        // predicts positive regardless of input.
        let d_model = model.config().d_model();
        model.params_mut().classifier_w = Matrix::zeros(d_model, 2).unwrap();
        model.params_mut().classifier_b = Matrix::from_rows(&[vec![0.0, 10.0]]).unwrap();
        let mut corpus = Vec::new();
        for i in 0..16 {
            corpus.push(doc(&format!("a {i}"), Label::Positive));
            corpus.push(doc(&format!("a {i}"), Label::Negative));
        }
        let report = evaluate(&model, &corpus).unwrap();
        assert!((report.accuracy - 0.5).abs() < 1e-12);
        assert!((report.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        let neg = &report.per_class[0];
        assert_eq!((neg.precision, neg.recall, neg.f1), (0.0, 0.0, 0.0));
        let pos = &report.per_class[1];
        assert!((pos.precision - 0.5).abs() < 1e-12);
        assert!((pos.recall - 1.0).abs() < 1e-12);
        assert!((pos.f1 - 2.0 / 3.0).abs() < 1e-12);
        let total: u64 = report.confusion.iter().flatten().sum();
        assert_eq!(total, 32);
        assert!(report.latency.samples >= 30);
        assert!(report.latency.mean_s > 0.0);
        assert!(report.latency.std_s.is_finite());
    }

    #[test]
    fn evaluate_rejects_empty_or_unlabeled_corpora() {
        let vocab = Vocabulary::from_entries(
            vec![("a".into(), 9)],
            VocabOptions { min_count: 1, bucket_count: 64, ..VocabOptions::default() },
        );
        let model = Model::init(tiny_model_config(), vocab, 5).unwrap();
        assert!(evaluate(&model, &[]).is_err());
        let unlabeled = vec![Document { text: "a".into(), label: None }];
        assert!(evaluate(&model, &unlabeled).is_err());
    }

    #[test]
    fn classifier_head_gradient_matches_fd_tightly() {
        // Isolated linear layer: loss = focal(softmax(p·W + b)). The
        // analytic path must agree with finite differences to 1e-6.
        let pooled = Matrix::from_rows(&[vec![0.3, -0.7, 1.1, 0.05]]).unwrap();
        let w = Matrix::from_fn(4, 2, |i, j| 0.1 * (i as f64 + 1.0) * if j == 0 { 1.0 } else { -0.5 })
            .unwrap();
        let b = Matrix::from_rows(&[vec![0.02, -0.01]]).unwrap();
        let label = Label::Positive;
        let loss_of = |w: &Matrix, b: &Matrix| -> f64 {
            let logits = pooled.matmul(w).unwrap().add(b).unwrap();
            let probs = softmax_rows(&logits).unwrap();
            focal_loss(&[probs.get(0, 0), probs.get(0, 1)], label, 2.0, &[1.0, 1.0]).unwrap()
        };
        // Analytic: dlogits via softmax backward of the focal pull.
        let logits = pooled.matmul(&w).unwrap().add(&b).unwrap();
        let probs = softmax_rows(&logits).unwrap();
        let (_, dprobs) =
            focal_loss_grad(&[probs.get(0, 0), probs.get(0, 1)], label, 2.0, &[1.0, 1.0]).unwrap();
        let dlogits = crate::tensor::softmax_rows_backward(
            &probs,
            &Matrix::new(1, 2, dprobs.to_vec()).unwrap(),
        )
        .unwrap();
        let dw = pooled.matmul_at(&dlogits).unwrap();
        let eps = 1e-5;
        for i in 0..4 {
            for j in 0..2 {
                let mut wp = w.clone();
                wp.data_mut()[i * 2 + j] += eps;
                let mut wm = w.clone();
                wm.data_mut()[i * 2 + j] -= eps;
                let numeric = (loss_of(&wp, &b) - loss_of(&wm, &b)) / (2.0 * eps);
                assert!(
                    rel_err(dw.get(i, j), numeric) < 1e-6,
                    "W[{i}][{j}]: {} vs {numeric}",
                    dw.get(i, j)
                );
            }
        }
    }

    #[test]
    fn full_model_grad_check_passes() {
        let report = grad_check(&tiny_model_config(), 11, 1e-5, 1e-4).unwrap();
        assert!(
            report.passed,
            "max rel err {} across {:?}",
            report.max_rel_err,
            report
                .groups
                .iter()
                .map(|g| (g.name.clone(), g.max_rel_err))
                .collect::<Vec<_>>()
        );
        // Every dense group plus both embedding tables is covered.
        assert!(report.groups.iter().any(|g| g.name == "embedding.word"));
        assert!(report.groups.iter().any(|g| g.name == "attention.head00.wq"));
        assert!(report.groups.iter().any(|g| g.name == "classifier.b"));
    }

    #[test]
    fn grad_check_covers_disabled_assembly_too() {
        let config = ModelConfig {
            use_ffn: false,
            use_residual_norm: false,
            ..tiny_model_config()
        };
        let report = grad_check(&config, 13, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert!(!report.groups.iter().any(|g| g.name.starts_with("ffn")));
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        assert!(grad_check(&tiny_model_config(), 1, 0.0, 1e-4).is_err());
        assert!(grad_check(&tiny_model_config(), 1, f64::NAN, 1e-4).is_err());
        assert!(grad_check(&tiny_model_config(), 1, 1e-5, 0.0).is_err());
    }

    #[test]
    fn untouched_embedding_rows_get_no_gradient() {
        let vocab = Vocabulary::from_entries(
            vec![("máy".into(), 9), ("tốt".into(), 7), ("chưa".into(), 6)],
            VocabOptions { min_count: 1, bucket_count: 64, ..VocabOptions::default() },
        );
        let model = Model::init(tiny_model_config(), vocab, 2).unwrap();
        let tokens = model.vocab().encode(&["máy".into()]);
        let (out, cache) = model.forward_cached(&tokens).unwrap();
        let (_, dprobs) = focal_loss_grad(&out.probs, Label::Negative, 2.0, &[1.0, 1.0]).unwrap();
        let grads = model.backward_from(&cache, dprobs).unwrap();
        assert!(grads.embedding.word.contains_key(&0), "touched row must appear");
        assert!(!grads.embedding.word.contains_key(&1), "untouched row must be absent");
        assert!(!grads.embedding.word.contains_key(&2));
        let touched: std::collections::HashSet<u32> =
            tokens[0].ngram_buckets.iter().copied().collect();
        assert!(grads.embedding.ngram.keys().all(|k| touched.contains(k)));
    }

    #[test]
    fn train_config_validation_catches_bad_values() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        assert!(TrainConfig { gamma: -1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { split: [0.5, 0.5, 0.5], ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..ok }.validate().is_err());
    }

    #[test]
    fn adam_and_sgd_paths_both_learn_add_fusion_models() {
        // Exercises the add-fusion assembly end to end as well.
        let corpus = toy_corpus();
        let model_config = ModelConfig {
            fusion: FusionMode::Add,
            d_emb: 8,
            d_pe: 8,
            heads: 4,
            se_reduction: 4,
            max_len: 16,
            ..ModelConfig::default()
        };
        let config = TrainConfig { epochs: 30, ..toy_train_config() };
        let outcome = train(&corpus, &model_config, &config).unwrap();
        let first = outcome.history.first().unwrap().train_loss;
        let last = outcome.history.last().unwrap().train_loss;
        assert!(last < first, "training should reduce loss: {first} -> {last}");
    }
}
