//! Mini-batch Adam training with dropout and early stopping.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::ChannelSelection;
use crate::eval::{accuracy, build_groups, recall_at_k, EvalError};
use crate::knowledge::{KnowledgeDef, KnowledgeTable};
use crate::matcher::{
    backprop_example, predict, EncodedExample, GradBuffers, Mode, ModelParams, ParamKind,
};
use crate::tensor::tape::PROB_CLAMP;
use crate::tensor::{Activation, Real, TensorError};
use crate::text::{load_embeddings, DataError, DatasetRecord, EmbeddingTable, Vocabulary};

/// Validation metric driving early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    #[default]
    Accuracy,
    /// R_n@1 over groups of `metric_n` consecutive records with exactly one
    /// positive (label 1) per group.
    Recall,
}

/// All hyperparameters and schedule knobs. The JSON config file mirrors
/// these field names exactly (`C` for the class count).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Word embedding dimension.
    pub d: usize,
    /// GRU hidden state dimension.
    pub m: usize,
    /// Fixed text length I = J after padding/truncation.
    pub max_len: usize,
    /// Number of classes.
    #[serde(rename = "C", alias = "c")]
    pub c: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    /// Dropout rate on the feature vector before the MLP, in [0, 1).
    pub dropout: Real,
    /// `h` applied to all three similarity channels: relu or tanh.
    pub activation: Activation,
    /// Activation after the convolution.
    pub conv_activation: Activation,
    pub freeze_embeddings: bool,
    pub freeze_knowledge: bool,
    pub max_epochs: usize,
    /// Early stopping: epochs without improvement before training stops.
    pub patience: usize,
    pub seed: u64,
    /// MLP hidden layer width.
    pub hidden: usize,
    /// Convolution feature maps.
    pub feature_maps: usize,
    pub conv_window: (usize, usize),
    pub pool_window: (usize, usize),
    /// Defaults to the pool window (non-overlapping).
    pub pool_stride: Option<(usize, usize)>,
    pub channels: ChannelSelection,
    pub metric: MetricKind,
    /// Group size n when `metric` is recall.
    pub metric_n: usize,
    /// Optional global-norm gradient clipping threshold.
    pub grad_clip: Option<Real>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 100,
            m: 100,
            max_len: 200,
            c: 2,
            batch_size: 50,
            learning_rate: 0.01,
            dropout: 0.5,
            activation: Activation::Relu,
            conv_activation: Activation::Relu,
            freeze_embeddings: false,
            freeze_knowledge: false,
            max_epochs: 100,
            patience: 5,
            seed: 42,
            hidden: 50,
            feature_maps: 8,
            conv_window: (3, 3),
            pool_window: (3, 3),
            pool_stride: None,
            channels: ChannelSelection::Full,
            metric: MetricKind::Accuracy,
            metric_n: 10,
            grad_clip: None,
        }
    }
}

/// CNN hyperparameters in resolved form: exactly one convolution layer
/// followed by one max-pooling layer.
#[derive(Debug, Clone, Copy)]
pub struct CnnConfig {
    pub window: (usize, usize),
    pub feature_maps: usize,
    pub pool_window: (usize, usize),
    pub pool_stride: (usize, usize),
    pub activation: Activation,
}

impl TrainConfig {
    pub fn cnn(&self) -> CnnConfig {
        CnnConfig {
            window: self.conv_window,
            feature_maps: self.feature_maps,
            pool_window: self.pool_window,
            pool_stride: self.pool_stride.unwrap_or(self.pool_window),
            activation: self.conv_activation,
        }
    }

    /// Spatial dims after conv + pool on the `max_len x max_len` matrices.
    pub fn pooled_dims(&self) -> (usize, usize) {
        let cnn = self.cnn();
        let ch = self.max_len - cnn.window.0 + 1;
        let cw = self.max_len - cnn.window.1 + 1;
        (
            (ch - cnn.pool_window.0) / cnn.pool_stride.0 + 1,
            (cw - cnn.pool_window.1) / cnn.pool_stride.1 + 1,
        )
    }

    /// Length of the flattened feature vector v.
    pub fn feature_len(&self) -> usize {
        let (ph, pw) = self.pooled_dims();
        self.feature_maps * ph * pw
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |message: &str| {
            Err(TrainError::InvalidConfig {
                message: message.to_string(),
            })
        };
        if self.d == 0 || self.m == 0 || self.hidden == 0 || self.feature_maps == 0 {
            return bad("dimensions must be positive");
        }
        if self.c < 2 {
            return bad("C must be at least 2");
        }
        if self.max_len == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("max_len, batch_size, and max_epochs must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.activation == Activation::Sigmoid {
            return bad("channel activation must be relu or tanh");
        }
        let (cw, ch) = self.conv_window;
        if cw == 0 || ch == 0 || cw > self.max_len || ch > self.max_len {
            return bad("conv_window must fit within max_len");
        }
        let (conv_h, conv_w) = (self.max_len - cw + 1, self.max_len - ch + 1);
        let (pw, ph) = self.pool_window;
        if pw == 0 || ph == 0 || pw > conv_h || ph > conv_w {
            return bad("pool_window must fit within the convolution output");
        }
        if let Some((sw, sh)) = self.pool_stride {
            if sw == 0 || sh == 0 {
                return bad("pool_stride must be positive");
            }
        }
        if self.metric == MetricKind::Recall && self.metric_n < 2 {
            return bad("metric_n must be at least 2 for recall");
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return bad("grad_clip must be positive when set");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {message}")]
    InvalidConfig { message: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Cross entropy against a one-hot target: `-log(max(pred[label], 1e-12))`.
pub fn cross_entropy_loss(pred: &[Real], label: usize) -> TrainResult<Real> {
    if label >= pred.len() {
        return Err(TrainError::LabelOutOfRange {
            label,
            classes: pred.len(),
        });
    }
    Ok(-(pred[label].max(PROB_CLAMP).ln()))
}

/// Inverted dropout mask: entries are 0 with probability `rate`, else
/// `1/(1-rate)`, so inference needs no rescaling.
pub fn dropout_mask(dim: usize, rate: Real, rng: &mut dyn RngCore) -> Vec<Real> {
    if rate <= 0.0 {
        return vec![1.0; dim];
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    (0..dim)
        .map(|_| {
            if rng.random_range(0.0..1.0) < keep {
                scale
            } else {
                0.0
            }
        })
        .collect()
}

/// Adam moments per parameter tensor plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<Vec<Real>>,
    second: Vec<Vec<Real>>,
    step: u64,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
        AdamState {
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. Frozen groups (embeddings or
    /// knowledge when configured, the PAD embedding row always) are skipped
    /// entirely: no parameter change, no moment decay.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradBuffers) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = params.config.learning_rate;
        let freeze_emb = params.config.freeze_embeddings;
        let freeze_know = params.config.freeze_knowledge;
        let emb_dim = params.config.d;

        for id in params.ids().collect::<Vec<_>>() {
            let kind = params.kind(id);
            if (kind == ParamKind::Embedding && freeze_emb)
                || (kind == ParamKind::Knowledge && freeze_know)
            {
                continue;
            }
            let idx = id.index();
            let g = &grads.bufs()[idx];
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            let tensor = params.tensor_mut(id);
            let values = tensor.values_mut();
            // PAD row of the embedding table is pinned to zero.
            let skip_until = if kind == ParamKind::Embedding {
                emb_dim
            } else {
                0
            };
            for i in 0..values.len() {
                if i < skip_until {
                    continue;
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: Real,
    pub valid_metric: f64,
    pub elapsed_seconds: f64,
}

/// Best checkpoint plus the per-epoch history.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Everything `train` needs, assembled from raw records.
pub struct Prepared {
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub train: Vec<EncodedExample>,
    pub valid: Vec<EncodedExample>,
}

/// Builds vocabulary (training texts plus knowledge-definition words, so
/// knowledge vectors have embedding rows to average), embeddings (random or
/// from file), the knowledge table, and the encoded datasets.
pub fn prepare(
    config: TrainConfig,
    train_records: &[DatasetRecord],
    valid_records: &[DatasetRecord],
    knowledge_defs: &[KnowledgeDef],
    embeddings_path: Option<&std::path::Path>,
) -> TrainResult<Prepared> {
    config.validate()?;
    if train_records.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if valid_records.is_empty() {
        return Err(TrainError::EmptyDataset("valid"));
    }

    let mut vocab = Vocabulary::new();
    for rec in train_records {
        for tok in crate::text::tokenize(&rec.text_a) {
            vocab.add(&tok);
        }
        for tok in crate::text::tokenize(&rec.text_b) {
            vocab.add(&tok);
        }
    }
    for def in knowledge_defs {
        for word in &def.words {
            vocab.add(word);
        }
    }
    vocab.freeze();

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let trainable = !config.freeze_embeddings;
    let embeddings = match embeddings_path {
        Some(path) => load_embeddings(path, &vocab, config.d, &mut init_rng, trainable)?.0,
        None => EmbeddingTable::random(&vocab, config.d, &mut init_rng, trainable),
    };
    let knowledge = KnowledgeTable::build(
        knowledge_defs,
        &embeddings,
        &vocab,
        !config.freeze_knowledge,
    );

    let params = ModelParams::init(config, embeddings, knowledge, &mut init_rng)?;
    let train = encode_dataset(&params, &vocab, train_records);
    let valid = encode_dataset(&params, &vocab, valid_records);
    Ok(Prepared {
        vocab,
        params,
        train,
        valid,
    })
}

/// Encodes raw records against a trained (or freshly initialized) model's
/// vocabulary and knowledge keys.
pub fn encode_dataset(
    params: &ModelParams,
    vocab: &Vocabulary,
    records: &[DatasetRecord],
) -> Vec<EncodedExample> {
    records
        .iter()
        .map(|rec| {
            let tok_a = crate::text::tokenize(&rec.text_a);
            let tok_b = crate::text::tokenize(&rec.text_b);
            EncodedExample {
                x: crate::text::encode_pad(&tok_a, vocab, params.config.max_len),
                y: crate::text::encode_pad(&tok_b, vocab, params.config.max_len),
                kx: params.resolve_knowledge(&rec.knowledge_a),
                ky: params.resolve_knowledge(&rec.knowledge_b),
                label: rec.label as usize,
            }
        })
        .collect()
}

// Distinct rng streams derived from the config seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;
const DROPOUT_STREAM: u64 = 0x4452_4f50_4f55_5431;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-example dropout stream, independent of batch order and threading.
fn example_rng(seed: u64, epoch: usize, example_idx: usize) -> ChaCha8Rng {
    let mixed = splitmix(
        seed ^ DROPOUT_STREAM
            ^ splitmix(epoch as u64)
            ^ splitmix(example_idx as u64).rotate_left(17),
    );
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Mean cross-entropy loss over a batch plus summed gradients, scaled to
/// the batch mean. Forward/backward passes run in parallel; the reduction
/// is a sequential fold in batch order, so results do not depend on the
/// worker count.
fn batch_step(
    params: &ModelParams,
    batch: &[(usize, &EncodedExample)],
    epoch: usize,
) -> TrainResult<(Real, GradBuffers)> {
    let seed = params.config.seed;
    let results: Vec<_> = batch
        .par_iter()
        .map(|(idx, ex)| {
            let mut rng = example_rng(seed, epoch, *idx);
            backprop_example(params, ex, Mode::Train, Some(&mut rng))
        })
        .collect();

    let mut grads = GradBuffers::zeros_like(params);
    let mut loss_sum = 0.0;
    for result in results {
        let (loss, _, example_grads) = result?;
        loss_sum += loss;
        grads.absorb(&example_grads);
    }
    let inv = 1.0 / batch.len() as Real;
    grads.scale(inv);
    Ok((loss_sum * inv, grads))
}

/// Validation metric in inference mode: accuracy over argmax predictions,
/// or R_n@1 over consecutive groups when configured for recall.
pub fn validation_metric(params: &ModelParams, valid: &[EncodedExample]) -> TrainResult<f64> {
    let probs: Vec<Vec<Real>> = valid
        .par_iter()
        .map(|ex| predict(params, ex))
        .collect::<Result<_, _>>()?;
    match params.config.metric {
        MetricKind::Accuracy => {
            let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            let labels: Vec<usize> = valid.iter().map(|ex| ex.label).collect();
            Ok(accuracy(&preds, &labels)?)
        }
        MetricKind::Recall => {
            let scores: Vec<f64> = probs.iter().map(|p| p[1] as f64).collect();
            let positives: Vec<bool> = valid.iter().map(|ex| ex.label == 1).collect();
            let groups = build_groups(&scores, &positives, params.config.metric_n)?;
            Ok(recall_at_k(&groups, 1)?)
        }
    }
}

pub fn argmax(values: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs the finite-difference gradient check on a small synthetic instance
/// of the configured model (a handful of words, two knowledge keys).
/// Dropout is forced off; the objective must be deterministic.
pub fn synthetic_gradcheck(
    mut config: TrainConfig,
    eps: Real,
) -> TrainResult<crate::tensor::gradcheck::GradCheckReport> {
    config.dropout = 0.0;
    let words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
    let defs = vec![
        KnowledgeDef {
            key: "first".into(),
            words: vec!["alpha".into(), "beta".into(), "gamma".into()],
        },
        KnowledgeDef {
            key: "second".into(),
            words: vec!["delta".into(), "epsilon".into(), "zeta".into()],
        },
    ];
    let text = |ids: &[usize]| -> String {
        ids.iter()
            .map(|&i| words[i % words.len()])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mk = |label: i64, a: &[usize], b: &[usize], ka: &str, kb: &str| DatasetRecord {
        label,
        text_a: text(a),
        text_b: text(b),
        knowledge_a: ka.into(),
        knowledge_b: kb.into(),
    };
    let records = vec![
        mk(1, &[0, 1, 2], &[2, 1], "first", "first"),
        mk(0, &[3, 4], &[0, 5, 1], "second", "first"),
    ];
    let prepared = prepare(config, &records, &records, &defs, None)?;
    Ok(crate::matcher::gradcheck_model(
        &prepared.params,
        &prepared.train,
        eps,
    )?)
}

/// Optimizes the mean cross entropy with mini-batch Adam, shuffling every
/// epoch, evaluating on the validation set, and stopping once the metric
/// has not improved for `patience` consecutive epochs. Returns the
/// best-validation parameters.
///
/// The objective is the batch *mean* (not the sum) so the learning rate
/// keeps its meaning across batch sizes.
pub fn train(
    params: ModelParams,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
) -> TrainResult<TrainOutcome> {
    params.config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if valid_set.is_empty() {
        return Err(TrainError::EmptyDataset("valid"));
    }
    for ex in train_set.iter().chain(valid_set) {
        if ex.label >= params.config.c {
            return Err(TrainError::LabelOutOfRange {
                label: ex.label,
                classes: params.config.c,
            });
        }
    }

    let config = params.config.clone();
    let mut params = params;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ SHUFFLE_STREAM));
    let started = std::time::Instant::now();

    let mut history = Vec::new();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut epochs_since_improvement = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss_sum = 0.0;
        let mut examples_seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(usize, &EncodedExample)> =
                chunk.iter().map(|&i| (i, &train_set[i])).collect();
            let (batch_loss, mut grads) = batch_step(&params, &batch, epoch)?;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            if let Some(clip) = config.grad_clip {
                let norm = grads.norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam.step(&mut params, &grads);
            epoch_loss_sum += batch_loss * batch.len() as Real;
            examples_seen += batch.len();
        }
        let train_loss = epoch_loss_sum / examples_seen as Real;
        let valid_metric = validation_metric(&params, valid_set)?;

        history.push(EpochStats {
            epoch,
            train_loss,
            valid_metric,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        });

        if valid_metric > best_metric {
            best_metric = valid_metric;
            best_params = params.clone();
            best_epoch = epoch;
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement > config.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::tests::{example_from_texts, tiny_config, tiny_model};

    #[test]
    fn cross_entropy_closed_forms() {
        assert_eq!(cross_entropy_loss(&[1.0, 0.0], 0).unwrap(), 0.0);
        let ln2 = cross_entropy_loss(&[0.5, 0.5], 0).unwrap();
        assert!((ln2 - 0.693_147_180_559_945_3).abs() < 1e-15);
        let clamped = cross_entropy_loss(&[0.0, 1.0], 0).unwrap();
        assert!(clamped.is_finite());
        assert!((clamped - 27.631_021).abs() < 1e-3);
        assert!(matches!(
            cross_entropy_loss(&[0.5, 0.5], 2),
            Err(TrainError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn dropout_mask_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(dropout_mask(4, 0.0, &mut rng), vec![1.0; 4]);
        let mask = dropout_mask(100, 0.5, &mut rng);
        assert!(mask.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_mask_mean_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mask = dropout_mask(100_000, 0.5, &mut rng);
        let mean: Real = mask.iter().sum::<Real>() / mask.len() as Real;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn adam_first_step_has_sign_magnitude() {
        let (mut params, _) = tiny_model(tiny_config(), 31);
        let mut adam = AdamState::new(&params);
        let mut grads = GradBuffers::zeros_like(&params);
        // constant nonzero gradient on one dense tensor
        let id = params.mlp_b4;
        let before = params.tensor(id).values().to_vec();
        let g = 0.37;
        let fake = vec![g; before.len()];
        grads.add_to(id, &fake);
        adam.step(&mut params, &grads);
        let after = params.tensor(id).values();
        let lr = params.config.learning_rate;
        for (b, a) in before.iter().zip(after) {
            let delta = a - b;
            // first-step bias correction gives |delta| ~ lr * sign(g)
            assert!((delta + lr).abs() < lr * 1e-4, "delta {delta}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let (mut params, _) = tiny_model(tiny_config(), 37);
        let before: Vec<Vec<Real>> = params
            .tensors()
            .iter()
            .map(|t| t.values().to_vec())
            .collect();
        let mut adam = AdamState::new(&params);
        let grads = GradBuffers::zeros_like(&params);
        adam.step(&mut params, &grads);
        for (t, b) in params.tensors().iter().zip(&before) {
            assert_eq!(t.values(), &b[..]);
        }
    }

    #[test]
    fn pad_row_stays_zero_through_updates() {
        let cfg = tiny_config();
        let (params, vocab) = tiny_model(cfg, 41);
        let train: Vec<_> = (0..8)
            .map(|i| {
                example_from_texts(
                    &params,
                    &vocab,
                    if i % 2 == 0 { "red green" } else { "dog cat" },
                    if i % 2 == 0 { "blue red" } else { "fish dog" },
                    "",
                    "",
                    i % 2,
                )
            })
            .collect();
        let outcome = train_quick(params, &train);
        let emb = outcome.params.tensor(outcome.params.emb);
        let d = outcome.params.config.d;
        assert!(emb.values()[..d].iter().all(|&v| v == 0.0));
    }

    fn train_quick(params: ModelParams, examples: &[EncodedExample]) -> TrainOutcome {
        let mut params = params;
        params.config.max_epochs = 3;
        params.config.patience = 5;
        train(params, examples, examples).unwrap()
    }

    #[test]
    fn one_small_step_decreases_loss() {
        let cfg = {
            let mut c = tiny_config();
            c.learning_rate = 1e-4;
            c.dropout = 0.0;
            c
        };
        let (mut params, vocab) = tiny_model(cfg, 43);
        let batch: Vec<_> = vec![
            example_from_texts(
                &params,
                &vocab,
                "red green",
                "blue red",
                "colors",
                "colors",
                1,
            ),
            example_from_texts(&params, &vocab, "dog cat", "sun moon", "animals", "", 0),
        ];
        let indexed: Vec<(usize, &EncodedExample)> =
            batch.iter().enumerate().map(|(i, e)| (i, e)).collect();
        let (loss_before, grads) = batch_step(&params, &indexed, 1).unwrap();
        let mut adam = AdamState::new(&params);
        adam.step(&mut params, &grads);
        let (loss_after, _) = batch_step(&params, &indexed, 1).unwrap();
        assert!(loss_after < loss_before, "{loss_after} !< {loss_before}");
    }

    #[test]
    fn patience_zero_stops_after_first_non_improving_epoch() {
        let mut cfg = tiny_config();
        cfg.patience = 0;
        cfg.max_epochs = 50;
        cfg.dropout = 0.0;
        let (params, vocab) = tiny_model(cfg, 47);
        // constant validation metric: identical examples make accuracy flat
        let ex = example_from_texts(&params, &vocab, "red", "red", "", "", 0);
        let train_set = vec![ex.clone(), ex.clone()];
        let outcome = train(params, &train_set, &train_set).unwrap();
        // epoch 1 improves over -inf, epoch 2 fails to improve, stop
        assert_eq!(outcome.history.len(), 2);
    }

    #[test]
    fn fixed_seed_reproduces_history_bitwise() {
        let mut cfg = tiny_config();
        cfg.max_epochs = 4;
        cfg.dropout = 0.5;
        let run = || {
            let (params, vocab) = tiny_model(cfg.clone(), 53);
            let train_set: Vec<_> = (0..6)
                .map(|i| {
                    example_from_texts(
                        &params,
                        &vocab,
                        if i % 2 == 0 {
                            "red green blue"
                        } else {
                            "dog cat fish"
                        },
                        if i % 2 == 0 { "green red" } else { "cat dog" },
                        "colors",
                        "animals",
                        i % 2,
                    )
                })
                .collect();
            train(params, &train_set, &train_set).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history.len(), b.history.len());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.valid_metric.to_bits(), rb.valid_metric.to_bits());
        }
        for (ta, tb) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert_eq!(ta.values(), tb.values());
        }
    }

    #[test]
    fn label_permutation_leaves_loss_trajectory_identical() {
        // swapping class ids in the data together with the output layer's
        // rows gives a bitwise identical loss history
        let mut cfg = tiny_config();
        cfg.max_epochs = 4;
        cfg.dropout = 0.5;
        let build = |swap: bool| {
            let (mut params, vocab) = tiny_model(cfg.clone(), 71);
            if swap {
                let c = params.config.c;
                let hidden = params.config.hidden;
                let w2 = params.tensor_mut(params.mlp_w2);
                let orig = w2.values().to_vec();
                for cls in 0..c {
                    let src = (c - 1 - cls) * hidden;
                    w2.values_mut()[cls * hidden..(cls + 1) * hidden]
                        .copy_from_slice(&orig[src..src + hidden]);
                }
                let b5 = params.tensor_mut(params.mlp_b5);
                let orig = b5.values().to_vec();
                for cls in 0..c {
                    b5.values_mut()[cls] = orig[c - 1 - cls];
                }
            }
            let examples: Vec<_> = (0..6)
                .map(|i| {
                    let label = i % 2;
                    example_from_texts(
                        &params,
                        &vocab,
                        if i % 2 == 0 { "red green" } else { "dog cat" },
                        if i % 2 == 0 { "blue red" } else { "fish dog" },
                        "colors",
                        "animals",
                        if swap { 1 - label } else { label },
                    )
                })
                .collect();
            train(params, &examples, &examples).unwrap()
        };
        let plain = build(false);
        let swapped = build(true);
        for (a, b) in plain.history.iter().zip(&swapped.history) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        }
    }

    #[test]
    fn dropout_disabled_train_equals_infer() {
        let mut cfg = tiny_config();
        cfg.dropout = 0.0;
        let (params, vocab) = tiny_model(cfg, 59);
        let ex = example_from_texts(
            &params, &vocab, "red dog", "blue cat", "colors", "animals", 1,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train_pass =
            crate::matcher::forward(&params, &ex, Mode::Train, Some(&mut rng)).unwrap();
        let infer_pass = crate::matcher::forward(&params, &ex, Mode::Infer, None).unwrap();
        assert_eq!(
            train_pass.tape.values(train_pass.probs),
            infer_pass.tape.values(infer_pass.probs)
        );
    }

    #[test]
    fn config_json_round_trip_mirrors_field_names() {
        let json = r#"{"d":8,"m":4,"max_len":10,"C":3,"batch_size":5,
            "learning_rate":0.01,"dropout":0.5,"activation":"relu",
            "freeze_embeddings":true,"max_epochs":20,"patience":2,"seed":9}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.c, 3);
        assert_eq!(cfg.d, 8);
        assert!(cfg.freeze_embeddings);
        // defaults fill the rest
        assert_eq!(cfg.feature_maps, 8);
        assert_eq!(cfg.hidden, 50);
        let back = serde_json::to_string(&cfg).unwrap();
        assert!(back.contains("\"C\":3"));
    }

    #[test]
    fn config_validation_rejects_bad_windows() {
        let mut cfg = tiny_config();
        cfg.conv_window = (10, 10);
        cfg.max_len = 5;
        assert!(matches!(
            cfg.validate(),
            Err(TrainError::InvalidConfig { .. })
        ));
        let mut cfg = tiny_config();
        cfg.activation = Activation::Sigmoid;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }
}
