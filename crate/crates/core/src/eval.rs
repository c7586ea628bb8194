//! Metrics and diagnostic reports: accuracy, R_n@k, length buckets, and
//! the channel-ablation table.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::channels::ChannelSelection;
use crate::knowledge::KnowledgeDef;
use crate::matcher::{predict, EncodedExample, ModelParams};
use crate::tensor::Real;
use crate::text::DatasetRecord;
use crate::trainer::{argmax, prepare, train, MetricKind, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and label sequences differ in length: {preds} vs {labels}")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("group {group}: {message}")]
    GroupShape { group: usize, message: String },
    #[error("k = {k} out of range for group size {n}")]
    KOutOfRange { k: usize, n: usize },
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Fraction of exact matches between predictions and labels.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> EvalResult<f64> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty("accuracy"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// One ranking instance: n scored candidates, exactly one positive.
#[derive(Debug, Clone)]
pub struct RankedGroup {
    pub id: usize,
    /// (score, is_positive) in original candidate order.
    pub candidates: Vec<(f64, bool)>,
}

impl RankedGroup {
    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    /// Zero-based rank of the positive candidate under descending score
    /// with ties broken by input order (the positive is not favored).
    pub fn positive_rank(&self) -> EvalResult<usize> {
        let pos = self
            .candidates
            .iter()
            .position(|&(_, p)| p)
            .ok_or_else(|| EvalError::GroupShape {
                group: self.id,
                message: "no positive candidate".into(),
            })?;
        if self.candidates.iter().filter(|&&(_, p)| p).count() != 1 {
            return Err(EvalError::GroupShape {
                group: self.id,
                message: "more than one positive candidate".into(),
            });
        }
        let pos_score = self.candidates[pos].0;
        let rank = self
            .candidates
            .iter()
            .enumerate()
            .filter(|&(j, &(s, _))| s > pos_score || (s == pos_score && j < pos))
            .count();
        Ok(rank)
    }
}

/// Fraction of groups whose positive lands in the top k by score.
pub fn recall_at_k(groups: &[RankedGroup], k: usize) -> EvalResult<f64> {
    if groups.is_empty() {
        return Err(EvalError::Empty("recall_at_k"));
    }
    let n = groups[0].n();
    if k == 0 || k > n {
        return Err(EvalError::KOutOfRange { k, n });
    }
    let mut hits = 0usize;
    for group in groups {
        if group.n() != n {
            return Err(EvalError::GroupShape {
                group: group.id,
                message: format!("group size {} differs from {}", group.n(), n),
            });
        }
        if group.positive_rank()? < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / groups.len() as f64)
}

/// Chops a flat scored dataset into consecutive groups of n candidates.
pub fn build_groups(scores: &[f64], positives: &[bool], n: usize) -> EvalResult<Vec<RankedGroup>> {
    if scores.len() != positives.len() {
        return Err(EvalError::LengthMismatch {
            preds: scores.len(),
            labels: positives.len(),
        });
    }
    if n == 0 || scores.is_empty() || scores.len() % n != 0 {
        return Err(EvalError::GroupShape {
            group: 0,
            message: format!(
                "{} records do not divide into groups of {}",
                scores.len(),
                n
            ),
        });
    }
    Ok(scores
        .chunks(n)
        .zip(positives.chunks(n))
        .enumerate()
        .map(|(id, (s, p))| RankedGroup {
            id,
            candidates: s.iter().copied().zip(p.iter().copied()).collect(),
        })
        .collect())
}

/// Forms R_2@1 groups by pairing each positive with one seeded-subsampled
/// negative from its group.
pub fn subsample_pairs(groups: &[RankedGroup], seed: u64) -> EvalResult<Vec<RankedGroup>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups
        .iter()
        .map(|g| {
            let pos = g
                .candidates
                .iter()
                .copied()
                .find(|&(_, p)| p)
                .ok_or_else(|| EvalError::GroupShape {
                    group: g.id,
                    message: "no positive candidate".into(),
                })?;
            let negatives: Vec<(f64, bool)> =
                g.candidates.iter().copied().filter(|&(_, p)| !p).collect();
            let neg = *negatives
                .choose(&mut rng)
                .ok_or_else(|| EvalError::GroupShape {
                    group: g.id,
                    message: "no negative candidate".into(),
                })?;
            Ok(RankedGroup {
                id: g.id,
                candidates: vec![pos, neg],
            })
        })
        .collect()
}

/// Default bucket boundaries on combined pair length.
pub const DEFAULT_BUCKET_BOUNDS: [usize; 3] = [30, 60, 90];

#[derive(Debug, Clone, Serialize)]
pub struct BucketStats {
    /// Inclusive lower bound of the bucket.
    pub lo: usize,
    /// Exclusive upper bound; `None` for the open-ended last bucket.
    pub hi: Option<usize>,
    pub count: usize,
    /// Metric over the bucket, absent when the bucket is empty.
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketReport {
    pub bounds: Vec<usize>,
    pub metric_name: String,
    pub buckets: Vec<BucketStats>,
}

fn bucket_of(bounds: &[usize], len: usize) -> usize {
    bounds.iter().position(|&b| len < b).unwrap_or(bounds.len())
}

/// Accuracy (or R_2@1 for ranking configs) per combined-length bucket.
/// Buckets partition `[0, inf)`; counts sum to the dataset size.
pub fn length_bucket_report(
    params: &ModelParams,
    examples: &[EncodedExample],
    bounds: &[usize],
) -> Result<BucketReport, TrainError> {
    let probs: Vec<Vec<Real>> = examples
        .par_iter()
        .map(|ex| predict(params, ex))
        .collect::<Result<_, _>>()?;

    let n_buckets = bounds.len() + 1;
    let mut buckets = Vec::with_capacity(n_buckets);
    let metric_name;

    match params.config.metric {
        MetricKind::Accuracy => {
            metric_name = "accuracy".to_string();
            let mut per_bucket: Vec<(usize, usize)> = vec![(0, 0); n_buckets]; // (hits, count)
            for (ex, p) in examples.iter().zip(&probs) {
                let b = bucket_of(bounds, ex.combined_length());
                per_bucket[b].1 += 1;
                if argmax(p) == ex.label {
                    per_bucket[b].0 += 1;
                }
            }
            for (i, (hits, count)) in per_bucket.into_iter().enumerate() {
                buckets.push(BucketStats {
                    lo: if i == 0 { 0 } else { bounds[i - 1] },
                    hi: bounds.get(i).copied(),
                    count,
                    metric: (count > 0).then(|| hits as f64 / count as f64),
                });
            }
        }
        MetricKind::Recall => {
            metric_name = "R_2@1".to_string();
            let n = params.config.metric_n;
            let scores: Vec<f64> = probs.iter().map(|p| p[1] as f64).collect();
            let positives: Vec<bool> = examples.iter().map(|ex| ex.label == 1).collect();
            let groups = build_groups(&scores, &positives, n)?;
            let pairs = subsample_pairs(&groups, params.config.seed)?;
            // a group belongs to the bucket of its positive pair's length
            let mut grouped: Vec<Vec<RankedGroup>> = vec![Vec::new(); n_buckets];
            let mut counts = vec![0usize; n_buckets];
            for (g, pair) in groups.iter().zip(pairs) {
                let pos_idx = g.id * n
                    + g.candidates
                        .iter()
                        .position(|&(_, p)| p)
                        .expect("validated by build_groups");
                let b = bucket_of(bounds, examples[pos_idx].combined_length());
                grouped[b].push(pair);
                counts[b] += n;
            }
            for i in 0..n_buckets {
                let metric = if grouped[i].is_empty() {
                    None
                } else {
                    Some(recall_at_k(&grouped[i], 1)?)
                };
                buckets.push(BucketStats {
                    lo: if i == 0 { 0 } else { bounds[i - 1] },
                    hi: bounds.get(i).copied(),
                    count: counts[i],
                    metric,
                });
            }
        }
    }

    Ok(BucketReport {
        bounds: bounds.to_vec(),
        metric_name,
        buckets,
    })
}

/// One row of the channel-ablation table.
#[derive(Debug)]
pub struct AblationRow {
    pub variant: ChannelSelection,
    /// Test metric, or the error that stopped this variant's training.
    pub outcome: Result<f64, TrainError>,
}

/// Trains {only M1, only M2, only M3, full} under identical seeds and
/// budgets and evaluates each on the test set. Failures are recorded per
/// row instead of aborting the table.
pub fn ablation_report(
    base_config: &TrainConfig,
    train_records: &[DatasetRecord],
    valid_records: &[DatasetRecord],
    test_records: &[DatasetRecord],
    knowledge_defs: &[KnowledgeDef],
    embeddings_path: Option<&std::path::Path>,
) -> Vec<AblationRow> {
    let variants = [
        ChannelSelection::M1,
        ChannelSelection::M2,
        ChannelSelection::M3,
        ChannelSelection::Full,
    ];
    variants
        .iter()
        .map(|&variant| {
            let mut config = base_config.clone();
            config.channels = variant;
            let outcome = run_variant(
                config,
                train_records,
                valid_records,
                test_records,
                knowledge_defs,
                embeddings_path,
            );
            AblationRow { variant, outcome }
        })
        .collect()
}

fn run_variant(
    config: TrainConfig,
    train_records: &[DatasetRecord],
    valid_records: &[DatasetRecord],
    test_records: &[DatasetRecord],
    knowledge_defs: &[KnowledgeDef],
    embeddings_path: Option<&std::path::Path>,
) -> Result<f64, TrainError> {
    let prepared = prepare(
        config,
        train_records,
        valid_records,
        knowledge_defs,
        embeddings_path,
    )?;
    let vocab = prepared.vocab;
    let outcome = train(prepared.params, &prepared.train, &prepared.valid)?;
    let test = crate::trainer::encode_dataset(&outcome.params, &vocab, test_records);
    crate::trainer::validation_metric(&outcome.params, &test)
}
