//! Synthetic corpora and fixtures shared by the integration tests.
// Each integration test binary compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kehnn_core::channels::ChannelSelection;
use kehnn_core::knowledge::KnowledgeDef;
use kehnn_core::tensor::Activation;
use kehnn_core::text::DatasetRecord;
use kehnn_core::trainer::{MetricKind, TrainConfig};

pub const SUBJECTS: [&str; 10] = [
    "apple", "briar", "cedar", "dahlia", "elm", "fennel", "garnet", "hazel", "iris", "juniper",
];
pub const FILLERS: [&str; 6] = ["one", "two", "three", "four", "five", "six"];

/// Token-separable pairs: positives share a subject word, negatives use two
/// different subjects. The subject appears three times per side so channel
/// one alone carries the label.
pub fn overfit_corpus(n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let a = rng.random_range(0..SUBJECTS.len());
            let b = if positive {
                a
            } else {
                (a + 1 + rng.random_range(0..SUBJECTS.len() - 1)) % SUBJECTS.len()
            };
            let side = |rng: &mut ChaCha8Rng, s: usize| {
                format!(
                    "{} {} {} {}",
                    SUBJECTS[s],
                    SUBJECTS[s],
                    FILLERS[rng.random_range(0..FILLERS.len())],
                    SUBJECTS[s]
                )
            };
            DatasetRecord {
                label: positive as i64,
                text_a: side(&mut rng, a),
                text_b: side(&mut rng, b),
                knowledge_a: String::new(),
                knowledge_b: String::new(),
            }
        })
        .collect()
}

pub const KNOWLEDGE_KEYS: [&str; 4] = ["topic_a", "topic_b", "topic_c", "topic_d"];

/// Labels depend only on knowledge-key agreement; the texts themselves are
/// random tokens from a shared pool, independent of the label, and the
/// knowledge-definition words never occur in the texts. One definition word
/// per key keeps the initial key vectors distinct (averaging several random
/// rows would start them nearly collapsed).
pub fn knowledge_only_corpus(n: usize, seed: u64) -> (Vec<DatasetRecord>, Vec<KnowledgeDef>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let defs: Vec<KnowledgeDef> = KNOWLEDGE_KEYS
        .iter()
        .enumerate()
        .map(|(i, key)| KnowledgeDef {
            key: key.to_string(),
            words: vec![format!("kw{i}")],
        })
        .collect();
    let noise_text = |rng: &mut ChaCha8Rng| {
        (0..6)
            .map(|_| {
                let s = rng.random_range(0..SUBJECTS.len());
                SUBJECTS[s]
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let records = (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let ka = rng.random_range(0..KNOWLEDGE_KEYS.len());
            let kb = if positive {
                ka
            } else {
                (ka + 1 + rng.random_range(0..KNOWLEDGE_KEYS.len() - 1)) % KNOWLEDGE_KEYS.len()
            };
            DatasetRecord {
                label: positive as i64,
                text_a: noise_text(&mut rng),
                text_b: noise_text(&mut rng),
                knowledge_a: KNOWLEDGE_KEYS[ka].to_string(),
                knowledge_b: KNOWLEDGE_KEYS[kb].to_string(),
            }
        })
        .collect();
    (records, defs)
}

/// Pairs with combined lengths spread across the 30/60/90 buckets.
pub fn varied_length_corpus(n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len_a = rng.random_range(1..=60);
            let len_b = rng.random_range(1..=60);
            let side = |rng: &mut ChaCha8Rng, len: usize| {
                (0..len)
                    .map(|_| SUBJECTS[rng.random_range(0..SUBJECTS.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            DatasetRecord {
                label: (i % 2) as i64,
                text_a: side(&mut rng, len_a),
                text_b: side(&mut rng, len_b),
                knowledge_a: String::new(),
                knowledge_b: String::new(),
            }
        })
        .collect()
}

/// Small-model config with the paper's optimization hyperparameters
/// (lr 0.01, batch 50, dropout 0.5, Adam defaults).
pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        d: 8,
        m: 4,
        max_len: 8,
        c: 2,
        batch_size: 50,
        learning_rate: 0.01,
        dropout: 0.5,
        activation: Activation::Tanh,
        conv_activation: Activation::Relu,
        freeze_embeddings: false,
        freeze_knowledge: false,
        max_epochs: 200,
        patience: 200,
        seed,
        hidden: 8,
        feature_maps: 4,
        conv_window: (3, 3),
        pool_window: (3, 3),
        pool_stride: None,
        channels: ChannelSelection::Full,
        metric: MetricKind::Accuracy,
        metric_n: 10,
        grad_clip: None,
    }
}
