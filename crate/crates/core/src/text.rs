//! Corpus ingestion: tokenization, vocabulary, pretrained embedding
//! loading, padding/truncation, and dataset-file parsing.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor};

/// Reserved vocabulary ids.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Half-width of the uniform init used for rows absent from an embedding
/// file (and for fresh tables).
pub const EMBEDDING_INIT_RANGE: Real = 0.1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: embedding has {got} dimensions, expected {expected}")]
    InconsistentDimension {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        line: usize,
        label: i64,
        classes: usize,
    },
}

pub type DataResult<T> = Result<T, DataError>;

/// Lowercases, splits ASCII punctuation (except `_`, which tags like
/// `_url_` rely on) into standalone tokens, then splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() * 2);
    for c in text.chars() {
        if c.is_ascii_punctuation() && c != '_' {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Dense token -> id table with PAD = 0 and UNK = 1 always present.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    frozen: bool,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            frozen: false,
        }
    }

    /// Builds a vocabulary from tokenized texts in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocabulary::new();
        for text in texts {
            for token in tokenize(text) {
                vocab.add(&token);
            }
        }
        vocab
    }

    /// Inserts a token unless frozen; returns its id (UNK when frozen and
    /// unseen).
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        if self.frozen {
            return UNK_ID;
        }
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.to_string(), id);
        self.id_to_token.push(token.to_string());
        id
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK are always present
    }

    /// Id-ordered token list, the serialized form used by checkpoints.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token: tokens,
            frozen: true,
        }
    }
}

/// A token sequence padded or truncated to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

/// Maps tokens to ids (UNK for unseen), truncates at the tail to `max_len`,
/// and pads the remainder with PAD.
pub fn encode_pad(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids: Vec<usize> = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.lookup(t))
        .collect();
    let true_length = ids.len();
    ids.resize(max_len, PAD_ID);
    TokenSequence { ids, true_length }
}

/// One raw dataset line: a text pair, optional knowledge keys, and a label.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetRecord {
    pub label: i64,
    pub text_a: String,
    pub text_b: String,
    #[serde(default)]
    pub knowledge_a: String,
    #[serde(default)]
    pub knowledge_b: String,
}

/// Parses a JSON-lines dataset, validating labels against `num_classes`.
/// Blank lines are skipped; malformed lines fail with their line number.
pub fn load_dataset(path: impl AsRef<Path>, num_classes: usize) -> DataResult<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if record.label < 0 || record.label as usize >= num_classes {
            return Err(DataError::LabelOutOfRange {
                line: lineno + 1,
                label: record.label,
                classes: num_classes,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// `|V| x d` word embedding matrix. Row 0 (PAD) is all zeros and is never
/// touched by the optimizer.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub dim: usize,
    pub trainable: bool,
}

/// How many vocabulary rows were found in a pretrained embedding file.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingCoverage {
    pub in_file: usize,
    pub vocab_size: usize,
}

impl EmbeddingTable {
    /// Fresh table with rows drawn uniformly from
    /// `[-EMBEDDING_INIT_RANGE, EMBEDDING_INIT_RANGE]`; PAD row zero.
    pub fn random(vocab: &Vocabulary, dim: usize, rng: &mut impl Rng, trainable: bool) -> Self {
        let mut values = vec![0.0; vocab.len() * dim];
        for row in 1..vocab.len() {
            for v in &mut values[row * dim..(row + 1) * dim] {
                *v = rng.random_range(-EMBEDDING_INIT_RANGE..=EMBEDDING_INIT_RANGE);
            }
        }
        EmbeddingTable {
            matrix: Tensor::new(vec![vocab.len(), dim], values).expect("shape consistent"),
            dim,
            trainable,
        }
    }

    pub fn row(&self, id: usize) -> &[Real] {
        &self.matrix.values()[id * self.dim..(id + 1) * self.dim]
    }
}

/// Loads GloVe-style text embeddings ("token v1 .. vd" per line) for the
/// given vocabulary. In-file rows are copied; missing rows keep their
/// seeded random init; the PAD row is forced to zeros.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    expected_dim: usize,
    rng: &mut impl Rng,
    trainable: bool,
) -> DataResult<(EmbeddingTable, EmbeddingCoverage)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;

    let mut table = EmbeddingTable::random(vocab, expected_dim, rng, trainable);
    let mut found = vec![false; vocab.len()];
    found[PAD_ID] = true;

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().ok_or_else(|| DataError::Parse {
            line: lineno + 1,
            message: "missing token".into(),
        })?;
        let values: Vec<Real> = parts
            .map(|p| {
                p.parse::<Real>().map_err(|e| DataError::Parse {
                    line: lineno + 1,
                    message: format!("bad number {p:?}: {e}"),
                })
            })
            .collect::<DataResult<_>>()?;
        if values.len() != expected_dim {
            return Err(DataError::InconsistentDimension {
                line: lineno + 1,
                expected: expected_dim,
                got: values.len(),
            });
        }
        let id = vocab.lookup(token);
        if id != UNK_ID || token == UNK_TOKEN {
            if id != PAD_ID && !found[id] {
                let dim = table.dim;
                table.matrix.values_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
                found[id] = true;
            }
        }
    }

    let coverage = EmbeddingCoverage {
        in_file: found.iter().filter(|&&f| f).count() - 1, // PAD not counted
        vocab_size: vocab.len(),
    };
    Ok((table, coverage))
}
