//! Prior-knowledge vectors and the gate that fuses them into word
//! representations.
//!
//! A knowledge vector summarizes the global context of a text (its
//! category's words, or a topic's top words) as the mean of their word
//! embeddings. The gate computes, per word, how much of each coordinate
//! comes from the word embedding and how much flows in from the knowledge
//! vector. Knowledge vectors live in embedding space: the gate combines
//! them elementwise with d-dimensional word embeddings, which pins their
//! dimension to d as well.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Activation, Real, Tensor, TensorResult};
use crate::text::{DataError, DataResult, EmbeddingTable, Vocabulary};

/// One knowledge definition line: a key and the words that describe it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeDef {
    pub key: String,
    pub words: Vec<String>,
}

/// Parses a JSON-lines knowledge definition file.
pub fn load_knowledge_defs(path: impl AsRef<Path>) -> DataResult<Vec<KnowledgeDef>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut defs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let def: KnowledgeDef = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        defs.push(def);
    }
    Ok(defs)
}

/// Mean of the embedding rows of the in-vocabulary words. Returns the
/// vector and how many words contributed; zero contributors yield the zero
/// vector (the caller may warn).
pub fn build_knowledge_vector(
    words: &[String],
    emb: &EmbeddingTable,
    vocab: &Vocabulary,
) -> (Vec<Real>, usize) {
    let mut sum = vec![0.0; emb.dim];
    let mut used = 0usize;
    for word in words {
        if !vocab.contains(word) {
            continue;
        }
        let row = emb.row(vocab.lookup(word));
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v;
        }
        used += 1;
    }
    if used > 0 {
        let inv = 1.0 / used as Real;
        sum.iter_mut().for_each(|s| *s *= inv);
    }
    (sum, used)
}

/// Key -> vector table of knowledge representations. Unknown or empty keys
/// resolve to no row, which downstream code treats as the zero vector.
#[derive(Debug, Clone)]
pub struct KnowledgeTable {
    keys: Vec<String>,
    index: HashMap<String, usize>,
    /// Source words per key, kept for inspection.
    pub provenance: Vec<String>,
    /// `[K, d]` matrix of knowledge vectors; trainable by default.
    pub matrix: Tensor,
    pub dim: usize,
    pub trainable: bool,
    /// Keys whose definitions had no in-vocabulary word.
    pub degenerate_keys: Vec<String>,
}

impl KnowledgeTable {
    /// Builds the table by averaging word embeddings per definition.
    pub fn build(
        defs: &[KnowledgeDef],
        emb: &EmbeddingTable,
        vocab: &Vocabulary,
        trainable: bool,
    ) -> Self {
        let mut keys = Vec::with_capacity(defs.len());
        let mut index = HashMap::new();
        let mut provenance = Vec::with_capacity(defs.len());
        let mut values = Vec::with_capacity(defs.len() * emb.dim);
        let mut degenerate = Vec::new();
        for def in defs {
            if index.contains_key(&def.key) {
                continue;
            }
            let (vector, used) = build_knowledge_vector(&def.words, emb, vocab);
            if used == 0 {
                degenerate.push(def.key.clone());
            }
            index.insert(def.key.clone(), keys.len());
            keys.push(def.key.clone());
            provenance.push(def.words.join(" "));
            values.extend_from_slice(&vector);
        }
        let rows = keys.len().max(1);
        if keys.is_empty() {
            values = vec![0.0; emb.dim];
        }
        KnowledgeTable {
            keys,
            index,
            provenance,
            matrix: Tensor::new(vec![rows, emb.dim], values).expect("consistent dims"),
            dim: emb.dim,
            trainable,
            degenerate_keys: degenerate,
        }
    }

    /// Reassembles a table from checkpoint data.
    pub fn from_parts(keys: Vec<String>, matrix: Tensor, trainable: bool) -> Self {
        let dim = matrix.shape()[1];
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        let provenance = vec![String::new(); keys.len()];
        KnowledgeTable {
            keys,
            index,
            provenance,
            matrix,
            dim,
            trainable,
            degenerate_keys: Vec::new(),
        }
    }

    pub fn resolve(&self, key: &str) -> Option<usize> {
        if key.is_empty() {
            return None;
        }
        self.index.get(key).copied()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn num_keys(&self) -> usize {
        self.keys.len()
    }

    pub fn row(&self, idx: usize) -> &[Real] {
        &self.matrix.values()[idx * self.dim..(idx + 1) * self.dim]
    }
}

/// Gate vector for one word: `sigmoid(W_k e_w + U_k k_x)`, every entry
/// strictly inside (0, 1).
pub fn knowledge_gate(
    tape: &mut Tape,
    e_w: Var,
    k_x: Var,
    w_k: Var,
    u_k: Var,
) -> TensorResult<Var> {
    let we = tape.matvec(w_k, e_w)?;
    let uk = tape.matvec(u_k, k_x)?;
    let pre = tape.add(we, uk)?;
    tape.activation(pre, Activation::Sigmoid)
}

/// Knowledge-enhanced representation: the gated interpolation
/// `gate ⊙ e_w + (1 - gate) ⊙ k_x`, coordinatewise inside the interval
/// spanned by the inputs.
pub fn knowledge_enhance(tape: &mut Tape, e_w: Var, k_x: Var, gate: Var) -> TensorResult<Var> {
    tape.gated_blend(gate, e_w, k_x)
}

/// Gate + enhance applied to every row of a `[L, d]` embedding matrix with
/// a single knowledge vector shared across positions.
pub fn enhance_rows(
    tape: &mut Tape,
    embeddings: Var,
    k_x: Var,
    w_k: Var,
    u_k: Var,
) -> TensorResult<Var> {
    let rows = tape.shape(embeddings)[0];
    let wk_t = tape.transpose(w_k)?;
    let ew = tape.matmul(embeddings, wk_t)?;
    let uk = tape.matvec(u_k, k_x)?;
    let pre = tape.broadcast_add_row(ew, uk)?;
    let gate = tape.activation(pre, Activation::Sigmoid)?;
    let knowledge = tape.broadcast_rows(k_x, rows)?;
    tape.gated_blend(gate, embeddings, knowledge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_gradcheck, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_embeddings(rows: &[Vec<Real>]) -> (EmbeddingTable, Vocabulary) {
        let mut vocab = Vocabulary::new();
        let dim = rows[0].len();
        let mut values = vec![0.0; 2 * dim]; // PAD + UNK rows
        for (i, row) in rows.iter().enumerate() {
            vocab.add(&format!("w{i}"));
            values.extend_from_slice(row);
        }
        let table = EmbeddingTable {
            matrix: Tensor::new(vec![vocab.len(), dim], values).unwrap(),
            dim,
            trainable: true,
        };
        (table, vocab)
    }

    #[test]
    fn knowledge_vector_is_the_mean() {
        let (emb, vocab) = tiny_embeddings(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let words: Vec<String> = vec!["w0".into(), "w1".into()];
        let (v, used) = build_knowledge_vector(&words, &emb, &vocab);
        assert_eq!(used, 2);
        assert_eq!(v, vec![0.5, 0.5]);
    }

    #[test]
    fn knowledge_vector_single_word_is_identity() {
        let (emb, vocab) = tiny_embeddings(&[vec![0.25, -0.5]]);
        let (v, used) = build_knowledge_vector(&["w0".to_string()], &emb, &vocab);
        assert_eq!(used, 1);
        assert_eq!(v, vec![0.25, -0.5]);
    }

    #[test]
    fn knowledge_vector_no_vocab_words_is_zero() {
        let (emb, vocab) = tiny_embeddings(&[vec![1.0, 1.0]]);
        let (v, used) = build_knowledge_vector(&["nope".to_string()], &emb, &vocab);
        assert_eq!(used, 0);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn knowledge_vector_matches_scalar_loop_oracle() {
        // 20 topic words at d = 16, against an independently written loop.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 16;
        let rows: Vec<Vec<Real>> = (0..20)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (emb, vocab) = tiny_embeddings(&rows);
        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let (v, used) = build_knowledge_vector(&words, &emb, &vocab);
        assert_eq!(used, 20);
        for j in 0..d {
            let mut s = 0.0;
            for row in &rows {
                s += row[j];
            }
            let expect = s / 20.0;
            assert!((v[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_zero_params_is_half() {
        let mut tape = Tape::new();
        let e = tape.leaf_values(vec![2], vec![3.0, -1.0]).unwrap();
        let k = tape.leaf_values(vec![2], vec![0.5, 0.5]).unwrap();
        let w = tape.leaf_zeros(vec![2, 2]);
        let u = tape.leaf_zeros(vec![2, 2]);
        let g = knowledge_gate(&mut tape, e, k, w, u).unwrap();
        assert_eq!(tape.values(g), &[0.5, 0.5]);
    }

    #[test]
    fn gate_identity_params_closed_form() {
        let mut tape = Tape::new();
        let e = tape.leaf_values(vec![2], vec![1.0, 0.0]).unwrap();
        let k = tape.leaf_values(vec![2], vec![0.0, 1.0]).unwrap();
        let eye = Tensor::identity(2);
        let w = tape.leaf(&eye);
        let u = tape.leaf(&eye);
        let g = knowledge_gate(&mut tape, e, k, w, u).unwrap();
        let s1 = Activation::Sigmoid.apply(1.0);
        assert!((tape.values(g)[0] - s1).abs() < 1e-12);
        assert!((tape.values(g)[1] - s1).abs() < 1e-12);

        // enhance continues the example: (0.7311, 0.2689)
        let out = knowledge_enhance(&mut tape, e, k, g).unwrap();
        assert!((tape.values(out)[0] - s1).abs() < 1e-12);
        assert!((tape.values(out)[1] - (1.0 - s1)).abs() < 1e-12);
    }

    #[test]
    fn gate_saturates_monotonically_toward_one() {
        let mut last = 0.0;
        for scale in [1.0, 4.0, 16.0] {
            let mut tape = Tape::new();
            let e = tape.leaf_values(vec![1], vec![scale]).unwrap();
            let k = tape.leaf_values(vec![1], vec![scale]).unwrap();
            let w = tape.leaf(&Tensor::identity(1));
            let u = tape.leaf(&Tensor::identity(1));
            let g = knowledge_gate(&mut tape, e, k, w, u).unwrap();
            let v = tape.values(g)[0];
            assert!(v > last && v < 1.0);
            last = v;
        }
    }

    #[test]
    fn enhance_gate_extremes() {
        let mut tape = Tape::new();
        let e = tape.leaf_values(vec![2], vec![2.0, -3.0]).unwrap();
        let k = tape.leaf_values(vec![2], vec![-1.0, 5.0]).unwrap();
        let open = tape.leaf_values(vec![2], vec![1.0, 1.0]).unwrap();
        let closed = tape.leaf_zeros(vec![2]);
        let all_word = knowledge_enhance(&mut tape, e, k, open).unwrap();
        assert_eq!(tape.values(all_word), tape.values(e));
        let all_knowledge = knowledge_enhance(&mut tape, e, k, closed).unwrap();
        assert_eq!(tape.values(all_knowledge), tape.values(k));
    }

    #[test]
    fn matrix_path_matches_per_row_vector_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (l, d) = (4, 3);
        let ex: Vec<Real> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kx: Vec<Real> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wk: Vec<Real> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let uk: Vec<Real> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let exv = tape.leaf_values(vec![l, d], ex.clone()).unwrap();
        let kxv = tape.leaf_values(vec![d], kx.clone()).unwrap();
        let wkv = tape.leaf_values(vec![d, d], wk.clone()).unwrap();
        let ukv = tape.leaf_values(vec![d, d], uk.clone()).unwrap();
        let enhanced = enhance_rows(&mut tape, exv, kxv, wkv, ukv).unwrap();

        for i in 0..l {
            let mut t2 = Tape::new();
            let e = t2
                .leaf_values(vec![d], ex[i * d..(i + 1) * d].to_vec())
                .unwrap();
            let k = t2.leaf_values(vec![d], kx.clone()).unwrap();
            let w = t2.leaf_values(vec![d, d], wk.clone()).unwrap();
            let u = t2.leaf_values(vec![d, d], uk.clone()).unwrap();
            let gate = knowledge_gate(&mut t2, e, k, w, u).unwrap();
            let row = knowledge_enhance(&mut t2, e, k, gate).unwrap();
            for j in 0..d {
                let a = tape.values(enhanced)[i * d + j];
                let b = t2.values(row)[j];
                assert!((a - b).abs() < 1e-12, "row {i} col {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gate_enhance_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 3;
        let rand_vec = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Real> {
            (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()
        };
        let e = rand_vec(&mut rng, d);
        let k = rand_vec(&mut rng, d);
        let mut params = vec![
            Tensor::new(vec![d, d], rand_vec(&mut rng, d * d)).unwrap(),
            Tensor::new(vec![d, d], rand_vec(&mut rng, d * d)).unwrap(),
        ];

        let run = |params: &[Tensor]| -> TensorResult<(Real, Vec<Vec<Real>>)> {
            let mut tape = Tape::new();
            let ev = tape.leaf_values(vec![d], e.clone())?;
            let kv = tape.leaf_values(vec![d], k.clone())?;
            let wv = tape.leaf(&params[0]);
            let uv = tape.leaf(&params[1]);
            let gate = knowledge_gate(&mut tape, ev, kv, wv, uv)?;
            let out = knowledge_enhance(&mut tape, ev, kv, gate)?;
            let sq = tape.mul(out, out)?;
            let loss = tape.sum(sq)?;
            tape.backward(loss)?;
            let grads = vec![
                tape.grad(wv).unwrap().to_vec(),
                tape.grad(uv).unwrap().to_vec(),
            ];
            Ok((tape.scalar_value(loss), grads))
        };

        let (_, grads) = run(&params).unwrap();
        params[0].accumulate_grad(&grads[0]);
        params[1].accumulate_grad(&grads[1]);
        let report = finite_diff_gradcheck(&mut params, &["W_k", "U_k"], 1e-5, |ps| {
            run(ps).map(|(loss, _)| loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
        // sanity on the helper itself
        assert_eq!(relative_error(2.0, 2.0), 0.0);
    }

    proptest! {
        #[test]
        fn enhance_stays_in_the_convex_hull(
            e in proptest::collection::vec(-2.0f64..2.0, 3),
            k in proptest::collection::vec(-2.0f64..2.0, 3),
            raw_gate in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let mut tape = Tape::new();
            let ev = tape.leaf_values(vec![3], e.clone()).unwrap();
            let kv = tape.leaf_values(vec![3], k.clone()).unwrap();
            let pre = tape.leaf_values(vec![3], raw_gate).unwrap();
            let gate = tape.activation(pre, Activation::Sigmoid).unwrap();
            let out = knowledge_enhance(&mut tape, ev, kv, gate).unwrap();
            for i in 0..3 {
                let (lo, hi) = (e[i].min(k[i]), e[i].max(k[i]));
                let v = tape.values(out)[i];
                prop_assert!(v >= lo && v <= hi);
                let g = tape.values(gate)[i];
                prop_assert!(g > 0.0 && g < 1.0);
            }
        }

        #[test]
        fn enhance_fixed_point_when_inputs_agree(
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            raw_gate in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let mut tape = Tape::new();
            let ev = tape.leaf_values(vec![4], x.clone()).unwrap();
            let kv = tape.leaf_values(vec![4], x.clone()).unwrap();
            let pre = tape.leaf_values(vec![4], raw_gate).unwrap();
            let gate = tape.activation(pre, Activation::Sigmoid).unwrap();
            let out = knowledge_enhance(&mut tape, ev, kv, gate).unwrap();
            prop_assert_eq!(tape.values(out), &x[..]);
        }
    }

    #[test]
    fn table_build_resolves_and_degrades() {
        let (emb, vocab) = tiny_embeddings(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let defs = vec![
            KnowledgeDef {
                key: "both".into(),
                words: vec!["w0".into(), "w1".into()],
            },
            KnowledgeDef {
                key: "ghost".into(),
                words: vec!["unseen".into()],
            },
        ];
        let table = KnowledgeTable::build(&defs, &emb, &vocab, true);
        assert_eq!(table.num_keys(), 2);
        let row = table.row(table.resolve("both").unwrap());
        assert_eq!(row, &[0.5, 0.5]);
        assert_eq!(table.resolve("missing"), None);
        assert_eq!(table.resolve(""), None);
        assert_eq!(table.degenerate_keys, vec!["ghost".to_string()]);
    }
}
