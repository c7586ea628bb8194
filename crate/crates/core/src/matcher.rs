//! End-to-end forward pass: embeddings through channels, CNN feature
//! extraction, and the two-layer MLP scorer, plus the parameter store the
//! trainer and checkpoints operate on.

use std::collections::HashMap;

use rand::Rng;

use crate::channels::{build_channels, ChannelParamVars, PairVars};
use crate::encoder::GruVars;
use crate::knowledge::KnowledgeTable;
use crate::tensor::gradcheck::{finite_diff_gradcheck, GradCheckReport};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Activation, Real, Tensor, TensorError, TensorResult};
use crate::text::{DatasetRecord, EmbeddingTable, TokenSequence, Vocabulary};
use crate::trainer::{dropout_mask, TrainConfig};

/// Uniform init half-width for all weight matrices; biases start at zero.
pub const WEIGHT_INIT_RANGE: Real = 0.1;

/// Forward mode: training applies dropout, inference is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One instance ready for the model: padded id sequences, resolved
/// knowledge rows (None means the zero vector), and the class label.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub x: TokenSequence,
    pub y: TokenSequence,
    pub kx: Option<usize>,
    pub ky: Option<usize>,
    pub label: usize,
}

impl EncodedExample {
    pub fn from_record(
        record: &DatasetRecord,
        vocab: &Vocabulary,
        knowledge: &KnowledgeTable,
        max_len: usize,
    ) -> Self {
        let tok_a = crate::text::tokenize(&record.text_a);
        let tok_b = crate::text::tokenize(&record.text_b);
        EncodedExample {
            x: crate::text::encode_pad(&tok_a, vocab, max_len),
            y: crate::text::encode_pad(&tok_b, vocab, max_len),
            kx: knowledge.resolve(&record.knowledge_a),
            ky: knowledge.resolve(&record.knowledge_b),
            label: record.label as usize,
        }
    }

    /// Combined non-pad length of both sides, the quantity length buckets
    /// partition on.
    pub fn combined_length(&self) -> usize {
        self.x.true_length + self.y.true_length
    }
}

/// Index of a parameter tensor inside [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(usize);

impl PId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What freezing rules apply to a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Word embedding table; PAD row is always frozen.
    Embedding,
    /// Knowledge vector table.
    Knowledge,
    /// Ordinary dense weights/biases.
    Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct GruParamIds {
    pub w_z: PId,
    pub w_r: PId,
    pub w_h: PId,
    pub u_z: PId,
    pub u_r: PId,
    pub u_h: PId,
}

#[derive(Debug, Clone, Copy)]
pub struct BiGruIds {
    pub fwd: GruParamIds,
    pub bwd: GruParamIds,
}

/// The complete set of trainable arrays plus the configuration snapshot
/// they were built for. Tensors live in a flat, name-addressed store so the
/// optimizer, checkpoints, and gradient checking can treat them uniformly.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: TrainConfig,
    tensors: Vec<Tensor>,
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    knowledge_keys: Vec<String>,
    knowledge_index: HashMap<String, usize>,
    pub emb: PId,
    pub knowledge: PId,
    pub gate_w: PId,
    pub gate_u: PId,
    pub gru2: BiGruIds,
    pub gru3: BiGruIds,
    pub w2: PId,
    pub b2: PId,
    pub w3: PId,
    pub b3: PId,
    pub conv_kernels: PId,
    pub conv_bias: PId,
    pub mlp_w1: PId,
    pub mlp_b4: PId,
    pub mlp_w2: PId,
    pub mlp_b5: PId,
}

struct StoreBuilder {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    kinds: Vec<ParamKind>,
}

impl StoreBuilder {
    fn push(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> PId {
        let id = PId(self.tensors.len());
        self.tensors.push(tensor);
        self.names.push(name.into());
        self.kinds.push(kind);
        id
    }
}

fn uniform_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let values = (0..numel)
        .map(|_| rng.random_range(-WEIGHT_INIT_RANGE..=WEIGHT_INIT_RANGE))
        .collect();
    Tensor::new(shape, values).expect("consistent dims")
}

impl ModelParams {
    /// Assembles a model around an embedding table and a knowledge table.
    /// Weight matrices start uniform in `[-0.1, 0.1]`, biases at zero.
    /// The config must already satisfy [`TrainConfig::validate`].
    pub fn init(
        config: TrainConfig,
        embeddings: EmbeddingTable,
        knowledge: KnowledgeTable,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        let (d, m, hidden, c) = (config.d, config.m, config.hidden, config.c);
        let mut b = StoreBuilder {
            tensors: Vec::new(),
            names: Vec::new(),
            kinds: Vec::new(),
        };

        let emb = b.push("embedding", ParamKind::Embedding, embeddings.matrix);
        let knowledge_keys = knowledge.keys().to_vec();
        let knowledge_id = b.push("knowledge", ParamKind::Knowledge, knowledge.matrix);
        let gate_w = b.push(
            "gate.W_k",
            ParamKind::Dense,
            uniform_tensor(vec![d, d], rng),
        );
        let gate_u = b.push(
            "gate.U_k",
            ParamKind::Dense,
            uniform_tensor(vec![d, d], rng),
        );

        let mut gru = |b: &mut StoreBuilder, prefix: &str| -> GruParamIds {
            GruParamIds {
                w_z: b.push(
                    format!("{prefix}.W_z"),
                    ParamKind::Dense,
                    uniform_tensor(vec![m, d], rng),
                ),
                w_r: b.push(
                    format!("{prefix}.W_r"),
                    ParamKind::Dense,
                    uniform_tensor(vec![m, d], rng),
                ),
                w_h: b.push(
                    format!("{prefix}.W_h"),
                    ParamKind::Dense,
                    uniform_tensor(vec![m, d], rng),
                ),
                u_z: b.push(
                    format!("{prefix}.U_z"),
                    ParamKind::Dense,
                    uniform_tensor(vec![m, m], rng),
                ),
                u_r: b.push(
                    format!("{prefix}.U_r"),
                    ParamKind::Dense,
                    uniform_tensor(vec![m, m], rng),
                ),
                u_h: b.push(
                    format!("{prefix}.U_h"),
                    ParamKind::Dense,
                    uniform_tensor(vec![m, m], rng),
                ),
            }
        };
        let gru2 = BiGruIds {
            fwd: gru(&mut b, "gru2.fwd"),
            bwd: gru(&mut b, "gru2.bwd"),
        };
        let gru3 = BiGruIds {
            fwd: gru(&mut b, "gru3.fwd"),
            bwd: gru(&mut b, "gru3.bwd"),
        };

        let w2 = b.push(
            "bilinear2.W",
            ParamKind::Dense,
            uniform_tensor(vec![2 * m, 2 * m], rng),
        );
        let b2 = b.push("bilinear2.b", ParamKind::Dense, Tensor::zeros(vec![1]));
        let w3 = b.push(
            "bilinear3.W",
            ParamKind::Dense,
            uniform_tensor(vec![2 * m, 2 * m], rng),
        );
        let b3 = b.push("bilinear3.b", ParamKind::Dense, Tensor::zeros(vec![1]));

        let cnn = config.cnn();
        let in_channels = config.channels.count();
        let conv_kernels = b.push(
            "conv.kernels",
            ParamKind::Dense,
            uniform_tensor(
                vec![cnn.feature_maps, in_channels, cnn.window.0, cnn.window.1],
                rng,
            ),
        );
        let conv_bias = b.push(
            "conv.bias",
            ParamKind::Dense,
            Tensor::zeros(vec![cnn.feature_maps]),
        );

        let feat = config.feature_len();
        let mlp_w1 = b.push(
            "mlp.w1",
            ParamKind::Dense,
            uniform_tensor(vec![hidden, feat], rng),
        );
        let mlp_b4 = b.push("mlp.b4", ParamKind::Dense, Tensor::zeros(vec![hidden]));
        let mlp_w2 = b.push(
            "mlp.w2",
            ParamKind::Dense,
            uniform_tensor(vec![c, hidden], rng),
        );
        let mlp_b5 = b.push("mlp.b5", ParamKind::Dense, Tensor::zeros(vec![c]));

        let knowledge_index = knowledge_keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        Ok(ModelParams {
            config,
            tensors: b.tensors,
            names: b.names,
            kinds: b.kinds,
            knowledge_keys,
            knowledge_index,
            emb,
            knowledge: knowledge_id,
            gate_w,
            gate_u,
            gru2,
            gru3,
            w2,
            b2,
            w3,
            b3,
            conv_kernels,
            conv_bias,
            mlp_w1,
            mlp_b4,
            mlp_w2,
            mlp_b5,
        })
    }

    pub fn tensor(&self, id: PId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: PId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: PId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.tensors.len()).map(PId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn knowledge_keys(&self) -> &[String] {
        &self.knowledge_keys
    }

    pub fn resolve_knowledge(&self, key: &str) -> Option<usize> {
        if key.is_empty() {
            return None;
        }
        self.knowledge_index.get(key).copied()
    }

    /// Same model with its tensors replaced (shapes must match); used by
    /// the finite-difference gradient check.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> ModelParams {
        assert_eq!(tensors.len(), self.tensors.len());
        let mut clone = self.clone();
        clone.tensors = tensors;
        clone
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Rebuilds a model from checkpoint sections. Tensor order and names
    /// must match what [`ModelParams::init`] produces for this config.
    pub fn from_sections(
        config: TrainConfig,
        knowledge_keys: Vec<String>,
        sections: Vec<(String, Tensor)>,
        vocab_size: usize,
    ) -> TensorResult<Self> {
        use rand::SeedableRng;
        // Build a skeleton with the right layout, then fill by name.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let emb = EmbeddingTable {
            matrix: Tensor::zeros(vec![vocab_size, config.d]),
            dim: config.d,
            trainable: !config.freeze_embeddings,
        };
        let know = KnowledgeTable::from_parts(
            knowledge_keys,
            Tensor::zeros(vec![sections_rows(&sections, "knowledge")?, config.d]),
            !config.freeze_knowledge,
        );
        let mut params = ModelParams::init(config, emb, know, &mut rng)?;
        let by_name: HashMap<&str, usize> = params
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut filled = vec![false; params.tensors.len()];
        for (name, tensor) in sections {
            let &idx = by_name
                .get(name.as_str())
                .ok_or(TensorError::EmptyInput("unknown checkpoint section"))?;
            if params.tensors[idx].shape() != tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "checkpoint load",
                    left: params.tensors[idx].shape().to_vec(),
                    right: tensor.shape().to_vec(),
                });
            }
            params.tensors[idx] = tensor;
            filled[idx] = true;
        }
        if filled.iter().any(|&f| !f) {
            return Err(TensorError::EmptyInput("missing checkpoint section"));
        }
        Ok(params)
    }
}

fn sections_rows(sections: &[(String, Tensor)], name: &str) -> TensorResult<usize> {
    sections
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.shape()[0])
        .ok_or(TensorError::EmptyInput("missing checkpoint section"))
}

/// A completed forward pass: the tape, the output distribution, and the
/// bookkeeping needed to route leaf gradients back to parameters.
pub struct ForwardPass {
    pub tape: Tape,
    pub probs: Var,
    pub features: Var,
    leaves: Vec<(PId, Var)>,
    gathers: Vec<(PId, Vec<usize>, Var)>,
}

impl ForwardPass {
    /// Copies tape gradients out for every traced parameter. Call after
    /// `tape.backward`.
    pub fn harvest(&self) -> ExampleGrads {
        let mut dense = Vec::with_capacity(self.leaves.len());
        for &(pid, var) in &self.leaves {
            if let Some(g) = self.tape.grad(var) {
                dense.push((pid.0, g.to_vec()));
            }
        }
        let mut rows = Vec::with_capacity(self.gathers.len());
        for (pid, ids, var) in &self.gathers {
            if let Some(g) = self.tape.grad(*var) {
                rows.push((pid.0, ids.clone(), g.to_vec()));
            }
        }
        ExampleGrads { dense, rows }
    }
}

/// Per-example gradient contributions, sparse over gathered table rows.
pub struct ExampleGrads {
    dense: Vec<(usize, Vec<Real>)>,
    rows: Vec<(usize, Vec<usize>, Vec<Real>)>,
}

/// Dense gradient accumulators aligned with a model's parameter store.
pub struct GradBuffers {
    bufs: Vec<Vec<Real>>,
}

impl GradBuffers {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradBuffers {
            bufs: params
                .tensors
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect(),
        }
    }

    pub fn absorb(&mut self, grads: &ExampleGrads) {
        for (pid, g) in &grads.dense {
            for (slot, &d) in self.bufs[*pid].iter_mut().zip(g) {
                *slot += d;
            }
        }
        for (pid, ids, g) in &grads.rows {
            let width = g.len() / ids.len();
            for (i, &row) in ids.iter().enumerate() {
                let dst = &mut self.bufs[*pid][row * width..(row + 1) * width];
                for (slot, &d) in dst.iter_mut().zip(&g[i * width..(i + 1) * width]) {
                    *slot += d;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: Real) {
        for buf in &mut self.bufs {
            for v in buf.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn buf(&self, id: PId) -> &[Real] {
        &self.bufs[id.0]
    }

    pub fn bufs(&self) -> &[Vec<Real>] {
        &self.bufs
    }

    /// Adds directly into one buffer (synthetic gradients in tests,
    /// external regularizers).
    pub fn add_to(&mut self, id: PId, values: &[Real]) {
        for (slot, &v) in self.bufs[id.0].iter_mut().zip(values) {
            *slot += v;
        }
    }

    /// Global L2 norm across all buffers.
    pub fn norm(&self) -> Real {
        let mut s = 0.0;
        for buf in &self.bufs {
            for &v in buf {
                s += v * v;
            }
        }
        s.sqrt()
    }
}

fn gru_vars(
    tape: &mut Tape,
    params: &ModelParams,
    ids: &GruParamIds,
) -> (GruVars, Vec<(PId, Var)>) {
    let mut traced = Vec::with_capacity(6);
    let mut leaf = |tape: &mut Tape, id: PId| {
        let v = tape.leaf(params.tensor(id));
        traced.push((id, v));
        v
    };
    let vars = GruVars {
        w_z: leaf(tape, ids.w_z),
        w_r: leaf(tape, ids.w_r),
        w_h: leaf(tape, ids.w_h),
        u_z: leaf(tape, ids.u_z),
        u_r: leaf(tape, ids.u_r),
        u_h: leaf(tape, ids.u_h),
    };
    (vars, traced)
}

/// CNN feature extraction: stack the similarity matrices as channels, one
/// valid convolution, activation, one max pool, flatten.
pub fn extract_features(
    tape: &mut Tape,
    channels: &[Var],
    kernels: Var,
    bias: Var,
    conv_activation: Activation,
    pool_window: (usize, usize),
    pool_stride: (usize, usize),
) -> TensorResult<Var> {
    let stacked = tape.stack_channels(channels)?;
    let conv = tape.conv2d(stacked, kernels, bias)?;
    let activated = tape.activation(conv, conv_activation)?;
    let pooled = tape.maxpool2d(activated, pool_window, pool_stride)?;
    tape.flatten(pooled)
}

/// Two-layer scorer: `softmax(w2 · tanh(w1 · v + b4) + b5)`.
pub fn score(tape: &mut Tape, v: Var, w1: Var, b4: Var, w2: Var, b5: Var) -> TensorResult<Var> {
    let pre_hidden = tape.matvec(w1, v)?;
    let shifted = tape.add(pre_hidden, b4)?;
    let hidden = tape.activation(shifted, Activation::Tanh)?;
    let pre_out = tape.matvec(w2, hidden)?;
    let logits = tape.add(pre_out, b5)?;
    tape.softmax(logits)
}

/// Full forward pass for one example. Training mode draws a dropout mask
/// for the feature vector from `rng`; inference is deterministic.
pub fn forward(
    params: &ModelParams,
    example: &EncodedExample,
    mode: Mode,
    rng: Option<&mut dyn rand::RngCore>,
) -> TensorResult<ForwardPass> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let mut leaves: Vec<(PId, Var)> = Vec::new();
    let mut gathers: Vec<(PId, Vec<usize>, Var)> = Vec::new();

    let ex = tape.leaf_gather_rows(params.tensor(params.emb), &example.x.ids)?;
    gathers.push((params.emb, example.x.ids.clone(), ex));
    let ey = tape.leaf_gather_rows(params.tensor(params.emb), &example.y.ids)?;
    gathers.push((params.emb, example.y.ids.clone(), ey));

    let selection = cfg.channels;

    // Leaves are created only for the parameters the channel selection
    // actually consumes; everything else stays untouched (and untrained).
    // Unused slots point at a throwaway placeholder node.
    let placeholder = tape.leaf_zeros(vec![1]);
    let ph_gru = GruVars {
        w_z: placeholder,
        w_r: placeholder,
        w_h: placeholder,
        u_z: placeholder,
        u_r: placeholder,
        u_h: placeholder,
    };
    let mut channel_params = ChannelParamVars {
        gate_w: placeholder,
        gate_u: placeholder,
        gru2_fwd: ph_gru,
        gru2_bwd: ph_gru,
        gru3_fwd: ph_gru,
        gru3_bwd: ph_gru,
        w2: placeholder,
        b2: placeholder,
        w3: placeholder,
        b3: placeholder,
    };
    let leaf_traced = |tape: &mut Tape, leaves: &mut Vec<(PId, Var)>, id: PId| {
        let v = tape.leaf(params.tensor(id));
        leaves.push((id, v));
        v
    };
    if selection.uses_m2() {
        let (fwd, t1) = gru_vars(&mut tape, params, &params.gru2.fwd);
        let (bwd, t2) = gru_vars(&mut tape, params, &params.gru2.bwd);
        leaves.extend(t1);
        leaves.extend(t2);
        channel_params.gru2_fwd = fwd;
        channel_params.gru2_bwd = bwd;
        channel_params.w2 = leaf_traced(&mut tape, &mut leaves, params.w2);
        channel_params.b2 = leaf_traced(&mut tape, &mut leaves, params.b2);
    }
    let (kx, ky) = if selection.uses_m3() {
        let (fwd, t1) = gru_vars(&mut tape, params, &params.gru3.fwd);
        let (bwd, t2) = gru_vars(&mut tape, params, &params.gru3.bwd);
        leaves.extend(t1);
        leaves.extend(t2);
        channel_params.gru3_fwd = fwd;
        channel_params.gru3_bwd = bwd;
        channel_params.gate_w = leaf_traced(&mut tape, &mut leaves, params.gate_w);
        channel_params.gate_u = leaf_traced(&mut tape, &mut leaves, params.gate_u);
        channel_params.w3 = leaf_traced(&mut tape, &mut leaves, params.w3);
        channel_params.b3 = leaf_traced(&mut tape, &mut leaves, params.b3);
        let knowledge_leaf = |tape: &mut Tape,
                              gathers: &mut Vec<(PId, Vec<usize>, Var)>,
                              row: Option<usize>|
         -> TensorResult<Var> {
            match row {
                Some(r) => {
                    let table = params.tensor(params.knowledge);
                    let width = table.shape()[1];
                    let values = table.values()[r * width..(r + 1) * width].to_vec();
                    let v = tape.leaf_values(vec![width], values)?;
                    gathers.push((params.knowledge, vec![r], v));
                    Ok(v)
                }
                None => Ok(tape.leaf_zeros(vec![cfg.d])),
            }
        };
        (
            knowledge_leaf(&mut tape, &mut gathers, example.kx)?,
            knowledge_leaf(&mut tape, &mut gathers, example.ky)?,
        )
    } else {
        let z = tape.leaf_zeros(vec![cfg.d]);
        (z, z)
    };

    let pair = PairVars { ex, ey, kx, ky };
    let channel_vars =
        build_channels(&mut tape, &pair, &channel_params, cfg.activation, selection)?;

    let kernels = tape.leaf(params.tensor(params.conv_kernels));
    leaves.push((params.conv_kernels, kernels));
    let bias = tape.leaf(params.tensor(params.conv_bias));
    leaves.push((params.conv_bias, bias));
    let cnn = cfg.cnn();
    let mut features = extract_features(
        &mut tape,
        &channel_vars,
        kernels,
        bias,
        cnn.activation,
        cnn.pool_window,
        cnn.pool_stride,
    )?;

    if mode == Mode::Train && cfg.dropout > 0.0 {
        let rng = rng.expect("training mode requires an rng for dropout");
        let mask = dropout_mask(tape.values(features).len(), cfg.dropout, rng);
        features = tape.mul_values(features, mask)?;
    }

    let w1 = tape.leaf(params.tensor(params.mlp_w1));
    leaves.push((params.mlp_w1, w1));
    let b4 = tape.leaf(params.tensor(params.mlp_b4));
    leaves.push((params.mlp_b4, b4));
    let w2 = tape.leaf(params.tensor(params.mlp_w2));
    leaves.push((params.mlp_w2, w2));
    let b5 = tape.leaf(params.tensor(params.mlp_b5));
    leaves.push((params.mlp_b5, b5));
    let probs = score(&mut tape, features, w1, b4, w2, b5)?;

    Ok(ForwardPass {
        tape,
        probs,
        features,
        leaves,
        gathers,
    })
}

/// Inference-mode class distribution for one example.
pub fn predict(params: &ModelParams, example: &EncodedExample) -> TensorResult<Vec<Real>> {
    let pass = forward(params, example, Mode::Infer, None)?;
    Ok(pass.tape.values(pass.probs).to_vec())
}

/// Forward + loss + backward for one example; returns the loss value, the
/// predicted distribution, and the parameter gradient contributions.
pub fn backprop_example(
    params: &ModelParams,
    example: &EncodedExample,
    mode: Mode,
    rng: Option<&mut dyn rand::RngCore>,
) -> TensorResult<(Real, Vec<Real>, ExampleGrads)> {
    let mut pass = forward(params, example, mode, rng)?;
    let loss = pass.tape.neg_log_prob(pass.probs, example.label)?;
    pass.tape.backward(loss)?;
    Ok((
        pass.tape.scalar_value(loss),
        pass.tape.values(pass.probs).to_vec(),
        pass.harvest(),
    ))
}

/// Verifies the analytic gradient of the mean cross-entropy loss over
/// `examples` against central finite differences, per parameter tensor.
/// Dropout is disabled; the model must be small for this to be fast.
pub fn gradcheck_model(
    params: &ModelParams,
    examples: &[EncodedExample],
    eps: Real,
) -> TensorResult<GradCheckReport> {
    let mean_loss = |p: &ModelParams| -> TensorResult<Real> {
        let mut total = 0.0;
        for ex in examples {
            let mut pass = forward(p, ex, Mode::Infer, None)?;
            let loss = pass.tape.neg_log_prob(pass.probs, ex.label)?;
            total += pass.tape.scalar_value(loss);
        }
        Ok(total / examples.len() as Real)
    };

    let mut grads = GradBuffers::zeros_like(params);
    for ex in examples {
        let (_, _, g) = backprop_example(params, ex, Mode::Infer, None)?;
        grads.absorb(&g);
    }
    grads.scale(1.0 / examples.len() as Real);

    let mut tensors = params.tensors.clone();
    for (t, g) in tensors.iter_mut().zip(grads.bufs()) {
        t.accumulate_grad(g);
    }
    let names: Vec<&str> = params.names.iter().map(String::as_str).collect();
    finite_diff_gradcheck(&mut tensors, &names, eps, |ts| {
        mean_loss(&params.with_tensors(ts.to_vec()))
    })
}
