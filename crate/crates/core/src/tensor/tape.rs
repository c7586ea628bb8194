//! Computation record for reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append a node (the output values) and a record (the op plus its input
//! references) in topological order; [`Tape::backward`] replays the records
//! in reverse, accumulating partials into per-node gradient buffers.
//!
//! Nodes are written once by their producing operation and never mutated,
//! so a tape is confined to one thread while parameter tensors it copied
//! from can be shared read-only across concurrent tapes.

use super::kernels;
use super::{Activation, Real, Tensor, TensorError, TensorResult};

/// Probabilities are clamped to this floor inside the log loss so saturated
/// predictions keep the objective finite.
pub const PROB_CLAMP: Real = 1e-12;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    shape: Vec<usize>,
    values: Vec<Real>,
    grad: Option<Vec<Real>>,
}

enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    MatVec {
        m: Var,
        v: Var,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: Real,
    },
    OneMinus {
        x: Var,
    },
    BroadcastAddScalar {
        x: Var,
        s: Var,
    },
    BroadcastAddRow {
        x: Var,
        row: Var,
    },
    BroadcastRows {
        row: Var,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
    },
    GatedBlend {
        gate: Var,
        word: Var,
        knowledge: Var,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    StackChannels {
        parts: Vec<Var>,
    },
    Flatten {
        x: Var,
    },
    RowSlice {
        x: Var,
        row: usize,
    },
    ConcatRows {
        rows: Vec<Var>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    MulValues {
        x: Var,
        weights: Vec<Real>,
    },
    Sum {
        x: Var,
    },
    NegLogProb {
        probs: Var,
        index: usize,
    },
}

struct Record {
    op: Op,
    out: Var,
}

/// Ordered record of applied operations with the tensors they produced.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[Real] {
        &self.nodes[v.0].values
    }

    pub fn scalar_value(&self, v: Var) -> Real {
        self.nodes[v.0].values[0]
    }

    /// Gradient of the last backward pass, absent for unreached nodes.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Drops all gradient buffers so the next backward starts from zero.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<Real>) -> Var {
        let out = Var(self.nodes.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
        });
        self.records.push(Record { op, out });
        out
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        op: Op,
        shape: Vec<usize>,
        values: Vec<Real>,
    ) -> TensorResult<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push(op, shape, values))
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec())
    }

    pub fn leaf_values(&mut self, shape: Vec<usize>, values: Vec<Real>) -> TensorResult<Var> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TensorError::ShapeLenMismatch {
                shape,
                len: values.len(),
            });
        }
        Ok(self.push(Op::Leaf, shape, values))
    }

    pub fn leaf_zeros(&mut self, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        self.push(Op::Leaf, shape, vec![0.0; numel])
    }

    /// Leaf holding selected rows of a `[n, d]` table, e.g. the embeddings
    /// of one token sequence. The caller owns scattering grads back.
    pub fn leaf_gather_rows(&mut self, table: &Tensor, ids: &[usize]) -> TensorResult<Var> {
        let (n, d) = super::as_matrix_dims(table, "gather_rows")?;
        let mut values = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(TensorError::RowOutOfBounds { row: id, rows: n });
            }
            values.extend_from_slice(&table.values()[id * d..(id + 1) * d]);
        }
        Ok(self.push(Op::Leaf, vec![ids.len(), d], values))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (p, q) = self.matrix_dims(a, "matmul")?;
        let (q2, r) = self.matrix_dims(b, "matmul")?;
        if q != q2 {
            return Err(self.shape_error("matmul", a, b));
        }
        let values = kernels::matmul(self.values(a), self.values(b), p, q, r);
        self.push_checked("matmul", Op::Matmul { a, b }, vec![p, r], values)
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> TensorResult<Var> {
        let (p, q) = self.matrix_dims(m, "matvec")?;
        if self.shape(v) != [q] {
            return Err(self.shape_error("matvec", m, v));
        }
        let values = kernels::matvec(self.values(m), self.values(v), p, q);
        self.push_checked("matvec", Op::MatVec { m, v }, vec![p], values)
    }

    pub fn transpose(&mut self, x: Var) -> TensorResult<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let values = kernels::transpose(self.values(x), r, c);
        self.push_checked("transpose", Op::Transpose { x }, vec![c, r], values)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> TensorResult<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_error(name, a, b));
        }
        let values: Vec<Real> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push_checked(name, op, self.nodes[a.0].shape.clone(), values)
    }

    pub fn scale(&mut self, x: Var, factor: Real) -> TensorResult<Var> {
        let values: Vec<Real> = self.values(x).iter().map(|&v| v * factor).collect();
        self.push_checked(
            "scale",
            Op::Scale { x, factor },
            self.nodes[x.0].shape.clone(),
            values,
        )
    }

    pub fn one_minus(&mut self, x: Var) -> TensorResult<Var> {
        let values: Vec<Real> = self.values(x).iter().map(|&v| 1.0 - v).collect();
        self.push_checked(
            "one_minus",
            Op::OneMinus { x },
            self.nodes[x.0].shape.clone(),
            values,
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> TensorResult<Var> {
        let values: Vec<Real> = self.values(x).iter().map(|&v| kind.apply(v)).collect();
        self.push_checked(
            "activation",
            Op::Activation { x, kind },
            self.nodes[x.0].shape.clone(),
            values,
        )
    }

    /// Multiply by a fixed weight vector (dropout masks); the weights are
    /// constants, not differentiated.
    pub fn mul_values(&mut self, x: Var, weights: Vec<Real>) -> TensorResult<Var> {
        if weights.len() != self.values(x).len() {
            return Err(TensorError::ShapeLenMismatch {
                shape: self.nodes[x.0].shape.clone(),
                len: weights.len(),
            });
        }
        let values: Vec<Real> = self
            .values(x)
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v * w)
            .collect();
        self.push_checked(
            "mul_values",
            Op::MulValues { x, weights },
            self.nodes[x.0].shape.clone(),
            values,
        )
    }

    // ── Broadcasts ───────────────────────────────────────────────────

    /// Adds a scalar node (shape `[1]`) to every entry of `x`.
    pub fn broadcast_add_scalar(&mut self, x: Var, s: Var) -> TensorResult<Var> {
        if self.shape(s) != [1] {
            return Err(self.shape_error("broadcast_add_scalar", x, s));
        }
        let sv = self.scalar_value(s);
        let values: Vec<Real> = self.values(x).iter().map(|&v| v + sv).collect();
        self.push_checked(
            "broadcast_add_scalar",
            Op::BroadcastAddScalar { x, s },
            self.nodes[x.0].shape.clone(),
            values,
        )
    }

    /// Adds a `[c]` row vector to every row of a `[r, c]` matrix.
    pub fn broadcast_add_row(&mut self, x: Var, row: Var) -> TensorResult<Var> {
        let (r, c) = self.matrix_dims(x, "broadcast_add_row")?;
        if self.shape(row) != [c] {
            return Err(self.shape_error("broadcast_add_row", x, row));
        }
        let mut values = self.values(x).to_vec();
        for i in 0..r {
            for (v, &rv) in values[i * c..(i + 1) * c].iter_mut().zip(self.values(row)) {
                *v += rv;
            }
        }
        self.push_checked(
            "broadcast_add_row",
            Op::BroadcastAddRow { x, row },
            vec![r, c],
            values,
        )
    }

    /// Tiles a `[c]` vector into a `[count, c]` matrix.
    pub fn broadcast_rows(&mut self, row: Var, count: usize) -> TensorResult<Var> {
        if self.shape(row).len() != 1 {
            return Err(TensorError::RankMismatch {
                op: "broadcast_rows",
                expected: 1,
                shape: self.nodes[row.0].shape.clone(),
            });
        }
        let c = self.shape(row)[0];
        let mut values = Vec::with_capacity(count * c);
        for _ in 0..count {
            values.extend_from_slice(self.values(row));
        }
        self.push_checked(
            "broadcast_rows",
            Op::BroadcastRows { row },
            vec![count, c],
            values,
        )
    }

    // ── Model-specific ops ───────────────────────────────────────────

    pub fn softmax(&mut self, x: Var) -> TensorResult<Var> {
        if self.shape(x).len() != 1 || self.values(x).is_empty() {
            return Err(TensorError::RankMismatch {
                op: "softmax",
                expected: 1,
                shape: self.nodes[x.0].shape.clone(),
            });
        }
        let values = kernels::softmax(self.values(x));
        self.push_checked(
            "softmax",
            Op::Softmax { x },
            self.nodes[x.0].shape.clone(),
            values,
        )
    }

    /// Gated interpolation `gate ⊙ word + (1 − gate) ⊙ knowledge`, clamped
    /// per coordinate to the interval spanned by the two inputs so the
    /// convexity bound holds exactly under rounding. Equal inputs pass
    /// through untouched.
    pub fn gated_blend(&mut self, gate: Var, word: Var, knowledge: Var) -> TensorResult<Var> {
        if self.shape(gate) != self.shape(word) {
            return Err(self.shape_error("gated_blend", gate, word));
        }
        if self.shape(word) != self.shape(knowledge) {
            return Err(self.shape_error("gated_blend", word, knowledge));
        }
        let values: Vec<Real> = self
            .values(gate)
            .iter()
            .zip(self.values(word).iter().zip(self.values(knowledge)))
            .map(|(&g, (&e, &k))| {
                if e == k {
                    e
                } else {
                    (g * e + (1.0 - g) * k).clamp(e.min(k), e.max(k))
                }
            })
            .collect();
        self.push_checked(
            "gated_blend",
            Op::GatedBlend {
                gate,
                word,
                knowledge,
            },
            self.nodes[word.0].shape.clone(),
            values,
        )
    }

    /// Valid stride-1 cross-correlation of `[c, h, w]` input with
    /// `[f, c, rw, rh]` kernels plus per-map bias. No activation; apply
    /// one separately.
    pub fn conv2d(&mut self, input: Var, kernels_v: Var, bias: Var) -> TensorResult<Var> {
        let in_shape = self.shape(input).to_vec();
        let k_shape = self.shape(kernels_v).to_vec();
        if in_shape.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                expected: 3,
                shape: in_shape,
            });
        }
        if k_shape.len() != 4 || k_shape[1] != in_shape[0] {
            return Err(self.shape_error("conv2d", input, kernels_v));
        }
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (f, rw, rh) = (k_shape[0], k_shape[2], k_shape[3]);
        if rw > h || rh > w {
            return Err(TensorError::KernelTooLarge {
                kernel: k_shape,
                input: in_shape,
            });
        }
        if self.shape(bias) != [f] {
            return Err(self.shape_error("conv2d", kernels_v, bias));
        }
        let values = kernels::conv2d_valid(
            self.values(input),
            c,
            h,
            w,
            self.values(kernels_v),
            f,
            rw,
            rh,
            self.values(bias),
        );
        self.push_checked(
            "conv2d",
            Op::Conv2d {
                input,
                kernels: kernels_v,
                bias,
            },
            vec![f, h - rw + 1, w - rh + 1],
            values,
        )
    }

    pub fn maxpool2d(
        &mut self,
        input: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> TensorResult<Var> {
        let in_shape = self.shape(input).to_vec();
        if in_shape.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "maxpool2d",
                expected: 3,
                shape: in_shape,
            });
        }
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (pw, ph) = window;
        if pw == 0 || ph == 0 || pw > h || ph > w {
            return Err(TensorError::WindowTooLarge {
                window: vec![pw, ph],
                input: in_shape,
            });
        }
        let (sw, sh) = stride;
        let (oh, ow) = kernels::pool_output_dims(h, w, pw, ph, sw, sh);
        let (values, argmax) = kernels::maxpool2d(self.values(input), c, h, w, pw, ph, sw, sh);
        self.push_checked(
            "maxpool2d",
            Op::MaxPool2d { input, argmax },
            vec![c, oh, ow],
            values,
        )
    }

    /// Stacks equally shaped `[h, w]` matrices into a `[n, h, w]` volume.
    pub fn stack_channels(&mut self, parts: &[Var]) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("stack_channels"));
        }
        let (h, w) = self.matrix_dims(parts[0], "stack_channels")?;
        let mut values = Vec::with_capacity(parts.len() * h * w);
        for &p in parts {
            if self.shape(p) != [h, w] {
                return Err(self.shape_error("stack_channels", parts[0], p));
            }
            values.extend_from_slice(self.values(p));
        }
        self.push_checked(
            "stack_channels",
            Op::StackChannels {
                parts: parts.to_vec(),
            },
            vec![parts.len(), h, w],
            values,
        )
    }

    pub fn flatten(&mut self, x: Var) -> TensorResult<Var> {
        let numel = self.values(x).len();
        let values = self.values(x).to_vec();
        self.push_checked("flatten", Op::Flatten { x }, vec![numel], values)
    }

    /// One row of a `[r, c]` matrix as a `[c]` vector.
    pub fn row_slice(&mut self, x: Var, row: usize) -> TensorResult<Var> {
        let (r, c) = self.matrix_dims(x, "row_slice")?;
        if row >= r {
            return Err(TensorError::RowOutOfBounds { row, rows: r });
        }
        let values = self.values(x)[row * c..(row + 1) * c].to_vec();
        self.push_checked("row_slice", Op::RowSlice { x, row }, vec![c], values)
    }

    /// Stacks `[c]` vectors as the rows of a `[n, c]` matrix.
    pub fn concat_rows(&mut self, rows: &[Var]) -> TensorResult<Var> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput("concat_rows"));
        }
        let c = self.shape(rows[0]).to_vec();
        if c.len() != 1 {
            return Err(TensorError::RankMismatch {
                op: "concat_rows",
                expected: 1,
                shape: c,
            });
        }
        let width = c[0];
        let mut values = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if self.shape(r) != [width] {
                return Err(self.shape_error("concat_rows", rows[0], r));
            }
            values.extend_from_slice(self.values(r));
        }
        self.push_checked(
            "concat_rows",
            Op::ConcatRows {
                rows: rows.to_vec(),
            },
            vec![rows.len(), width],
            values,
        )
    }

    /// Horizontal concatenation of `[r, c1]` and `[r, c2]` into `[r, c1+c2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (r, c1) = self.matrix_dims(a, "concat_cols")?;
        let (r2, c2) = self.matrix_dims(b, "concat_cols")?;
        if r != r2 {
            return Err(self.shape_error("concat_cols", a, b));
        }
        let mut values = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            values.extend_from_slice(&self.values(a)[i * c1..(i + 1) * c1]);
            values.extend_from_slice(&self.values(b)[i * c2..(i + 1) * c2]);
        }
        self.push_checked(
            "concat_cols",
            Op::ConcatCols { a, b },
            vec![r, c1 + c2],
            values,
        )
    }

    pub fn sum(&mut self, x: Var) -> TensorResult<Var> {
        let s: Real = self.values(x).iter().sum();
        self.push_checked("sum", Op::Sum { x }, vec![1], vec![s])
    }

    /// `-log(max(probs[index], clamp))`, the per-example cross entropy for
    /// a one-hot target.
    pub fn neg_log_prob(&mut self, probs: Var, index: usize) -> TensorResult<Var> {
        if self.shape(probs).len() != 1 {
            return Err(TensorError::RankMismatch {
                op: "neg_log_prob",
                expected: 1,
                shape: self.nodes[probs.0].shape.clone(),
            });
        }
        if index >= self.values(probs).len() {
            return Err(TensorError::RowOutOfBounds {
                row: index,
                rows: self.values(probs).len(),
            });
        }
        let p = self.values(probs)[index].max(PROB_CLAMP);
        self.push_checked(
            "neg_log_prob",
            Op::NegLogProb { probs, index },
            vec![1],
            vec![-p.ln()],
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulates `∂loss/∂node` into every node reachable from `loss`,
    /// visiting each record exactly once in reverse order. Unreached nodes
    /// keep their gradient absent. Call [`Tape::zero_grads`] between passes
    /// that should not accumulate.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.values(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        // Fresh workspace per pass; results are added into the persistent
        // node grads afterwards so separate passes accumulate.
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        accumulate(&mut grads, loss, &[1.0]);

        for rec in self.records.iter().rev() {
            if grads[rec.out.0].is_none() {
                continue;
            }
            self.apply_backward(rec, &mut grads);
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if let Some(delta) = grad {
                match node.grad.as_mut() {
                    Some(g) => {
                        for (gi, di) in g.iter_mut().zip(&delta) {
                            *gi += *di;
                        }
                    }
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn apply_backward(&self, rec: &Record, grads: &mut [Option<Vec<Real>>]) {
        let out = rec.out;
        match &rec.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (p, q) = (self.shape(*a)[0], self.shape(*a)[1]);
                let r = self.shape(*b)[1];
                let (ga, gb) = {
                    let g = grads[out.0].as_deref().unwrap();
                    let av = self.values(*a);
                    let bv = self.values(*b);
                    let mut ga = vec![0.0; p * q];
                    for i in 0..p {
                        for k in 0..q {
                            let mut s = 0.0;
                            for j in 0..r {
                                s += g[i * r + j] * bv[k * r + j];
                            }
                            ga[i * q + k] = s;
                        }
                    }
                    let mut gb = vec![0.0; q * r];
                    for k in 0..q {
                        for j in 0..r {
                            let mut s = 0.0;
                            for i in 0..p {
                                s += av[i * q + k] * g[i * r + j];
                            }
                            gb[k * r + j] = s;
                        }
                    }
                    (ga, gb)
                };
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::MatVec { m, v } => {
                let (p, q) = (self.shape(*m)[0], self.shape(*m)[1]);
                let (gm, gv) = {
                    let g = grads[out.0].as_deref().unwrap();
                    let mv = self.values(*m);
                    let vv = self.values(*v);
                    let mut gm = vec![0.0; p * q];
                    let mut gv = vec![0.0; q];
                    for i in 0..p {
                        for j in 0..q {
                            gm[i * q + j] = g[i] * vv[j];
                            gv[j] += g[i] * mv[i * q + j];
                        }
                    }
                    (gm, gv)
                };
                accumulate(grads, *m, &gm);
                accumulate(grads, *v, &gv);
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gx = {
                    let g = grads[out.0].as_deref().unwrap();
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g[j * r + i];
                        }
                    }
                    gx
                };
                accumulate(grads, *x, &gx);
            }
            Op::Add { a, b } => {
                let g = grads[out.0].as_deref().unwrap().to_vec();
                accumulate(grads, *a, &g);
                accumulate(grads, *b, &g);
            }
            Op::Sub { a, b } => {
                let g = grads[out.0].as_deref().unwrap().to_vec();
                accumulate(grads, *a, &g);
                let neg: Vec<Real> = g.iter().map(|&v| -v).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let (ga, gb) = {
                    let g = grads[out.0].as_deref().unwrap();
                    let av = self.values(*a);
                    let bv = self.values(*b);
                    let ga: Vec<Real> = g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect();
                    let gb: Vec<Real> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                    (ga, gb)
                };
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Scale { x, factor } => {
                let gx: Vec<Real> = grads[out.0]
                    .as_deref()
                    .unwrap()
                    .iter()
                    .map(|&g| g * factor)
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::OneMinus { x } => {
                let gx: Vec<Real> = grads[out.0]
                    .as_deref()
                    .unwrap()
                    .iter()
                    .map(|&g| -g)
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::BroadcastAddScalar { x, s } => {
                let g = grads[out.0].as_deref().unwrap().to_vec();
                let gs: Real = g.iter().sum();
                accumulate(grads, *x, &g);
                accumulate(grads, *s, &[gs]);
            }
            Op::BroadcastAddRow { x, row } => {
                let c = self.shape(*row)[0];
                let (g, grow) = {
                    let g = grads[out.0].as_deref().unwrap();
                    let mut grow = vec![0.0; c];
                    for chunk in g.chunks_exact(c) {
                        for (acc, &gv) in grow.iter_mut().zip(chunk) {
                            *acc += gv;
                        }
                    }
                    (g.to_vec(), grow)
                };
                accumulate(grads, *x, &g);
                accumulate(grads, *row, &grow);
            }
            Op::BroadcastRows { row } => {
                let c = self.shape(*row)[0];
                let grow = {
                    let g = grads[out.0].as_deref().unwrap();
                    let mut grow = vec![0.0; c];
                    for chunk in g.chunks_exact(c) {
                        for (acc, &gv) in grow.iter_mut().zip(chunk) {
                            *acc += gv;
                        }
                    }
                    grow
                };
                accumulate(grads, *row, &grow);
            }
            Op::Activation { x, kind } => {
                let gx: Vec<Real> = {
                    let g = grads[out.0].as_deref().unwrap();
                    let y = self.values(out);
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * kind.derivative_from_output(yi))
                        .collect()
                };
                accumulate(grads, *x, &gx);
            }
            Op::Softmax { x } => {
                let gx: Vec<Real> = {
                    let g = grads[out.0].as_deref().unwrap();
                    let y = self.values(out);
                    let inner: Real = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &yi)| yi * (gi - inner))
                        .collect()
                };
                accumulate(grads, *x, &gx);
            }
            Op::GatedBlend {
                gate,
                word,
                knowledge,
            } => {
                let (gg, ge, gk) = {
                    let g = grads[out.0].as_deref().unwrap();
                    let gatev = self.values(*gate);
                    let ev = self.values(*word);
                    let kv = self.values(*knowledge);
                    let mut gg = vec![0.0; g.len()];
                    let mut ge = vec![0.0; g.len()];
                    let mut gk = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        gg[i] = g[i] * (ev[i] - kv[i]);
                        ge[i] = g[i] * gatev[i];
                        gk[i] = g[i] * (1.0 - gatev[i]);
                    }
                    (gg, ge, gk)
                };
                accumulate(grads, *gate, &gg);
                accumulate(grads, *word, &ge);
                accumulate(grads, *knowledge, &gk);
            }
            Op::Conv2d {
                input,
                kernels: kv,
                bias,
            } => {
                let in_shape = self.shape(*input);
                let k_shape = self.shape(*kv);
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (f, rw, rh) = (k_shape[0], k_shape[2], k_shape[3]);
                let (oh, ow) = (h - rw + 1, w - rh + 1);
                let (gin, gk, gb) = {
                    let g = grads[out.0].as_deref().unwrap();
                    let inv = self.values(*input);
                    let kvals = self.values(*kv);
                    let mut gin = vec![0.0; c * h * w];
                    let mut gk = vec![0.0; f * c * rw * rh];
                    let mut gb = vec![0.0; f];
                    for fo in 0..f {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = g[fo * oh * ow + i * ow + j];
                                if go == 0.0 {
                                    continue;
                                }
                                gb[fo] += go;
                                for ci in 0..c {
                                    for s in 0..rw {
                                        let ibase = ci * h * w + (i + s) * w + j;
                                        let kbase = fo * c * rw * rh + ci * rw * rh + s * rh;
                                        for t in 0..rh {
                                            gin[ibase + t] += go * kvals[kbase + t];
                                            gk[kbase + t] += go * inv[ibase + t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    (gin, gk, gb)
                };
                accumulate(grads, *input, &gin);
                accumulate(grads, *kv, &gk);
                accumulate(grads, *bias, &gb);
            }
            Op::MaxPool2d { input, argmax } => {
                let gin = {
                    let g = grads[out.0].as_deref().unwrap();
                    let mut gin = vec![0.0; self.values(*input).len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gin[src] += g[o];
                    }
                    gin
                };
                accumulate(grads, *input, &gin);
            }
            Op::StackChannels { parts } => {
                let part_len = self.values(parts[0]).len();
                let g = grads[out.0].as_deref().unwrap().to_vec();
                for (i, &p) in parts.iter().enumerate() {
                    accumulate(grads, p, &g[i * part_len..(i + 1) * part_len]);
                }
            }
            Op::Flatten { x } => {
                let g = grads[out.0].as_deref().unwrap().to_vec();
                accumulate(grads, *x, &g);
            }
            Op::RowSlice { x, row } => {
                let c = self.shape(out)[0];
                let full = self.values(*x).len();
                let g = grads[out.0].as_deref().unwrap().to_vec();
                accumulate_range(grads, *x, row * c, &g, full);
            }
            Op::ConcatRows { rows } => {
                let c = self.shape(rows[0])[0];
                let g = grads[out.0].as_deref().unwrap().to_vec();
                for (i, &r) in rows.iter().enumerate() {
                    accumulate(grads, r, &g[i * c..(i + 1) * c]);
                }
            }
            Op::ConcatCols { a, b } => {
                let (r, c1) = (self.shape(*a)[0], self.shape(*a)[1]);
                let c2 = self.shape(*b)[1];
                let (ga, gb) = {
                    let g = grads[out.0].as_deref().unwrap();
                    let mut ga = vec![0.0; r * c1];
                    let mut gb = vec![0.0; r * c2];
                    for i in 0..r {
                        ga[i * c1..(i + 1) * c1]
                            .copy_from_slice(&g[i * (c1 + c2)..i * (c1 + c2) + c1]);
                        gb[i * c2..(i + 1) * c2]
                            .copy_from_slice(&g[i * (c1 + c2) + c1..(i + 1) * (c1 + c2)]);
                    }
                    (ga, gb)
                };
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::MulValues { x, weights } => {
                let gx: Vec<Real> = grads[out.0]
                    .as_deref()
                    .unwrap()
                    .iter()
                    .zip(weights)
                    .map(|(&g, &w)| g * w)
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::Sum { x } => {
                let g = grads[out.0].as_deref().unwrap()[0];
                let gx = vec![g; self.values(*x).len()];
                accumulate(grads, *x, &gx);
            }
            Op::NegLogProb { probs, index } => {
                let g = grads[out.0].as_deref().unwrap()[0];
                let p = self.values(*probs)[*index];
                if p >= PROB_CLAMP {
                    let mut gp = vec![0.0; self.values(*probs).len()];
                    gp[*index] = -g / p;
                    accumulate(grads, *probs, &gp);
                }
            }
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> TensorResult<(usize, usize)> {
        let s = self.shape(v);
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: s.to_vec(),
            })
        }
    }

    fn shape_error(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<Real>>], var: Var, delta: &[Real]) {
    accumulate_range(grads, var, 0, delta, delta.len())
}

fn accumulate_range(
    grads: &mut [Option<Vec<Real>>],
    var: Var,
    offset: usize,
    delta: &[Real],
    full_len: usize,
) {
    let buf = grads[var.0].get_or_insert_with(|| vec![0.0; full_len]);
    for (slot, &d) in buf[offset..offset + delta.len()].iter_mut().zip(delta) {
        *slot += d;
    }
}
