//! GRU cell and bidirectional encoding.
//!
//! The recurrence follows the convention where the update gate weighs the
//! candidate state rather than the previous state (the mirror of the more
//! common form; equivalent up to relabeling the gate):
//!
//! ```text
//! z = sigmoid(W_z x + U_z h)
//! r = sigmoid(W_r x + U_r h)
//! c = tanh(W_h x + U_h (r ⊙ h))
//! h' = z ⊙ c + (1 - z) ⊙ h
//! ```
//!
//! There are no bias terms. Initial states are zero, which bounds every
//! hidden entry to [-1, 1]: each step is a convex combination of a tanh
//! output and the previous state. Padding positions are processed like any
//! other (PAD embeddings are zero rows); no masking is applied.

use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Activation, TensorError, TensorResult};

/// The six weight matrices of one GRU direction: `W_* ∈ [m, d]`,
/// `U_* ∈ [m, m]`.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
}

/// One recurrence step.
pub fn gru_step(tape: &mut Tape, x: Var, h_prev: Var, p: &GruVars) -> TensorResult<Var> {
    let zx = tape.matvec(p.w_z, x)?;
    let zh = tape.matvec(p.u_z, h_prev)?;
    let zpre = tape.add(zx, zh)?;
    let z = tape.activation(zpre, Activation::Sigmoid)?;

    let rx = tape.matvec(p.w_r, x)?;
    let rh = tape.matvec(p.u_r, h_prev)?;
    let rpre = tape.add(rx, rh)?;
    let r = tape.activation(rpre, Activation::Sigmoid)?;

    let cx = tape.matvec(p.w_h, x)?;
    let gated_h = tape.mul(r, h_prev)?;
    let ch = tape.matvec(p.u_h, gated_h)?;
    let cpre = tape.add(cx, ch)?;
    let cand = tape.activation(cpre, Activation::Tanh)?;

    let keep = tape.mul(z, cand)?;
    let carry_gate = tape.one_minus(z)?;
    let carry = tape.mul(carry_gate, h_prev)?;
    tape.add(keep, carry)
}

/// Encodes a `[L, d]` sequence into `[L, 2m]` hidden states: row i is the
/// forward state at i concatenated with the backward state at i.
pub fn bigru_encode(tape: &mut Tape, seq: Var, fwd: &GruVars, bwd: &GruVars) -> TensorResult<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(TensorError::EmptyInput("bigru_encode"));
    }
    let len = shape[0];
    let m = tape.shape(fwd.u_z)[0];

    let rows: Vec<Var> = (0..len)
        .map(|i| tape.row_slice(seq, i))
        .collect::<TensorResult<_>>()?;

    let mut forward = Vec::with_capacity(len);
    let mut h = tape.leaf_zeros(vec![m]);
    for &x in &rows {
        h = gru_step(tape, x, h, fwd)?;
        forward.push(h);
    }

    let mut backward = vec![forward[0]; len];
    let mut h = tape.leaf_zeros(vec![m]);
    for i in (0..len).rev() {
        h = gru_step(tape, rows[i], h, bwd)?;
        backward[i] = h;
    }

    let fwd_states = tape.concat_rows(&forward)?;
    let bwd_states = tape.concat_rows(&backward)?;
    tape.concat_cols(fwd_states, bwd_states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_gradcheck;
    use crate::tensor::{Real, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf_gru(tape: &mut Tape, tensors: &[Tensor; 6]) -> GruVars {
        GruVars {
            w_z: tape.leaf(&tensors[0]),
            w_r: tape.leaf(&tensors[1]),
            w_h: tape.leaf(&tensors[2]),
            u_z: tape.leaf(&tensors[3]),
            u_r: tape.leaf(&tensors[4]),
            u_h: tape.leaf(&tensors[5]),
        }
    }

    fn zero_gru(m: usize, d: usize) -> [Tensor; 6] {
        [
            Tensor::zeros(vec![m, d]),
            Tensor::zeros(vec![m, d]),
            Tensor::zeros(vec![m, d]),
            Tensor::zeros(vec![m, m]),
            Tensor::zeros(vec![m, m]),
            Tensor::zeros(vec![m, m]),
        ]
    }

    fn random_gru(m: usize, d: usize, rng: &mut ChaCha8Rng) -> [Tensor; 6] {
        let mut mk = |rows: usize, cols: usize| {
            let values = (0..rows * cols)
                .map(|_| rng.random_range(-0.9..0.9))
                .collect();
            Tensor::new(vec![rows, cols], values).unwrap()
        };
        [mk(m, d), mk(m, d), mk(m, d), mk(m, m), mk(m, m), mk(m, m)]
    }

    /// Scalar reference for one GRU step, written index by index.
    fn gru_step_oracle(
        x: &[Real],
        h_prev: &[Real],
        tensors: &[Tensor; 6],
        m: usize,
        d: usize,
    ) -> Vec<Real> {
        let rowdot = |w: &Tensor, i: usize, v: &[Real], n: usize| -> Real {
            let mut s = 0.0;
            for j in 0..n {
                s += w.values()[i * n + j] * v[j];
            }
            s
        };
        let sigmoid = |v: Real| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; m];
        for i in 0..m {
            let z = sigmoid(rowdot(&tensors[0], i, x, d) + rowdot(&tensors[3], i, h_prev, m));
            let r_gated: Vec<Real> = (0..m)
                .map(|j| {
                    sigmoid(rowdot(&tensors[1], j, x, d) + rowdot(&tensors[4], j, h_prev, m))
                        * h_prev[j]
                })
                .collect();
            let cand = (rowdot(&tensors[2], i, x, d) + rowdot(&tensors[5], i, &r_gated, m)).tanh();
            h[i] = z * cand + (1.0 - z) * h_prev[i];
        }
        h
    }

    #[test]
    fn zero_params_halve_previous_state() {
        // z = 0.5, candidate = 0, so h = 0.5 * h_prev
        let mut tape = Tape::new();
        let params = zero_gru(2, 3);
        let p = leaf_gru(&mut tape, &params);
        let x = tape.leaf_values(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let h_prev = tape.leaf_values(vec![2], vec![0.8, -0.4]).unwrap();
        let h = gru_step(&mut tape, x, h_prev, &p).unwrap();
        assert_eq!(tape.values(h), &[0.4, -0.2]);
    }

    #[test]
    fn zero_state_zero_params_stays_zero() {
        let mut tape = Tape::new();
        let params = zero_gru(2, 2);
        let p = leaf_gru(&mut tape, &params);
        let x = tape.leaf_values(vec![2], vec![3.0, -3.0]).unwrap();
        let h_prev = tape.leaf_zeros(vec![2]);
        let h = gru_step(&mut tape, x, h_prev, &p).unwrap();
        assert_eq!(tape.values(h), &[0.0, 0.0]);
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (m, d) = (2, 2);
            let tensors = random_gru(m, d, &mut rng);
            let x: Vec<Real> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hp: Vec<Real> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();

            let mut tape = Tape::new();
            let p = leaf_gru(&mut tape, &tensors);
            let xv = tape.leaf_values(vec![d], x.clone()).unwrap();
            let hv = tape.leaf_values(vec![m], hp.clone()).unwrap();
            let h = gru_step(&mut tape, xv, hv, &p).unwrap();

            let expect = gru_step_oracle(&x, &hp, &tensors, m, d);
            for i in 0..m {
                assert!((tape.values(h)[i] - expect[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_symmetry_when_directions_share_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tensors = random_gru(3, 2, &mut rng);
        let mut tape = Tape::new();
        let p = leaf_gru(&mut tape, &tensors);
        let seq = tape.leaf_values(vec![1, 2], vec![0.4, -0.7]).unwrap();
        let out = bigru_encode(&mut tape, seq, &p, &p).unwrap();
        assert_eq!(tape.shape(out), &[1, 6]);
        let row = tape.values(out);
        assert_eq!(&row[..3], &row[3..]);
    }

    #[test]
    fn reversal_property_is_exact() {
        // encoding reverse(seq) with (fwd, bwd) swapped equals the
        // row-reversed original encoding with halves swapped
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (l, d, m) = (5, 3, 2);
        let fwd_t = random_gru(m, d, &mut rng);
        let bwd_t = random_gru(m, d, &mut rng);
        let seq: Vec<Real> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut reversed = vec![0.0; l * d];
        for i in 0..l {
            reversed[i * d..(i + 1) * d].copy_from_slice(&seq[(l - 1 - i) * d..(l - i) * d]);
        }

        let mut t1 = Tape::new();
        let f1 = leaf_gru(&mut t1, &fwd_t);
        let b1 = leaf_gru(&mut t1, &bwd_t);
        let s1 = t1.leaf_values(vec![l, d], seq).unwrap();
        let h1 = bigru_encode(&mut t1, s1, &f1, &b1).unwrap();

        let mut t2 = Tape::new();
        let f2 = leaf_gru(&mut t2, &fwd_t);
        let b2 = leaf_gru(&mut t2, &bwd_t);
        let s2 = t2.leaf_values(vec![l, d], reversed).unwrap();
        let h2 = bigru_encode(&mut t2, s2, &b2, &f2).unwrap();

        for i in 0..l {
            let orig = &t1.values(h1)[i * 2 * m..(i + 1) * 2 * m];
            let rev = &t2.values(h2)[(l - 1 - i) * 2 * m..(l - i) * 2 * m];
            assert_eq!(&orig[..m], &rev[m..]);
            assert_eq!(&orig[m..], &rev[..m]);
        }
    }

    #[test]
    fn hidden_states_bounded_with_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (l, d, m) = (10, 4, 3);
        for _ in 0..5 {
            let fwd_t = random_gru(m, d, &mut rng);
            let bwd_t = random_gru(m, d, &mut rng);
            let seq: Vec<Real> = (0..l * d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut tape = Tape::new();
            let f = leaf_gru(&mut tape, &fwd_t);
            let b = leaf_gru(&mut tape, &bwd_t);
            let s = tape.leaf_values(vec![l, d], seq).unwrap();
            let h = bigru_encode(&mut tape, s, &f, &b).unwrap();
            assert!(tape.values(h).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_dynamics() {
        let mut tape = Tape::new();
        let params = zero_gru(3, 2);
        let p = leaf_gru(&mut tape, &params);
        let seq = tape.leaf_zeros(vec![6, 2]);
        let h = bigru_encode(&mut tape, seq, &p, &p).unwrap();
        assert!(tape.values(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_dimensions_produce_square_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, d, m) = (200, 100, 100);
        let fwd_t = random_gru(m, d, &mut rng);
        let bwd_t = random_gru(m, d, &mut rng);
        let mut tape = Tape::new();
        let f = leaf_gru(&mut tape, &fwd_t);
        let b = leaf_gru(&mut tape, &bwd_t);
        let seq = tape.leaf_zeros(vec![l, d]);
        let h = bigru_encode(&mut tape, seq, &f, &b).unwrap();
        assert_eq!(tape.shape(h), &[200, 200]);
    }

    #[test]
    fn five_step_bigru_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (l, d, m) = (5, 2, 2);
        let seq: Vec<Real> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut params: Vec<Tensor> = random_gru(m, d, &mut rng).into_iter().collect();
        params.extend(random_gru(m, d, &mut rng));
        let names = [
            "fwd.W_z", "fwd.W_r", "fwd.W_h", "fwd.U_z", "fwd.U_r", "fwd.U_h", "bwd.W_z", "bwd.W_r",
            "bwd.W_h", "bwd.U_z", "bwd.U_r", "bwd.U_h",
        ];

        let run = |ps: &[Tensor]| -> TensorResult<(Real, Vec<Vec<Real>>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|t| tape.leaf(t)).collect();
            let fwd = GruVars {
                w_z: vars[0],
                w_r: vars[1],
                w_h: vars[2],
                u_z: vars[3],
                u_r: vars[4],
                u_h: vars[5],
            };
            let bwd = GruVars {
                w_z: vars[6],
                w_r: vars[7],
                w_h: vars[8],
                u_z: vars[9],
                u_r: vars[10],
                u_h: vars[11],
            };
            let s = tape.leaf_values(vec![l, d], seq.clone())?;
            let h = bigru_encode(&mut tape, s, &fwd, &bwd)?;
            let sq = tape.mul(h, h)?;
            let loss = tape.sum(sq)?;
            tape.backward(loss)?;
            let grads = vars
                .iter()
                .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
                .collect();
            Ok((tape.scalar_value(loss), grads))
        };

        let (_, grads) = run(&params).unwrap();
        for (t, g) in params.iter_mut().zip(&grads) {
            t.accumulate_grad(g);
        }
        let report = finite_diff_gradcheck(&mut params, &names, 1e-5, |ps| {
            run(ps).map(|(loss, _)| loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
