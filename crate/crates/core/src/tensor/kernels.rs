//! Shared numeric loops behind both the direct tensor ops and the tape.
//!
//! Accumulation order is part of the contract: reductions run over the
//! innermost index in ascending order so results agree bitwise with the
//! naive nested-loop references used in the tests.

use super::Real;

/// `[p, q] x [q, r] -> [p, r]`; each output cell accumulates over k ascending.
pub fn matmul(a: &[Real], b: &[Real], p: usize, q: usize, r: usize) -> Vec<Real> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * r..(k + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `[p, q] x [q] -> [p]`.
pub fn matvec(m: &[Real], v: &[Real], p: usize, q: usize) -> Vec<Real> {
    let mut out = vec![0.0; p];
    for i in 0..p {
        out[i] = dot(&m[i * q..(i + 1) * q], v);
    }
    out
}

pub fn dot(a: &[Real], b: &[Real]) -> Real {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn transpose(a: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Max-subtracted softmax over a nonempty slice.
pub fn softmax(x: &[Real]) -> Vec<Real> {
    let max = x.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: Real = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Valid stride-1 cross-correlation. Input `[c, h, w]`, kernels
/// `[f, c, rw, rh]`, one bias per output map. Sums run channel-major,
/// then kernel row, then kernel column.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_valid(
    input: &[Real],
    c: usize,
    h: usize,
    w: usize,
    kernels: &[Real],
    f: usize,
    rw: usize,
    rh: usize,
    biases: &[Real],
) -> Vec<Real> {
    let (oh, ow) = (h - rw + 1, w - rh + 1);
    let mut out = vec![0.0; f * oh * ow];
    for fo in 0..f {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for s in 0..rw {
                        let irow = ci * h * w + (i + s) * w + j;
                        let krow = fo * c * rw * rh + ci * rw * rh + s * rh;
                        for t in 0..rh {
                            acc += kernels[krow + t] * input[irow + t];
                        }
                    }
                }
                out[fo * oh * ow + i * ow + j] = acc + biases[fo];
            }
        }
    }
    out
}

pub fn pool_output_dims(
    h: usize,
    w: usize,
    pw: usize,
    ph: usize,
    sw: usize,
    sh: usize,
) -> (usize, usize) {
    ((h - pw) / sw + 1, (w - ph) / sh + 1)
}

/// Per-channel window max with the argmax flat index of each window
/// (first occurrence in row-major order on ties).
#[allow(clippy::too_many_arguments)]
pub fn maxpool2d(
    input: &[Real],
    c: usize,
    h: usize,
    w: usize,
    pw: usize,
    ph: usize,
    sw: usize,
    sh: usize,
) -> (Vec<Real>, Vec<usize>) {
    let (oh, ow) = pool_output_dims(h, w, pw, ph, sw, sh);
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = Real::NEG_INFINITY;
                let mut best_idx = 0usize;
                for s in 0..pw {
                    for t in 0..ph {
                        let idx = ci * h * w + (i * sw + s) * w + (j * sh + t);
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = ci * oh * ow + i * ow + j;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}
