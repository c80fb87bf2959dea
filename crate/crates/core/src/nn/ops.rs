//! Parameter-free primitives plus the affine head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::norm::Mode;
use super::tensor::{Matrix, Real, Tensor3};
use crate::{Error, Result};

pub fn relu<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Passes gradient where the ReLU input was positive.
pub fn relu_backward<T: Real>(pre: &Tensor3<T>, grad_out: &Tensor3<T>) -> Tensor3<T> {
    let mut g = grad_out.clone();
    for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
        if !(p > T::ZERO) {
            *gv = T::ZERO;
        }
    }
    g
}

/// Source channel for each output channel of a `g`-group shuffle: reshape
/// channels to `(g, C/g)`, transpose, flatten.
pub fn shuffle_permutation(channels: usize, g: usize) -> Result<Vec<usize>> {
    if g == 0 || channels % g != 0 {
        return Err(Error::shape(format!(
            "shuffle groups {g} do not divide {channels} channels"
        )));
    }
    let per = channels / g;
    Ok((0..channels).map(|i| (i % g) * per + i / g).collect())
}

pub fn channel_shuffle<T: Real>(x: &Tensor3<T>, g: usize) -> Result<Tensor3<T>> {
    let perm = shuffle_permutation(x.channels(), g)?;
    Ok(permute_channels(x, &perm))
}

/// Gradient of [`channel_shuffle`]: the inverse permutation, which is the
/// shuffle with `C / g` groups.
pub fn channel_shuffle_backward<T: Real>(grad_out: &Tensor3<T>, g: usize) -> Result<Tensor3<T>> {
    let c = grad_out.channels();
    if g == 0 || c % g != 0 {
        return Err(Error::shape(format!("shuffle groups {g} do not divide {c} channels")));
    }
    channel_shuffle(grad_out, c / g)
}

fn permute_channels<T: Real>(x: &Tensor3<T>, src: &[usize]) -> Tensor3<T> {
    let (n, c, l) = x.shape();
    let mut out = Tensor3::zeros(n, c, l);
    for i in 0..n {
        for (dst, &s) in src.iter().enumerate() {
            out.row_mut(i, dst).copy_from_slice(x.row(i, s));
        }
    }
    out
}

/// Inverted dropout. Returns the output and the multiplier mask (0 or
/// `1 / (1 - p)`), or `None` when the layer is an identity.
pub fn dropout<T: Real>(
    x: &Tensor3<T>,
    p: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor3<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.data().len())
        .map(|_| if rng.gen::<f64>() < p { T::ZERO } else { keep })
        .collect();
    let mut out = x.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Real>(grad_out: &Tensor3<T>, mask: Option<&[T]>) -> Tensor3<T> {
    let mut g = grad_out.clone();
    if let Some(mask) = mask {
        for (v, &m) in g.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
    }
    g
}

/// Mean over positions, one value per (sample, channel).
pub fn global_average_pool<T: Real>(x: &Tensor3<T>) -> Result<Matrix<T>> {
    let (n, c, l) = x.shape();
    if l == 0 {
        return Err(Error::shape("global average pool over empty length"));
    }
    let inv = T::from_f64(1.0 / l as f64);
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        for ch in 0..c {
            let s: T = x.row(i, ch).iter().copied().sum();
            out.set(i, ch, s * inv);
        }
    }
    Ok(out)
}

pub fn global_average_pool_backward<T: Real>(grad: &Matrix<T>, len: usize) -> Tensor3<T> {
    let inv = T::from_f64(1.0 / len as f64);
    let mut out = Tensor3::zeros(grad.rows(), grad.cols(), len);
    for i in 0..grad.rows() {
        for c in 0..grad.cols() {
            out.row_mut(i, c).fill(grad.get(i, c) * inv);
        }
    }
    out
}

/// `v W^T + b` with `W` stored `(n_out, n_in)` row-major.
pub fn affine_forward<T: Real>(
    weight: &[T],
    bias: &[T],
    n_in: usize,
    v: &Matrix<T>,
) -> Result<Matrix<T>> {
    let n_out = bias.len();
    if weight.len() != n_out * n_in || v.cols() != n_in {
        return Err(Error::shape(format!(
            "affine {n_out}x{n_in} cannot take input with {} columns (weight len {})",
            v.cols(),
            weight.len()
        )));
    }
    let mut out = Matrix::zeros(v.rows(), n_out);
    for r in 0..v.rows() {
        let x = v.row(r);
        for o in 0..n_out {
            let w = &weight[o * n_in..(o + 1) * n_in];
            let mut acc = bias[o];
            for (a, b) in w.iter().zip(x) {
                acc += *a * *b;
            }
            out.set(r, o, acc);
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn affine_backward<T: Real>(
    weight: &[T],
    n_in: usize,
    v: &Matrix<T>,
    grad_out: &Matrix<T>,
) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let n_out = grad_out.cols();
    let mut gv = Matrix::zeros(v.rows(), n_in);
    let mut gw = vec![T::ZERO; n_out * n_in];
    let mut gb = vec![T::ZERO; n_out];
    for r in 0..v.rows() {
        for o in 0..n_out {
            let g = grad_out.get(r, o);
            gb[o] += g;
            let w = &weight[o * n_in..(o + 1) * n_in];
            let gw_row = &mut gw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                gw_row[i] += g * v.get(r, i);
            }
            let gv_row = gv.row_mut(r);
            for i in 0..n_in {
                gv_row[i] += g * w[i];
            }
        }
    }
    (gv, gw, gb)
}

/// Row-wise softmax via the max-shifted exponential, computed in f64.
pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<f64> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.to_f64()).collect();
        out.row_mut(r).copy_from_slice(&crate::loss::softmax(&row));
    }
    out
}
