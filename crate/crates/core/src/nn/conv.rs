//! 1-d grouped convolution.
//!
//! Output channel `j` belongs to group `j / (c_out / g)` and reads only the
//! `c_in / g` input channels of that group. Weights are laid out
//! `(c_out, c_in / g, k)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::norm::BatchNormState;
use super::tensor::{Real, Tensor3};
use crate::{Error, Result};

/// Shape of one convolution: channels, kernel, groups, stride and symmetric
/// zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    #[serde(default = "one")]
    pub g: usize,
    #[serde(default = "one")]
    pub s: usize,
    /// Zero padding applied on each side.
    #[serde(default)]
    pub pad: usize,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize, g: usize, s: usize, pad: usize) -> Self {
        Self {
            c_in,
            c_out,
            k,
            g,
            s,
            pad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.g == 0 || self.k == 0 || self.s == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(Error::config(format!(
                "conv {self:?}: channels, k, g and s must be positive"
            )));
        }
        if self.c_in % self.g != 0 || self.c_out % self.g != 0 {
            return Err(Error::config(format!(
                "conv {self:?}: g = {} must divide c_in = {} and c_out = {}",
                self.g, self.c_in, self.c_out
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn in_per_group(&self) -> usize {
        self.c_in / self.g
    }

    #[inline]
    pub fn out_per_group(&self) -> usize {
        self.c_out / self.g
    }

    /// First input channel read by output channel `j`.
    #[inline]
    pub fn group_base(&self, j: usize) -> usize {
        (j * self.g / self.c_out) * self.in_per_group()
    }

    /// `floor((l_in + 2 pad - k) / s) + 1`, or an error when that is below one.
    pub fn output_len(&self, l_in: usize) -> Result<usize> {
        let padded = l_in + 2 * self.pad;
        if padded < self.k {
            return Err(Error::shape(format!(
                "input length {l_in} with padding {} is shorter than kernel {}",
                self.pad, self.k
            )));
        }
        Ok((padded - self.k) / self.s + 1)
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.in_per_group() * self.k
    }
}

/// Convolution weights plus the batch normalization that follows them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub spec: ConvSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub bn: BatchNormState<T>,
}

impl<T: Real> ConvLayer<T> {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and bias; BN starts at `gamma = 1, beta = 0`.
    pub fn init<R: Rng>(spec: ConvSpec, eps: f64, momentum: f64, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let fan_in = (spec.in_per_group() * spec.k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = (0..spec.weight_len())
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        let bias = (0..spec.c_out)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Ok(Self {
            spec,
            weight,
            bias,
            bn: BatchNormState::new(spec.c_out, eps, momentum)?,
        })
    }

    pub fn forward(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        conv1d_forward(&self.spec, &self.weight, &self.bias, x)
    }
}

/// Half-open range of output positions `t` for which tap `tau` lands inside
/// the unpadded input.
#[inline]
fn tap_range(tau: usize, pad: usize, s: usize, l_in: usize, l_out: usize) -> (usize, usize) {
    // need pad <= s*t + tau < pad + l_in
    let lo = if pad > tau { (pad - tau).div_ceil(s) } else { 0 };
    let hi_excl = if pad + l_in > tau {
        (pad + l_in - tau - 1) / s + 1
    } else {
        0
    };
    (lo.min(l_out), hi_excl.min(l_out).max(lo.min(l_out)))
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    const LANES: usize = 8;
    let n = x.len().min(y.len());
    let mut acc = [T::ZERO; LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let xs = &x[c * LANES..(c + 1) * LANES];
        let ys = &y[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * LANES..n {
        tail += x[i] * y[i];
    }
    let mut total = T::ZERO;
    for a in acc {
        total += a;
    }
    total + tail
}

fn check_input<T: Real>(spec: &ConvSpec, x: &Tensor3<T>) -> Result<usize> {
    spec.validate()?;
    if x.channels() != spec.c_in {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {}",
            spec.c_in,
            x.channels()
        )));
    }
    spec.output_len(x.len())
}

/// Grouped convolution of every sample in `x`.
pub fn conv1d_forward<T: Real>(
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
    x: &Tensor3<T>,
) -> Result<Tensor3<T>> {
    let l_out = check_input(spec, x)?;
    if weight.len() != spec.weight_len() || bias.len() != spec.c_out {
        return Err(Error::shape("conv weight/bias length does not match spec"));
    }
    let (n, _, l_in) = x.shape();
    let mut out = Tensor3::zeros(n, spec.c_out, l_out);
    let out_stride = spec.c_out * l_out;
    if out_stride > 0 {
        out.data_mut()
            .par_chunks_mut(out_stride)
            .enumerate()
            .for_each(|(i, out_sample)| {
                forward_sample(spec, weight, bias, x.sample(i), l_in, l_out, out_sample)
            });
    }
    out.ensure_finite("convolution output")?;
    Ok(out)
}

fn forward_sample<T: Real>(
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
    x: &[T],
    l_in: usize,
    l_out: usize,
    out: &mut [T],
) {
    if spec.s != 1 {
        return forward_sample_strided(spec, weight, bias, x, l_in, l_out, out);
    }
    let cin_g = spec.in_per_group();
    let (k, pad) = (spec.k, spec.pad);
    for j in 0..spec.c_out {
        let base = spec.group_base(j);
        let out_row = &mut out[j * l_out..(j + 1) * l_out];
        out_row.fill(bias[j]);
        for u in 0..cin_g {
            let x_row = &x[(base + u) * l_in..(base + u + 1) * l_in];
            let w_row = &weight[(j * cin_g + u) * k..(j * cin_g + u + 1) * k];
            for (tau, &w) in w_row.iter().enumerate() {
                let (t0, t1) = tap_range(tau, pad, 1, l_in, l_out);
                if t0 >= t1 {
                    continue;
                }
                let first = t0 + tau - pad;
                axpy(w, &x_row[first..first + (t1 - t0)], &mut out_row[t0..t1]);
            }
        }
    }
}

/// Gathers, for every input channel and tap, the input value seen by each
/// output position: `cols[(u * k + tau) * l_out + t] = x[u][s t + tau - pad]`
/// (zero in the padding). Turns strided access into contiguous rows.
fn gather_columns<T: Real>(spec: &ConvSpec, x: &[T], l_in: usize, l_out: usize) -> Vec<T> {
    let (k, s, pad) = (spec.k, spec.s, spec.pad);
    let mut cols = vec![T::ZERO; spec.c_in * k * l_out];
    for u in 0..spec.c_in {
        let x_row = &x[u * l_in..(u + 1) * l_in];
        for tau in 0..k {
            let (t0, t1) = tap_range(tau, pad, s, l_in, l_out);
            let col = &mut cols[(u * k + tau) * l_out..(u * k + tau + 1) * l_out];
            for t in t0..t1 {
                col[t] = x_row[s * t + tau - pad];
            }
        }
    }
    cols
}

fn forward_sample_strided<T: Real>(
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
    x: &[T],
    l_in: usize,
    l_out: usize,
    out: &mut [T],
) {
    let cin_g = spec.in_per_group();
    let k = spec.k;
    let cols = gather_columns(spec, x, l_in, l_out);
    for j in 0..spec.c_out {
        let base = spec.group_base(j);
        let out_row = &mut out[j * l_out..(j + 1) * l_out];
        out_row.fill(bias[j]);
        for u in 0..cin_g {
            let w_row = &weight[(j * cin_g + u) * k..(j * cin_g + u + 1) * k];
            for (tau, &w) in w_row.iter().enumerate() {
                let c = ((base + u) * k + tau) * l_out;
                axpy(w, &cols[c..c + l_out], out_row);
            }
        }
    }
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor3<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Reverse-mode pass for [`conv1d_forward`]. Per-sample weight gradients are
/// summed in batch order so the result does not depend on thread scheduling.
pub fn conv1d_backward<T: Real>(
    spec: &ConvSpec,
    weight: &[T],
    x: &Tensor3<T>,
    grad_out: &Tensor3<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let l_out = check_input(spec, x)?;
    if grad_out.shape() != (x.batch(), spec.c_out, l_out) {
        return Err(Error::shape(format!(
            "conv gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            (x.batch(), spec.c_out, l_out)
        )));
    }
    let (n, _, l_in) = x.shape();
    let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            backward_sample(
                spec,
                weight,
                x.sample(i),
                grad_out.sample(i),
                l_in,
                l_out,
                need_input_grad,
            )
        })
        .collect();

    let mut gw = vec![T::ZERO; spec.weight_len()];
    let mut gb = vec![T::ZERO; spec.c_out];
    let mut gx = if need_input_grad {
        Some(Vec::with_capacity(n * spec.c_in * l_in))
    } else {
        None
    };
    for (w, b, xi) in per_sample {
        for (a, v) in gw.iter_mut().zip(w) {
            *a += v;
        }
        for (a, v) in gb.iter_mut().zip(b) {
            *a += v;
        }
        if let (Some(gx), Some(xi)) = (gx.as_mut(), xi) {
            gx.extend(xi);
        }
    }
    let input = match gx {
        Some(data) => Some(Tensor3::from_vec(n, spec.c_in, l_in, data)?),
        None => None,
    };
    Ok(ConvGrads {
        input,
        weight: gw,
        bias: gb,
    })
}

#[allow(clippy::type_complexity)]
fn backward_sample<T: Real>(
    spec: &ConvSpec,
    weight: &[T],
    x: &[T],
    gy: &[T],
    l_in: usize,
    l_out: usize,
    need_input_grad: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    if spec.s != 1 {
        return backward_sample_strided(spec, weight, x, gy, l_in, l_out, need_input_grad);
    }
    let cin_g = spec.in_per_group();
    let (k, pad) = (spec.k, spec.pad);
    let mut gw = vec![T::ZERO; spec.weight_len()];
    let mut gb = vec![T::ZERO; spec.c_out];
    let mut gx = if need_input_grad {
        Some(vec![T::ZERO; spec.c_in * l_in])
    } else {
        None
    };
    for j in 0..spec.c_out {
        let base = spec.group_base(j);
        let gy_row = &gy[j * l_out..(j + 1) * l_out];
        gb[j] = gy_row.iter().copied().sum();
        for u in 0..cin_g {
            let x_row = &x[(base + u) * l_in..(base + u + 1) * l_in];
            let widx = (j * cin_g + u) * k;
            for tau in 0..k {
                let (t0, t1) = tap_range(tau, pad, 1, l_in, l_out);
                if t0 >= t1 {
                    continue;
                }
                let first = t0 + tau - pad;
                let span = t1 - t0;
                gw[widx + tau] += dot(&gy_row[t0..t1], &x_row[first..first + span]);
                if let Some(gx) = gx.as_mut() {
                    let gx_row = &mut gx[(base + u) * l_in..(base + u + 1) * l_in];
                    axpy(weight[widx + tau], &gy_row[t0..t1], &mut gx_row[first..first + span]);
                }
            }
        }
    }
    (gw, gb, gx)
}

#[allow(clippy::type_complexity)]
fn backward_sample_strided<T: Real>(
    spec: &ConvSpec,
    weight: &[T],
    x: &[T],
    gy: &[T],
    l_in: usize,
    l_out: usize,
    need_input_grad: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let cin_g = spec.in_per_group();
    let (k, s, pad) = (spec.k, spec.s, spec.pad);
    let cols = gather_columns(spec, x, l_in, l_out);
    let mut gcols = if need_input_grad {
        Some(vec![T::ZERO; cols.len()])
    } else {
        None
    };
    let mut gw = vec![T::ZERO; spec.weight_len()];
    let mut gb = vec![T::ZERO; spec.c_out];
    for j in 0..spec.c_out {
        let base = spec.group_base(j);
        let gy_row = &gy[j * l_out..(j + 1) * l_out];
        gb[j] = gy_row.iter().copied().sum();
        for u in 0..cin_g {
            let widx = (j * cin_g + u) * k;
            for tau in 0..k {
                let c = ((base + u) * k + tau) * l_out;
                gw[widx + tau] += dot(gy_row, &cols[c..c + l_out]);
                if let Some(gc) = gcols.as_mut() {
                    axpy(weight[widx + tau], gy_row, &mut gc[c..c + l_out]);
                }
            }
        }
    }
    let gx = gcols.map(|gc| {
        let mut gx = vec![T::ZERO; spec.c_in * l_in];
        for u in 0..spec.c_in {
            for tau in 0..k {
                let (t0, t1) = tap_range(tau, pad, s, l_in, l_out);
                let col = &gc[(u * k + tau) * l_out..(u * k + tau + 1) * l_out];
                let row = &mut gx[u * l_in..(u + 1) * l_in];
                for t in t0..t1 {
                    row[s * t + tau - pad] += col[t];
                }
            }
        }
        gx
    });
    (gw, gb, gx)
}
