//! Per-channel batch normalization.
//!
//! Statistics are taken over batch and position, variance is the biased
//! (population) estimate and the denominator is `sqrt(var + eps)` in both
//! train and eval mode.

use super::tensor::{Real, Tensor3};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub run_mean: Vec<T>,
    pub run_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Values kept from a train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor3<T>,
    pub inv_std: Vec<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::config(format!("BN eps must be positive, got {eps}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::config(format!(
                "BN momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            run_mean: vec![T::ZERO; channels],
            run_var: vec![T::ONE; channels],
            eps,
            momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor3<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels got {}",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Normalizes with the stored running statistics.
    pub fn forward_eval(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.check(x)?;
        if let Some(j) = self.run_var.iter().position(|&v| !(v.to_f64() >= 0.0)) {
            return Err(Error::data(format!(
                "stored variance of channel {j} is negative"
            )));
        }
        let scale: Vec<T> = (0..self.channels())
            .map(|c| {
                T::from_f64(self.gamma[c].to_f64() / (self.run_var[c].to_f64() + self.eps).sqrt())
            })
            .collect();
        let mut out = x.clone();
        let (n, ch, _) = x.shape();
        for i in 0..n {
            for c in 0..ch {
                let (m, s, b) = (self.run_mean[c], scale[c], self.beta[c]);
                for v in out.row_mut(i, c) {
                    *v = (*v - m) * s + b;
                }
            }
        }
        Ok(out)
    }

    /// Normalizes with batch statistics and folds them into the running
    /// averages.
    pub fn forward_train(&mut self, x: &Tensor3<T>) -> Result<(Tensor3<T>, BnCache<T>)> {
        self.check(x)?;
        let (n, ch, l) = x.shape();
        let count = n * l;
        if count < 2 {
            return Err(Error::shape(format!(
                "train-mode batch norm needs at least 2 values per channel, got {count}"
            )));
        }
        let (mean, var) = channel_moments(x);
        let mut xhat = Tensor3::zeros(n, ch, l);
        let mut out = Tensor3::zeros(n, ch, l);
        let mut inv_std = Vec::with_capacity(ch);
        for c in 0..ch {
            let istd = 1.0 / (var[c] + self.eps).sqrt();
            inv_std.push(T::from_f64(istd));
            let (m, is) = (T::from_f64(mean[c]), T::from_f64(istd));
            let (g, b) = (self.gamma[c], self.beta[c]);
            for i in 0..n {
                let src = x.row(i, c);
                let xh = xhat.row_mut(i, c);
                let dst = out.row_mut(i, c);
                for ((h, o), &v) in xh.iter_mut().zip(dst.iter_mut()).zip(src) {
                    *h = (v - m) * is;
                    *o = g * *h + b;
                }
            }
            let mom = self.momentum;
            self.run_mean[c] = T::from_f64((1.0 - mom) * self.run_mean[c].to_f64() + mom * mean[c]);
            self.run_var[c] = T::from_f64((1.0 - mom) * self.run_var[c].to_f64() + mom * var[c]);
        }
        Ok((out, BnCache { xhat, inv_std }))
    }

    /// Returns `(grad_input, grad_gamma, grad_beta)` for a train-mode pass.
    pub fn backward_train(
        &self,
        cache: &BnCache<T>,
        grad_out: &Tensor3<T>,
    ) -> Result<(Tensor3<T>, Vec<T>, Vec<T>)> {
        if grad_out.shape() != cache.xhat.shape() {
            return Err(Error::shape("batch norm gradient shape mismatch"));
        }
        let (n, ch, l) = grad_out.shape();
        let m = T::from_f64((n * l) as f64);
        let mut dx = Tensor3::zeros(n, ch, l);
        let mut dgamma = vec![T::ZERO; ch];
        let mut dbeta = vec![T::ZERO; ch];
        for c in 0..ch {
            let g = self.gamma[c];
            let mut sum_dy = T::ZERO;
            let mut sum_dy_xhat = T::ZERO;
            for i in 0..n {
                for (&dy, &h) in grad_out.row(i, c).iter().zip(cache.xhat.row(i, c)) {
                    sum_dy += dy;
                    sum_dy_xhat += dy * h;
                }
            }
            dgamma[c] = sum_dy_xhat;
            dbeta[c] = sum_dy;
            // dxhat = g * dy, so the sums over dxhat are g times the sums over dy.
            let k = g * cache.inv_std[c] / m;
            for i in 0..n {
                let dy_row = grad_out.row(i, c);
                let xh_row = cache.xhat.row(i, c);
                let out = dx.row_mut(i, c);
                for t in 0..l {
                    out[t] = k * (m * dy_row[t] - sum_dy - xh_row[t] * sum_dy_xhat);
                }
            }
        }
        Ok((dx, dgamma, dbeta))
    }
}

/// Per-channel mean and biased variance over batch and position, two-pass,
/// accumulated in f64.
pub fn channel_moments<T: Real>(x: &Tensor3<T>) -> (Vec<f64>, Vec<f64>) {
    let (n, ch, l) = x.shape();
    let count = (n * l) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for i in 0..n {
            s += x.row(i, c).iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mu = s / count;
        let mut sq = 0.0;
        for i in 0..n {
            sq += x
                .row(i, c)
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = sq / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_values_normalize_to_unit() {
        let mut bn = BatchNormState::<f64>::new(1, 1e-5, 0.1).unwrap();
        bn.eps = 0.0;
        let x = Tensor3::from_vec(2, 1, 1, vec![1.0, 3.0]).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut bn = BatchNormState::<f64>::new(1, 1e-5, 0.1).unwrap();
        bn.gamma[0] = 3.7;
        bn.beta[0] = 5.0;
        let x = Tensor3::from_vec(2, 1, 3, vec![4.2; 6]).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn train_output_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bn = BatchNormState::<f64>::new(3, 1e-5, 0.1).unwrap();
        bn.gamma = vec![0.5, 2.0, -1.5];
        bn.beta = vec![0.1, -3.0, 2.0];
        let x = Tensor3::from_vec(
            4,
            3,
            25,
            (0..300).map(|_| rng.gen_range(-2.0..5.0)).collect(),
        )
        .unwrap();
        let (in_mean, in_var) = channel_moments(&x);
        let (y, _) = bn.forward_train(&x).unwrap();
        let (out_mean, out_var) = channel_moments(&y);
        for c in 0..3 {
            assert!((out_mean[c] - bn.beta[c]).abs() < 1e-9);
            let want = bn.gamma[c].powi(2) * in_var[c] / (in_var[c] + bn.eps);
            assert!((out_var[c] - want).abs() < 1e-6);
            let expected_run = 0.9 * 0.0 + 0.1 * in_mean[c];
            assert!((bn.run_mean[c] - expected_run).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut bn = BatchNormState::<f64>::new(1, 1e-5, 0.1).unwrap();
        bn.run_mean[0] = 2.0;
        bn.run_var[0] = 4.0 - 1e-5;
        let x = Tensor3::from_vec(1, 1, 2, vec![2.0, 6.0]).unwrap();
        let y = bn.forward_eval(&x).unwrap();
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn negative_stored_variance_rejected() {
        let mut bn = BatchNormState::<f64>::new(1, 1e-5, 0.1).unwrap();
        bn.run_var[0] = -1.0;
        assert!(bn.forward_eval(&Tensor3::zeros(1, 1, 2)).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut bn = BatchNormState::<f64>::new(2, 1e-5, 0.1).unwrap();
        assert!(bn.forward_train(&Tensor3::zeros(2, 3, 2)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bn = BatchNormState::<f64>::new(2, 1e-5, 0.1).unwrap();
        bn.gamma = vec![1.3, -0.7];
        bn.beta = vec![0.2, 0.4];
        let mut x =
            Tensor3::from_vec(3, 2, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let probe: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = bn.clone().forward_train(&x).unwrap();
        let gy = Tensor3::from_vec(3, 2, 4, probe.clone()).unwrap();
        let (dx, dg, db) = bn.backward_train(&cache, &gy).unwrap();
        let f = |bn: &BatchNormState<f64>, x: &Tensor3<f64>| -> f64 {
            let (y, _) = bn.clone().forward_train(x).unwrap();
            y.data().iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let h = 1e-6;
        for i in 0..24 {
            let o = x.data()[i];
            x.data_mut()[i] = o + h;
            let up = f(&bn, &x);
            x.data_mut()[i] = o - h;
            let down = f(&bn, &x);
            x.data_mut()[i] = o;
            assert!(((up - down) / (2.0 * h) - dx.data()[i]).abs() < 1e-6);
        }
        for c in 0..2 {
            let mut b2 = bn.clone();
            b2.gamma[c] += h;
            let up = f(&b2, &x);
            b2.gamma[c] -= 2.0 * h;
            let down = f(&b2, &x);
            assert!(((up - down) / (2.0 * h) - dg[c]).abs() < 1e-6);
            let mut b3 = bn.clone();
            b3.beta[c] += h;
            let up = f(&b3, &x);
            b3.beta[c] -= 2.0 * h;
            let down = f(&b3, &x);
            assert!(((up - down) / (2.0 * h) - db[c]).abs() < 1e-6);
        }
    }
}
