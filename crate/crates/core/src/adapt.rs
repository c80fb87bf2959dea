//! AdaBN: replace every BN layer's running statistics with statistics of
//! the target subject's unlabeled data. Only `run_mean` / `run_var` change;
//! weights, biases, `gamma` and `beta` are left untouched and no labels or
//! gradients are involved.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::{Model, Real, Tensor3};
use crate::{Error, Result};

/// Per-channel streaming mean and population variance (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineStats {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl OnlineStats {
    pub fn new(channels: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Adds one observation per channel.
    pub fn push(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.channels() {
            return Err(Error::shape(format!(
                "{} values for {} channels",
                values.len(),
                self.channels()
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        for (c, &v) in values.iter().enumerate() {
            let delta = v - self.mean[c];
            self.mean[c] += delta / n;
            self.m2[c] += delta * (v - self.mean[c]);
        }
        Ok(())
    }

    /// Adds every `(sample, position)` of `x` as one observation per channel.
    pub fn update<T: Real>(&mut self, x: &Tensor3<T>) -> Result<()> {
        let (n, ch, l) = x.shape();
        if ch != self.channels() {
            return Err(Error::shape(format!(
                "activation has {ch} channels, accumulator {}",
                self.channels()
            )));
        }
        let start = self.count;
        for c in 0..ch {
            let (mut k, mut mean, mut m2) = (start, self.mean[c], self.m2[c]);
            for i in 0..n {
                for &v in x.row(i, c) {
                    let v = v.to_f64();
                    k += 1;
                    let delta = v - mean;
                    mean += delta / k as f64;
                    m2 += delta * (v - mean);
                }
            }
            self.mean[c] = mean;
            self.m2[c] = m2;
        }
        self.count = start + (n * l) as u64;
        Ok(())
    }

    /// Combines two accumulators as if their streams had been concatenated.
    pub fn merge(&mut self, other: &OnlineStats) -> Result<()> {
        if other.channels() != self.channels() {
            return Err(Error::shape("cannot merge accumulators of different width"));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for c in 0..self.channels() {
            let delta = other.mean[c] - self.mean[c];
            self.mean[c] += delta * nb / n;
            self.m2[c] += other.m2[c] + delta * delta * na * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    /// Population variance `M2 / n`.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|m| (m / n).max(0.0)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Finalize layer 1, then recompute layer 2 with layer 1 adapted, etc.
    Sequential,
    /// Accumulate every layer in one sweep using the stored upstream stats.
    SinglePass,
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(AdaptMode::Sequential),
            "single-pass" => Ok(AdaptMode::SinglePass),
            other => Err(Error::config(format!("unknown adapt mode `{other}`"))),
        }
    }
}

/// Accumulates BN-input statistics of `unit` (or of all units when `None`)
/// over `batches`. Batches are processed in parallel and merged in order.
fn accumulate<T: Real>(
    model: &Model<T>,
    batches: &[Tensor3<T>],
    unit: Option<usize>,
) -> Result<Vec<OnlineStats>> {
    let widths: Vec<usize> = model.bn_layers().iter().map(|b| b.channels()).collect();
    let per_batch: Vec<Result<Vec<OnlineStats>>> = batches
        .par_iter()
        .map(|x| {
            let mut stats: Vec<OnlineStats> = widths.iter().map(|&c| OnlineStats::new(c)).collect();
            let mut err = None;
            model.observe_bn_inputs(x, unit, &mut |idx, z| {
                if unit.is_none() || unit == Some(idx) {
                    if let Err(e) = stats[idx].update(z) {
                        err.get_or_insert(e);
                    }
                }
            })?;
            match err {
                Some(e) => Err(e),
                None => Ok(stats),
            }
        })
        .collect();
    let mut total: Vec<OnlineStats> = widths.iter().map(|&c| OnlineStats::new(c)).collect();
    for stats in per_batch {
        for (t, s) in total.iter_mut().zip(stats?) {
            t.merge(&s)?;
        }
    }
    Ok(total)
}

/// Per-BN-layer statistics of the target data, in unit order.
pub fn compute_target_stats<T: Real>(
    model: &Model<T>,
    batches: &[Tensor3<T>],
    mode: AdaptMode,
) -> Result<Vec<OnlineStats>> {
    if batches.iter().all(|b| b.batch() == 0) {
        return Err(Error::data("empty target stream"));
    }
    match mode {
        AdaptMode::SinglePass => accumulate(model, batches, None),
        AdaptMode::Sequential => {
            let mut work = model.clone();
            let n_layers = work.bn_layers().len();
            let mut out = Vec::with_capacity(n_layers);
            for layer in 0..n_layers {
                let stats = accumulate(&work, batches, Some(layer))?
                    .swap_remove(layer);
                set_stats(&mut *work.bn_layers_mut()[layer], &stats);
                out.push(stats);
            }
            Ok(out)
        }
    }
}

fn set_stats<T: Real>(bn: &mut crate::nn::BatchNormState<T>, stats: &OnlineStats) {
    bn.run_mean = stats.mean.iter().map(|&m| T::from_f64(m)).collect();
    bn.run_var = stats.variance().into_iter().map(T::from_f64).collect();
}

/// L2 distance between old and new statistics of one BN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: usize,
    pub mean_l2: f64,
    pub var_l2: f64,
}

/// Returns a copy of `model` whose BN layers use `stats`, plus the per-layer
/// change in statistics.
pub fn apply_adabn<T: Real>(
    model: &Model<T>,
    stats: &[OnlineStats],
) -> Result<(Model<T>, Vec<LayerDelta>)> {
    let mut adapted = model.clone();
    let n = adapted.bn_layers().len();
    if stats.len() != n {
        return Err(Error::data(format!(
            "statistics for {} BN layers, model has {n}",
            stats.len()
        )));
    }
    let mut deltas = Vec::with_capacity(n);
    for (layer, (bn, s)) in adapted.bn_layers_mut().into_iter().zip(stats).enumerate() {
        if s.channels() != bn.channels() {
            return Err(Error::shape(format!(
                "layer {layer}: {} channels of statistics for {} BN channels",
                s.channels(),
                bn.channels()
            )));
        }
        if s.count == 0 {
            return Err(Error::data(format!("layer {layer}: no target observations")));
        }
        let new_var = s.variance();
        let l2 = |old: &[T], new: &[f64]| -> f64 {
            old.iter()
                .zip(new)
                .map(|(o, n)| (o.to_f64() - n).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        deltas.push(LayerDelta {
            layer,
            mean_l2: l2(&bn.run_mean, &s.mean),
            var_l2: l2(&bn.run_var, &new_var),
        });
        set_stats(bn, s);
    }
    Ok((adapted, deltas))
}

/// Computes target statistics and applies them in one call.
pub fn adapt<T: Real>(
    model: &Model<T>,
    batches: &[Tensor3<T>],
    mode: AdaptMode,
) -> Result<(Model<T>, Vec<OnlineStats>, Vec<LayerDelta>)> {
    let stats = compute_target_stats(model, batches, mode)?;
    let (adapted, deltas) = apply_adabn(model, &stats)?;
    Ok((adapted, stats, deltas))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stream() {
        let mut s = OnlineStats::new(1);
        for _ in 0..10 {
            s.push(&[3.25]).unwrap();
        }
        assert_eq!(s.mean, vec![3.25]);
        assert_eq!(s.variance(), vec![0.0]);
    }

    #[test]
    fn one_two_three() {
        let mut s = OnlineStats::new(1);
        for v in [1.0, 2.0, 3.0] {
            s.push(&[v]).unwrap();
        }
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert!((s.variance()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tensor_update_counts_every_position() {
        let x = Tensor3::from_vec(2, 2, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let mut s = OnlineStats::new(2);
        s.update(&x).unwrap();
        assert_eq!(s.count, 6);
        // channel 0 holds 0,1,2,6,7,8
        assert!((s.mean[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let mut a = OnlineStats::new(1);
        a.push(&[1.0]).unwrap();
        a.push(&[5.0]).unwrap();
        let before = a.clone();
        a.merge(&OnlineStats::new(1)).unwrap();
        assert_eq!(a, before);
        let mut e = OnlineStats::new(1);
        e.merge(&before).unwrap();
        assert_eq!(e, before);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("sequential".parse::<AdaptMode>().unwrap(), AdaptMode::Sequential);
        assert_eq!("single-pass".parse::<AdaptMode>().unwrap(), AdaptMode::SinglePass);
        assert!("both".parse::<AdaptMode>().is_err());
    }
}
