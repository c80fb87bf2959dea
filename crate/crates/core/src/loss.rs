//! Cross-entropy and the gradient-density reweighted loss.
//!
//! Each sample's difficulty is `g = 1 - p_true`, half the L1 norm of the
//! cross-entropy gradient with respect to the logits. The batch's `g` values
//! are binned into `M` equal-width bins over `[0, 1]`; the density at `g` is
//! `GD(g) = count(bin(g)) * M` and the sample weight is `beta = GD(g) / N`.
//! The weighted loss is `(1/N) sum beta_i * CE_i`, with `beta` held constant
//! in the backward pass.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::nn::{Matrix, Real};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Returns `(loss, probs)` where `loss = logsumexp(logits) - logits[label]`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::data(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = (lse - logits[label]).max(0.0);
    Ok((loss, softmax(logits)))
}

/// `1 - probs[label]`.
pub fn gradient_norm(probs: &[f64], label: usize) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 || probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::data(format!(
            "probabilities do not form a distribution (sum {total})"
        )));
    }
    let p = *probs
        .get(label)
        .ok_or_else(|| Error::data(format!("label {label} out of range")))?;
    Ok((1.0 - p).clamp(0.0, 1.0))
}

/// Equal-width histogram of gradient norms over `[0, 1]`; the last bin is
/// closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradHistogram {
    counts: Vec<u64>,
}

impl GradHistogram {
    pub fn new(m_bins: usize) -> Result<Self> {
        if m_bins == 0 {
            return Err(Error::config("histogram needs at least one bin"));
        }
        Ok(Self {
            counts: vec![0; m_bins],
        })
    }

    pub fn from_values(m_bins: usize, values: &[f64]) -> Result<Self> {
        let mut h = Self::new(m_bins)?;
        for &g in values {
            h.add(g)?;
        }
        Ok(h)
    }

    pub fn m_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / self.m_bins() as f64
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `M + 1` edges `b / M`.
    pub fn edges(&self) -> Vec<f64> {
        let m = self.m_bins();
        (0..=m).map(|b| b as f64 / m as f64).collect()
    }

    pub fn bin_index(&self, g: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::data(format!("gradient norm {g} outside [0, 1]")));
        }
        let m = self.m_bins();
        Ok(((g * m as f64) as usize).min(m - 1))
    }

    pub fn add(&mut self, g: f64) -> Result<()> {
        let b = self.bin_index(g)?;
        self.counts[b] += 1;
        Ok(())
    }
}

/// `GD(g) = counts[bin(g)] / bin_width`.
pub fn density_lookup(h: &GradHistogram, g: f64) -> Result<f64> {
    let b = h.bin_index(g)?;
    Ok(h.counts[b] as f64 * h.m_bins() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLoss {
    pub ce: f64,
    pub g: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedLossReport {
    pub samples: Vec<SampleLoss>,
    pub weighted: f64,
    pub histogram: GradHistogram,
}

impl WeightedLossReport {
    pub fn mean_beta(&self) -> f64 {
        self.samples.iter().map(|s| s.beta).sum::<f64>() / self.samples.len() as f64
    }
}

/// Weighted loss over one batch.
pub fn reweighted_loss(ce: &[f64], g: &[f64], m_bins: usize) -> Result<WeightedLossReport> {
    let n = ce.len();
    if n == 0 {
        return Err(Error::data("reweighted loss over an empty batch"));
    }
    if g.len() != n {
        return Err(Error::shape(format!(
            "{n} losses but {} gradient norms",
            g.len()
        )));
    }
    let histogram = GradHistogram::from_values(m_bins, g)?;
    let nf = n as f64;
    let mut samples = Vec::with_capacity(n);
    let mut total = 0.0;
    for (&l, &gi) in ce.iter().zip(g) {
        let beta = density_lookup(&histogram, gi)? / nf;
        total += beta * l;
        samples.push(SampleLoss { ce: l, g: gi, beta });
    }
    Ok(WeightedLossReport {
        samples,
        weighted: total / nf,
        histogram,
    })
}

/// Training objective: plain mean cross-entropy or the reweighted loss.
/// The histogram is built with `bins` either way so it can be reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub reweight: bool,
    pub bins: usize,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            reweight: true,
            bins: DEFAULT_BINS,
        }
    }
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self {
            reweight: false,
            bins: DEFAULT_BINS,
        }
    }
}

/// Loss report plus the gradient of the loss with respect to the logits.
pub fn batch_loss<T: Real>(
    logits: &Matrix<T>,
    labels: &[usize],
    spec: LossSpec,
) -> Result<(WeightedLossReport, Matrix<T>)> {
    let n = logits.rows();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    let mut ce = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for (r, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.to_f64()).collect();
        let (l, p) = softmax_cross_entropy(&row, label)?;
        g.push(gradient_norm(&p, label)?);
        ce.push(l);
        probs.push(p);
    }
    let mut report = reweighted_loss(&ce, &g, spec.bins)?;
    if !spec.reweight {
        for s in &mut report.samples {
            s.beta = 1.0;
        }
        report.weighted = ce.iter().sum::<f64>() / n as f64;
    }
    let nf = n as f64;
    let mut grad = Matrix::zeros(n, logits.cols());
    for (r, (p, &label)) in probs.iter().zip(labels).enumerate() {
        let w = report.samples[r].beta / nf;
        for (c, &pc) in p.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            grad.set(r, c, T::from_f64(w * (pc - target)));
        }
    }
    Ok((report, grad))
}

/// Epoch-level record of gradient norms before weighting and the weight
/// mass (sum of beta) each bin receives after weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHistogramAccumulator {
    before: GradHistogram,
    weighted_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradHistogramRow {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count_before: u64,
    pub weighted_mass_after: f64,
}

impl GradHistogramAccumulator {
    pub fn new(m_bins: usize) -> Result<Self> {
        Ok(Self {
            before: GradHistogram::new(m_bins)?,
            weighted_mass: vec![0.0; m_bins],
        })
    }

    pub fn add_sample(&mut self, g: f64, beta: f64) -> Result<()> {
        let b = self.before.bin_index(g)?;
        self.before.counts[b] += 1;
        self.weighted_mass[b] += beta;
        Ok(())
    }

    /// Adds a batch report computed with any bin count; samples are re-binned
    /// into this accumulator's bins.
    pub fn add_report(&mut self, report: &WeightedLossReport) -> Result<()> {
        for s in &report.samples {
            self.add_sample(s.g, s.beta)?;
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<GradHistogramRow> {
        let edges = self.before.edges();
        (0..self.before.m_bins())
            .map(|b| GradHistogramRow {
                bin_left: edges[b],
                bin_right: edges[b + 1],
                count_before: self.before.counts[b],
                weighted_mass_after: self.weighted_mass[b],
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for row in self.rows() {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let (loss, probs) = softmax_cross_entropy(&[0.3; 5], 2).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!(probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn saturated_logits() {
        let (loss, _) = softmax_cross_entropy(&[0.0, 0.0, 100.0, 0.0, 0.0], 2).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(softmax_cross_entropy(&[0.0, f64::NAN, 0.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn gradient_norm_cases() {
        assert_eq!(gradient_norm(&[0.0, 1.0, 0.0, 0.0, 0.0], 1).unwrap(), 0.0);
        assert!((gradient_norm(&[0.2; 5], 0).unwrap() - 0.8).abs() < 1e-15);
        assert!(gradient_norm(&[0.5, 0.6, 0.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn density_one_per_bin() {
        let h = GradHistogram::from_values(2, &[0.2, 0.8]).unwrap();
        assert_eq!(density_lookup(&h, 0.2).unwrap(), 2.0);
        assert_eq!(density_lookup(&h, 0.8).unwrap(), 2.0);
    }

    #[test]
    fn density_all_in_one_bin() {
        let g = [0.41, 0.42, 0.45, 0.49];
        let h = GradHistogram::from_values(10, &g).unwrap();
        for &v in &g {
            assert_eq!(density_lookup(&h, v).unwrap(), 40.0);
        }
    }

    #[test]
    fn rightmost_edge_is_closed() {
        let h = GradHistogram::from_values(4, &[1.0, 0.0]).unwrap();
        assert_eq!(h.counts(), &[1, 0, 0, 1]);
        assert!(density_lookup(&h, 1.0001).is_err());
        assert!(density_lookup(&h, -0.1).is_err());
    }

    #[test]
    fn single_sample_single_bin() {
        let r = reweighted_loss(&[0.7], &[0.3], 1).unwrap();
        assert_eq!(r.samples[0].beta, 1.0);
        assert_eq!(r.weighted, 0.7);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(reweighted_loss(&[], &[], 10).is_err());
    }

    #[test]
    fn uniform_density_gives_unit_weights() {
        let g = [0.1, 0.3, 0.6, 0.9];
        let ce = [0.5, 1.0, 1.5, 2.0];
        let r = reweighted_loss(&ce, &g, 4).unwrap();
        assert!(r.samples.iter().all(|s| s.beta == 1.0));
        assert!((r.weighted - 1.25).abs() < 1e-12);
    }

    #[test]
    fn accumulator_rows() {
        let acc = GradHistogramAccumulator::new(5).unwrap();
        let rows = acc.rows();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.count_before == 0 && r.weighted_mass_after == 0.0));

        let mut acc = GradHistogramAccumulator::new(5).unwrap();
        acc.add_sample(0.5, 1.0).unwrap();
        assert_eq!(acc.rows().iter().filter(|r| r.count_before > 0).count(), 1);
        let mut buf = Vec::new();
        acc.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin_left,bin_right,count_before,weighted_mass_after\n"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn batch_loss_bias_gradient_is_mean_residual() {
        let logits = Matrix::from_vec(2, 5, vec![0.1, 0.5, -0.3, 0.0, 1.0, 2.0, 0.0, 0.0, -1.0, 0.5])
            .unwrap();
        let (_, grad) = batch_loss(&logits, &[4, 0], LossSpec::cross_entropy()).unwrap();
        let p0 = softmax(&logits.row(0).to_vec());
        assert!((grad.get(0, 4) - (p0[4] - 1.0) / 2.0).abs() < 1e-15);
    }
}
