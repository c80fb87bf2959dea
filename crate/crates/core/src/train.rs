//! Supervised training: Adam, learning-rate schedules and the epoch loop.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::loss::{batch_loss, LossSpec, DEFAULT_BINS};
use crate::nn::{Model, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moments are kept in f64 regardless of
/// the parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model<T: Real>(model: &Model<T>, cfg: AdamConfig) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        Self::new(&shapes, cfg)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: Vec<&mut [T]>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape(format!(
                    "parameter of {} values with gradient of {} and state of {}",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i].to_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] = T::from_f64(p[i].to_f64() - update);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheduler {
    /// Multiply by `factor` once the metric has gone `patience + 1`
    /// consecutive epochs without a strict improvement on the best value.
    Plateau { factor: f64, patience: usize },
    /// Multiply by `factor` after each listed number of completed epochs.
    Step { milestones: Vec<usize>, factor: f64 },
    None,
}

impl Default for Scheduler {
    fn default() -> Self {
        Scheduler::Plateau {
            factor: 0.5,
            patience: 5,
        }
    }
}

impl Scheduler {
    fn validate(&self) -> Result<()> {
        match self {
            Scheduler::Plateau { factor, .. } | Scheduler::Step { factor, .. }
                if !(*factor > 0.0 && *factor <= 1.0) =>
            {
                Err(Error::config(format!("scheduler factor {factor} must lie in (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    scheduler: Scheduler,
    lr: f64,
    epochs_done: usize,
    best: f64,
    bad_epochs: usize,
}

impl LrSchedule {
    pub fn new(scheduler: Scheduler, base_lr: f64) -> Self {
        Self {
            scheduler,
            lr: base_lr,
            epochs_done: 0,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records the end of an epoch with its metric (lower is better) and
    /// returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::NonFinite(format!("scheduler metric {metric}")));
        }
        self.epochs_done += 1;
        match &self.scheduler {
            Scheduler::Plateau { factor, patience } => {
                if metric < self.best {
                    self.best = metric;
                    self.bad_epochs = 0;
                } else {
                    self.bad_epochs += 1;
                }
                if self.bad_epochs > *patience {
                    self.lr *= factor;
                    self.bad_epochs = 0;
                }
            }
            Scheduler::Step { milestones, factor } => {
                let hits = milestones.iter().filter(|&&m| m == self.epochs_done).count();
                self.lr *= factor.powi(hits as i32);
            }
            Scheduler::None => {}
        }
        Ok(self.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub scheduler: Scheduler,
    pub reweighting: bool,
    pub bins: usize,
    pub seed: u64,
    pub shuffle_data: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 40,
            base_lr: 1e-3,
            scheduler: Scheduler::default(),
            reweighting: true,
            bins: DEFAULT_BINS,
            seed: 0,
            shuffle_data: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if self.bins == 0 {
            return Err(Error::config("bins must be at least 1"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        self.scheduler.validate()
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            reweight: self.reweighting,
            bins: self.bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training objective over the epoch's samples.
    pub loss: f64,
    /// Train-mode accuracy of the logits seen during the epoch.
    pub accuracy: f64,
    pub mean_beta: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for e in &self.epochs {
            wtr.serialize(e)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Batches of one epoch, in order. A trailing batch of a single epoch is
/// dropped because batch normalization needs two values per channel.
fn epoch_batches(order: &[usize], batch: usize) -> Vec<&[usize]> {
    order.chunks(batch).filter(|c| c.len() >= 2).collect()
}

/// [`fit_with`] without a per-epoch callback.
pub fn fit<T: Real>(model: Model<T>, data: &Dataset, cfg: &TrainConfig) -> Result<(Model<T>, TrainLog)> {
    fit_with(model, data, cfg, |_, _, _| Ok(()))
}

/// Trains for `cfg.epochs` epochs. `on_epoch` runs after each epoch with the
/// zero-based epoch index, the current model and that epoch's log entry.
pub fn fit_with<T, F>(
    mut model: Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Model<T>, TrainLog)>
where
    T: Real,
    F: FnMut(usize, &Model<T>, &EpochLog) -> Result<()>,
{
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    if data.len() < 2 {
        return Err(Error::data("training needs at least two labeled epochs"));
    }
    let labels = data.labels(&(0..data.len()).collect::<Vec<_>>())?;
    let spec = cfg.loss_spec();
    let mut adam = Adam::for_model(&model, cfg.adam);
    let mut schedule = LrSchedule::new(cfg.scheduler.clone(), cfg.base_lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if cfg.shuffle_data {
            order.shuffle(&mut order_rng);
        }
        let lr = schedule.lr();
        let (mut loss_sum, mut beta_sum, mut correct, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for idx in epoch_batches(&order, cfg.batch_size) {
            let x = data.to_tensor::<T>(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = model.forward_train(&x, dropout_rng.gen())?;
            let (report, grad_logits) = batch_loss(&logits, &y, spec)?;
            if !report.weighted.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: report.weighted,
                });
            }
            let grads = model.backward(&cache, &grad_logits)?;
            adam.step(model.params_mut(), &grads.tensors, lr)?;

            let n = y.len();
            loss_sum += report.weighted * n as f64;
            beta_sum += report.samples.iter().map(|s| s.beta).sum::<f64>();
            correct += logits
                .argmax_rows()
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            seen += n;
        }
        let seen_f = seen as f64;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / seen_f,
            accuracy: correct as f64 / seen_f,
            mean_beta: beta_sum / seen_f,
            lr,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        if !entry.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: entry.loss,
            });
        }
        schedule.step(entry.loss)?;
        on_epoch(epoch, &model, &entry)?;
        log.epochs.push(entry);
    }
    Ok((model, log))
}

/// Eval-mode predictions over the dataset in batches of `batch`.
pub fn predict<T: Real>(model: &Model<T>, data: &Dataset, batch: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for idx in all.chunks(batch.max(1)) {
        out.extend(model.forward_eval(&data.to_tensor::<T>(idx)?)?.argmax_rows());
    }
    Ok(out)
}

/// Fraction of labeled epochs classified correctly in eval mode.
pub fn accuracy<T: Real>(model: &Model<T>, data: &Dataset, batch: usize) -> Result<f64> {
    let labels = data.labels(&(0..data.len()).collect::<Vec<_>>())?;
    if labels.is_empty() {
        return Err(Error::data("accuracy of an empty dataset"));
    }
    let pred = predict(model, data, batch)?;
    Ok(pred.iter().zip(&labels).filter(|(p, t)| p == t).count() as f64 / labels.len() as f64)
}
