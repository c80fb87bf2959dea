//! Synthetic single-channel EEG with class-specific spectra.
//!
//! Each stage is a mixture of two sinusoids at stage-specific frequencies
//! with random phase and mild amplitude/frequency jitter, plus white noise at
//! a fixed level. The whole epoch is multiplied by the subject's scale, which
//! is how a domain shift is injected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, EpochRecord, Stage};
use crate::{Error, Result, EPOCH_LEN, SAMPLE_RATE_HZ};

/// `(frequency Hz, amplitude)` pairs per stage.
const COMPONENTS: [[(f64, f64); 2]; 5] = [
    [(10.0, 1.0), (22.0, 0.5)],
    [(5.0, 1.0), (8.0, 0.3)],
    [(13.0, 0.8), (2.0, 0.8)],
    [(1.0, 2.0), (3.0, 0.5)],
    [(6.5, 0.8), (17.0, 0.6)],
];
const NOISE_STD: f64 = 0.5;
const AMP_JITTER: f64 = 0.2;
const FREQ_JITTER_HZ: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub epochs_per_class: usize,
    pub seed: u64,
    /// Per-subject amplitude scale. Empty means 1 for everyone; a single
    /// value applies to all subjects.
    #[serde(default)]
    pub scales: Vec<f64>,
}

impl SynthConfig {
    pub fn new(n_subjects: usize, epochs_per_class: usize, seed: u64) -> Self {
        Self {
            n_subjects,
            epochs_per_class,
            seed,
            scales: Vec::new(),
        }
    }

    pub fn with_scales(mut self, scales: Vec<f64>) -> Self {
        self.scales = scales;
        self
    }

    fn scale_of(&self, subject: usize) -> f64 {
        match self.scales.len() {
            0 => 1.0,
            1 => self.scales[0],
            _ => self.scales[subject],
        }
    }
}

pub fn subject_name(i: usize) -> String {
    format!("syn{i:03}")
}

fn epoch_signal(rng: &mut ChaCha8Rng, stage: Stage, scale: f64) -> Vec<f32> {
    let noise = Normal::new(0.0, NOISE_STD).expect("constant noise level is valid");
    let comps: Vec<(f64, f64, f64)> = COMPONENTS[stage.index()]
        .iter()
        .map(|&(f, a)| {
            let f = f + rng.gen_range(-FREQ_JITTER_HZ..=FREQ_JITTER_HZ);
            let a = a * (1.0 + rng.gen_range(-AMP_JITTER..=AMP_JITTER));
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (f, a, phase)
        })
        .collect();
    (0..EPOCH_LEN)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE_HZ;
            let clean: f64 = comps
                .iter()
                .map(|(f, a, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
            ((clean + noise.sample(rng)) * scale) as f32
        })
        .collect()
}

/// Generates `epochs_per_class` epochs of every stage for each subject.
/// Epochs alternate between night 0 and night 1. Each subject draws from its
/// own ChaCha stream, so a subject's data does not depend on the roster size.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.scales.len() > 1 && cfg.scales.len() != cfg.n_subjects {
        return Err(Error::config(format!(
            "{} scales given for {} subjects",
            cfg.scales.len(),
            cfg.n_subjects
        )));
    }
    if let Some(a) = cfg.scales.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::config(format!("subject scale must be positive, got {a}")));
    }
    let mut epochs = Vec::with_capacity(cfg.n_subjects * cfg.epochs_per_class * 5);
    for s in 0..cfg.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s as u64);
        let scale = cfg.scale_of(s);
        for i in 0..cfg.epochs_per_class {
            for stage in Stage::ALL {
                epochs.push(EpochRecord {
                    samples: epoch_signal(&mut rng, stage, scale),
                    label: Some(stage),
                    subject_id: subject_name(s),
                    night_id: (i % 2) as u8,
                });
            }
        }
    }
    Ok(Dataset { epochs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::new(2, 3, 7);
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = synth_generate(&SynthConfig::new(2, 3, 8)).unwrap();
        assert_ne!(synth_generate(&cfg).unwrap(), other);
    }

    #[test]
    fn subject_independent_of_roster() {
        let small = synth_generate(&SynthConfig::new(1, 2, 3)).unwrap();
        let big = synth_generate(&SynthConfig::new(3, 2, 3)).unwrap();
        assert_eq!(small.epochs[..], big.epochs[..small.len()]);
    }

    #[test]
    fn scale_is_exact_multiplier() {
        let base = synth_generate(&SynthConfig::new(1, 1, 5)).unwrap();
        let doubled = synth_generate(&SynthConfig::new(1, 1, 5).with_scales(vec![2.0])).unwrap();
        for (a, b) in base.epochs.iter().zip(&doubled.epochs) {
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert!((2.0 * x - y).abs() <= 1e-5 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn nonpositive_scale_rejected() {
        assert!(synth_generate(&SynthConfig::new(1, 1, 0).with_scales(vec![0.0])).is_err());
        assert!(synth_generate(&SynthConfig::new(2, 1, 0).with_scales(vec![1.0, -1.0])).is_err());
        assert!(synth_generate(&SynthConfig::new(3, 1, 0).with_scales(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn nights_alternate() {
        let ds = synth_generate(&SynthConfig::new(1, 2, 0)).unwrap();
        assert!(ds.epochs[..5].iter().all(|e| e.night_id == 0));
        assert!(ds.epochs[5..].iter().all(|e| e.night_id == 1));
        assert_eq!(ds.class_histogram(), [2; 5]);
    }
}
