//! Epoch datasets: ingestion, the SEPB container, synthetic generation and
//! subject-wise splitting.

pub mod edf;
pub mod hypnogram;
pub mod sepb;
pub mod split;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{Real, Tensor3};
use crate::{Error, Result, EPOCH_LEN, SAMPLE_RATE_HZ};

pub use edf::{read_edf_signal, write_edf, EdfSignal};
pub use hypnogram::{read_hypnogram_csv, Annotation, Hypnogram};
pub use sepb::{sepb_read, sepb_write};
pub use split::{subject_kfold_split, Fold};
pub use synth::{synth_generate, SynthConfig};

/// AASM sleep stage. The discriminant is the class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    W = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::W, Stage::N1, Stage::N2, Stage::N3, Stage::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::W => "W",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::Rem => "REM",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "W" => Ok(Stage::W),
            "N1" => Ok(Stage::N1),
            "N2" => Ok(Stage::N2),
            "N3" => Ok(Stage::N3),
            "REM" => Ok(Stage::Rem),
            other => Err(Error::data(format!("unknown stage `{other}`"))),
        }
    }
}

/// One 30 s window of single-channel EEG.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub samples: Vec<f32>,
    pub label: Option<Stage>,
    pub subject_id: String,
    pub night_id: u8,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub epochs: Vec<EpochRecord>,
}

impl Dataset {
    pub fn new(epochs: Vec<EpochRecord>) -> Result<Self> {
        for (i, e) in epochs.iter().enumerate() {
            if e.samples.len() != EPOCH_LEN {
                return Err(Error::data(format!(
                    "epoch {i} has {} samples, expected {EPOCH_LEN}",
                    e.samples.len()
                )));
            }
        }
        Ok(Self { epochs })
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Epoch counts per stage; unlabeled epochs are not counted.
    pub fn class_histogram(&self) -> [usize; 5] {
        let mut h = [0; 5];
        for e in &self.epochs {
            if let Some(s) = e.label {
                h[s.index()] += 1;
            }
        }
        h
    }

    /// Distinct subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeMap::new();
        let mut out = Vec::new();
        for e in &self.epochs {
            if seen.insert(e.subject_id.clone(), ()).is_none() {
                out.push(e.subject_id.clone());
            }
        }
        out
    }

    pub fn indices_of_subjects(&self, subjects: &[String]) -> Vec<usize> {
        self.epochs
            .iter()
            .enumerate()
            .filter(|(_, e)| subjects.contains(&e.subject_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            epochs: indices.iter().map(|&i| self.epochs[i].clone()).collect(),
        }
    }

    /// Copy with every label removed.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochRecord {
                    label: None,
                    ..e.clone()
                })
                .collect(),
        }
    }

    /// Copy with every sample multiplied by `a`.
    pub fn scaled(&self, a: f32) -> Dataset {
        Dataset {
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochRecord {
                    samples: e.samples.iter().map(|v| v * a).collect(),
                    ..e.clone()
                })
                .collect(),
        }
    }

    /// `(n, 1, 3000)` input tensor of the selected epochs.
    pub fn to_tensor<T: Real>(&self, indices: &[usize]) -> Result<Tensor3<T>> {
        let rows: Vec<&[f32]> = indices.iter().map(|&i| self.epochs[i].samples.as_slice()).collect();
        if rows.is_empty() {
            return Tensor3::from_vec(0, 1, EPOCH_LEN, Vec::new());
        }
        Tensor3::from_rows(&rows)
    }

    /// Class indices of the selected epochs; fails on unlabeled epochs.
    pub fn labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.epochs[i]
                    .label
                    .map(Stage::index)
                    .ok_or_else(|| Error::data(format!("epoch {i} is unlabeled")))
            })
            .collect()
    }

    /// Consecutive input batches of at most `batch` epochs covering the set.
    pub fn batches<T: Real>(&self, batch: usize) -> Result<Vec<Tensor3<T>>> {
        let all: Vec<usize> = (0..self.len()).collect();
        all.chunks(batch.max(1)).map(|c| self.to_tensor(c)).collect()
    }
}

/// Result of cutting a night into epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmented {
    pub dataset: Dataset,
    /// Windows dropped because they were scored movement or unknown.
    pub excluded: usize,
}

fn check_rate(rate: f64) -> Result<()> {
    if (rate - SAMPLE_RATE_HZ).abs() > 1e-9 {
        return Err(Error::data(format!(
            "sampling rate {rate} Hz is not {SAMPLE_RATE_HZ} Hz; resampling is not supported"
        )));
    }
    Ok(())
}

/// Cuts the signal into consecutive non-overlapping 3000-sample windows
/// (trailing remainder dropped) and attaches annotation `i` to window `i`.
pub fn segment_epochs(
    samples: &[f64],
    rate: f64,
    labels: &[Annotation],
    subject_id: &str,
    night_id: u8,
) -> Result<Segmented> {
    check_rate(rate)?;
    let windows = samples.len() / EPOCH_LEN;
    if labels.len() < windows {
        return Err(Error::data(format!(
            "{} labels for {windows} epochs",
            labels.len()
        )));
    }
    let mut epochs = Vec::with_capacity(windows);
    let mut excluded = 0;
    for (w, ann) in labels.iter().take(windows).enumerate() {
        let label = match ann {
            Annotation::Stage(s) => Some(*s),
            Annotation::Movement | Annotation::Unknown => {
                excluded += 1;
                continue;
            }
        };
        epochs.push(EpochRecord {
            samples: samples[w * EPOCH_LEN..(w + 1) * EPOCH_LEN]
                .iter()
                .map(|&v| v as f32)
                .collect(),
            label,
            subject_id: subject_id.to_string(),
            night_id,
        });
    }
    Ok(Segmented {
        dataset: Dataset { epochs },
        excluded,
    })
}

/// Like [`segment_epochs`] for a recording without a hypnogram.
pub fn segment_unlabeled(samples: &[f64], rate: f64, subject_id: &str, night_id: u8) -> Result<Dataset> {
    check_rate(rate)?;
    let epochs = samples
        .chunks_exact(EPOCH_LEN)
        .map(|w| EpochRecord {
            samples: w.iter().map(|&v| v as f32).collect(),
            label: None,
            subject_id: subject_id.to_string(),
            night_id,
        })
        .collect();
    Ok(Dataset { epochs })
}

/// Keeps at most `keep` wake epochs before the first and after the last
/// sleep epoch of each (subject, night). Nights without sleep are untouched.
pub fn trim_wake(dataset: &Dataset, keep: usize) -> Dataset {
    let mut groups: BTreeMap<(String, u8), Vec<usize>> = BTreeMap::new();
    for (i, e) in dataset.epochs.iter().enumerate() {
        groups
            .entry((e.subject_id.clone(), e.night_id))
            .or_default()
            .push(i);
    }
    let mut keep_mask = vec![true; dataset.len()];
    for idx in groups.values() {
        let is_sleep = |i: &usize| matches!(dataset.epochs[*i].label, Some(s) if s != Stage::W);
        let (Some(first), Some(last)) = (
            idx.iter().position(is_sleep),
            idx.iter().rposition(is_sleep),
        ) else {
            continue;
        };
        for (pos, &i) in idx.iter().enumerate() {
            if pos + keep < first || pos > last + keep {
                keep_mask[i] = false;
            }
        }
    }
    Dataset {
        epochs: dataset
            .epochs
            .iter()
            .zip(keep_mask)
            .filter(|(_, k)| *k)
            .map(|(e, _)| e.clone())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<Annotation> {
        vec![Annotation::Stage(Stage::N2); n]
    }

    #[test]
    fn nine_thousand_samples_make_three_epochs() {
        let s = segment_epochs(&vec![0.0; 9000], 100.0, &labels(3), "s", 0).unwrap();
        assert_eq!(s.dataset.len(), 3);
        let s = segment_epochs(&vec![0.0; 9001], 100.0, &labels(3), "s", 0).unwrap();
        assert_eq!(s.dataset.len(), 3);
    }

    #[test]
    fn rejects_other_rates_and_short_labels() {
        assert!(segment_epochs(&vec![0.0; 9000], 200.0, &labels(3), "s", 0).is_err());
        assert!(segment_epochs(&vec![0.0; 9000], 100.0, &labels(2), "s", 0).is_err());
    }

    #[test]
    fn movement_windows_excluded() {
        let mut l = labels(3);
        l[1] = Annotation::Movement;
        let samples: Vec<f64> = (0..9000).map(|v| v as f64).collect();
        let s = segment_epochs(&samples, 100.0, &l, "s", 1).unwrap();
        assert_eq!(s.excluded, 1);
        assert_eq!(s.dataset.len(), 2);
        assert_eq!(s.dataset.epochs[1].samples[0], 6000.0);
    }

    #[test]
    fn wake_trim_keeps_margin() {
        let stages = [Stage::W, Stage::W, Stage::W, Stage::N1, Stage::N2, Stage::W, Stage::W, Stage::W];
        let ann: Vec<Annotation> = stages.iter().map(|&s| Annotation::Stage(s)).collect();
        let ds = segment_epochs(&vec![0.0; 8 * EPOCH_LEN], 100.0, &ann, "s", 0)
            .unwrap()
            .dataset;
        let trimmed = trim_wake(&ds, 1);
        let got: Vec<Stage> = trimmed.epochs.iter().map(|e| e.label.unwrap()).collect();
        assert_eq!(got, vec![Stage::W, Stage::N1, Stage::N2, Stage::W]);
    }

    #[test]
    fn stage_tokens() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
            assert_eq!(Stage::from_index(s.index()), Some(s));
        }
    }
}
