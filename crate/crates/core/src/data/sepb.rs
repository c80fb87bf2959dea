//! SEPB epoch container.
//!
//! Layout (little-endian): `"SEPB"`, u32 version, u32 n_epochs, u32 epoch_len,
//! u32 n_classes, u32 n_subjects, per subject u32 byte length + UTF-8 id, per
//! epoch u16 subject index + u8 night, all samples as f32 row-major, then one
//! label byte per epoch (255 = unlabeled).

use std::fs;
use std::path::Path;

use super::{Dataset, EpochRecord, Stage};
use crate::{Error, Result, EPOCH_LEN, N_CLASSES};

const MAGIC: &[u8; 4] = b"SEPB";
const VERSION: u32 = 1;
const UNLABELED: u8 = 255;

pub fn sepb_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    let subjects = dataset.subjects();
    if subjects.len() > u16::MAX as usize + 1 {
        return Err(Error::data("too many subjects for a SEPB file"));
    }
    let n = dataset.len();
    let mut buf = Vec::with_capacity(24 + n * (EPOCH_LEN * 4 + 4));
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, EPOCH_LEN as u32, N_CLASSES as u32, subjects.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &subjects {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    }
    for e in &dataset.epochs {
        let idx = subjects.iter().position(|s| *s == e.subject_id).unwrap_or(0) as u16;
        buf.extend_from_slice(&idx.to_le_bytes());
        buf.push(e.night_id);
    }
    for e in &dataset.epochs {
        if e.samples.len() != EPOCH_LEN {
            return Err(Error::data("epoch with wrong sample count"));
        }
        for v in &e.samples {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend(
        dataset
            .epochs
            .iter()
            .map(|e| e.label.map_or(UNLABELED, |s| s.index() as u8)),
    );
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("SEPB file shorter than its header declares"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn sepb_parse(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format("not a SEPB file (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported SEPB version {version}")));
    }
    let n = c.u32()? as usize;
    let epoch_len = c.u32()? as usize;
    let n_classes = c.u32()? as usize;
    if epoch_len != EPOCH_LEN || n_classes != N_CLASSES {
        return Err(Error::format(format!(
            "SEPB declares epoch length {epoch_len} and {n_classes} classes"
        )));
    }
    let n_subjects = c.u32()? as usize;
    let mut subjects = Vec::with_capacity(n_subjects.min(1 << 16));
    for _ in 0..n_subjects {
        let len = c.u32()? as usize;
        let id = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format("subject id is not UTF-8"))?;
        subjects.push(id.to_string());
    }
    let mut meta = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let m = c.take(3)?;
        let idx = u16::from_le_bytes([m[0], m[1]]) as usize;
        let subject = subjects
            .get(idx)
            .ok_or_else(|| Error::format(format!("subject index {idx} out of range")))?;
        meta.push((subject.clone(), m[2]));
    }
    let sample_bytes = n
        .checked_mul(EPOCH_LEN * 4)
        .ok_or_else(|| Error::format("SEPB epoch count overflows"))?;
    let samples = c.take(sample_bytes)?;
    let labels = c.take(n)?;
    if c.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after SEPB payload",
            bytes.len() - c.pos
        )));
    }
    let mut epochs = Vec::with_capacity(n);
    for (i, ((subject_id, night_id), &lab)) in meta.into_iter().zip(labels).enumerate() {
        let raw = &samples[i * EPOCH_LEN * 4..(i + 1) * EPOCH_LEN * 4];
        let label = match lab {
            UNLABELED => None,
            l => Some(
                Stage::from_index(l as usize)
                    .ok_or_else(|| Error::format(format!("label byte {l} out of range")))?,
            ),
        };
        epochs.push(EpochRecord {
            samples: raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            label,
            subject_id,
            night_id,
        });
    }
    Ok(Dataset { epochs })
}

pub fn sepb_write(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, sepb_bytes(dataset)?).map_err(Error::at(path))?;
    Ok(())
}

pub fn sepb_read(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    sepb_parse(&fs::read(path).map_err(Error::at(path))?)
}
