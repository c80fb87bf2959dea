//! Read-only subset of EDF: fixed 256-byte header, 256 header bytes per
//! signal (field-major), then data records of 16-bit little-endian samples.
//! EDF+ annotation streams are not interpreted.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EdfSignalHeader {
    pub label: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub samples_per_record: usize,
}

impl EdfSignalHeader {
    /// `phys_min + (d - dig_min) (phys_max - phys_min) / (dig_max - dig_min)`.
    pub fn to_physical(&self, d: i16) -> f64 {
        let span = (self.digital_max - self.digital_min) as f64;
        self.physical_min
            + (d as f64 - self.digital_min as f64) * (self.physical_max - self.physical_min) / span
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub header_bytes: usize,
    pub n_records: usize,
    pub record_duration: f64,
    pub signals: Vec<EdfSignalHeader>,
}

impl EdfHeader {
    fn record_len(&self) -> usize {
        self.signals.iter().map(|s| s.samples_per_record).sum::<usize>() * 2
    }
}

fn field(bytes: &[u8], at: usize, len: usize) -> Result<&str> {
    let raw = bytes
        .get(at..at + len)
        .ok_or_else(|| Error::format("EDF header truncated"))?;
    std::str::from_utf8(raw)
        .map(str::trim)
        .map_err(|_| Error::format("EDF header field is not ASCII"))
}

fn num<F: std::str::FromStr>(bytes: &[u8], at: usize, len: usize, what: &str) -> Result<F> {
    let s = field(bytes, at, len)?;
    s.parse()
        .map_err(|_| Error::format(format!("EDF header: bad {what} `{s}`")))
}

/// Parses the header and resolves `-1` record counts from the file size.
pub fn parse_header(bytes: &[u8]) -> Result<EdfHeader> {
    if bytes.len() < 256 {
        return Err(Error::format("EDF file shorter than its fixed header"));
    }
    let header_bytes: usize = num(bytes, 184, 8, "header size")?;
    let n_records: i64 = num(bytes, 236, 8, "record count")?;
    let record_duration: f64 = num(bytes, 244, 8, "record duration")?;
    let ns: usize = num(bytes, 252, 4, "signal count")?;
    if header_bytes != 256 * (ns + 1) {
        return Err(Error::format(format!(
            "EDF header declares {header_bytes} bytes for {ns} signals"
        )));
    }
    if bytes.len() < header_bytes {
        return Err(Error::format("EDF signal headers truncated"));
    }
    // Field-major signal header: each field for all signals, then the next.
    let mut offset = 256;
    let mut col = |width: usize| {
        let start = offset;
        offset += width * ns;
        move |i: usize| start + i * width
    };
    let label_at = col(16);
    let _transducer = col(80);
    let _dimension = col(8);
    let pmin_at = col(8);
    let pmax_at = col(8);
    let dmin_at = col(8);
    let dmax_at = col(8);
    let _prefilter = col(80);
    let nsamp_at = col(8);
    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let sig = EdfSignalHeader {
            label: field(bytes, label_at(i), 16)?.to_string(),
            physical_min: num(bytes, pmin_at(i), 8, "physical minimum")?,
            physical_max: num(bytes, pmax_at(i), 8, "physical maximum")?,
            digital_min: num(bytes, dmin_at(i), 8, "digital minimum")?,
            digital_max: num(bytes, dmax_at(i), 8, "digital maximum")?,
            samples_per_record: num(bytes, nsamp_at(i), 8, "samples per record")?,
        };
        if sig.digital_max <= sig.digital_min {
            return Err(Error::format(format!(
                "signal `{}` has an empty digital range",
                sig.label
            )));
        }
        signals.push(sig);
    }
    let mut header = EdfHeader {
        header_bytes,
        n_records: 0,
        record_duration,
        signals,
    };
    let data_len = bytes.len() - header_bytes;
    let record_len = header.record_len();
    header.n_records = if n_records < 0 {
        if record_len == 0 {
            0
        } else {
            data_len / record_len
        }
    } else {
        n_records as usize
    };
    if header.n_records * record_len > data_len {
        return Err(Error::format(format!(
            "EDF declares {} records of {record_len} bytes but only {data_len} data bytes follow",
            header.n_records
        )));
    }
    Ok(header)
}

/// Physical samples of the signal labelled `channel` and its sampling rate.
pub fn read_edf_signal(path: impl AsRef<Path>, channel: &str) -> Result<(Vec<f64>, f64)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::at(path))?;
    let (digital, sig, rate) = read_digital(&bytes, channel)?;
    Ok((digital.into_iter().map(|d| sig.to_physical(d)).collect(), rate))
}

/// Raw digital samples plus the signal header and rate.
pub fn read_digital(bytes: &[u8], channel: &str) -> Result<(Vec<i16>, EdfSignalHeader, f64)> {
    let header = parse_header(bytes)?;
    let idx = header
        .signals
        .iter()
        .position(|s| s.label == channel.trim())
        .ok_or_else(|| Error::ChannelAbsent(channel.to_string()))?;
    let sig = header.signals[idx].clone();
    let before: usize = header.signals[..idx]
        .iter()
        .map(|s| s.samples_per_record)
        .sum();
    let record_len = header.record_len();
    let mut out = Vec::with_capacity(header.n_records * sig.samples_per_record);
    for r in 0..header.n_records {
        let start = header.header_bytes + r * record_len + before * 2;
        let raw = &bytes[start..start + sig.samples_per_record * 2];
        out.extend(raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])));
    }
    let rate = if header.record_duration > 0.0 {
        sig.samples_per_record as f64 / header.record_duration
    } else {
        0.0
    };
    Ok((out, sig, rate))
}

/// A signal to be written by [`write_edf`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdfSignal {
    pub header: EdfSignalHeader,
    pub digital: Vec<i16>,
}

fn put(buf: &mut Vec<u8>, s: &str, width: usize) {
    let mut b = s.as_bytes().to_vec();
    b.truncate(width);
    b.resize(width, b' ');
    buf.extend_from_slice(&b);
}

/// Serializes signals as a plain EDF file. Every signal must hold exactly
/// `n_records * samples_per_record` samples.
pub fn edf_bytes(signals: &[EdfSignal], n_records: usize, record_duration: f64) -> Result<Vec<u8>> {
    for s in signals {
        if s.digital.len() != n_records * s.header.samples_per_record {
            return Err(Error::data(format!(
                "signal `{}` has {} samples for {n_records} records of {}",
                s.header.label,
                s.digital.len(),
                s.header.samples_per_record
            )));
        }
    }
    let ns = signals.len();
    let mut buf = Vec::new();
    put(&mut buf, "0", 8);
    put(&mut buf, "X X X X", 80);
    put(&mut buf, "Startdate X X X X", 80);
    put(&mut buf, "01.01.00", 8);
    put(&mut buf, "00.00.00", 8);
    put(&mut buf, &(256 * (ns + 1)).to_string(), 8);
    put(&mut buf, "", 44);
    put(&mut buf, &n_records.to_string(), 8);
    put(&mut buf, &record_duration.to_string(), 8);
    put(&mut buf, &ns.to_string(), 4);
    let h = |f: &dyn Fn(&EdfSignalHeader) -> String, width: usize, buf: &mut Vec<u8>| {
        for s in signals {
            put(buf, &f(&s.header), width);
        }
    };
    h(&|s| s.label.clone(), 16, &mut buf);
    h(&|_| String::new(), 80, &mut buf);
    h(&|_| "uV".into(), 8, &mut buf);
    h(&|s| s.physical_min.to_string(), 8, &mut buf);
    h(&|s| s.physical_max.to_string(), 8, &mut buf);
    h(&|s| s.digital_min.to_string(), 8, &mut buf);
    h(&|s| s.digital_max.to_string(), 8, &mut buf);
    h(&|_| String::new(), 80, &mut buf);
    h(&|s| s.samples_per_record.to_string(), 8, &mut buf);
    h(&|_| String::new(), 32, &mut buf);
    for r in 0..n_records {
        for s in signals {
            let n = s.header.samples_per_record;
            for &d in &s.digital[r * n..(r + 1) * n] {
                buf.extend_from_slice(&d.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn write_edf(
    path: impl AsRef<Path>,
    signals: &[EdfSignal],
    n_records: usize,
    record_duration: f64,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, edf_bytes(signals, n_records, record_duration)?).map_err(Error::at(path))?;
    Ok(())
}
