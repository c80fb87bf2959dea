//! Hypnogram CSV: rows `epoch_index,stage`, indices contiguous from 0. An
//! optional header row is skipped. R&K labels are mapped to AASM: N4 merges
//! into N3, MOVEMENT and UNKNOWN epochs are flagged for exclusion.

use std::path::Path;

use super::Stage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Annotation {
    Stage(Stage),
    Movement,
    Unknown,
}

impl Annotation {
    pub fn parse(token: &str) -> Result<Self> {
        Ok(match token.trim() {
            "W" => Annotation::Stage(Stage::W),
            "N1" => Annotation::Stage(Stage::N1),
            "N2" => Annotation::Stage(Stage::N2),
            "N3" | "N4" => Annotation::Stage(Stage::N3),
            "REM" => Annotation::Stage(Stage::Rem),
            "MOVEMENT" => Annotation::Movement,
            "UNKNOWN" => Annotation::Unknown,
            other => return Err(Error::data(format!("unknown hypnogram token `{other}`"))),
        })
    }

    pub fn stage(self) -> Option<Stage> {
        match self {
            Annotation::Stage(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypnogram {
    pub entries: Vec<Annotation>,
}

impl Hypnogram {
    /// Number of epochs flagged for exclusion.
    pub fn excluded(&self) -> usize {
        self.entries.iter().filter(|a| a.stage().is_none()).count()
    }

    pub fn stages(&self) -> Vec<Stage> {
        self.entries.iter().filter_map(|a| a.stage()).collect()
    }
}

pub fn parse_hypnogram<R: std::io::Read>(reader: R) -> Result<Hypnogram> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut entries = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::data(format!(
                "hypnogram line {}: expected 2 fields, got {}",
                line + 1,
                rec.len()
            )));
        }
        let Ok(index) = rec[0].parse::<usize>() else {
            if line == 0 {
                continue;
            }
            return Err(Error::data(format!(
                "hypnogram line {}: bad epoch index `{}`",
                line + 1,
                &rec[0]
            )));
        };
        if index != entries.len() {
            return Err(Error::data(format!(
                "hypnogram indices not contiguous: expected {}, found {index}",
                entries.len()
            )));
        }
        entries.push(Annotation::parse(&rec[1])?);
    }
    Ok(Hypnogram { entries })
}

pub fn read_hypnogram_csv(path: impl AsRef<Path>) -> Result<Hypnogram> {
    let path = path.as_ref();
    parse_hypnogram(std::fs::File::open(path).map_err(Error::at(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Hypnogram> {
        parse_hypnogram(s.as_bytes())
    }

    #[test]
    fn basic_rows() {
        assert_eq!(parse("0,W\n1,N1\n").unwrap().stages(), vec![Stage::W, Stage::N1]);
    }

    #[test]
    fn n4_merges_into_n3() {
        assert_eq!(parse("0,N4\n").unwrap().stages(), vec![Stage::N3]);
    }

    #[test]
    fn movement_flagged() {
        let h = parse("epoch_index,stage\n0,W\n1,MOVEMENT\n2,UNKNOWN\n3,REM\n").unwrap();
        assert_eq!(h.entries.len(), 4);
        assert_eq!(h.excluded(), 2);
    }

    #[test]
    fn gaps_and_bad_tokens_rejected() {
        assert!(parse("0,W\n2,N1\n").is_err());
        assert!(parse("0,S5\n").is_err());
    }
}
