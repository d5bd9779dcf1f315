//! Labelled TCR–epitope pairs and their CSV form.
//!
//! Files carry a header with `epitope`, `tcr` and `label` columns. An
//! optional `class` (or `mhc_class`) column stratifies evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sequence::{AaSequence, SequenceError};

#[derive(Debug, Error)]
pub enum PairsError {
    #[error("line {line}: {source}")]
    Sequence {
        line: usize,
        #[source]
        source: SequenceError,
    },
    #[error("line {line}: label must be 0 or 1, found {found:?}")]
    BadLabel { line: usize, found: String },
    #[error("missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PairExample {
    pub epitope: AaSequence,
    pub tcr: AaSequence,
    /// 1 binds, 0 does not.
    pub label: u8,
    pub class: Option<String>,
}

impl PairExample {
    pub fn new(epitope: AaSequence, tcr: AaSequence, label: u8) -> Self {
        Self {
            epitope,
            tcr,
            label,
            class: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    epitope: String,
    tcr: String,
    label: String,
    #[serde(default, alias = "mhc_class", skip_serializing_if = "Option::is_none")]
    class: Option<String>,
}

pub fn read_pairs_from(reader: impl std::io::Read) -> Result<Vec<PairExample>, PairsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in ["epitope", "tcr", "label"] {
        if !headers.iter().any(|h| h == col) {
            return Err(PairsError::MissingColumn(col));
        }
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row?;
        let parse =
            |s: &str| AaSequence::parse(s).map_err(|source| PairsError::Sequence { line, source });
        let label = match row.label.as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(PairsError::BadLabel {
                    line,
                    found: other.to_string(),
                })
            }
        };
        out.push(PairExample {
            epitope: parse(&row.epitope)?,
            tcr: parse(&row.tcr)?,
            label,
            class: row.class.filter(|c| !c.is_empty()),
        });
    }
    Ok(out)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairExample>, PairsError> {
    read_pairs_from(std::fs::File::open(path)?)
}

pub fn write_pairs_to(
    writer: impl std::io::Write,
    pairs: &[PairExample],
) -> Result<(), PairsError> {
    let mut w = csv::Writer::from_writer(writer);
    let with_class = pairs.iter().any(|p| p.class.is_some());
    if with_class {
        w.write_record(["epitope", "tcr", "label", "class"])?;
    } else {
        w.write_record(["epitope", "tcr", "label"])?;
    }
    for p in pairs {
        let label = p.label.to_string();
        let mut rec = vec![p.epitope.as_str(), p.tcr.as_str(), label.as_str()];
        if with_class {
            rec.push(p.class.as_deref().unwrap_or(""));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[PairExample]) -> Result<(), PairsError> {
    write_pairs_to(std::fs::File::create(path)?, pairs)
}

/// Reads one sequence per line, or the first column of a CSV with a
/// `tcr` header. Blank lines are skipped.
pub fn read_sequences(path: impl AsRef<Path>) -> Result<Vec<AaSequence>, PairsError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() || (i == 0 && field.chars().any(|c| c.is_ascii_lowercase())) {
            continue;
        }
        out.push(
            AaSequence::parse(field).map_err(|source| PairsError::Sequence {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_class() {
        let text = "epitope,tcr,label,mhc_class\nGILGFVFTL,CASSIRSSYEQYF,1,MHCI\nNLVPMVATV,CASSLAPGATNEKLFF,0,\n";
        let pairs = read_pairs_from(text.as_bytes()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].class.as_deref(), Some("MHCI"));
        assert_eq!(pairs[1].class, None);
        let mut buf = Vec::new();
        write_pairs_to(&mut buf, &pairs).unwrap();
        assert_eq!(read_pairs_from(buf.as_slice()).unwrap(), pairs);
    }

    #[test]
    fn rejects_bad_rows() {
        let bad_label = "epitope,tcr,label\nGILGFVFTL,CASS,2\n";
        assert!(matches!(
            read_pairs_from(bad_label.as_bytes()),
            Err(PairsError::BadLabel { line: 2, .. })
        ));
        let bad_seq = "epitope,tcr,label\nGILGFVFTL,CASSX,1\n";
        assert!(matches!(
            read_pairs_from(bad_seq.as_bytes()),
            Err(PairsError::Sequence { line: 2, .. })
        ));
        assert!(matches!(
            read_pairs_from("epitope,label\nA,1\n".as_bytes()),
            Err(PairsError::MissingColumn("tcr"))
        ));
    }
}
