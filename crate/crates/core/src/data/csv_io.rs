//! Row format shared by datasets, `S₁` and `S₂`:
//! `id,label,provenance,x_1,...,x_d`, label `-1` for unlabeled rows.
//!
//! Floats are written in Rust's shortest round-trip form, so a write/read
//! cycle reproduces every bit.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Pseudo,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Pseudo => "pseudo",
        }
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Provenance::Real),
            "pseudo" => Ok(Provenance::Pseudo),
            other => Err(format!("unknown provenance `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub id: u64,
    pub label: Option<usize>,
    pub provenance: Provenance,
    pub x: Vec<f64>,
}

pub fn write_rows<W: Write>(writer: W, rows: &[CsvRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.x.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "id".to_string(),
        "label".to_string(),
        "provenance".to_string(),
    ];
    header.extend((1..=dim).map(|j| format!("x_{j}")));
    w.write_record(&header)?;
    for row in rows {
        if row.x.len() != dim {
            return Err(Error::input(format!(
                "row {} has dimension {}, expected {dim}",
                row.id,
                row.x.len()
            )));
        }
        let mut record = vec![
            row.id.to_string(),
            row.label.map_or("-1".to_string(), |l| l.to_string()),
            row.provenance.as_str().to_string(),
        ];
        record.extend(row.x.iter().map(|v| format!("{v:?}")));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Bare generated points: `class,x_1,...,x_d`.
pub fn write_class_points<W: Write>(writer: W, class: usize, points: &[Vec<f64>]) -> Result<()> {
    let dim = points.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["class".to_string()];
    header.extend((1..=dim).map(|j| format!("x_{j}")));
    w.write_record(&header)?;
    for x in points {
        let mut record = vec![class.to_string()];
        record.extend(x.iter().map(|v| format!("{v:?}")));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_to_path(path: &Path, rows: &[CsvRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_rows(File::create(path)?, rows)
}

pub fn read_rows<R: Read>(reader: R) -> Result<Vec<CsvRow>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = r.headers()?.clone();
    let fixed = ["id", "label", "provenance"];
    if header.len() < 3 || header.iter().take(3).ne(fixed) {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with id,label,provenance".into(),
        });
    }
    let dim = header.len() - 3;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse { line, message };
        if record.len() != dim + 3 {
            return Err(bad(format!(
                "expected {} fields, found {}",
                dim + 3,
                record.len()
            )));
        }
        let id = record[0]
            .parse::<u64>()
            .map_err(|e| bad(format!("id `{}`: {e}", &record[0])))?;
        let label = match record[1].parse::<i64>() {
            Ok(-1) => None,
            Ok(l) if l >= 0 => Some(l as usize),
            _ => {
                return Err(bad(format!(
                    "label `{}` is not a class index or -1",
                    &record[1]
                )))
            }
        };
        let provenance = record[2].parse::<Provenance>().map_err(bad)?;
        let x = record
            .iter()
            .skip(3)
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("`{f}` is not a finite number")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(CsvRow {
            id,
            label,
            provenance,
            x,
        });
    }
    Ok(rows)
}

pub fn read_rows_from_path(path: &Path) -> Result<Vec<CsvRow>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_rows(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows() -> Vec<CsvRow> {
        vec![
            CsvRow {
                id: 0,
                label: Some(3),
                provenance: Provenance::Real,
                x: vec![0.1, -2.5e-300],
            },
            CsvRow {
                id: 1,
                label: None,
                provenance: Provenance::Real,
                x: vec![1.0 / 3.0, 7.0],
            },
            CsvRow {
                id: 2,
                label: Some(0),
                provenance: Provenance::Pseudo,
                x: vec![-0.0, 1e21],
            },
        ]
    }

    #[test]
    fn unlabeled_rows_carry_minus_one() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,label,provenance,x_1,x_2");
        assert!(lines[2].starts_with("1,-1,real,"));
        assert!(lines[3].starts_with("2,0,pseudo,"));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let text = "id,label,provenance,x_1\n0,1,real,0.5\n1,1,real,abc\n";
        match read_rows(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "id,label,provenance,x_1\n0,-2,real,0.5\n";
        assert!(matches!(
            read_rows(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let text = "id,label,provenance,x_1\n0,1,fake,0.5\n";
        assert!(matches!(
            read_rows(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let text = "idx,label,provenance,x_1\n";
        assert!(matches!(
            read_rows(text.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(values in prop::collection::vec(any::<u64>(), 1..12), label in -1i64..5) {
            let x: Vec<f64> = values.iter().map(|&b| f64::from_bits(b)).filter(|v| v.is_finite()).collect();
            prop_assume!(!x.is_empty());
            let row = CsvRow {
                id: 42,
                label: (label >= 0).then_some(label as usize),
                provenance: if label % 2 == 0 { Provenance::Real } else { Provenance::Pseudo },
                x: x.clone(),
            };
            let mut buf = Vec::new();
            write_rows(&mut buf, std::slice::from_ref(&row)).unwrap();
            let back = read_rows(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].label, row.label);
            prop_assert_eq!(back[0].provenance, row.provenance);
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0].x), bits(&x));
        }
    }
}
