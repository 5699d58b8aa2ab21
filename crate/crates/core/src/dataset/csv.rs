//! Sample files: one row per sample, `label,f1,f2,...`, label `-1` for
//! unlabeled rows. No header, comma delimiter, LF line endings.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::{DomainSet, DomainTag, UNLABELED};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub fn parse_csv(text: &str, domain: DomainTag, class_count: usize) -> Result<DomainSet> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or_default().trim();
        let label: i64 = label_field.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad label `{label_field}`"),
        })?;
        let label = match label {
            UNLABELED => None,
            l if l >= 0 => Some(l as usize),
            l => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("negative label {l}"),
                })
            }
        };
        let start = data.len();
        for field in fields {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad feature `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite feature `{field}`"),
                });
            }
            data.push(v);
        }
        let n = data.len() - start;
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(Error::Format(format!(
                    "line {line_no} has {n} features, expected {w}"
                )))
            }
            Some(_) => {}
        }
        labels.push(label);
    }
    let features = Matrix::new(labels.len(), width.unwrap_or(0), data)?;
    DomainSet::new(features, labels, domain, class_count)
}

pub fn load_csv(path: impl AsRef<Path>, domain: DomainTag, class_count: usize) -> Result<DomainSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, domain, class_count)
}

/// Writes visible labels only; shadow labels are not part of the format.
pub fn write_csv<W: Write>(set: &DomainSet, mut out: W) -> io::Result<()> {
    for (row, label) in set.features().iter_rows().zip(set.labels()) {
        match label {
            Some(l) => write!(out, "{l}")?,
            None => write!(out, "{UNLABELED}")?,
        }
        for v in row {
            write!(out, ",{v:?}")?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_csv(set: &DomainSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_csv(set, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_labeled_and_unlabeled_rows() {
        let set = parse_csv("1,0.5,-2.0\n-1,0.0,0.0\n", DomainTag::Target, 2).unwrap();
        assert_eq!(set.labels(), &[Some(1), None]);
        assert_eq!(set.features().row(0), &[0.5, -2.0]);
        assert_eq!(set.features().row(1), &[0.0, 0.0]);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let err = parse_csv("0,1.0\n1,abc\n", DomainTag::Source, 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_csv("0,1.0\nx,1.0\n", DomainTag::Source, 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn ragged_rows_are_a_format_error() {
        let err = parse_csv("0,1.0,2.0\n1,1.0\n", DomainTag::Source, 2).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_csv("/nonexistent/exitwise.csv", DomainTag::Source, 2).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/exitwise.csv"));
    }

    proptest! {
        #[test]
        fn save_then_load_is_exact(
            rows in prop::collection::vec((prop::option::of(0usize..3), prop::collection::vec(-1e6f64..1e6, 3)), 1..20)
        ) {
            let labels: Vec<Option<usize>> = rows.iter().map(|r| r.0).collect();
            let feats: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
            let set = DomainSet::new(Matrix::from_rows(&feats).unwrap(), labels, DomainTag::Target, 3).unwrap();
            let mut buf = Vec::new();
            write_csv(&set, &mut buf).unwrap();
            let back = parse_csv(std::str::from_utf8(&buf).unwrap(), DomainTag::Target, 3).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
