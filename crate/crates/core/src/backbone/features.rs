//! Feature CSV files: header `label,f0,...,f{d-1}`, one sample per row.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::{BackboneError, FeatureMatrix, FeatureSource, Result};
use crate::datahub::DataError;

pub fn ingest_features(path: &Path) -> Result<FeatureMatrix> {
    let file_err = |line: usize, msg: String| BackboneError::FeatureFile {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let header = reader
        .headers()
        .map_err(|e| file_err(1, e.to_string()))?
        .clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(BackboneError::EmptyFeatureFile {
            path: path.to_path_buf(),
        });
    }
    if header.get(0) != Some("label") {
        return Err(file_err(1, "first column must be `label`".into()));
    }
    let d = header.len() - 1;
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(file_err(
                1,
                format!("column {} should be `f{j}`, found `{name}`", j + 2),
            ));
        }
    }
    if d == 0 {
        return Err(file_err(1, "no feature columns".into()));
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| file_err(line, e.to_string()))?;
        if record.len() != d + 1 {
            return Err(file_err(
                line,
                format!(
                    "expected {} values, found {}",
                    d,
                    record.len().saturating_sub(1)
                ),
            ));
        }
        labels.push(record[0].to_string());
        for cell in record.iter().skip(1) {
            let v: f64 = cell
                .parse()
                .map_err(|_| file_err(line, format!("non-numeric value `{cell}`")))?;
            if !v.is_finite() {
                return Err(file_err(line, format!("non-finite value `{cell}`")));
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(BackboneError::EmptyFeatureFile {
            path: path.to_path_buf(),
        });
    }
    let rows = DMatrix::from_row_slice(labels.len(), d, &values);
    FeatureMatrix::new(rows, labels, FeatureSource::Ingested)
}

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut out = String::from("label");
    for j in 0..features.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (label, row) in features.labels.iter().zip(features.rows.row_iter()) {
        out.push_str(label);
        for v in row.iter() {
            // shortest representation that round-trips exactly
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("f.csv");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn parses_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "label,f0,f1,f2,f3\na,1,2,3,4\nb,0.5,-1,0,2e-3\na,0,0,0,0\n",
        );
        let f = ingest_features(&p).unwrap();
        assert_eq!((f.len(), f.dim()), (3, 4));
        assert_eq!(f.rows[(1, 3)], 2e-3);
        assert_eq!(f.labels, ["a", "b", "a"]);
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "label,f0,f1\n");
        let err = ingest_features(&p).unwrap_err();
        assert!(err.to_string().contains("no rows"), "{err}");
        let p = write(dir.path(), "");
        assert!(matches!(
            ingest_features(&p),
            Err(BackboneError::EmptyFeatureFile { .. })
        ));
    }

    #[test]
    fn ragged_and_non_numeric_rows_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "label,f0,f1\na,1,2\nb,3\n");
        let err = ingest_features(&p).unwrap_err();
        assert!(
            matches!(err, BackboneError::FeatureFile { line: 3, .. }),
            "{err}"
        );
        let p = write(dir.path(), "label,f0,f1\na,1,x\n");
        assert!(matches!(
            ingest_features(&p).unwrap_err(),
            BackboneError::FeatureFile { line: 2, .. }
        ));
    }

    #[test]
    fn write_then_read_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureMatrix::new(
            DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -7.25e-9, 5.0]),
            vec!["x".into(), "y".into()],
            FeatureSource::Cnn,
        )
        .unwrap();
        let p = dir.path().join("out.csv");
        write_features(&p, &f).unwrap();
        let back = ingest_features(&p).unwrap();
        assert_eq!(back.rows, f.rows);
        assert_eq!(back.labels, f.labels);
    }
}
