//! Manifest format: a UTF-8 CSV `path,label,split` with paths relative to the
//! CSV's directory, plus a sibling JSON header (same stem, `.json` extension)
//! `{"name": ..., "classes": [...]}` with optional `height`/`width`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{pgm, DataError, Dataset, LabeledImage, Result, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub name: String,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    label: String,
    split: String,
}

fn header_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest_err = |path: &Path, msg: String| DataError::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let hpath = header_path(manifest_path);
    let header_text = fs::read_to_string(&hpath).map_err(io_err(&hpath))?;
    let header: ManifestHeader =
        serde_json::from_str(&header_text).map_err(|e| manifest_err(&hpath, e.to_string()))?;

    let csv_text = fs::read(manifest_path).map_err(io_err(manifest_path))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_slice());
    let headers = reader
        .headers()
        .map_err(|e| manifest_err(manifest_path, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
        return Err(manifest_err(
            manifest_path,
            format!(
                "expected header `path,label,split`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut samples = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| manifest_err(manifest_path, format!("line {}: {e}", i + 2)))?;
        let split: Split = row
            .split
            .parse()
            .map_err(|e: DataError| manifest_err(manifest_path, format!("line {}: {e}", i + 2)))?;
        let ipath = base.join(&row.path);
        let image = pgm::read(&ipath)?;
        if let (Some(h), Some(w)) = (header.height, header.width) {
            if (image.height(), image.width()) != (h, w) {
                return Err(DataError::DimensionMismatch {
                    path: ipath,
                    expected_h: h,
                    expected_w: w,
                    found_h: image.height(),
                    found_w: image.width(),
                });
            }
        }
        samples.push(LabeledImage {
            image,
            label: row.label,
            split,
        });
    }
    let dataset = Dataset {
        name: header.name,
        classes: header.classes,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes every sample as a 16-bit PGM under `dir/images/` plus `dir/manifest.{csv,json}`.
/// Returns the manifest CSV path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut csv_out = String::from("path,label,split\n");
    let mut ordinal = vec![0usize; dataset.classes.len()];
    for s in &dataset.samples {
        let k = dataset
            .class_index(&s.label)
            .ok_or_else(|| DataError::UnknownClass(s.label.clone()))?;
        let rel = format!("images/{}_{}_{:05}.pgm", s.label, s.split, ordinal[k]);
        ordinal[k] += 1;
        pgm::write(&dir.join(&rel), &s.image, true)?;
        csv_out.push_str(&format!("{rel},{},{}\n", s.label, s.split));
    }
    let (height, width) = match dataset.samples.first() {
        Some(s)
            if dataset.samples.iter().all(|t| {
                (t.image.height(), t.image.width()) == (s.image.height(), s.image.width())
            }) =>
        {
            (Some(s.image.height()), Some(s.image.width()))
        }
        _ => (None, None),
    };
    let header = ManifestHeader {
        name: dataset.name.clone(),
        classes: dataset.classes.clone(),
        height,
        width,
    };
    let manifest = dir.join("manifest.csv");
    fs::write(&manifest, csv_out).map_err(io_err(&manifest))?;
    let hpath = header_path(&manifest);
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&hpath, json).map_err(io_err(&hpath))?;
    Ok(manifest)
}
