//! Checkpoint files: `<stem>.json` describes named tensors stored back to back as
//! little-endian 64-bit floats in `<stem>.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the binary file, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save(
    stem: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(&str, Vec<usize>, &[f64])],
) -> Result<(), CheckpointError> {
    let (jpath, bpath) = paths(stem);
    if let Some(dir) = jpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in tensors {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
        for v in data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: entries,
    };
    fs::write(&bpath, blob).map_err(io(&bpath))?;
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&jpath, json).map_err(io(&jpath))?;
    Ok(())
}

pub fn load(stem: &Path, expected_kind: &str) -> Result<Checkpoint, CheckpointError> {
    let (jpath, bpath) = paths(stem);
    let text = fs::read_to_string(&jpath).map_err(io(&jpath))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| CheckpointError::Format {
        path: jpath.clone(),
        msg: e.to_string(),
    })?;
    if header.kind != expected_kind {
        return Err(CheckpointError::Format {
            path: jpath,
            msg: format!(
                "expected a `{expected_kind}` checkpoint, found `{}`",
                header.kind
            ),
        });
    }
    let bytes = fs::read(&bpath).map_err(io(&bpath))?;
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Format {
            path: bpath,
            msg: "length is not a multiple of 8".into(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let len: usize = entry.shape.iter().product();
        let data = values
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| CheckpointError::Format {
                path: bpath.clone(),
                msg: format!("tensor `{}` runs past end of file", entry.name),
            })?
            .to_vec();
        tensors.insert(
            entry.name,
            Tensor {
                shape: entry.shape,
                data,
            },
        );
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

impl Checkpoint {
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<&[f64], CheckpointError> {
        let fmt = |msg: String| CheckpointError::Format {
            path: PathBuf::from(format!("<{}>", self.kind)),
            msg,
        };
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| fmt(format!("missing tensor `{name}`")))?;
        if t.shape != shape {
            return Err(fmt(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(&t.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let a = [1.0, -2.5, f64::MIN_POSITIVE];
        let b = [3.0; 4];
        save(
            &stem,
            "demo",
            serde_json::json!({"x": 1}),
            &[("a", vec![3], &a), ("b", vec![2, 2], &b)],
        )
        .unwrap();
        let ck = load(&stem, "demo").unwrap();
        assert_eq!(ck.tensor("a", &[3]).unwrap(), &a);
        assert_eq!(ck.tensor("b", &[2, 2]).unwrap(), &b);
        assert!(ck.tensor("b", &[4]).is_err());
        assert!(load(&stem, "other").is_err());
    }
}
