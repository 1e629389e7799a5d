//! Datasets, file formats, synthetic data and task-sequence construction.

mod augment;
mod manifest;
pub mod pgm;
mod scenario;
mod synth;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, bilinear_resize, center_crop, AugmentMode, CNN_CROP, CNN_INPUT};
pub use manifest::{load_dataset, write_dataset, ManifestHeader};
pub use scenario::{make_scenario, retained_count, SampleId, ScenarioSpec, Task, TaskSequence};
pub use synth::{synth_dataset, synth_dataset_with_clean, SynthKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("{path}: malformed PGM: {msg}")]
    Pgm { path: PathBuf, msg: String },
    #[error("{path}: image is {found_h}x{found_w}, manifest declares {expected_h}x{expected_w}")]
    DimensionMismatch {
        path: PathBuf,
        expected_h: usize,
        expected_w: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("class `{0}` appears in more than one dataset")]
    DuplicateClass(String),
    #[error("schedule covers {scheduled} classes but class order lists {ordered}")]
    ScheduleMismatch { scheduled: usize, ordered: usize },
    #[error("image is {height}x{width}, smaller than the {crop}x{crop} crop")]
    ImageTooSmall {
        height: usize,
        width: usize,
        crop: usize,
    },
    #[error("dataset `{dataset}`: {msg}")]
    InvalidDataset { dataset: String, msg: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Row-major grayscale raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DataError::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(DataError::InvalidArgument(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(DataError::InvalidArgument("non-finite pixel".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| {
            self.get(r, self.width - 1 - c)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::InvalidArgument(format!(
                "split must be train or test, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: Vec<String>,
    pub samples: Vec<LabeledImage>,
}

impl Dataset {
    /// Checks labels against the class list, pixel range and per-class split coverage.
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| DataError::InvalidDataset {
            dataset: self.name.clone(),
            msg,
        };
        let mut counts = vec![[0usize; 2]; self.classes.len()];
        for s in &self.samples {
            let k = self
                .class_index(&s.label)
                .ok_or_else(|| invalid(format!("label `{}` not in class list", s.label)))?;
            if !s.image.in_unit_range() {
                return Err(invalid(format!(
                    "sample of class `{}` has pixels outside [0,1]",
                    s.label
                )));
            }
            counts[k][s.split as usize] += 1;
        }
        for (class, [train, test]) in self.classes.iter().zip(&counts) {
            if *train == 0 || *test == 0 {
                return Err(invalid(format!(
                    "class `{class}` needs at least one train and one test sample ({train} train, {test} test)"
                )));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledImage> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}
