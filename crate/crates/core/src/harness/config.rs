//! Run configuration: one JSON document describing a whole experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::datahub::SynthKind;
use crate::projector::default_lambda_grid;
use crate::rpca::RpcaOptimizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every module seed is derived from it.
    pub seed: u64,
    pub datasets: Vec<DatasetSource>,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub cnn: CnnBranch,
    #[serde(default)]
    pub ingested: IngestedBranch,
    #[serde(default)]
    pub rpca: RpcaStage,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default)]
    pub projector: ProjectorConfig,
    /// Where reports go; relative paths are taken from the working directory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated in memory.
    Synth(SynthSource),
    /// A `manifest.csv` path; relative paths are taken from the config file's directory.
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub kind: SynthKind,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub size: usize,
    /// Defaults to a seed derived from the root seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Prepended to the generated class names, to keep several synthetic sets apart.
    #[serde(default)]
    pub prefix: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schedule: Vec<usize>,
    /// Defaults to every dataset's classes, in dataset order.
    #[serde(default)]
    pub class_order: Option<Vec<String>>,
    #[serde(default = "one")]
    pub portion: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnBranch {
    pub enabled: bool,
    pub d_cnn: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for CnnBranch {
    fn default() -> Self {
        Self {
            enabled: false,
            d_cnn: 256,
            dropout: 0.5,
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestedBranch {
    pub enabled: bool,
    pub source: FeatureOrigin,
    pub ssf: SsfStage,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureOrigin {
    /// Flattened raw pixels.
    #[default]
    Identity,
    /// One train and one test feature CSV per dataset, rows in manifest order.
    Files(Vec<FeatureFiles>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFiles {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsfStage {
    pub enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for SsfStage {
    fn default() -> Self {
        Self {
            enabled: false,
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpcaStage {
    pub enabled: bool,
    pub rank: usize,
    /// Side of the centered square window the filter works on.
    pub window: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    pub optimizer: RpcaOptimizer,
}

impl Default for RpcaStage {
    fn default() -> Self {
        Self {
            enabled: false,
            rank: 2,
            window: 128,
            epochs: 300,
            lr: 0.03,
            batch_size: 16,
            epsilon: 1e-4,
            optimizer: RpcaOptimizer::Sgd,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Late,
    Single,
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "late" => Ok(Self::Late),
            "single" => Ok(Self::Single),
            other => Err(format!(
                "unknown fusion mode `{other}` (expected late or single)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub m: usize,
    /// Defaults to a seed derived from the root seed.
    pub seed: Option<u64>,
    pub lambda_grid: Vec<f64>,
    /// Keep the base-task value instead of re-selecting after every task.
    pub freeze_lambda: bool,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            m: 10_000,
            seed: None,
            lambda_grid: default_lambda_grid(),
            freeze_lambda: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a config file, resolving relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Like [`RunConfig::load`], first setting each dotted key (`projector.m`,
    /// `datasets.0.synth.seed`) to the given value.
    pub fn load_with_overrides(
        path: &Path,
        overrides: &[(String, serde_json::Value)],
    ) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let located = |e: String| HarnessError::Config(format!("{}: {e}", path.display()));
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| located(e.to_string()))?;
        for (key, v) in overrides {
            set_dotted(&mut value, key, v.clone())?;
        }
        let mut config: Self = serde_json::from_value(value).map_err(|e| located(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.datasets {
            if let DatasetSource::Manifest(p) = d {
                fix(p);
            }
        }
        if let FeatureOrigin::Files(files) = &mut self.ingested.source {
            for f in files {
                fix(&mut f.train);
                fix(&mut f.test);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.to_string()));
        if self.datasets.is_empty() {
            return bad("at least one dataset is required");
        }
        let branches = self.cnn.enabled as usize + self.ingested.enabled as usize;
        if branches == 0 {
            return bad("at least one branch (cnn or ingested) must be enabled");
        }
        match self.fusion {
            FusionMode::Late if branches != 2 => {
                return bad("late fusion needs both the cnn and the ingested branch enabled")
            }
            FusionMode::Single if branches != 1 => {
                return bad("single fusion needs exactly one enabled branch")
            }
            _ => {}
        }
        if self.rpca.enabled && !self.cnn.enabled {
            return bad("rpca filters the cnn branch input; enable the cnn branch");
        }
        if self.ingested.ssf.enabled && !self.ingested.enabled {
            return bad("ssf adapts ingested features; enable the ingested branch");
        }
        if self.projector.m == 0 {
            return bad("projector.m must be at least 1");
        }
        if self.projector.lambda_grid.is_empty()
            || self
                .projector
                .lambda_grid
                .iter()
                .any(|l| !(*l > 0.0 && l.is_finite()))
        {
            return bad("projector.lambda_grid must be nonempty with positive values");
        }
        if self.cnn.enabled && !(0.0..1.0).contains(&self.cnn.dropout) {
            return bad("cnn.dropout must be in [0,1)");
        }
        if self.rpca.enabled && self.rpca.rank == 0 {
            return bad("rpca.rank must be at least 1");
        }
        if let FeatureOrigin::Files(files) = &self.ingested.source {
            if self.ingested.enabled && files.len() != self.datasets.len() {
                return bad("ingested.source.files needs one entry per dataset");
            }
        }
        for d in &self.datasets {
            if let DatasetSource::Synth(s) = d {
                if s.classes < 2 || s.train == 0 || s.test == 0 || s.size == 0 {
                    return bad("synthetic datasets need >= 2 classes and positive sizes");
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn set_dotted(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<()> {
    let bad = || HarnessError::Config(format!("cannot set `{key}`"));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            serde_json::Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| bad())?;
                items.get_mut(idx).ok_or_else(bad)?
            }
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| serde_json::Value::Object(Default::default()))
            }
            serde_json::Value::Null => {
                *node = serde_json::Value::Object(Default::default());
                let map = node.as_object_mut().expect("just created");
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| serde_json::Value::Object(Default::default()))
            }
            _ => return Err(bad()),
        };
        if last {
            *node = value;
            return Ok(());
        }
    }
    Err(bad())
}
