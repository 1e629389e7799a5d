//! Accuracy metrics and report files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result, RunConfig};

/// Top-1 accuracy in percent.
pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(HarnessError::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(HarnessError::Metric("accuracy of an empty set".into()));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Mean per-class recall in percent, over the classes present in `labels`.
pub fn balanced_accuracy(predictions: &[String], labels: &[String]) -> Result<f64> {
    accuracy(predictions, labels)?;
    let mut classes: Vec<&String> = labels.iter().collect();
    classes.sort();
    classes.dedup();
    let recall_sum: f64 = classes
        .iter()
        .map(|c| {
            let (hit, total) = predictions
                .iter()
                .zip(labels)
                .filter(|(_, l)| l == c)
                .fold((0usize, 0usize), |(h, t), (p, l)| {
                    (h + (p == l) as usize, t + 1)
                });
            hit as f64 / total as f64
        })
        .sum();
    Ok(100.0 * recall_sum / classes.len() as f64)
}

/// Average incremental accuracy: the mean over every task, base task included.
pub fn avg_acc(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(HarnessError::Metric("average of no accuracies".into()));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// Performance drop from the base accuracy; negative when accuracy improved.
pub fn perf_drop(a0: f64, at: f64) -> f64 {
    a0 - at
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub classes: Vec<String>,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub perf_drop: f64,
    /// Ridge parameter per branch, in branch order.
    pub lambdas: Vec<BranchLambda>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchLambda {
    pub branch: String,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_fingerprint: String,
    /// Tasks in the scenario; `tasks` may be shorter when the run failed.
    pub planned_tasks: usize,
    pub completed: bool,
    pub failure: Option<Failure>,
    /// Per-task accuracy A_t in percent.
    pub accuracies: Vec<f64>,
    pub base_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub avg_acc: Option<f64>,
    pub perf_drop: Option<f64>,
    pub perf_drops: Vec<f64>,
    pub tasks: Vec<TaskReport>,
}

impl MetricsReport {
    pub fn new(config_fingerprint: String, planned_tasks: usize) -> Self {
        Self {
            config_fingerprint,
            planned_tasks,
            completed: false,
            failure: None,
            accuracies: Vec::new(),
            base_accuracy: None,
            final_accuracy: None,
            avg_acc: None,
            perf_drop: None,
            perf_drops: Vec::new(),
            tasks: Vec::new(),
        }
    }

    /// Appends a task and refreshes every derived metric.
    pub fn push(&mut self, mut task: TaskReport) {
        let a0 = self.base_accuracy.unwrap_or(task.accuracy);
        task.perf_drop = perf_drop(a0, task.accuracy);
        self.accuracies.push(task.accuracy);
        self.perf_drops.push(task.perf_drop);
        self.base_accuracy = Some(a0);
        self.final_accuracy = Some(task.accuracy);
        self.avg_acc = avg_acc(&self.accuracies).ok();
        self.perf_drop = Some(task.perf_drop);
        self.tasks.push(task);
    }
}

/// Wall-clock seconds, kept out of the metrics file so that stays reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub base_training: f64,
    pub per_task: Vec<f64>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
    f.write_all(bytes).map_err(io(&tmp))?;
    f.sync_all().map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

/// Writes `metrics.json`, `accuracy_curve.csv` and `config.json` (plus
/// `timings.json` when given) into `dir`, each replaced atomically.
pub fn report(
    metrics: &MetricsReport,
    config: &RunConfig,
    timings: Option<&RunTimings>,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut json = serde_json::to_string_pretty(metrics).expect("report serializes");
    json.push('\n');
    write_atomic(&dir.join("metrics.json"), json.as_bytes())?;

    let mut csv = String::from("task,accuracy,perf_drop\n");
    for t in &metrics.tasks {
        csv.push_str(&format!("{},{},{}\n", t.task, t.accuracy, t.perf_drop));
    }
    write_atomic(&dir.join("accuracy_curve.csv"), csv.as_bytes())?;

    let mut json = serde_json::to_string_pretty(config).expect("config serializes");
    json.push('\n');
    write_atomic(&dir.join("config.json"), json.as_bytes())?;

    if let Some(t) = timings {
        let mut json = serde_json::to_string_pretty(t).expect("timings serialize");
        json.push('\n');
        write_atomic(&dir.join("timings.json"), json.as_bytes())?;
    }
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}
