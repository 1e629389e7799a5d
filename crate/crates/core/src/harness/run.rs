//! The end-to-end class-incremental run.

use std::time::Instant;

use nalgebra::DMatrix;

use super::config::{DatasetSource, FeatureOrigin, FusionMode, RunConfig};
use super::metrics::{
    accuracy, balanced_accuracy, BranchLambda, Failure, MetricsReport, RunTimings, TaskReport,
};
use super::HarnessError;
use crate::backbone::{
    cnn_extract, cnn_init, cnn_train, ingest_features, ssf_apply, ssf_train, CnnTrainConfig,
    FeatureMatrix, FeatureSource, SsfTrainConfig,
};
use crate::datahub::{
    center_crop, load_dataset, make_scenario, synth_dataset, Dataset, LabeledImage, SampleId,
    ScenarioSpec, Split, TaskSequence,
};
use crate::fusion::{late_fuse, single_predict};
use crate::projector::{init_projection, PrototypeState};
use crate::rpca::{rpca_train, RpcaModel, RpcaTrainConfig};
use crate::seed;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub timings: RunTimings,
}

/// A failed run: the error, and the report of every task completed before it.
#[derive(Debug)]
pub struct RunFailure {
    pub error: HarnessError,
    pub report: MetricsReport,
    pub timings: RunTimings,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn stage<E: std::fmt::Display>(name: &str) -> impl FnOnce(E) -> HarnessError + '_ {
    move |e| HarnessError::Stage {
        stage: name.to_string(),
        message: e.to_string(),
    }
}

/// Every sample of every dataset, addressed by a single flat index.
struct SampleIndex {
    offsets: Vec<usize>,
}

impl SampleIndex {
    fn new(datasets: &[Dataset]) -> Self {
        let mut offsets = Vec::with_capacity(datasets.len());
        let mut next = 0;
        for d in datasets {
            offsets.push(next);
            next += d.samples.len();
        }
        Self { offsets }
    }

    fn flat(&self, id: SampleId) -> usize {
        self.offsets[id.dataset] + id.sample
    }

    fn all<'a>(&self, seq: &'a TaskSequence) -> Vec<&'a LabeledImage> {
        seq.datasets.iter().flat_map(|d| d.samples.iter()).collect()
    }
}

fn resolve_datasets(config: &RunConfig) -> Result<Vec<Dataset>, HarnessError> {
    config
        .datasets
        .iter()
        .enumerate()
        .map(|(i, source)| match source {
            DatasetSource::Synth(s) => {
                let seed = s
                    .seed
                    .unwrap_or_else(|| seed::derive_indexed(config.seed, "synth", i as u64));
                let mut ds = synth_dataset(s.kind, s.classes, s.train, s.test, s.size, seed)
                    .map_err(stage("data"))?;
                if !s.prefix.is_empty() {
                    let rename = |c: &mut String| *c = format!("{}{c}", s.prefix);
                    ds.classes.iter_mut().for_each(rename);
                    ds.samples.iter_mut().for_each(|x| rename(&mut x.label));
                    ds.name = format!("{}{}", s.prefix, ds.name);
                }
                Ok(ds)
            }
            DatasetSource::Manifest(path) => load_dataset(path).map_err(stage("data")),
        })
        .collect()
}

/// One feature producer plus its projection and prototype state.
struct Branch {
    name: &'static str,
    /// Projected features of every sample, by flat index.
    projected: FeatureMatrix,
    state: PrototypeState,
    lambda: Option<f64>,
}

fn window_crop(image: &LabeledImage, window: usize) -> Result<Vec<f64>, HarnessError> {
    center_crop(&image.image, window)
        .map(|c| c.into_pixels())
        .map_err(stage("rpca"))
}

fn cnn_features(
    config: &RunConfig,
    seq: &TaskSequence,
    index: &SampleIndex,
) -> Result<FeatureMatrix, HarnessError> {
    let base: Vec<&LabeledImage> = seq.tasks[0]
        .train
        .iter()
        .map(|&id| seq.sample(id))
        .collect();
    let all = index.all(seq);

    let filter: Option<RpcaModel> = if config.rpca.enabled {
        let r = &config.rpca;
        let crops = base
            .iter()
            .map(|s| window_crop(s, r.window))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = RpcaTrainConfig {
            rank: r.rank,
            epochs: r.epochs,
            lr: r.lr,
            batch_size: r.batch_size,
            epsilon: r.epsilon,
            optimizer: r.optimizer,
        };
        Some(rpca_train(&crops, &cfg, seed::derive(config.seed, "rpca")).map_err(stage("rpca"))?)
    } else {
        None
    };
    let prepare = |s: &LabeledImage| -> Result<LabeledImage, HarnessError> {
        match &filter {
            None => Ok(s.clone()),
            Some(model) => {
                let window = config.rpca.window;
                let parts = model
                    .apply(&window_crop(s, window)?)
                    .map_err(stage("rpca"))?;
                Ok(LabeledImage {
                    image: parts.sparse_image(window),
                    label: s.label.clone(),
                    split: s.split,
                })
            }
        }
    };

    let c = &config.cnn;
    let model = cnn_init(c.d_cnn, c.dropout, seed::derive(config.seed, "cnn-init"))
        .map_err(stage("cnn"))?;
    let train_set = base
        .iter()
        .map(|s| prepare(s))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = CnnTrainConfig {
        epochs: c.epochs,
        lr: c.lr,
        momentum: c.momentum,
        weight_decay: c.weight_decay,
        batch_size: c.batch_size,
        seed: seed::derive(config.seed, "cnn-train"),
    };
    let (model, _) = cnn_train(&model, &train_set, &cfg).map_err(stage("cnn"))?;
    let inputs = all
        .iter()
        .map(|s| prepare(s))
        .collect::<Result<Vec<_>, _>>()?;
    cnn_extract(&model, &inputs).map_err(stage("cnn"))
}

fn ingested_features(
    config: &RunConfig,
    seq: &TaskSequence,
    index: &SampleIndex,
) -> Result<FeatureMatrix, HarnessError> {
    let all = index.all(seq);
    let raw = match &config.ingested.source {
        FeatureOrigin::Identity => {
            let (h, w) = (all[0].image.height(), all[0].image.width());
            if let Some(bad) = all
                .iter()
                .find(|s| s.image.height() != h || s.image.width() != w)
            {
                return Err(HarnessError::Stage {
                    stage: "features".into(),
                    message: format!(
                        "identity features need equal image sizes ({h}x{w} vs {}x{})",
                        bad.image.height(),
                        bad.image.width()
                    ),
                });
            }
            let rows = DMatrix::from_fn(all.len(), h * w, |i, j| all[i].image.pixels()[j]);
            let labels = all.iter().map(|s| s.label.clone()).collect();
            FeatureMatrix::new(rows, labels, FeatureSource::Ingested).map_err(stage("features"))?
        }
        FeatureOrigin::Files(files) => {
            let mut blocks: Vec<(FeatureMatrix, FeatureMatrix)> = Vec::new();
            for f in files {
                let train = ingest_features(&f.train).map_err(stage("features"))?;
                let test = ingest_features(&f.test).map_err(stage("features"))?;
                blocks.push((train, test));
            }
            let d = blocks[0].0.dim();
            let mut rows = DMatrix::zeros(all.len(), d);
            let mut labels = Vec::with_capacity(all.len());
            for (di, ds) in seq.datasets.iter().enumerate() {
                let (train, test) = &blocks[di];
                let mut ordinal = [0usize; 2];
                for (si, s) in ds.samples.iter().enumerate() {
                    let block = if s.split == Split::Train { train } else { test };
                    let k = ordinal[s.split as usize];
                    ordinal[s.split as usize] += 1;
                    let fail = |message: String| HarnessError::Stage {
                        stage: "features".into(),
                        message,
                    };
                    if block.dim() != d {
                        return Err(fail(format!(
                            "feature files disagree on dimension ({} vs {d})",
                            block.dim()
                        )));
                    }
                    if k >= block.len() {
                        return Err(fail(format!(
                            "dataset `{}` has more {} samples than feature rows ({})",
                            ds.name,
                            s.split,
                            block.len()
                        )));
                    }
                    if block.labels[k] != s.label {
                        return Err(fail(format!(
                            "feature row {} of the {} file is labelled `{}`, manifest says `{}`",
                            k + 1,
                            s.split,
                            block.labels[k],
                            s.label
                        )));
                    }
                    let flat = index.flat(SampleId {
                        dataset: di,
                        sample: si,
                    });
                    rows.row_mut(flat).copy_from(&block.rows.row(k));
                    labels.push(s.label.clone());
                }
            }
            FeatureMatrix::new(rows, labels, FeatureSource::Ingested).map_err(stage("features"))?
        }
    };
    if !config.ingested.ssf.enabled {
        return Ok(raw);
    }
    let s = &config.ingested.ssf;
    let base: Vec<usize> = seq.tasks[0]
        .train
        .iter()
        .map(|&id| index.flat(id))
        .collect();
    let cfg = SsfTrainConfig {
        epochs: s.epochs,
        lr: s.lr,
        momentum: s.momentum,
        batch_size: s.batch_size,
        train_adapter: true,
        seed: seed::derive(config.seed, "ssf"),
    };
    let (adapter, _) = ssf_train(&raw.select(&base), &cfg).map_err(stage("ssf"))?;
    ssf_apply(&adapter, &raw).map_err(stage("ssf"))
}

fn prepare(config: &RunConfig) -> Result<TaskSequence, HarnessError> {
    config.validate()?;
    let datasets = resolve_datasets(config)?;
    let class_order = config.scenario.class_order.clone().unwrap_or_else(|| {
        datasets
            .iter()
            .flat_map(|d| d.classes.iter().cloned())
            .collect()
    });
    let spec = ScenarioSpec {
        schedule: config.scenario.schedule.clone(),
        class_order,
        portion: config.scenario.portion,
        seed: seed::derive(config.seed, "scenario"),
    };
    let seq = make_scenario(&datasets, &spec).map_err(stage("scenario"))?;
    if seq.tasks[0].classes.len() < 2 {
        return Err(HarnessError::Stage {
            stage: "scenario".into(),
            message: "the base task needs at least 2 classes".into(),
        });
    }
    Ok(seq)
}

/// Builds the task sequence from the config without running anything.
pub fn build_scenario(config: &RunConfig) -> Result<TaskSequence, HarnessError> {
    prepare(config)
}

/// Runs the whole pipeline: base-task training of every enabled stage, then
/// for each task accumulation, ridge selection and evaluation over all seen classes.
pub fn run_scenario(config: &RunConfig) -> Result<RunOutcome, RunFailure> {
    let mut report = MetricsReport::new(config.fingerprint(), config.scenario.schedule.len());
    let mut timings = RunTimings::default();
    match run_inner(config, &mut report, &mut timings) {
        Ok(()) => {
            report.completed = true;
            Ok(RunOutcome { report, timings })
        }
        Err(error) => {
            report.failure = Some(Failure {
                stage: error.stage().to_string(),
                message: error.to_string(),
            });
            Err(RunFailure {
                error,
                report,
                timings,
            })
        }
    }
}

fn run_inner(
    config: &RunConfig,
    report: &mut MetricsReport,
    timings: &mut RunTimings,
) -> Result<(), HarnessError> {
    let started = Instant::now();
    let seq = prepare(config)?;
    let index = SampleIndex::new(&seq.datasets);

    let mut produced: Vec<(&'static str, FeatureMatrix)> = Vec::new();
    if config.cnn.enabled {
        produced.push(("cnn", cnn_features(config, &seq, &index)?));
    }
    if config.ingested.enabled {
        produced.push(("ingested", ingested_features(config, &seq, &index)?));
    }
    let projector_seed = config
        .projector
        .seed
        .unwrap_or_else(|| seed::derive(config.seed, "projector"));
    let mut branches = Vec::with_capacity(produced.len());
    for (name, features) in produced {
        let layer = init_projection(
            features.dim(),
            config.projector.m,
            seed::derive(projector_seed, &format!("projection/{name}")),
        )
        .map_err(stage("projection"))?;
        branches.push(Branch {
            name,
            projected: layer.project(&features).map_err(stage("projection"))?,
            state: PrototypeState::new(config.projector.m, projector_seed),
            lambda: None,
        });
    }
    timings.base_training = started.elapsed().as_secs_f64();

    for task in &seq.tasks {
        let t = task.index;
        let task_started = Instant::now();
        let stage_name = format!("task {t}");
        let fail = |e: &dyn std::fmt::Display| HarnessError::Stage {
            stage: stage_name.clone(),
            message: e.to_string(),
        };
        let train: Vec<usize> = task.train.iter().map(|&id| index.flat(id)).collect();
        let eval_ids = seq.eval_set(t);
        let eval: Vec<usize> = eval_ids.iter().map(|&id| index.flat(id)).collect();
        let labels: Vec<String> = eval_ids
            .iter()
            .map(|&id| seq.sample(id).label.clone())
            .collect();

        let mut scores = Vec::with_capacity(branches.len());
        let mut lambdas = Vec::with_capacity(branches.len());
        for b in &mut branches {
            let h = b.projected.select(&train);
            let lambda = match b.lambda {
                Some(l) if config.projector.freeze_lambda => l,
                _ => {
                    let s =
                        seed::derive_indexed(config.seed, &format!("lambda/{}", b.name), t as u64);
                    b.state
                        .select_lambda(&h, &config.projector.lambda_grid, s)
                        .map_err(|e| fail(&format!("{} branch: {e}", b.name)))?
                }
            };
            b.lambda = Some(lambda);
            b.state.accumulate(&h).map_err(|e| fail(&e))?;
            b.state.solve_prototypes(lambda).map_err(|e| fail(&e))?;
            scores.push(
                b.state
                    .score(&b.projected.select(&eval))
                    .map_err(|e| fail(&e))?,
            );
            lambdas.push(BranchLambda {
                branch: b.name.to_string(),
                lambda,
            });
        }
        let predictions = match config.fusion {
            FusionMode::Late => late_fuse(&scores[0], &scores[1]),
            FusionMode::Single => single_predict(&scores[0]),
        }
        .map_err(|e| fail(&e))?;
        let predicted: Vec<String> = predictions.into_iter().map(|p| p.class).collect();
        report.push(TaskReport {
            task: t,
            classes: task.classes.clone(),
            train_samples: train.len(),
            eval_samples: eval.len(),
            accuracy: accuracy(&predicted, &labels)?,
            balanced_accuracy: balanced_accuracy(&predicted, &labels)?,
            perf_drop: 0.0,
            lambdas,
        });
        timings.per_task.push(task_started.elapsed().as_secs_f64());
    }
    Ok(())
}
