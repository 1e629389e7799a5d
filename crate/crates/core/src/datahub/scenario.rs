//! Class-incremental task sequences.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, LabeledImage, Result, Split};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Classes introduced per task, e.g. `[4, 1, 1, 1, 1, 1, 1]`.
    pub schedule: Vec<usize>,
    /// Class identifiers in introduction order, possibly spanning datasets.
    pub class_order: Vec<String>,
    /// Fraction of each class's training samples retained, in (0, 1].
    pub portion: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() || self.schedule.contains(&0) {
            return Err(DataError::InvalidArgument(
                "schedule must be non-empty with every entry >= 1".into(),
            ));
        }
        let scheduled: usize = self.schedule.iter().sum();
        if scheduled != self.class_order.len() {
            return Err(DataError::ScheduleMismatch {
                scheduled,
                ordered: self.class_order.len(),
            });
        }
        let unique: HashSet<_> = self.class_order.iter().collect();
        if unique.len() != self.class_order.len() {
            return Err(DataError::InvalidArgument(
                "class order lists a class twice".into(),
            ));
        }
        if !(self.portion > 0.0 && self.portion <= 1.0) {
            return Err(DataError::InvalidArgument(format!(
                "portion must be in (0,1], got {}",
                self.portion
            )));
        }
        Ok(())
    }
}

/// Locates a sample inside the datasets owned by a [`TaskSequence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleId {
    pub dataset: usize,
    pub sample: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub index: usize,
    pub classes: Vec<String>,
    pub train: Vec<SampleId>,
    /// Test samples of this task's own classes.
    pub test: Vec<SampleId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub datasets: Vec<Dataset>,
    pub tasks: Vec<Task>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn sample(&self, id: SampleId) -> &LabeledImage {
        &self.datasets[id.dataset].samples[id.sample]
    }

    /// Test samples of every class seen up to and including task `t`.
    pub fn eval_set(&self, t: usize) -> Vec<SampleId> {
        self.tasks[..=t]
            .iter()
            .flat_map(|task| task.test.iter().copied())
            .collect()
    }

    /// Position of a sample among its dataset's samples of the same split.
    pub fn split_ordinal(&self, id: SampleId) -> usize {
        let ds = &self.datasets[id.dataset];
        let split = ds.samples[id.sample].split;
        ds.samples[..id.sample]
            .iter()
            .filter(|s| s.split == split)
            .count()
    }
}

/// Number of samples kept out of `n` at the given portion: ceil, at least one.
pub fn retained_count(n: usize, portion: f64) -> usize {
    ((n as f64 * portion).ceil() as usize).clamp(1, n.max(1))
}

pub fn make_scenario(datasets: &[Dataset], spec: &ScenarioSpec) -> Result<TaskSequence> {
    spec.validate()?;
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for (d, ds) in datasets.iter().enumerate() {
        for class in &ds.classes {
            if owner.insert(class.as_str(), d).is_some() {
                return Err(DataError::DuplicateClass(class.clone()));
            }
        }
    }
    for class in &spec.class_order {
        if !owner.contains_key(class.as_str()) {
            return Err(DataError::UnknownClass(class.clone()));
        }
    }

    let class_samples = |class: &str, split: Split| -> Vec<SampleId> {
        let d = owner[class];
        datasets[d]
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class && s.split == split)
            .map(|(i, _)| SampleId {
                dataset: d,
                sample: i,
            })
            .collect()
    };

    let mut tasks = Vec::with_capacity(spec.schedule.len());
    let mut start = 0;
    for (index, &count) in spec.schedule.iter().enumerate() {
        let classes = spec.class_order[start..start + count].to_vec();
        start += count;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in &classes {
            let mut pool = class_samples(class, Split::Train);
            let keep = retained_count(pool.len(), spec.portion);
            if keep < pool.len() {
                // a fixed permutation per class makes smaller portions prefixes of larger ones
                let mut order: Vec<usize> = (0..pool.len()).collect();
                let mut rng = seed::rng(seed::derive(spec.seed, &format!("portion/{class}")));
                order.shuffle(&mut rng);
                let mut kept: Vec<usize> = order[..keep].to_vec();
                kept.sort_unstable();
                pool = kept.into_iter().map(|i| pool[i]).collect();
            }
            train.extend(pool);
            test.extend(class_samples(class, Split::Test));
        }
        tasks.push(Task {
            index,
            classes,
            train,
            test,
        });
    }
    Ok(TaskSequence {
        datasets: datasets.to_vec(),
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::{synth_dataset, SynthKind};

    fn spec(schedule: Vec<usize>, ds: &Dataset, portion: f64) -> ScenarioSpec {
        ScenarioSpec {
            schedule,
            class_order: ds.classes.clone(),
            portion,
            seed: 3,
        }
    }

    #[test]
    fn b4inc1_has_seven_tasks() {
        let ds = synth_dataset(SynthKind::Blobs, 10, 2, 1, 4, 1).unwrap();
        let seq = make_scenario(
            std::slice::from_ref(&ds),
            &spec(vec![4, 1, 1, 1, 1, 1, 1], &ds, 1.0),
        )
        .unwrap();
        assert_eq!(seq.len(), 7);
        let sizes: Vec<_> = seq.tasks.iter().map(|t| t.classes.len()).collect();
        assert_eq!(sizes, [4, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn b2inc2_has_five_tasks_of_two() {
        let ds = synth_dataset(SynthKind::Blobs, 10, 2, 1, 4, 1).unwrap();
        let seq = make_scenario(std::slice::from_ref(&ds), &spec(vec![2; 5], &ds, 1.0)).unwrap();
        assert!(seq.tasks.iter().all(|t| t.classes.len() == 2));
        assert_eq!(seq.len(), 5);
    }

    #[test]
    fn half_portion_of_299_keeps_150() {
        assert_eq!(retained_count(299, 0.5), 150);
        assert_eq!(retained_count(3, 0.01), 1);
        assert_eq!(retained_count(10, 1.0), 10);

        let ds = synth_dataset(SynthKind::Blobs, 2, 299, 1, 2, 1).unwrap();
        let seq = make_scenario(std::slice::from_ref(&ds), &spec(vec![2], &ds, 0.5)).unwrap();
        let first: Vec<_> = seq.tasks[0]
            .train
            .iter()
            .filter(|id| seq.sample(**id).label == "c00")
            .collect();
        assert_eq!(first.len(), 150);
        let unique: HashSet<_> = first.iter().collect();
        assert_eq!(unique.len(), 150);
    }

    #[test]
    fn errors() {
        let ds = synth_dataset(SynthKind::Blobs, 3, 2, 1, 2, 1).unwrap();
        let mut s = spec(vec![2, 1], &ds, 1.0);
        s.class_order[2] = "nope".into();
        assert!(matches!(
            make_scenario(std::slice::from_ref(&ds), &s),
            Err(DataError::UnknownClass(_))
        ));
        let s = spec(vec![2, 2], &ds, 1.0);
        assert!(matches!(
            make_scenario(std::slice::from_ref(&ds), &s),
            Err(DataError::ScheduleMismatch { .. })
        ));
        assert!(make_scenario(std::slice::from_ref(&ds), &spec(vec![3], &ds, 0.0)).is_err());
        assert!(matches!(
            make_scenario(&[ds.clone(), ds.clone()], &spec(vec![3], &ds, 1.0)),
            Err(DataError::DuplicateClass(_))
        ));
    }
}
