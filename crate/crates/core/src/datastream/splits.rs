use pocon_nn::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::LabeledDataset;
use crate::error::{CoreError, Result};

/// Class-incremental task sequence. Task `t` owns `task_classes[t]`; the
/// classes of all tasks partition `class_order`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub class_order: Vec<usize>,
    pub task_classes: Vec<Vec<usize>>,
    pub seed: u64,
    /// Number of leading tasks that received one extra class when the task
    /// count does not divide the class count.
    pub tasks_with_extra_class: usize,
}

/// Replayable description of a stream, serialized as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub kind: String,
    pub class_order: Vec<usize>,
    pub boundaries: Vec<usize>,
    pub beta: Option<f64>,
    pub iterations: Option<usize>,
    pub seed: u64,
}

impl StreamManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.task_classes.len()
    }

    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        self.task_classes.iter().position(|cs| cs.contains(&class))
    }

    /// The samples of `dataset` that belong to task `t`.
    pub fn task_data<T: Scalar>(&self, t: usize, dataset: &LabeledDataset<T>) -> LabeledDataset<T> {
        dataset.filter_classes(&self.task_classes[t])
    }

    /// Classes of tasks `0..=t`.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.task_classes[..=t].iter().flatten().copied().collect()
    }

    /// Cumulative class counts at task ends, e.g. `[2, 4, 6]`.
    pub fn boundaries(&self) -> Vec<usize> {
        self.task_classes
            .iter()
            .scan(0, |acc, cs| {
                *acc += cs.len();
                Some(*acc)
            })
            .collect()
    }

    pub fn manifest(&self) -> StreamManifest {
        StreamManifest {
            kind: "class_split".into(),
            class_order: self.class_order.clone(),
            boundaries: self.boundaries(),
            beta: None,
            iterations: None,
            seed: self.seed,
        }
    }

    pub fn from_manifest(m: &StreamManifest) -> Result<Self> {
        let mut task_classes = Vec::new();
        let mut start = 0;
        for &end in &m.boundaries {
            if end < start || end > m.class_order.len() {
                return Err(CoreError::InvalidArgument(format!("bad boundary {end}")));
            }
            task_classes.push(m.class_order[start..end].to_vec());
            start = end;
        }
        let sizes: Vec<usize> = task_classes.iter().map(Vec::len).collect();
        let min = sizes.iter().copied().min().unwrap_or(0);
        Ok(Self {
            class_order: m.class_order.clone(),
            task_classes,
            seed: m.seed,
            tasks_with_extra_class: sizes.iter().filter(|&&s| s > min).count(),
        })
    }
}

/// Splits the classes of `dataset` into `tasks` class-disjoint tasks in a
/// seeded random order. When `tasks` does not divide the class count, the
/// first `K mod T` tasks take one extra class.
pub fn make_class_splits<T: Scalar>(dataset: &LabeledDataset<T>, tasks: usize, seed: u64) -> Result<TaskStream> {
    split_classes(dataset.num_classes, tasks, seed)
}

pub fn split_classes(num_classes: usize, tasks: usize, seed: u64) -> Result<TaskStream> {
    if tasks == 0 {
        return Err(CoreError::InvalidArgument("task count must be positive".into()));
    }
    if tasks > num_classes {
        return Err(CoreError::TooManyTasks { tasks, classes: num_classes });
    }
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = num_classes / tasks;
    let extra = num_classes % tasks;
    let mut task_classes = Vec::with_capacity(tasks);
    let mut start = 0;
    for t in 0..tasks {
        let len = base + usize::from(t < extra);
        task_classes.push(class_order[start..start + len].to_vec());
        start += len;
    }
    Ok(TaskStream { class_order, task_classes, seed, tasks_with_extra_class: extra })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn hundred_classes_four_tasks() {
        let s = split_classes(100, 4, 0).unwrap();
        assert_eq!(s.num_tasks(), 4);
        assert!(s.task_classes.iter().all(|c| c.len() == 25));
    }

    #[test]
    fn single_task_is_joint() {
        let s = split_classes(10, 1, 7).unwrap();
        let all: BTreeSet<_> = s.task_classes[0].iter().copied().collect();
        assert_eq!(all, (0..10).collect());
    }

    #[test]
    fn too_many_tasks_is_an_error() {
        let e = split_classes(3, 4, 0).unwrap_err();
        assert!(e.to_string().contains("more tasks than classes"));
    }

    #[test]
    fn remainder_goes_to_leading_tasks() {
        let s = split_classes(10, 4, 1).unwrap();
        let sizes: Vec<_> = s.task_classes.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        assert_eq!(s.tasks_with_extra_class, 2);
    }

    #[test]
    fn manifest_round_trip_reconstructs_stream() {
        let s = split_classes(10, 3, 5).unwrap();
        let m = StreamManifest::from_json(&s.manifest().to_json().unwrap()).unwrap();
        assert_eq!(TaskStream::from_manifest(&m).unwrap(), s);
        assert_eq!(m.hash(), s.manifest().hash());
    }

    proptest! {
        #[test]
        fn tasks_partition_the_class_set(k in 1usize..=200, t_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let t = 1 + ((k - 1) as f64 * t_frac) as usize;
            let s = split_classes(k, t, seed).unwrap();
            let mut union = BTreeSet::new();
            for cs in &s.task_classes {
                for &c in cs {
                    prop_assert!(union.insert(c), "class {} in two tasks", c);
                }
            }
            prop_assert_eq!(union, (0..k).collect::<BTreeSet<_>>());
            prop_assert_eq!(s.clone(), split_classes(k, t, seed).unwrap());
        }
    }
}
