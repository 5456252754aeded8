use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{images_to_tensor, Annotation, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Contiguous run of 1-based global class ids `first..first + count`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassRange {
    pub first: usize,
    pub count: usize,
}

impl ClassRange {
    pub fn new(first: usize, count: usize) -> Self {
        ClassRange { first, count }
    }

    /// Classes `1..=n`.
    pub fn up_to(n: usize) -> Self {
        ClassRange { first: 1, count: n }
    }

    pub fn empty_at(first: usize) -> Self {
        ClassRange { first, count: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn last(&self) -> usize {
        self.first + self.count - 1
    }

    /// One past the last id.
    pub fn end(&self) -> usize {
        self.first + self.count
    }

    pub fn contains(&self, class_id: usize) -> bool {
        class_id >= self.first && class_id < self.end()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> {
        self.first..self.end()
    }

    /// Zero-based channel offset of the first class.
    pub fn channel_start(&self) -> usize {
        self.first - 1
    }
}

impl fmt::Display for ClassRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            write!(f, "[]")
        } else {
            write!(f, "[{}..{}]", self.first, self.last())
        }
    }
}

/// Class counts per task, written `AxB` style: `"4p4"`, `"6p2"`, `"4p1x4"`,
/// or a single number for one joint task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ScenarioSpec {
    pub counts: Vec<usize>,
    text: String,
}

impl ScenarioSpec {
    pub fn total_classes(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn num_tasks(&self) -> usize {
        self.counts.len()
    }

    /// Visible classes of every task, in order.
    pub fn ranges(&self) -> Vec<ClassRange> {
        let mut first = 1;
        self.counts
            .iter()
            .map(|&k| {
                let r = ClassRange::new(first, k);
                first += k;
                r
            })
            .collect()
    }
}

impl FromStr for ScenarioSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse scenario '{s}' (expected e.g. 8, 4p4 or 4p1x4)"));
        let number = |t: &str| -> Result<usize> {
            let n: usize = t.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(Error::invalid(format!("scenario '{s}' has a task with zero classes")));
            }
            Ok(n)
        };
        let (head, rest) = match s.split_once('p') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        let mut counts = vec![number(head)?];
        if let Some(rest) = rest {
            let (step, repeats) = match rest.split_once('x') {
                Some((b, n)) => (number(b)?, number(n)?),
                None => (number(rest)?, 1),
            };
            counts.extend(std::iter::repeat_n(step, repeats));
        }
        Ok(ScenarioSpec { counts, text: s.to_string() })
    }
}

impl TryFrom<String> for ScenarioSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScenarioSpec> for String {
    fn from(s: ScenarioSpec) -> String {
        s.text
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: usize,
    /// Annotations restricted to the task's visible classes.
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub index: usize,
    pub visible: ClassRange,
    pub samples: Vec<Sample>,
    source: Arc<Dataset>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn source(&self) -> &Arc<Dataset> {
        &self.source
    }

    pub fn image_bytes(&self, sample: usize) -> &[u8] {
        &self.source.scenes[self.samples[sample].image].pixels
    }

    /// Every object of the sample's image, labeled or not. Only meant for
    /// oracle checks, never for training.
    pub fn full_annotations(&self, sample: usize) -> &[Annotation] {
        &self.source.scenes[self.samples[sample].image].objects
    }

    /// Gathers the given sample indices into a training batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let images: Vec<&[u8]> = indices.iter().map(|&i| self.image_bytes(i)).collect();
        Ok(Batch {
            images: images_to_tensor(&images)?,
            annotations: indices.iter().map(|&i| self.samples[i].annotations.clone()).collect(),
            ranges: vec![self.visible; indices.len()],
        })
    }
}

#[derive(Clone, Debug)]
pub struct TaskSequence {
    pub scenario: ScenarioSpec,
    pub tasks: Vec<TaskDataset>,
}

impl TaskSequence {
    /// Task `n` relabeled with every class seen so far, `1..=last(n)`; the
    /// training set of joint training.
    pub fn cumulative(&self, n: usize) -> Result<TaskDataset> {
        let task = self.tasks.get(n).ok_or_else(|| Error::invalid(format!("no task {n}")))?;
        Ok(task_for_range(&task.source, n, ClassRange::up_to(task.visible.end() - 1)))
    }
}

/// A training batch: images plus, per image, its labels and the class range
/// those labels were drawn from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub annotations: Vec<Vec<Annotation>>,
    pub ranges: Vec<ClassRange>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

/// Builds one task per scenario entry. A task holds every image with at
/// least one instance of its visible classes, labeled with those classes
/// only; an image can appear in several tasks.
pub fn split_tasks(dataset: Arc<Dataset>, scenario: &ScenarioSpec) -> Result<TaskSequence> {
    if scenario.total_classes() > dataset.num_classes {
        return Err(Error::invalid(format!(
            "scenario '{scenario}' needs {} classes but the dataset has {}",
            scenario.total_classes(),
            dataset.num_classes
        )));
    }
    let tasks = scenario
        .ranges()
        .into_iter()
        .enumerate()
        .map(|(index, visible)| task_for_range(&dataset, index, visible))
        .collect();
    Ok(TaskSequence { scenario: scenario.clone(), tasks })
}

/// Every image with at least one instance in `visible`, labeled with those
/// classes only.
pub fn task_for_range(dataset: &Arc<Dataset>, index: usize, visible: ClassRange) -> TaskDataset {
    let samples = dataset
        .scenes
        .iter()
        .enumerate()
        .filter_map(|(image, scene)| {
            let annotations: Vec<Annotation> =
                scene.objects.iter().filter(|o| visible.contains(o.class_id)).copied().collect();
            (!annotations.is_empty()).then_some(Sample { image, annotations })
        })
        .collect();
    TaskDataset { index, visible, samples, source: Arc::clone(dataset) }
}

/// Sample indices of `task` in a seeded random order, chunked into batches;
/// the last batch may be short.
pub fn batch_iter(task: &TaskDataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if task.is_empty() {
        return Err(Error::invalid(format!("task {} has no samples", task.index)));
    }
    let mut order: Vec<usize> = (0..task.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
