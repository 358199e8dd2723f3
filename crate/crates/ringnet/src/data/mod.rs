//! Image storage, task construction, and the synthetic corpora the
//! experiments run on.
//!
//! Images live in a flat byte arena ([`ImageSet`]); datasets reference them
//! by id. A [`TaskDataset`] lists, per task, which ids are training
//! positives/negatives and which form the held-out split, so a manifest of
//! ids plus the seed reconstructs any experiment exactly.

pub mod builders;
pub mod cifar;
pub mod clickthrough;
pub mod manifest;
pub mod synth;

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::Centering;
use crate::optim::TaskExamples;
use crate::tensor::{Scalar, Tensor};

/// Pixels per image: 32x32, three channel planes (R, then G, then B).
pub const IMAGE_PIXELS: usize = 3 * 32 * 32;
/// Per-example tensor shape for classification models.
pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];

pub const CIFAR10_CATEGORIES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

/// One image viewed in place: a category label and its channel-planar bytes.
#[derive(Debug, Clone, Copy)]
pub struct ImageRecord<'a> {
    pub label: u8,
    pub pixels: &'a [u8],
}

/// A set of labeled images in one contiguous arena.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    category_names: Vec<String>,
    labels: Vec<u8>,
    pixels: Vec<u8>,
}

impl ImageSet {
    pub fn new(category_names: Vec<String>) -> Result<Self> {
        if category_names.is_empty() || category_names.len() > 256 {
            return Err(Error::InvalidArg(format!(
                "category count must lie in 1..=256, got {}",
                category_names.len()
            )));
        }
        Ok(ImageSet { category_names, labels: Vec::new(), pixels: Vec::new() })
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, label: u8, pixels: &[u8]) -> Result<usize> {
        if (label as usize) >= self.category_names.len() {
            return Err(Error::Data(format!(
                "label {label} out of range for {} categories",
                self.category_names.len()
            )));
        }
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::Data(format!(
                "an image is {IMAGE_PIXELS} bytes, got {}",
                pixels.len()
            )));
        }
        self.labels.push(label);
        self.pixels.extend_from_slice(pixels);
        Ok(self.labels.len() - 1)
    }

    pub fn record(&self, id: usize) -> ImageRecord<'_> {
        ImageRecord {
            label: self.labels[id],
            pixels: &self.pixels[id * IMAGE_PIXELS..(id + 1) * IMAGE_PIXELS],
        }
    }

    pub fn label(&self, id: usize) -> u8 {
        self.labels[id]
    }

    /// Ids of every image carrying `label`.
    pub fn ids_with_label(&self, label: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Append every record of `other`; the category lists must match.
    /// Returns the id offset added to `other`'s indices.
    pub fn append(&mut self, other: &ImageSet) -> Result<usize> {
        if self.category_names != other.category_names {
            return Err(Error::Data("cannot merge image sets with different categories".into()));
        }
        let offset = self.len();
        self.labels.extend_from_slice(&other.labels);
        self.pixels.extend_from_slice(&other.pixels);
        Ok(offset)
    }

    /// FNV-1a over names, labels, and pixels; order-sensitive.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for name in &self.category_names {
            eat(name.as_bytes());
            eat(&[0xff]);
        }
        eat(&self.labels);
        eat(&self.pixels);
        h
    }
}

/// Training and held-out image pools merged into one id space: ids below
/// `split_at` are the training pool, the rest the test pool.
#[derive(Debug, Clone)]
pub struct LabeledPool {
    pub images: ImageSet,
    split_at: usize,
}

impl LabeledPool {
    pub fn merge(train: ImageSet, test: &ImageSet) -> Result<Self> {
        let split_at = train.len();
        let mut images = train;
        images.append(test)?;
        Ok(LabeledPool { images, split_at })
    }

    pub fn is_train_id(&self, id: usize) -> bool {
        id < self.split_at
    }

    pub fn split_at(&self) -> usize {
        self.split_at
    }

    pub fn train_ids_with_label(&self, label: u8) -> Vec<usize> {
        (0..self.split_at).filter(|&i| self.images.label(i) == label).collect()
    }

    pub fn test_ids_with_label(&self, label: u8) -> Vec<usize> {
        (self.split_at..self.images.len()).filter(|&i| self.images.label(i) == label).collect()
    }
}

/// One task's image ids. `category` is the source category the task's
/// positives carry — for a split twin (dataset 2's "kitten") it is the
/// twin's original category, which is what evaluation scores against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSplit {
    pub task: String,
    pub category: usize,
    /// The task this one was split off from, if any.
    pub twin_of: Option<String>,
    pub train_pos: Vec<usize>,
    pub train_neg: Vec<usize>,
    pub test_pos: Vec<usize>,
    pub test_neg: Vec<usize>,
}

impl TaskSplit {
    /// n_i: this task's training image count (positives and negatives).
    pub fn train_count(&self) -> usize {
        self.train_pos.len() + self.train_neg.len()
    }
}

/// A full per-task dataset over one [`LabeledPool`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub tasks: Vec<TaskSplit>,
    pub category_names: Vec<String>,
    /// N = sum of per-task training counts.
    pub n_total: usize,
}

impl TaskDataset {
    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task.clone()).collect()
    }

    pub fn total_train_positives(&self) -> usize {
        self.tasks.iter().map(|t| t.train_pos.len()).sum()
    }

    /// Check every structural invariant against the pool the ids index:
    /// negative parity, in-list uniqueness, positive/negative and
    /// train/test disjointness, correct positive labels, negatives never
    /// drawn from the task's own category, and the N accounting.
    pub fn validate(&self, pool: &LabeledPool) -> Result<()> {
        if self.category_names != pool.images.category_names() {
            return Err(Error::Data("dataset and pool disagree on categories".into()));
        }
        let mut seen_tasks = BTreeSet::new();
        for t in &self.tasks {
            if !seen_tasks.insert(&t.task) {
                return Err(Error::Data(format!("duplicate task {:?}", t.task)));
            }
            if t.category >= self.category_names.len() {
                return Err(Error::Data(format!(
                    "task {:?} category {} out of range",
                    t.task, t.category
                )));
            }
            if t.train_neg.len() != t.train_pos.len() {
                return Err(Error::Data(format!(
                    "task {:?}: {} training negatives for {} positives",
                    t.task,
                    t.train_neg.len(),
                    t.train_pos.len()
                )));
            }
            if t.test_neg.len() != t.test_pos.len() {
                return Err(Error::Data(format!(
                    "task {:?}: {} test negatives for {} positives",
                    t.task,
                    t.test_neg.len(),
                    t.test_pos.len()
                )));
            }
            if t.train_pos.is_empty() {
                return Err(Error::EmptyDataset(format!("task {:?} has no positives", t.task)));
            }
            let train: BTreeSet<usize> =
                t.train_pos.iter().chain(&t.train_neg).copied().collect();
            let test: BTreeSet<usize> = t.test_pos.iter().chain(&t.test_neg).copied().collect();
            if train.len() != t.train_count() {
                return Err(Error::Data(format!("task {:?} repeats a training id", t.task)));
            }
            if test.len() != t.test_pos.len() + t.test_neg.len() {
                return Err(Error::Data(format!("task {:?} repeats a test id", t.task)));
            }
            if !train.is_disjoint(&test) {
                return Err(Error::Data(format!(
                    "task {:?} shares ids between train and test",
                    t.task
                )));
            }
            for (&id, split) in train.iter().map(|i| (i, "train")).chain(test.iter().map(|i| (i, "test"))) {
                if id >= pool.images.len() {
                    return Err(Error::Data(format!("task {:?} {split} id {id} out of pool", t.task)));
                }
            }
            for &id in t.train_pos.iter().chain(&t.test_pos) {
                if pool.images.label(id) as usize != t.category {
                    return Err(Error::Data(format!(
                        "task {:?} positive {id} has label {}, expected {}",
                        t.task,
                        pool.images.label(id),
                        t.category
                    )));
                }
            }
            for &id in t.train_neg.iter().chain(&t.test_neg) {
                if pool.images.label(id) as usize == t.category {
                    return Err(Error::Data(format!(
                        "task {:?} negative {id} carries the task's own category",
                        t.task
                    )));
                }
            }
            for &id in t.train_pos.iter().chain(&t.train_neg) {
                if !pool.is_train_id(id) {
                    return Err(Error::Data(format!(
                        "task {:?} trains on held-out image {id}",
                        t.task
                    )));
                }
            }
            for &id in t.test_pos.iter().chain(&t.test_neg) {
                if pool.is_train_id(id) {
                    return Err(Error::Data(format!(
                        "task {:?} tests on training-pool image {id}",
                        t.task
                    )));
                }
            }
        }
        let n: usize = self.tasks.iter().map(|t| t.train_count()).sum();
        if n != self.n_total {
            return Err(Error::Data(format!(
                "N accounting: recorded {} but tasks sum to {n}",
                self.n_total
            )));
        }
        Ok(())
    }
}

/// Bytes to reals in [0, 1].
pub fn pixel_to_real<T: Scalar>(b: u8) -> T {
    T::from_f64(b as f64 / 255.0)
}

/// Gather images by id into an `[n, 3, 32, 32]` tensor of [0, 1] reals.
pub fn images_tensor<T: Scalar>(images: &ImageSet, ids: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(ids.len() * IMAGE_PIXELS);
    for &id in ids {
        data.extend(images.record(id).pixels.iter().map(|&b| pixel_to_real::<T>(b)));
    }
    let mut shape = vec![ids.len()];
    shape.extend_from_slice(&IMAGE_SHAPE);
    Tensor::from_vec(&shape, data).expect("pixel count matches image shape")
}

/// Per-pixel mean image over the given ids, shape `[3, 32, 32]`,
/// accumulated in f64.
pub fn mean_image<T: Scalar>(images: &ImageSet, ids: &[usize]) -> Result<Tensor<T>> {
    if ids.is_empty() {
        return Err(Error::EmptyDataset("mean over an empty image list".into()));
    }
    let mut acc = vec![0.0f64; IMAGE_PIXELS];
    for &id in ids {
        for (a, &b) in acc.iter_mut().zip(images.record(id).pixels) {
            *a += b as f64 / 255.0;
        }
    }
    let inv = 1.0 / ids.len() as f64;
    let data: Vec<T> = acc.into_iter().map(|a| T::from_f64(a * inv)).collect();
    Ok(Tensor::from_vec(&IMAGE_SHAPE, data).expect("mean matches image shape"))
}

/// Subtract a `[3, 32, 32]` mean from every example of an `[n, 3, 32, 32]`
/// batch in place.
pub fn subtract_mean<T: Scalar>(batch: &mut Tensor<T>, mean: &Tensor<T>) -> Result<()> {
    if batch.shape().len() != 4 || &batch.shape()[1..] != mean.shape() {
        return Err(Error::shape(
            "subtract_mean",
            format!("[n, {:?}]", mean.shape()),
            format!("{:?}", batch.shape()),
        ));
    }
    let per = mean.len();
    for row in batch.data_mut().chunks_mut(per) {
        for (x, &m) in row.iter_mut().zip(mean.data()) {
            *x -= m;
        }
    }
    Ok(())
}

/// Centering for a set of binary tasks: each task's mean is computed over
/// its own training pool, positives and negatives together. Test inputs get
/// the training mean — never their own.
pub fn per_task_centering<T: Scalar>(
    pool: &LabeledPool,
    dataset: &TaskDataset,
) -> Result<Centering<T>> {
    let means = dataset
        .tasks
        .iter()
        .map(|t| {
            let ids: Vec<usize> =
                t.train_pos.iter().chain(&t.train_neg).copied().collect();
            mean_image(&pool.images, &ids)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Centering::PerTask(means))
}

/// One mean over the union of every task's training images.
pub fn global_centering<T: Scalar>(
    pool: &LabeledPool,
    dataset: &TaskDataset,
) -> Result<Centering<T>> {
    let ids: BTreeSet<usize> = dataset
        .tasks
        .iter()
        .flat_map(|t| t.train_pos.iter().chain(&t.train_neg).copied())
        .collect();
    let ids: Vec<usize> = ids.into_iter().collect();
    Ok(Centering::Global(mean_image(&pool.images, &ids)?))
}

/// Materialize every task as tensors with binary labels: positive
/// (relevant) examples are class 1, negatives class 0.
pub fn materialize_tasks<T: Scalar>(
    pool: &LabeledPool,
    dataset: &TaskDataset,
) -> Vec<TaskExamples<T>> {
    dataset
        .tasks
        .iter()
        .map(|t| {
            let train_ids: Vec<usize> =
                t.train_pos.iter().chain(&t.train_neg).copied().collect();
            let test_ids: Vec<usize> = t.test_pos.iter().chain(&t.test_neg).copied().collect();
            let mut train_labels = vec![1usize; t.train_pos.len()];
            train_labels.extend(std::iter::repeat(0).take(t.train_neg.len()));
            let mut test_labels = vec![1usize; t.test_pos.len()];
            test_labels.extend(std::iter::repeat(0).take(t.test_neg.len()));
            TaskExamples {
                task: t.task.clone(),
                train_images: images_tensor(&pool.images, &train_ids),
                train_labels,
                test_images: images_tensor(&pool.images, &test_ids),
                test_labels,
            }
        })
        .collect()
}

/// Materialize the whole dataset as one multi-way task labeled by category.
/// A split twin's images carry the twin's source category, so a dataset-2
/// corpus still yields 10 classes.
pub fn materialize_multiclass<T: Scalar>(
    pool: &LabeledPool,
    dataset: &TaskDataset,
    task_name: &str,
) -> TaskExamples<T> {
    let mut train: Vec<(usize, usize)> = Vec::new();
    let mut test: Vec<(usize, usize)> = Vec::new();
    for t in &dataset.tasks {
        train.extend(t.train_pos.iter().map(|&id| (id, t.category)));
        test.extend(t.test_pos.iter().map(|&id| (id, t.category)));
    }
    // Multiple tasks can test on the same image (negatives aside, split
    // twins share a held-out pool); positives are disjoint by construction.
    train.sort_unstable();
    train.dedup();
    test.sort_unstable();
    test.dedup();
    let (train_ids, train_labels): (Vec<usize>, Vec<usize>) = train.into_iter().unzip();
    let (test_ids, test_labels): (Vec<usize>, Vec<usize>) = test.into_iter().unzip();
    TaskExamples {
        task: task_name.to_string(),
        train_images: images_tensor(&pool.images, &train_ids),
        train_labels,
        test_images: images_tensor(&pool.images, &test_ids),
        test_labels,
    }
}
