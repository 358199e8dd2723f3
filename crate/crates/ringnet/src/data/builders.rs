//! The three benchmark task constructions over a labeled pool:
//!
//! 1. a heavy-tailed count profile, one task per category;
//! 2. the same with one category randomly split into twin tasks;
//! 3. the same total image count spread evenly across categories.
//!
//! Every task pairs its sampled positives with an equal number of negatives
//! drawn from the other categories' sampled positives.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_for, sample_without_replacement, stream};
use super::{LabeledPool, TaskDataset, TaskSplit};

/// Training positives per category, most to least frequent.
pub const DATASET1_COUNTS: [usize; 10] =
    [5000, 4000, 3000, 2000, 1000, 500, 400, 300, 200, 100];
/// Uniform per-category count with the same total as the tailed profile.
pub const DATASET3_PER_CLASS: usize = 1650;
/// Held-out positives per category at full scale.
pub const TEST_PER_CLASS: usize = 1000;

/// Draw `count` ids from `pool` without replacement.
pub fn sample_negatives(count: usize, pool: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if count > pool.len() {
        return Err(Error::Data(format!(
            "need {count} negatives but the pool holds {}",
            pool.len()
        )));
    }
    Ok(sample_without_replacement(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect())
}

fn sample_ids(ids: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if count > ids.len() {
        return Err(Error::Data(format!(
            "need {count} images but only {} are available",
            ids.len()
        )));
    }
    Ok(sample_without_replacement(rng, ids.len(), count).into_iter().map(|i| ids[i]).collect())
}

fn scaled(count: usize, scale: usize, what: &str) -> Result<usize> {
    if scale == 0 || count % scale != 0 {
        return Err(Error::Config(format!(
            "scale {scale} must evenly divide the {what} count {count}"
        )));
    }
    Ok(count / scale)
}

/// Shared construction: one task per category with the given training
/// positive counts, uniform test positives, and parity negatives drawn from
/// the other categories' sampled positives.
pub fn build_tailed(
    pool: &LabeledPool,
    train_counts: &[usize],
    test_count: usize,
    seed: u64,
    dataset_tag: u64,
) -> Result<TaskDataset> {
    let names = pool.images.category_names().to_vec();
    if train_counts.len() != names.len() {
        return Err(Error::Config(format!(
            "{} per-category counts for {} categories",
            train_counts.len(),
            names.len()
        )));
    }
    let mut train_pos: Vec<Vec<usize>> = Vec::with_capacity(names.len());
    let mut test_pos: Vec<Vec<usize>> = Vec::with_capacity(names.len());
    for (k, &count) in train_counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Config(format!("category {k} would get zero positives")));
        }
        let mut rng = rng_for(seed, &[stream::DATA_BUILD, dataset_tag, 0, k as u64]);
        train_pos.push(sample_ids(&pool.train_ids_with_label(k as u8), count, &mut rng)?);
        let mut rng = rng_for(seed, &[stream::DATA_BUILD, dataset_tag, 1, k as u64]);
        test_pos.push(sample_ids(&pool.test_ids_with_label(k as u8), test_count, &mut rng)?);
    }

    let mut tasks = Vec::with_capacity(names.len());
    for k in 0..names.len() {
        let others_train: Vec<usize> = (0..names.len())
            .filter(|&j| j != k)
            .flat_map(|j| train_pos[j].iter().copied())
            .collect();
        let others_test: Vec<usize> = (0..names.len())
            .filter(|&j| j != k)
            .flat_map(|j| test_pos[j].iter().copied())
            .collect();
        let mut rng = rng_for(seed, &[stream::DATA_BUILD, dataset_tag, 2, k as u64]);
        let train_neg = sample_negatives(train_pos[k].len(), &others_train, &mut rng)?;
        let mut rng = rng_for(seed, &[stream::DATA_BUILD, dataset_tag, 3, k as u64]);
        let test_neg = sample_negatives(test_pos[k].len(), &others_test, &mut rng)?;
        tasks.push(TaskSplit {
            task: names[k].clone(),
            category: k,
            twin_of: None,
            train_pos: train_pos[k].clone(),
            train_neg,
            test_pos: test_pos[k].clone(),
            test_neg,
        });
    }
    let n_total = tasks.iter().map(|t| t.train_count()).sum();
    let ds = TaskDataset { tasks, category_names: names, n_total };
    ds.validate(pool)?;
    Ok(ds)
}

/// The tailed profile at `1/scale` of the full counts.
pub fn build_dataset1(pool: &LabeledPool, scale: usize, seed: u64) -> Result<TaskDataset> {
    let counts = DATASET1_COUNTS
        .iter()
        .map(|&c| scaled(c, scale, "per-category"))
        .collect::<Result<Vec<_>>>()?;
    build_tailed(pool, &counts, scaled(TEST_PER_CLASS, scale, "test")?, seed, 1)
}

/// Split `ids` into two disjoint halves whose sizes differ by at most one;
/// the first half is the larger on odd counts.
fn split_evenly(ids: &[usize], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let picked = sample_without_replacement(rng, ids.len(), ids.len());
    let shuffled: Vec<usize> = picked.into_iter().map(|i| ids[i]).collect();
    let cut = ids.len() - ids.len() / 2;
    (shuffled[..cut].to_vec(), shuffled[cut..].to_vec())
}

/// Derive the twin-task dataset: the "cat" task's images are randomly
/// partitioned into "cat" and "kitten" (positives, negatives, and the test
/// split alike), leaving every other task and the total N untouched. The
/// twin keeps cat's category id, so evaluation treats both as cat.
pub fn build_dataset2(dataset1: &TaskDataset, pool: &LabeledPool, seed: u64) -> Result<TaskDataset> {
    let cat_idx = dataset1
        .tasks
        .iter()
        .position(|t| t.task == "cat")
        .ok_or_else(|| Error::Data("dataset has no \"cat\" task to split".into()))?;
    let cat = &dataset1.tasks[cat_idx];
    let mut rng = rng_for(seed, &[stream::DATA_BUILD, 2, cat_idx as u64]);
    let (cat_tp, kit_tp) = split_evenly(&cat.train_pos, &mut rng);
    let (cat_tn, kit_tn) = split_evenly(&cat.train_neg, &mut rng);
    let (cat_sp, kit_sp) = split_evenly(&cat.test_pos, &mut rng);
    let (cat_sn, kit_sn) = split_evenly(&cat.test_neg, &mut rng);

    let mut tasks = dataset1.tasks.clone();
    tasks[cat_idx] = TaskSplit {
        task: "cat".into(),
        category: cat.category,
        twin_of: None,
        train_pos: cat_tp,
        train_neg: cat_tn,
        test_pos: cat_sp,
        test_neg: cat_sn,
    };
    tasks.insert(
        cat_idx + 1,
        TaskSplit {
            task: "kitten".into(),
            category: cat.category,
            twin_of: Some("cat".into()),
            train_pos: kit_tp,
            train_neg: kit_tn,
            test_pos: kit_sp,
            test_neg: kit_sn,
        },
    );
    let ds = TaskDataset {
        tasks,
        category_names: dataset1.category_names.clone(),
        n_total: dataset1.n_total,
    };
    ds.validate(pool)?;
    Ok(ds)
}

/// The balanced profile: every category gets the tailed total divided
/// evenly.
pub fn build_dataset3(pool: &LabeledPool, scale: usize, seed: u64) -> Result<TaskDataset> {
    let per_class = scaled(DATASET3_PER_CLASS, scale, "per-category")?;
    let counts = vec![per_class; pool.images.category_names().len()];
    build_tailed(pool, &counts, scaled(TEST_PER_CLASS, scale, "test")?, seed, 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_pool, SynthSpec};

    const SCALE: usize = 50;

    fn pool() -> LabeledPool {
        // Enough for the tailed counts at 1/50 scale: the largest class
        // needs 100 training and 20 test positives.
        let spec = SynthSpec { seed: 5, ..SynthSpec::default() };
        synth_pool(&spec, &vec![100; 10], &vec![20; 10]).unwrap()
    }

    #[test]
    fn tailed_counts_follow_the_profile() {
        let pool = pool();
        let d1 = build_dataset1(&pool, SCALE, 17).unwrap();
        assert_eq!(d1.tasks.len(), 10);
        for (t, &full) in d1.tasks.iter().zip(&DATASET1_COUNTS) {
            assert_eq!(t.train_pos.len(), full / SCALE);
            assert_eq!(t.train_neg.len(), t.train_pos.len());
            assert_eq!(t.test_pos.len(), TEST_PER_CLASS / SCALE);
        }
        assert_eq!(d1.total_train_positives(), 16_500 / SCALE);
        assert_eq!(d1.tasks[9].train_pos.len(), 100 / SCALE);
        assert_eq!(d1.n_total, 2 * 16_500 / SCALE);
    }

    #[test]
    fn same_seed_reproduces_the_selection() {
        let pool = pool();
        let a = build_dataset1(&pool, SCALE, 3).unwrap();
        let b = build_dataset1(&pool, SCALE, 3).unwrap();
        assert_eq!(a, b);
        let c = build_dataset1(&pool, SCALE, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_dataset_matches_the_tailed_total() {
        let pool = pool();
        let d1 = build_dataset1(&pool, SCALE, 17).unwrap();
        let d3 = build_dataset3(&pool, SCALE, 17).unwrap();
        assert_eq!(d3.tasks.len(), 10);
        for t in &d3.tasks {
            assert_eq!(t.train_pos.len(), DATASET3_PER_CLASS / SCALE);
        }
        assert_eq!(d3.total_train_positives(), d1.total_train_positives());
        assert_eq!(d3.n_total, d1.n_total);
    }

    #[test]
    fn twin_split_partitions_cat_and_changes_nothing_else() {
        let pool = pool();
        let d1 = build_dataset1(&pool, SCALE, 17).unwrap();
        let d2 = build_dataset2(&d1, &pool, 17).unwrap();
        assert_eq!(d2.tasks.len(), 11);
        assert_eq!(d2.n_total, d1.n_total);

        let cat1 = d1.tasks.iter().find(|t| t.task == "cat").unwrap();
        let cat2 = d2.tasks.iter().find(|t| t.task == "cat").unwrap();
        let kit = d2.tasks.iter().find(|t| t.task == "kitten").unwrap();
        assert_eq!(kit.twin_of.as_deref(), Some("cat"));
        assert_eq!(kit.category, cat1.category);

        // Partition: union matches, intersection empty, sizes differ <= 1.
        let mut union: Vec<usize> =
            cat2.train_pos.iter().chain(&kit.train_pos).copied().collect();
        union.sort_unstable();
        let mut orig = cat1.train_pos.clone();
        orig.sort_unstable();
        assert_eq!(union, orig);
        assert!(cat2.train_pos.len().abs_diff(kit.train_pos.len()) <= 1);

        // Twin exclusion: kitten negatives carry no cat-labeled image.
        let cat_label = cat1.category as u8;
        assert!(kit.train_neg.iter().all(|&id| pool.images.label(id) != cat_label));

        for t in &d2.tasks {
            if t.task != "cat" && t.task != "kitten" {
                let t1 = d1.tasks.iter().find(|u| u.task == t.task).unwrap();
                assert_eq!(t, t1, "task {:?} changed", t.task);
            }
        }
    }

    #[test]
    fn odd_counts_split_within_one() {
        let mut rng = rng_for(1, &[1]);
        let ids: Vec<usize> = (0..7).collect();
        let (a, b) = split_evenly(&ids, &mut rng);
        assert_eq!(a.len(), 4);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
    }

    #[test]
    fn insufficient_pool_and_bad_scale_rejected() {
        let spec = SynthSpec { seed: 5, ..SynthSpec::default() };
        let small = synth_pool(&spec, &vec![10; 10], &vec![2; 10]).unwrap();
        assert!(build_dataset1(&small, SCALE, 1).is_err(), "not enough positives");
        let pool = pool();
        assert!(build_dataset1(&pool, 3, 1).is_err(), "scale must divide the counts");
        assert!(build_dataset1(&pool, 0, 1).is_err());
    }

    #[test]
    fn negatives_sample_without_replacement_from_the_pool() {
        let mut rng = rng_for(2, &[9]);
        let pool: Vec<usize> = (100..120).collect();
        let negs = sample_negatives(15, &pool, &mut rng).unwrap();
        assert_eq!(negs.len(), 15);
        let mut s = negs.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 15, "duplicate draw");
        assert!(negs.iter().all(|id| pool.contains(id)));
        assert!(sample_negatives(21, &pool, &mut rng).is_err());
    }
}
