//! Line-delimited JSON manifests that pin a task dataset to an image pool.
//!
//! A manifest records every id list verbatim plus the pool fingerprint it
//! was built against, so a dataset can be reconstructed exactly — and a
//! mismatched pool is caught instead of silently producing shifted ids.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::{LabeledPool, TaskDataset, TaskSplit};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum ManifestLine {
    Header {
        version: u32,
        seed: u64,
        scale: usize,
        categories: Vec<String>,
        n_total: usize,
        pool_fingerprint: u64,
        pool_split_at: usize,
        task_count: usize,
    },
    Task {
        task: String,
        category: usize,
        twin_of: Option<String>,
        train_pos: Vec<usize>,
        train_neg: Vec<usize>,
        test_pos: Vec<usize>,
        test_neg: Vec<usize>,
    },
}

pub fn write_manifest(
    out: &mut dyn Write,
    dataset: &TaskDataset,
    pool: &LabeledPool,
    seed: u64,
    scale: usize,
) -> Result<()> {
    let header = ManifestLine::Header {
        version: MANIFEST_VERSION,
        seed,
        scale,
        categories: dataset.category_names.clone(),
        n_total: dataset.n_total,
        pool_fingerprint: pool.images.fingerprint(),
        pool_split_at: pool.split_at(),
        task_count: dataset.tasks.len(),
    };
    serde_json::to_writer(&mut *out, &header).map_err(|e| Error::Data(e.to_string()))?;
    out.write_all(b"\n")?;
    for t in &dataset.tasks {
        let line = ManifestLine::Task {
            task: t.task.clone(),
            category: t.category,
            twin_of: t.twin_of.clone(),
            train_pos: t.train_pos.clone(),
            train_neg: t.train_neg.clone(),
            test_pos: t.test_pos.clone(),
            test_neg: t.test_neg.clone(),
        };
        serde_json::to_writer(&mut *out, &line).map_err(|e| Error::Data(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a manifest back and validate it against the pool it claims to
/// describe. Returns the dataset plus the recorded (seed, scale).
pub fn read_manifest(
    reader: &mut dyn BufRead,
    pool: &LabeledPool,
) -> Result<(TaskDataset, u64, usize)> {
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| Error::Data("empty manifest".into()))??;
    let header: ManifestLine =
        serde_json::from_str(&first).map_err(|e| Error::Data(format!("manifest header: {e}")))?;
    let ManifestLine::Header {
        version,
        seed,
        scale,
        categories,
        n_total,
        pool_fingerprint,
        pool_split_at,
        task_count,
    } = header
    else {
        return Err(Error::Data("manifest must start with its header line".into()));
    };
    if version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "manifest version {version} unsupported (expected {MANIFEST_VERSION})"
        )));
    }
    if pool_fingerprint != pool.images.fingerprint() {
        return Err(Error::Data(
            "manifest was built against a different image pool".into(),
        ));
    }
    if pool_split_at != pool.split_at() {
        return Err(Error::Data(format!(
            "manifest expects train/test split at {pool_split_at}, pool splits at {}",
            pool.split_at()
        )));
    }
    let mut tasks = Vec::with_capacity(task_count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("manifest task: {e}")))?;
        let ManifestLine::Task { task, category, twin_of, train_pos, train_neg, test_pos, test_neg } =
            parsed
        else {
            return Err(Error::Data("duplicate manifest header".into()));
        };
        tasks.push(TaskSplit { task, category, twin_of, train_pos, train_neg, test_pos, test_neg });
    }
    if tasks.len() != task_count {
        return Err(Error::Data(format!(
            "manifest promises {task_count} tasks but carries {}",
            tasks.len()
        )));
    }
    let dataset = TaskDataset { tasks, category_names: categories, n_total };
    dataset.validate(pool)?;
    Ok((dataset, seed, scale))
}
