//! The experiment driver: one function per CLI verb. Commands are plain
//! functions over [`ExperimentConfig`] so integration tests can run whole
//! experiments in-process.
//!
//! File layout under `out_dir`, all keyed by the experiment name: a data
//! manifest (`build-data`), per-run checkpoints and an append-only training
//! log (`train`), and a metrics JSON (`eval`) that `report` turns into CSVs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, save_checkpoint, TrainState};
use crate::config::{Builder, ExperimentConfig, ModelKind, PoolSource};
use crate::data::builders::{build_dataset1, build_dataset2, build_dataset3};
use crate::data::cifar::load_cifar_binary;
use crate::data::clickthrough::{self, ClickCorpus, ClickthroughSynthSpec};
use crate::data::manifest::{read_manifest, write_manifest};
use crate::data::synth::synth_pool_uniform;
use crate::data::{
    global_centering, images_tensor, materialize_multiclass, materialize_tasks,
    per_task_centering, LabeledPool, TaskDataset,
};
use crate::error::{Error, Result};
use crate::eval::{
    dcg25, error_rate, error_rate_merged, extract_features, mean_dcg25, prediction_histogram,
    random_ranking, rank_by_scores, train_linear_reranker, Judgment, MetricsReport, RerankerHyper,
};
use crate::gradcheck::{model_grad_check, ParamScope};
use crate::layers::LayerSpec;
use crate::model::{
    build_cifar_binary_config, build_cifar_config, build_cifar_multiclass_config,
    build_retrieval_config, Centering, ModelConfig, MultiTaskModel,
};
use crate::optim::{eval_loss_error, ring_train, ModelVelocity, TaskExamples, VisitLog};
use crate::tensor::Tensor;

/// Head name for the single fully-shared classifier.
pub const MULTICLASS_TASK: &str = "all";

const EVAL_BATCH: usize = 128;
/// Retrieval images are ~150K floats each; keep forward batches small.
const FEATURE_BATCH: usize = 16;

pub struct BuiltData {
    pub pool: LabeledPool,
    pub dataset: TaskDataset,
}

pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    /// Visits trained by this invocation (a finished run resumes to nothing).
    pub new_visits: Vec<VisitLog>,
}

pub fn build_pool(cfg: &ExperimentConfig) -> Result<LabeledPool> {
    let source = cfg
        .dataset
        .pool
        .as_ref()
        .ok_or_else(|| Error::Config("classification datasets need a [dataset.pool] table".into()))?;
    match source {
        PoolSource::Synth { spec, train_per_class, test_per_class } => {
            synth_pool_uniform(spec, *train_per_class, *test_per_class)
        }
        PoolSource::Cifar { train_files, test_files } => {
            let train = load_cifar_binary(train_files)?;
            let test = load_cifar_binary(test_files)?;
            LabeledPool::merge(train, &test)
        }
    }
}

pub fn build_classification_data(cfg: &ExperimentConfig) -> Result<BuiltData> {
    let pool = build_pool(cfg)?;
    let scale = cfg.dataset.scale;
    let seed = cfg.dataset.seed;
    let dataset = match cfg.dataset.builder {
        Builder::Dataset1 => build_dataset1(&pool, scale, seed)?,
        Builder::Dataset2 => {
            let base = build_dataset1(&pool, scale, seed)?;
            build_dataset2(&base, &pool, seed)?
        }
        Builder::Dataset3 => build_dataset3(&pool, scale, seed)?,
        Builder::Clickthrough => {
            return Err(Error::InvalidArg("the clickthrough corpus has no image-pool dataset".into()))
        }
    };
    Ok(BuiltData { pool, dataset })
}

/// What `build-data` records for a clickthrough run: enough to verify that
/// `train`/`eval` regenerate the same corpus (pixels re-render from the
/// spec, so only the plan is pinned).
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct ClickManifest {
    spec: ClickthroughSynthSpec,
    image_count: usize,
    query_concepts: Vec<usize>,
    clicks_per_query: Vec<usize>,
}

fn click_manifest(spec: &ClickthroughSynthSpec) -> Result<ClickManifest> {
    let plan = clickthrough::plan_corpus(spec)?;
    Ok(ClickManifest {
        spec: spec.clone(),
        image_count: plan.image_count(),
        query_concepts: plan.query_concepts.clone(),
        clicks_per_query: plan.clicks_per_query(),
    })
}

fn click_spec(cfg: &ExperimentConfig) -> Result<ClickthroughSynthSpec> {
    cfg.dataset
        .clickthrough
        .clone()
        .ok_or_else(|| Error::Config("builder = clickthrough needs a [dataset.clickthrough] table".into()))
}

pub fn cmd_build_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.manifest_path();
    let mut out = BufWriter::new(File::create(&path)?);
    match cfg.dataset.builder {
        Builder::Clickthrough => {
            let manifest = click_manifest(&click_spec(cfg)?)?;
            serde_json::to_writer(&mut out, &manifest)
                .map_err(|e| Error::Data(format!("write corpus manifest: {e}")))?;
            writeln!(out)?;
        }
        _ => {
            let built = build_classification_data(cfg)?;
            write_manifest(&mut out, &built.dataset, &built.pool, cfg.dataset.seed, cfg.dataset.scale)?;
        }
    }
    out.flush()?;
    Ok(path)
}

fn missing_manifest(path: &Path) -> Error {
    Error::Data(format!("no manifest at {}; run build-data first", path.display()))
}

/// Rebuild the pool and load the task manifest `build-data` wrote,
/// re-validating every id against the pool.
pub fn load_built_data(cfg: &ExperimentConfig) -> Result<BuiltData> {
    let path = cfg.manifest_path();
    if !path.exists() {
        return Err(missing_manifest(&path));
    }
    let pool = build_pool(cfg)?;
    let mut reader = BufReader::new(File::open(&path)?);
    let (dataset, seed, scale) = read_manifest(&mut reader, &pool)?;
    if seed != cfg.dataset.seed || scale != cfg.dataset.scale {
        return Err(Error::Data(format!(
            "manifest was built at seed {seed}, scale {scale}; config asks seed {}, scale {}",
            cfg.dataset.seed, cfg.dataset.scale
        )));
    }
    Ok(BuiltData { pool, dataset })
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<ClickCorpus> {
    let spec = click_spec(cfg)?;
    let path = cfg.manifest_path();
    if !path.exists() {
        return Err(missing_manifest(&path));
    }
    let text = std::fs::read_to_string(&path)?;
    let stored: ClickManifest = serde_json::from_str(text.trim())
        .map_err(|e| Error::Data(format!("corpus manifest: {e}")))?;
    if stored != click_manifest(&spec)? {
        return Err(Error::Data(
            "corpus manifest does not match the configured spec; re-run build-data".into(),
        ));
    }
    clickthrough::generate(&spec)
}

/// Queries whose heads join the training ring. Concepts are assigned to
/// queries at random, so a prefix is an unbiased subset.
fn trained_queries(cfg: &ExperimentConfig, corpus: &ClickCorpus) -> Vec<usize> {
    let total = corpus.spec.query_count;
    let k = if cfg.dataset.train_queries == 0 { total } else { cfg.dataset.train_queries.min(total) };
    (0..k).collect()
}

struct RingRun {
    model: MultiTaskModel<f32>,
    velocity: ModelVelocity<f32>,
    completed: usize,
}

/// Load a checkpoint if one exists and sanity-check it against the config;
/// `Ok(None)` means start fresh.
fn resume_state(
    path: &Path,
    expect: &ModelConfig,
    seed: u64,
    tasks: &[String],
) -> Result<Option<TrainState<f32>>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut input = BufReader::new(File::open(path)?);
    let state = read_checkpoint::<f32>(&mut input)?;
    if state.model.config != *expect {
        return Err(Error::Checkpoint(format!(
            "{} holds a different architecture; delete it or change out_dir",
            path.display()
        )));
    }
    if state.model.seed != seed {
        return Err(Error::Checkpoint(format!(
            "{} was trained with seed {}, config asks {seed}",
            path.display(),
            state.model.seed
        )));
    }
    let stored: Vec<&str> = state.model.heads.iter().map(|h| h.task.as_str()).collect();
    let wanted: Vec<&str> = tasks.iter().map(|t| t.as_str()).collect();
    if stored != wanted {
        return Err(Error::Checkpoint(format!(
            "{} covers tasks {stored:?}, config asks {wanted:?}",
            path.display()
        )));
    }
    Ok(Some(state))
}

fn prepare_run(
    path: &Path,
    arch: &ModelConfig,
    seed: u64,
    tasks: &[String],
    centering: Centering<f32>,
) -> Result<RingRun> {
    match resume_state(path, arch, seed, tasks)? {
        Some(state) => {
            let velocity =
                state.velocity.unwrap_or_else(|| ModelVelocity::zeros_for(&state.model));
            Ok(RingRun { model: state.model, velocity, completed: state.completed_rounds as usize })
        }
        None => {
            let mut model = MultiTaskModel::new(arch.clone(), seed, tasks)?;
            model.set_centering(centering)?;
            let velocity = ModelVelocity::zeros_for(&model);
            Ok(RingRun { model, velocity, completed: 0 })
        }
    }
}

/// Load a finished model for evaluation; a missing or under-trained
/// checkpoint is an error, not a silent fresh model.
fn load_trained(
    path: &Path,
    expect: &ModelConfig,
    seed: u64,
    tasks: &[String],
) -> Result<MultiTaskModel<f32>> {
    let state = resume_state(path, expect, seed, tasks)?
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint at {}; run train first", path.display())))?;
    Ok(state.model)
}

fn open_log(path: &Path, resuming: bool) -> Result<File> {
    Ok(if resuming {
        OpenOptions::new().create(true).append(true).open(path)?
    } else {
        File::create(path)?
    })
}

/// Train one model (multitask ring, multiclass, or retrieval): resume from
/// its checkpoint when present, append new visit logs, save with velocity so
/// a later invocation with more rounds continues bit-identically.
fn run_ring(
    cfg: &ExperimentConfig,
    path: &Path,
    arch: &ModelConfig,
    names: &[String],
    data: Vec<TaskExamples<f32>>,
    centering: Centering<f32>,
) -> Result<TrainOutcome> {
    let resuming = path.exists();
    let mut run = prepare_run(path, arch, cfg.model.seed, names, centering)?;
    let mut log = BufWriter::new(open_log(&cfg.train_log_path(), resuming)?);
    let visits = ring_train(
        &mut run.model,
        &mut run.velocity,
        &data,
        &cfg.schedule,
        &cfg.optimizer,
        cfg.model.seed,
        run.completed,
        Some(&mut log),
    )?;
    log.flush()?;
    save_checkpoint(
        path,
        &TrainState {
            model: run.model,
            velocity: Some(run.velocity),
            completed_rounds: cfg.schedule.rounds as u64,
        },
    )?;
    Ok(TrainOutcome { checkpoints: vec![path.to_path_buf()], new_visits: visits })
}

fn train_multitask(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let BuiltData { pool, dataset } = load_built_data(cfg)?;
    let names = dataset.task_names();
    let data = materialize_tasks::<f32>(&pool, &dataset);
    let centering = global_centering::<f32>(&pool, &dataset)?;
    run_ring(cfg, &cfg.checkpoint_path(), &build_cifar_config(), &names, data, centering)
}

fn train_multiclass(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let BuiltData { pool, dataset } = load_built_data(cfg)?;
    let classes = pool.images.category_names().len();
    let arch = build_cifar_multiclass_config(classes);
    let names = vec![MULTICLASS_TASK.to_string()];
    let data = vec![materialize_multiclass::<f32>(&pool, &dataset, MULTICLASS_TASK)];
    let centering = global_centering::<f32>(&pool, &dataset)?;
    run_ring(cfg, &cfg.checkpoint_path(), &arch, &names, data, centering)
}

fn train_retrieval(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let corpus = load_corpus(cfg)?;
    let queries = trained_queries(cfg, &corpus);
    let names: Vec<String> = queries.iter().map(|&q| ClickCorpus::query_name(q)).collect();
    let data = corpus.task_examples::<f32>(&queries)?;
    let all_ids: Vec<usize> = (0..corpus.image_count()).collect();
    let centering = Centering::Global(corpus.mean_image::<f32>(&all_ids)?);
    run_ring(cfg, &cfg.checkpoint_path(), &build_retrieval_config(), &names, data, centering)
}

/// The no-sharing baseline: one independent model per task, trained in
/// parallel over `threads` workers. Models share nothing, so the only
/// cross-thread ordering is the log, which is written afterward in task
/// order to keep the file deterministic.
fn train_binary(cfg: &ExperimentConfig, threads: usize) -> Result<TrainOutcome> {
    let BuiltData { pool, dataset } = load_built_data(cfg)?;
    let arch = build_cifar_binary_config();
    let data = materialize_tasks::<f32>(&pool, &dataset);
    let Centering::PerTask(means) = per_task_centering::<f32>(&pool, &dataset)? else {
        unreachable!("per-task centering is always per-task");
    };
    let resuming =
        dataset.tasks.iter().any(|t| cfg.task_checkpoint_path(&t.task).exists());

    let workers = threads.max(1).min(data.len());
    let mut slots: Vec<Option<Result<(PathBuf, Vec<VisitLog>, Vec<u8>)>>> =
        (0..data.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let data = &data;
            let means = &means;
            let arch = &arch;
            handles.push(scope.spawn(move || {
                let mut done = Vec::new();
                let mut i = w;
                while i < data.len() {
                    done.push((i, train_one_binary(cfg, arch, &data[i], &means[i])));
                    i += workers;
                }
                done
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("training worker panicked") {
                slots[i] = Some(r);
            }
        }
    });

    let mut log = BufWriter::new(open_log(&cfg.train_log_path(), resuming)?);
    let mut checkpoints = Vec::new();
    let mut new_visits = Vec::new();
    for slot in slots {
        let (path, visits, buf) = slot.expect("every task was scheduled")?;
        log.write_all(&buf)?;
        checkpoints.push(path);
        new_visits.extend(visits);
    }
    log.flush()?;
    Ok(TrainOutcome { checkpoints, new_visits })
}

fn train_one_binary(
    cfg: &ExperimentConfig,
    arch: &ModelConfig,
    task: &TaskExamples<f32>,
    mean: &Tensor<f32>,
) -> Result<(PathBuf, Vec<VisitLog>, Vec<u8>)> {
    let path = cfg.task_checkpoint_path(&task.task);
    let names = vec![task.task.clone()];
    let mut run =
        prepare_run(&path, arch, cfg.model.seed, &names, Centering::PerTask(vec![mean.clone()]))?;
    let mut buf = Vec::new();
    let visits = ring_train(
        &mut run.model,
        &mut run.velocity,
        std::slice::from_ref(task),
        &cfg.schedule,
        &cfg.optimizer,
        cfg.model.seed,
        run.completed,
        Some(&mut buf),
    )?;
    save_checkpoint(
        &path,
        &TrainState {
            model: run.model,
            velocity: Some(run.velocity),
            completed_rounds: cfg.schedule.rounds as u64,
        },
    )?;
    Ok((path, visits, buf))
}

pub fn cmd_train(cfg: &ExperimentConfig, threads: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    match (&cfg.dataset.builder, &cfg.model.kind) {
        (Builder::Clickthrough, ModelKind::Multitask) => train_retrieval(cfg),
        (Builder::Clickthrough, _) => {
            Err(Error::Config("clickthrough training is multitask only".into()))
        }
        (_, ModelKind::Multitask) => train_multitask(cfg),
        (_, ModelKind::Binary) => train_binary(cfg, threads),
        (_, ModelKind::Multiclass) => train_multiclass(cfg),
    }
}

/// Models that classify an image by task: either one shared-trunk model
/// whose heads compete, or a bank of independent per-task models whose
/// relevance scores compete.
enum TaskBank {
    Shared(MultiTaskModel<f32>),
    Independent(Vec<MultiTaskModel<f32>>),
}

impl TaskBank {
    fn predict(&self, pool: &LabeledPool, ids: &[usize]) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(EVAL_BATCH) {
            let images = images_tensor::<f32>(&pool.images, chunk);
            match self {
                TaskBank::Shared(m) => preds.extend(m.predict_class(&images)?),
                TaskBank::Independent(models) => {
                    preds.extend(predict_by_relevance(models, &images)?)
                }
            }
        }
        Ok(preds)
    }

    fn head_eval(&self, h: usize, images: &Tensor<f32>, labels: &[usize]) -> Result<(f64, f64)> {
        match self {
            TaskBank::Shared(m) => eval_loss_error(m, h, images, labels, EVAL_BATCH),
            TaskBank::Independent(models) => {
                eval_loss_error(&models[h], 0, images, labels, EVAL_BATCH)
            }
        }
    }
}

/// Argmax of per-model relevance; ties go to the lowest model index, the
/// same rule shared-trunk prediction uses.
fn predict_by_relevance(models: &[MultiTaskModel<f32>], images: &Tensor<f32>) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut best: Vec<(f64, usize)> = vec![(f64::NEG_INFINITY, 0); n];
    for (t, m) in models.iter().enumerate() {
        let task = m.heads[0].task.clone();
        for (i, r) in m.relevance(&task, images)?.into_iter().enumerate() {
            if r > best[i].0 {
                best[i] = (r, t);
            }
        }
    }
    Ok(best.into_iter().map(|(_, t)| t).collect())
}

fn load_bank(cfg: &ExperimentConfig, dataset: &TaskDataset) -> Result<TaskBank> {
    match cfg.model.kind {
        ModelKind::Multitask => {
            let names = dataset.task_names();
            let model =
                load_trained(&cfg.checkpoint_path(), &build_cifar_config(), cfg.model.seed, &names)?;
            Ok(TaskBank::Shared(model))
        }
        ModelKind::Binary => {
            let arch = build_cifar_binary_config();
            let models = dataset
                .tasks
                .iter()
                .map(|t| {
                    load_trained(
                        &cfg.task_checkpoint_path(&t.task),
                        &arch,
                        cfg.model.seed,
                        std::slice::from_ref(&t.task),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskBank::Independent(models))
        }
        ModelKind::Multiclass => {
            Err(Error::InvalidArg("the fully-shared classifier is not a task bank".into()))
        }
    }
}

/// Pool ids and source-task indices for one split, task by task. Every test
/// (or training) positive appears exactly once; its true class is the
/// category of the task it came from.
fn classification_pairs(dataset: &TaskDataset, train: bool) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut tasks = Vec::new();
    for (t, split) in dataset.tasks.iter().enumerate() {
        let list = if train { &split.train_pos } else { &split.test_pos };
        ids.extend(list.iter().copied());
        tasks.extend(std::iter::repeat(t).take(list.len()));
    }
    (ids, tasks)
}

fn split_error(
    bank: &TaskBank,
    h: usize,
    pool: &LabeledPool,
    pos: &[usize],
    neg: &[usize],
) -> Result<f64> {
    let ids: Vec<usize> = pos.iter().chain(neg).copied().collect();
    let mut labels = vec![1usize; pos.len()];
    labels.extend(std::iter::repeat(0).take(neg.len()));
    let images = images_tensor::<f32>(&pool.images, &ids);
    Ok(bank.head_eval(h, &images, &labels)?.1)
}

/// Per-task two-way error on the task's own positives and negatives.
fn per_task_rows(
    bank: &TaskBank,
    pool: &LabeledPool,
    dataset: &TaskDataset,
) -> Result<Vec<(String, f64, f64)>> {
    dataset
        .tasks
        .iter()
        .enumerate()
        .map(|(h, t)| {
            let tr = split_error(bank, h, pool, &t.train_pos, &t.train_neg)?;
            let te = split_error(bank, h, pool, &t.test_pos, &t.test_neg)?;
            Ok((t.task.clone(), tr, te))
        })
        .collect()
}

fn per_category_rows(
    names: &[String],
    train_preds: &[usize],
    train_cats: &[usize],
    test_preds: &[usize],
    test_cats: &[usize],
) -> Vec<(String, f64, f64)> {
    let subset_error = |preds: &[usize], cats: &[usize], c: usize| {
        let (mut wrong, mut n) = (0usize, 0usize);
        for (p, t) in preds.iter().zip(cats) {
            if *t == c {
                n += 1;
                if p != t {
                    wrong += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            wrong as f64 / n as f64
        }
    };
    names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            (name.clone(), subset_error(train_preds, train_cats, c), subset_error(test_preds, test_cats, c))
        })
        .collect()
}

fn load_curves(cfg: &ExperimentConfig) -> Result<Vec<VisitLog>> {
    let path = cfg.train_log_path();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(&path)?);
    let mut curves = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        curves
            .push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("training log: {e}")))?);
    }
    Ok(curves)
}

fn eval_classification(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let BuiltData { pool, dataset } = load_built_data(cfg)?;
    let (train_ids, train_tasks) = classification_pairs(&dataset, true);
    let (test_ids, test_tasks) = classification_pairs(&dataset, false);
    let curves = load_curves(cfg)?;

    match cfg.model.kind {
        ModelKind::Multitask | ModelKind::Binary => {
            let bank = load_bank(cfg, &dataset)?;
            let cats: Vec<usize> = dataset.tasks.iter().map(|t| t.category).collect();
            let train_preds = bank.predict(&pool, &train_ids)?;
            let test_preds = bank.predict(&pool, &test_ids)?;
            let hist = prediction_histogram(&test_preds, dataset.tasks.len())?;
            Ok(MetricsReport {
                per_task_error: per_task_rows(&bank, &pool, &dataset)?,
                train_error: Some(error_rate_merged(&train_preds, &train_tasks, &cats)?),
                test_error: Some(error_rate_merged(&test_preds, &test_tasks, &cats)?),
                predicted_counts: dataset
                    .tasks
                    .iter()
                    .zip(hist)
                    .map(|(t, c)| (t.task.clone(), c))
                    .collect(),
                curves,
                mean_dcg25_reranker: None,
                mean_dcg25_random: None,
            })
        }
        ModelKind::Multiclass => {
            let classes = pool.images.category_names().len();
            let arch = build_cifar_multiclass_config(classes);
            let names = vec![MULTICLASS_TASK.to_string()];
            let model = load_trained(&cfg.checkpoint_path(), &arch, cfg.model.seed, &names)?;
            let bank = TaskBank::Shared(model);
            let to_cats =
                |tasks: &[usize]| tasks.iter().map(|&t| dataset.tasks[t].category).collect::<Vec<_>>();
            let train_cats = to_cats(&train_tasks);
            let test_cats = to_cats(&test_tasks);
            let train_preds = bank.predict(&pool, &train_ids)?;
            let test_preds = bank.predict(&pool, &test_ids)?;
            let hist = prediction_histogram(&test_preds, classes)?;
            Ok(MetricsReport {
                per_task_error: per_category_rows(
                    pool.images.category_names(),
                    &train_preds,
                    &train_cats,
                    &test_preds,
                    &test_cats,
                ),
                train_error: Some(error_rate(&train_preds, &train_cats)?),
                test_error: Some(error_rate(&test_preds, &test_cats)?),
                predicted_counts: pool
                    .images
                    .category_names()
                    .iter()
                    .zip(hist)
                    .map(|(n, c)| (n.clone(), c))
                    .collect(),
                curves,
                mean_dcg25_reranker: None,
                mean_dcg25_random: None,
            })
        }
    }
}

/// Trunk features for every id, forwarded once each in sorted order.
fn feature_table(
    model: &MultiTaskModel<f32>,
    corpus: &ClickCorpus,
    ids: &BTreeSet<usize>,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let list: Vec<usize> = ids.iter().copied().collect();
    let mut table = BTreeMap::new();
    for chunk in list.chunks(FEATURE_BATCH) {
        let images = corpus.images_tensor::<f32>(chunk);
        let feats = extract_features(model, &images)?;
        let dim = feats.shape()[1];
        for (r, &id) in chunk.iter().enumerate() {
            let row = &feats.data()[r * dim..(r + 1) * dim];
            table.insert(id, row.iter().map(|&v| f64::from(v)).collect());
        }
    }
    Ok(table)
}

/// Rerank every query's candidates with a per-query linear scorer trained
/// on the frozen trunk features of its clicked images (positives) versus
/// its drawn foreign negatives, and score DCG@25 against the latent
/// judgments alongside a seeded random ranking.
fn eval_retrieval(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let corpus = load_corpus(cfg)?;
    let queries = trained_queries(cfg, &corpus);
    let names: Vec<String> = queries.iter().map(|&q| ClickCorpus::query_name(q)).collect();
    let model =
        load_trained(&cfg.checkpoint_path(), &build_retrieval_config(), cfg.model.seed, &names)?;

    let total = corpus.spec.query_count;
    let mut needed = BTreeSet::new();
    let mut cands = Vec::with_capacity(total);
    let mut negs = Vec::with_capacity(total);
    for q in 0..total {
        let c = corpus.candidates(q, cfg.eval.candidates_extra);
        let n = corpus.negative_ids(q)?;
        needed.extend(c.iter().copied());
        needed.extend(corpus.plan.clicked[q].iter().copied());
        needed.extend(n.iter().copied());
        cands.push(c);
        negs.push(n);
    }
    let features = feature_table(&model, &corpus, &needed)?;

    let mut reranker_scores = Vec::with_capacity(total);
    let mut random_scores = Vec::with_capacity(total);
    for q in 0..total {
        let name = ClickCorpus::query_name(q);
        let pos = &corpus.plan.clicked[q];
        let rows: Vec<Vec<f64>> =
            pos.iter().chain(&negs[q]).map(|id| features[id].clone()).collect();
        let mut labels = vec![1.0; pos.len()];
        labels.extend(std::iter::repeat(-1.0).take(negs[q].len()));
        let hyper = RerankerHyper {
            lambda: cfg.eval.reranker_lambda,
            epochs: cfg.eval.reranker_epochs,
            seed: q as u64,
            ..RerankerHyper::default()
        };
        let scorer = train_linear_reranker(&rows, &labels, &hyper)?;
        let scores: Vec<f64> = cands[q].iter().map(|id| scorer.score(&features[id])).collect();
        let ranked = rank_by_scores(&name, &cands[q], &scores)?;
        let judgments: BTreeMap<usize, Judgment> =
            cands[q].iter().map(|&id| (id, corpus.judgment(q, id))).collect();
        reranker_scores.push(dcg25(&ranked, &judgments));
        random_scores.push(dcg25(&random_ranking(&name, &cands[q], corpus.spec.seed), &judgments));
    }

    Ok(MetricsReport {
        per_task_error: Vec::new(),
        train_error: None,
        test_error: None,
        predicted_counts: Vec::new(),
        curves: load_curves(cfg)?,
        mean_dcg25_reranker: Some(mean_dcg25(&reranker_scores)?),
        mean_dcg25_random: Some(mean_dcg25(&random_scores)?),
    })
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let report = match cfg.dataset.builder {
        Builder::Clickthrough => eval_retrieval(cfg)?,
        _ => eval_classification(cfg)?,
    };
    report.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut out = BufWriter::new(File::create(cfg.metrics_path())?);
    report.write_json(&mut out)?;
    out.flush()?;
    Ok(report)
}

/// A small stack mixing the layer kinds the 32x32 classifier doesn't use
/// (response normalization, dropout) so the composite check covers the
/// retrieval network's vocabulary without its 224x224 cost.
fn norm_dropout_config() -> ModelConfig {
    ModelConfig {
        input_shape: vec![2, 9, 9],
        layers: vec![
            LayerSpec::Conv { filters: 4, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::ResponseNorm { k: 2.0, n: 3, alpha: 1e-4, beta: 0.75 },
            LayerSpec::MaxPool { window: 3, stride: 2 },
            LayerSpec::FullyConnected { units: 8 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::FullyConnected { units: 2 },
        ],
        split_index: 5,
        head_output: 2,
    }
}

/// Composite finite-difference checks: both parameter scopes of the 32x32
/// classifier and of a norm+dropout stack. Writes one line per scope;
/// returns whether everything passed.
pub fn cmd_gradcheck(out: &mut dyn Write) -> Result<bool> {
    let checks = [("classifier-32x32", build_cifar_config()), ("conv-norm-dropout", norm_dropout_config())];
    let mut all = true;
    for (name, config) in checks {
        for (scope, report) in model_grad_check(&config, 1, 1, 3e-6, 1e-4)? {
            let scope = match scope {
                ParamScope::Trunk => "shared",
                ParamScope::Head => "head",
            };
            writeln!(out, "{name} {scope}: {report}")?;
            all &= report.passed();
        }
    }
    Ok(all)
}

/// Turn a run's metrics JSON into CSVs next to it and a terse summary on
/// `out`.
pub fn cmd_report(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let path = cfg.metrics_path();
    if !path.exists() {
        return Err(Error::Data(format!("no metrics at {}; run eval first", path.display())));
    }
    let mut report: MetricsReport = serde_json::from_reader(BufReader::new(File::open(&path)?))
        .map_err(|e| Error::Data(format!("metrics file: {e}")))?;
    // The metrics file carries no training history; the log does.
    report.curves = load_curves(cfg)?;

    let csv = |suffix: &str| cfg.out_dir.join(format!("{}.{suffix}.csv", cfg.name));
    let mut w = BufWriter::new(File::create(csv("task_errors"))?);
    report.write_task_errors_csv(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(csv("counts"))?);
    report.write_counts_csv(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(csv("curves"))?);
    report.write_curves_csv(&mut w)?;
    w.flush()?;

    writeln!(out, "experiment {}", cfg.name)?;
    if let Some(e) = report.train_error {
        writeln!(out, "  train error {e:.4}")?;
    }
    if let Some(e) = report.test_error {
        writeln!(out, "  test error  {e:.4}")?;
    }
    if let (Some(m), Some(r)) = (report.mean_dcg25_reranker, report.mean_dcg25_random) {
        writeln!(out, "  mean DCG@25 {m:.5} reranked vs {r:.5} random")?;
    }
    for (task, tr, te) in &report.per_task_error {
        writeln!(out, "  {task}: train {tr:.4} test {te:.4}")?;
    }
    writeln!(out, "wrote {}, {}, {}", csv("task_errors").display(), csv("counts").display(), csv("curves").display())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Arch, DatasetConfig, ModelConfigSection};
    use crate::data::synth::SynthSpec;
    use crate::optim::{EtaDecay, RingSchedule, SgdHyper};

    fn tiny_config(name: &str, dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            name: name.to_string(),
            dataset: DatasetConfig {
                builder: Builder::Dataset1,
                scale: 100,
                seed: 7,
                pool: Some(PoolSource::Synth {
                    spec: SynthSpec::default(),
                    train_per_class: 60,
                    test_per_class: 10,
                }),
                clickthrough: None,
                train_queries: 0,
            },
            model: ModelConfigSection { kind: ModelKind::Multitask, arch: Arch::Cifar, seed: 1 },
            optimizer: SgdHyper { batch_size: 16, ..SgdHyper::default() },
            schedule: RingSchedule {
                rounds: 1,
                epochs_per_visit: 1,
                eta_q: 1.0,
                eta_s: 1.0,
                eta_s_zero_round: 2,
                eta_s_decay: EtaDecay::Linear,
            },
            eval: Default::default(),
            out_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn build_data_writes_a_manifest_that_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config("t1", dir.path());
        let path = cmd_build_data(&cfg).unwrap();
        assert!(path.exists());
        let built = load_built_data(&cfg).unwrap();
        assert_eq!(built.dataset.tasks.len(), 10);
        // Rebuilding writes identical bytes.
        let first = std::fs::read(&path).unwrap();
        cmd_build_data(&cfg).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn training_without_a_manifest_names_the_missing_step() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config("t2", dir.path());
        let err = match cmd_train(&cfg, 1) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("train should fail without build-data"),
        };
        assert!(err.contains("build-data"), "unhelpful error: {err}");
    }

    #[test]
    fn mismatched_scale_is_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config("t3", dir.path());
        cmd_build_data(&cfg).unwrap();
        let mut other = cfg.clone();
        other.dataset.scale = 50;
        let err = match load_built_data(&other) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("scale mismatch should fail"),
        };
        assert!(err.contains("scale"), "unhelpful error: {err}");
    }

    #[test]
    fn clickthrough_manifest_pins_the_spec() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config("t4", dir.path());
        cfg.dataset.builder = Builder::Clickthrough;
        cfg.dataset.pool = None;
        cfg.dataset.clickthrough = Some(ClickthroughSynthSpec {
            query_count: 3,
            image_count: 40,
            exponent: 2.0,
            max_clicks: 3,
            overlap_rate: 0.0,
            judgment_noise: 0.0,
            seed: 11,
        });
        cfg.model.arch = Arch::Retrieval;
        cmd_build_data(&cfg).unwrap();
        assert!(load_corpus(&cfg).is_ok());

        let mut tampered = cfg.clone();
        tampered.dataset.clickthrough.as_mut().unwrap().seed = 12;
        let err = match load_corpus(&tampered) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("spec drift should fail"),
        };
        assert!(err.contains("manifest"), "unhelpful error: {err}");
    }

    #[test]
    fn trained_query_prefix_respects_the_knob() {
        let spec = ClickthroughSynthSpec {
            query_count: 5,
            image_count: 60,
            exponent: 2.0,
            max_clicks: 3,
            overlap_rate: 0.0,
            judgment_noise: 0.0,
            seed: 2,
        };
        let corpus = clickthrough::generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config("t5", dir.path());
        cfg.dataset.train_queries = 2;
        assert_eq!(trained_queries(&cfg, &corpus), vec![0, 1]);
        cfg.dataset.train_queries = 0;
        assert_eq!(trained_queries(&cfg, &corpus).len(), 5);
    }
}
