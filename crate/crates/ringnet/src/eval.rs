//! Measurement: classification error with the twin-task merge rule,
//! prediction histograms, rank correlation, DCG@25, trunk feature
//! extraction, and the frozen-feature linear reranker.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::optim::VisitLog;
use crate::rng::{rng_for, stream, task_label};
use crate::tensor::{elem_count, Scalar, Tensor};

/// Relevance grade of an image for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Judgment {
    Excellent,
    Good,
    Bad,
}

impl Judgment {
    pub fn rel(self) -> u32 {
        match self {
            Judgment::Excellent => 3,
            Judgment::Good => 2,
            Judgment::Bad => 0,
        }
    }
}

/// A query's images ordered by descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: String,
    /// (image id, score), scores non-increasing.
    pub entries: Vec<(usize, f64)>,
}

impl RankedList {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for w in self.entries.windows(2) {
            if w[1].1 > w[0].1 {
                return Err(Error::InvalidArg(format!(
                    "ranked list for {:?} has increasing scores",
                    self.query
                )));
            }
        }
        for (id, _) in &self.entries {
            if !seen.insert(id) {
                return Err(Error::InvalidArg(format!(
                    "ranked list for {:?} repeats image {id}",
                    self.query
                )));
            }
        }
        Ok(())
    }
}

/// Fraction of predictions that differ from the labels.
pub fn error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArg(format!(
            "{} predictions against {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / predictions.len() as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(1.0 - error_rate(predictions, labels)?)
}

/// Error rate for task-index predictions scored against category labels:
/// each predicted task maps to its source category first, so a split twin
/// ("kitten") counts as its original category ("cat").
pub fn error_rate_merged(
    predicted_tasks: &[usize],
    labels: &[usize],
    task_categories: &[usize],
) -> Result<f64> {
    let mapped = predicted_tasks
        .iter()
        .map(|&t| {
            task_categories
                .get(t)
                .copied()
                .ok_or_else(|| Error::InvalidArg(format!("predicted task {t} has no category")))
        })
        .collect::<Result<Vec<_>>>()?;
    error_rate(&mapped, labels)
}

/// Count of predictions per class.
pub fn prediction_histogram(predictions: &[usize], classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; classes];
    for &p in predictions {
        *counts
            .get_mut(p)
            .ok_or_else(|| Error::InvalidArg(format!("prediction {p} out of {classes} classes")))? += 1;
    }
    Ok(counts)
}

/// The printed normalizer: 25 Excellent positions score 1 (to three
/// decimals).
pub const DCG_NORMALIZER: f64 = 0.01757;
pub const DCG_DEPTH: usize = 25;

/// DCG at depth 25 over a ranked list. Images without a judgment count as
/// Bad.
pub fn dcg25(ranked: &RankedList, judgments: &BTreeMap<usize, Judgment>) -> f64 {
    let mut sum = 0.0;
    for (i, (id, _)) in ranked.entries.iter().take(DCG_DEPTH).enumerate() {
        let rel = judgments.get(id).copied().unwrap_or(Judgment::Bad).rel();
        let gain = (1u64 << rel) as f64 - 1.0;
        sum += gain / ((i + 2) as f64).log2();
    }
    DCG_NORMALIZER * sum
}

pub fn mean_dcg25(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArg("mean DCG over zero queries".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Trunk output for a batch, flattened to `[n, feature_dim]`. Inference
/// mode: a frozen model makes this a pure function of the images.
pub fn extract_features<T: Scalar>(
    model: &MultiTaskModel<T>,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let out = model.forward_shared(images)?;
    let n = out.shape()[0];
    let dim = elem_count(&out.shape()[1..]);
    Tensor::from_vec(&[n, dim], out.data().to_vec())
}

/// Stable descending sort of image ids by score; ties keep input order.
pub fn rank_by_scores(query: &str, ids: &[usize], scores: &[f64]) -> Result<RankedList> {
    if ids.len() != scores.len() {
        return Err(Error::InvalidArg(format!(
            "{} ids against {} scores",
            ids.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite ranking score".into()));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let list = RankedList {
        query: query.to_string(),
        entries: order.into_iter().map(|i| (ids[i], scores[i])).collect(),
    };
    list.validate()?;
    Ok(list)
}

/// The random-ranker baseline: a seeded shuffle presented through the same
/// interface, scored by descending position.
pub fn random_ranking(query: &str, ids: &[usize], seed: u64) -> RankedList {
    let mut shuffled = ids.to_vec();
    let mut rng = rng_for(seed, &[stream::RANDOM_RANKER, task_label(query)]);
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    RankedList {
        query: query.to_string(),
        entries: shuffled.into_iter().enumerate().map(|(i, id)| (id, (n - i) as f64)).collect(),
    }
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "rank correlation needs two equal-length series, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let rx = average_ranks(x)?;
    let ry = average_ranks(y)?;
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..x.len() {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::Numeric("rank correlation of a constant series".into()));
    }
    Ok(num / (dx * dy).sqrt())
}

fn average_ranks(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite value in rank correlation".into()));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite"));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 averaged over the tie group.
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    Ok(ranks)
}

/// Linear scoring model: `score(x) = w . x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearScorer {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn score_rows<T: Scalar>(&self, features: &Tensor<T>) -> Result<Vec<f64>> {
        let d = self.weights.len();
        if features.shape().len() != 2 || features.shape()[1] != d {
            return Err(Error::shape(
                "scorer features",
                format!("[n, {d}]"),
                format!("{:?}", features.shape()),
            ));
        }
        Ok(features
            .data()
            .chunks(d)
            .map(|row| {
                self.weights.iter().zip(row).map(|(w, &v)| w * v.to_f64()).sum::<f64>() + self.bias
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankerHyper {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_bias: f64,
    pub seed: u64,
}

impl Default for RerankerHyper {
    fn default() -> Self {
        RerankerHyper { lambda: 1e-4, epochs: 50, lr: 0.01, lr_bias: 0.01, seed: 0 }
    }
}

/// Mean hinge loss plus the L2 penalty, for monitoring and tests.
pub fn hinge_objective(scorer: &LinearScorer, features: &[Vec<f64>], labels: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * scorer.weights.iter().map(|w| w * w).sum::<f64>();
    let hinge: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| (1.0 - y * scorer.score(x)).max(0.0))
        .sum::<f64>()
        / features.len() as f64;
    reg + hinge
}

/// Max-margin linear model by per-example subgradient descent on
/// `lambda/2 |w|^2 + mean hinge(1 - y (w.x + b))`, examples reshuffled each
/// epoch from a seeded stream. The bias is unregularized.
pub fn train_linear_reranker(
    features: &[Vec<f64>],
    labels: &[f64],
    hyper: &RerankerHyper,
) -> Result<LinearScorer> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArg(format!(
            "{} feature rows against {} labels",
            features.len(),
            labels.len()
        )));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|x| x.len() != d) {
        return Err(Error::InvalidArg("feature rows must share one nonzero width".into()));
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::InvalidArg("labels must be +1 or -1".into()));
    }
    if !labels.iter().any(|&y| y > 0.0) || !labels.iter().any(|&y| y < 0.0) {
        return Err(Error::InvalidArg("reranker training needs both classes".into()));
    }
    if !(hyper.lambda >= 0.0 && hyper.lr > 0.0 && hyper.lr_bias >= 0.0) {
        return Err(Error::Config("reranker hyper-parameters out of range".into()));
    }
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..hyper.epochs {
        let mut rng = rng_for(hyper.seed, &[stream::RERANKER, epoch as u64]);
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &features[i];
            let y = labels[i];
            let margin = y * (w.iter().zip(x).map(|(wk, xk)| wk * xk).sum::<f64>() + b);
            let active = margin < 1.0;
            for (wk, &xk) in w.iter_mut().zip(x) {
                let pull = if active { y * xk } else { 0.0 };
                *wk -= hyper.lr * (hyper.lambda * *wk - pull);
            }
            if active {
                b += hyper.lr_bias * y;
            }
        }
    }
    Ok(LinearScorer { weights: w, bias: b })
}

/// Everything a run reports, with CSV table writers for plotting.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    /// (task, train error, test error) per task.
    pub per_task_error: Vec<(String, f64, f64)>,
    /// Mean over tasks (or the single multi-way error).
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
    /// Predicted-class counts over the evaluation set.
    pub predicted_counts: Vec<(String, usize)>,
    /// Training history, carried in memory for CSV export but kept out of
    /// the metrics file: it lives in the training log, and its wall-time
    /// field would break run-to-run byte identity of the metrics.
    #[serde(skip)]
    pub curves: Vec<VisitLog>,
    pub mean_dcg25_reranker: Option<f64>,
    pub mean_dcg25_random: Option<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .per_task_error
            .iter()
            .flat_map(|(_, a, b)| [*a, *b])
            .chain(self.train_error)
            .chain(self.test_error);
        for e in all {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::InvalidArg(format!("error rate {e} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writeln!(w)?;
        Ok(())
    }

    pub fn write_task_errors_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "task,train_error,test_error")?;
        for (task, tr, te) in &self.per_task_error {
            writeln!(w, "{task},{tr},{te}")?;
        }
        Ok(())
    }

    pub fn write_counts_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "class,predicted_count")?;
        for (name, c) in &self.predicted_counts {
            writeln!(w, "{name},{c}")?;
        }
        Ok(())
    }

    pub fn write_curves_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "round,task,epoch,split,loss,error,eta_s,wall_ms")?;
        for l in &self.curves {
            let split = match l.split {
                crate::optim::Split::Train => "train",
                crate::optim::Split::Test => "test",
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                l.round, l.task, l.epoch, split, l.loss, l.error, l.eta_s, l.wall_ms
            )?;
        }
        Ok(())
    }
}
