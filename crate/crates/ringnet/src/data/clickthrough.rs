//! Synthetic query clickthrough corpus for the retrieval experiments.
//!
//! Latent concepts drive everything: each concept owns a contiguous,
//! disjoint slice of the image pool and renders it from a shared template;
//! each query belongs to one concept and clicks a heavy-tailed number of
//! that concept's images. Overlapping queries (two queries on one concept —
//! the "dog vs puppy" case) share an image pool by construction.
//! Ground-truth judgments derive from the latent structure: clicked is
//! Excellent, same concept unclicked is Good, everything else Bad, with a
//! configurable noise rate flipping grades at random.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Judgment;
use crate::optim::TaskExamples;
use crate::rng::{rng_for, sample_without_replacement, standard_normal, stream};
use crate::tensor::{Scalar, Tensor};
use super::synth::smooth_field;

pub const RETRIEVAL_SIDE: usize = 224;
pub const RETRIEVAL_PIXELS: usize = 3 * RETRIEVAL_SIDE * RETRIEVAL_SIDE;
pub const RETRIEVAL_SHAPE: [usize; 3] = [3, RETRIEVAL_SIDE, RETRIEVAL_SIDE];

/// Fewest images a concept pool may hold: room for clicked positives plus
/// unclicked same-concept images to judge.
const MIN_POOL: usize = 4;
/// Fewest clicks any query gets (the power law's lower cutoff).
const MIN_CLICKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickthroughSynthSpec {
    pub query_count: usize,
    pub image_count: usize,
    /// Power-law exponent for clicks per query; larger is lighter-tailed.
    pub exponent: f64,
    /// Cap on clicks per query; 0 leaves the power law uncapped. Rendered
    /// corpora want a cap so the image budget stays small; distribution
    /// studies want none.
    pub max_clicks: usize,
    /// Probability that a query reuses an earlier query's concept.
    pub overlap_rate: f64,
    /// Probability that a judgment is replaced by a uniform random grade.
    pub judgment_noise: f64,
    pub seed: u64,
}

impl Default for ClickthroughSynthSpec {
    fn default() -> Self {
        ClickthroughSynthSpec {
            query_count: 60,
            image_count: 700,
            exponent: 1.5,
            max_clicks: 8,
            overlap_rate: 0.15,
            judgment_noise: 0.05,
            seed: 0,
        }
    }
}

impl ClickthroughSynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.query_count == 0 || self.image_count == 0 {
            return Err(Error::Config("query and image counts must be positive".into()));
        }
        if !(self.exponent > 1.0 && self.exponent.is_finite()) {
            return Err(Error::Config(format!(
                "power-law exponent must exceed 1, got {}",
                self.exponent
            )));
        }
        if self.max_clicks != 0 && self.max_clicks < MIN_CLICKS {
            return Err(Error::Config(format!(
                "max_clicks must be 0 (uncapped) or at least {MIN_CLICKS}, got {}",
                self.max_clicks
            )));
        }
        for (name, v) in [("overlap_rate", self.overlap_rate), ("judgment_noise", self.judgment_noise)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// The combinatorial skeleton of a corpus: concept assignments, clicked
/// sets, and pool boundaries — no pixels yet. Concept `k` owns image ids
/// `concept_offsets[k] .. concept_offsets[k + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPlan {
    pub query_concepts: Vec<usize>,
    pub concept_count: usize,
    concept_offsets: Vec<usize>,
    pub clicked: Vec<Vec<usize>>,
}

impl CorpusPlan {
    pub fn image_count(&self) -> usize {
        *self.concept_offsets.last().expect("offsets never empty")
    }

    pub fn concept_pool(&self, concept: usize) -> std::ops::Range<usize> {
        self.concept_offsets[concept]..self.concept_offsets[concept + 1]
    }

    pub fn image_concept(&self, id: usize) -> usize {
        debug_assert!(id < self.image_count());
        self.concept_offsets.partition_point(|&off| off <= id) - 1
    }

    pub fn clicks_per_query(&self) -> Vec<usize> {
        self.clicked.iter().map(|c| c.len()).collect()
    }
}

fn assign_concepts(spec: &ClickthroughSynthSpec) -> (Vec<usize>, usize) {
    let mut concept_rng = rng_for(spec.seed, &[stream::CLICK_CORPUS, 0]);
    let mut query_concepts = Vec::with_capacity(spec.query_count);
    let mut concept_count = 0usize;
    for q in 0..spec.query_count {
        let reuse = q > 0 && concept_rng.r#gen::<f64>() < spec.overlap_rate;
        if reuse {
            let prior = (concept_rng.r#gen::<f64>() * q as f64) as usize;
            query_concepts.push(query_concepts[prior.min(q - 1)]);
        } else {
            query_concepts.push(concept_count);
            concept_count += 1;
        }
    }
    (query_concepts, concept_count)
}

/// Draw the clicks-per-query counts alone. Pareto with lower cutoff
/// [`MIN_CLICKS`]: survival (MIN/x)^(exponent−1), floored, optionally capped.
pub fn sample_click_counts(spec: &ClickthroughSynthSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let alpha = spec.exponent - 1.0;
    let mut click_counts = Vec::with_capacity(spec.query_count);
    for q in 0..spec.query_count {
        let mut rng = rng_for(spec.seed, &[stream::CLICK_CORPUS, 1, q as u64]);
        let u: f64 = rng.r#gen();
        let raw = MIN_CLICKS as f64 * (1.0 - u).powf(-1.0 / alpha);
        let mut count = if raw >= usize::MAX as f64 { usize::MAX / 2 } else { raw.floor() as usize };
        if spec.max_clicks != 0 {
            count = count.min(spec.max_clicks);
        }
        click_counts.push(count.max(MIN_CLICKS));
    }
    Ok(click_counts)
}

/// Lay out concepts, clicks, and pools for a spec. Clicks are drawn first;
/// the plan fails if `image_count` cannot cover the drawn click demand.
pub fn plan_corpus(spec: &ClickthroughSynthSpec) -> Result<CorpusPlan> {
    spec.validate()?;
    let (query_concepts, concept_count) = assign_concepts(spec);
    let click_counts = sample_click_counts(spec)?;

    // Size each pool to its hungriest query plus one unclicked image, then
    // spread the leftover image budget round-robin.
    let mut sizes = vec![MIN_POOL; concept_count];
    for (q, &k) in query_concepts.iter().enumerate() {
        sizes[k] = sizes[k].max(click_counts[q] + 1);
    }
    let demand: usize = sizes.iter().sum();
    if demand > spec.image_count {
        return Err(Error::Config(format!(
            "queries click {demand} images (including pool minimums) but the spec \
             budgets only {}; raise image_count, cap max_clicks, or soften the exponent",
            spec.image_count
        )));
    }
    let left = spec.image_count - demand;
    let (base, rem) = (left / concept_count, left % concept_count);
    for (i, s) in sizes.iter_mut().enumerate() {
        *s += base + usize::from(i < rem);
    }
    let mut concept_offsets = Vec::with_capacity(concept_count + 1);
    let mut acc = 0;
    concept_offsets.push(0);
    for &s in &sizes {
        acc += s;
        concept_offsets.push(acc);
    }

    let mut clicked = Vec::with_capacity(spec.query_count);
    for (q, &k) in query_concepts.iter().enumerate() {
        let start = concept_offsets[k];
        let pool_len = concept_offsets[k + 1] - start;
        let mut rng = rng_for(spec.seed, &[stream::CLICK_CORPUS, 2, q as u64]);
        let picks = sample_without_replacement(&mut rng, pool_len, click_counts[q]);
        clicked.push(picks.into_iter().map(|i| start + i).collect());
    }
    Ok(CorpusPlan { query_concepts, concept_count, concept_offsets, clicked })
}

/// A planned corpus with rendered images.
pub struct ClickCorpus {
    pub spec: ClickthroughSynthSpec,
    pub plan: CorpusPlan,
    pixels: Vec<u8>,
}

const COARSE: usize = 8;
const TEMPLATE_STRENGTH: f64 = 0.4;
const VARIATION: f64 = 0.2;
const NOISE: f64 = 0.04;

pub fn generate(spec: &ClickthroughSynthSpec) -> Result<ClickCorpus> {
    let plan = plan_corpus(spec)?;
    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(plan.concept_count);
    for k in 0..plan.concept_count {
        let mut rng = rng_for(spec.seed, &[stream::CLICK_CORPUS, 3, k as u64]);
        let mut t = Vec::with_capacity(RETRIEVAL_PIXELS);
        for _ in 0..3 {
            t.extend(smooth_field(&mut rng, RETRIEVAL_SIDE, COARSE));
        }
        templates.push(t);
    }
    let mut pixels = Vec::with_capacity(spec.image_count * RETRIEVAL_PIXELS);
    for i in 0..plan.image_count() {
        let k = plan.image_concept(i);
        let mut rng = rng_for(spec.seed, &[stream::CLICK_CORPUS, 4, i as u64]);
        let mut field = Vec::with_capacity(RETRIEVAL_PIXELS);
        for _ in 0..3 {
            field.extend(smooth_field(&mut rng, RETRIEVAL_SIDE, COARSE));
        }
        pixels.extend(templates[k].iter().zip(&field).map(|(&t, &f)| {
            let v = 0.5 + TEMPLATE_STRENGTH * t + VARIATION * f + NOISE * standard_normal(&mut rng);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        }));
    }
    Ok(ClickCorpus { spec: *spec, plan, pixels })
}

impl ClickCorpus {
    pub fn image_count(&self) -> usize {
        self.plan.image_count()
    }

    pub fn query_name(q: usize) -> String {
        format!("q{q:03}")
    }

    pub fn image_pixels(&self, id: usize) -> &[u8] {
        &self.pixels[id * RETRIEVAL_PIXELS..(id + 1) * RETRIEVAL_PIXELS]
    }

    /// Ground-truth grade of an image for a query: clicked Excellent, same
    /// concept Good, otherwise Bad — then flipped to a uniform random grade
    /// with probability `judgment_noise`. Deterministic per (query, image).
    pub fn judgment(&self, q: usize, image: usize) -> Judgment {
        let latent = if self.plan.clicked[q].contains(&image) {
            Judgment::Excellent
        } else if self.plan.image_concept(image) == self.plan.query_concepts[q] {
            Judgment::Good
        } else {
            Judgment::Bad
        };
        if self.spec.judgment_noise > 0.0 {
            let mut rng =
                rng_for(self.spec.seed, &[stream::CLICK_CORPUS, 5, q as u64, image as u64]);
            if rng.r#gen::<f64>() < self.spec.judgment_noise {
                return match (rng.r#gen::<f64>() * 3.0) as usize {
                    0 => Judgment::Excellent,
                    1 => Judgment::Good,
                    _ => Judgment::Bad,
                };
            }
        }
        latent
    }

    /// A query's evaluation candidates: every image of its own concept plus
    /// `extra` seeded draws from the rest of the pool.
    pub fn candidates(&self, q: usize, extra: usize) -> Vec<usize> {
        let concept = self.plan.query_concepts[q];
        let own = self.plan.concept_pool(concept);
        let mut ids: Vec<usize> = own.clone().collect();
        let others: Vec<usize> =
            (0..self.image_count()).filter(|&i| !own.contains(&i)).collect();
        let mut rng = rng_for(self.spec.seed, &[stream::CLICK_CORPUS, 6, q as u64]);
        let take = extra.min(others.len());
        ids.extend(
            sample_without_replacement(&mut rng, others.len(), take)
                .into_iter()
                .map(|i| others[i]),
        );
        ids
    }

    /// Gather images into an `[n, 3, 224, 224]` tensor of [0, 1] reals.
    pub fn images_tensor<T: Scalar>(&self, ids: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(ids.len() * RETRIEVAL_PIXELS);
        for &id in ids {
            data.extend(self.image_pixels(id).iter().map(|&b| T::from_f64(b as f64 / 255.0)));
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&RETRIEVAL_SHAPE);
        Tensor::from_vec(&shape, data).expect("pixel count matches shape")
    }

    pub fn mean_image<T: Scalar>(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(Error::EmptyDataset("mean over no images".into()));
        }
        let mut acc = vec![0.0f64; RETRIEVAL_PIXELS];
        for &id in ids {
            for (a, &b) in acc.iter_mut().zip(self.image_pixels(id)) {
                *a += b as f64 / 255.0;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        let data: Vec<T> = acc.into_iter().map(|a| T::from_f64(a * inv)).collect();
        Ok(Tensor::from_vec(&RETRIEVAL_SHAPE, data).expect("mean matches shape"))
    }

    /// The query's training negatives: one other-concept image per click,
    /// drawn without replacement from everything outside its own pool.
    pub fn negative_ids(&self, q: usize) -> Result<Vec<usize>> {
        let pos = &self.plan.clicked[q];
        let own = self.plan.concept_pool(self.plan.query_concepts[q]);
        let others: Vec<usize> =
            (0..self.image_count()).filter(|&i| !own.contains(&i)).collect();
        if others.len() < pos.len() {
            return Err(Error::Data(format!(
                "query {q} needs {} negatives but only {} foreign images exist",
                pos.len(),
                others.len()
            )));
        }
        let mut rng = rng_for(self.spec.seed, &[stream::CLICK_CORPUS, 7, q as u64]);
        Ok(sample_without_replacement(&mut rng, others.len(), pos.len())
            .into_iter()
            .map(|i| others[i])
            .collect())
    }

    /// Binary training tasks for a subset of queries: clicked images are
    /// positives, an equal count of other-concept images negatives.
    pub fn task_examples<T: Scalar>(&self, queries: &[usize]) -> Result<Vec<TaskExamples<T>>> {
        queries
            .iter()
            .map(|&q| {
                let pos = &self.plan.clicked[q];
                let negs = self.negative_ids(q)?;
                let ids: Vec<usize> = pos.iter().chain(&negs).copied().collect();
                let mut labels = vec![1usize; pos.len()];
                labels.extend(std::iter::repeat(0).take(negs.len()));
                Ok(TaskExamples {
                    task: Self::query_name(q),
                    train_images: self.images_tensor(&ids),
                    train_labels: labels,
                    test_images: self.images_tensor(&[]),
                    test_labels: Vec::new(),
                })
            })
            .collect()
    }
}
