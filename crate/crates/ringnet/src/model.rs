//! Model assembly: a shared trunk of layers below `split_index` plus one
//! parameter head per task for the layers at/above it.
//!
//! The same structure expresses all three competing architectures:
//! `split_index == 0` gives independent per-task networks, `split_index ==
//! layers.len()` gives a single fully-shared classifier (one empty head; the
//! trunk output is the logit vector), and anything in between shares a trunk
//! while keeping per-task heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    layer_backward, layer_forward, softmax_logloss, softmax_probs, LayerCache, LayerParams,
    LayerSpec, Phase,
};
use crate::rng::{rng_for, standard_normal, stream};
use crate::tensor::{elem_count, Scalar, Tensor};

/// Weight init: zero-mean Gaussian scaled to the layer's fan-in
/// (sigma = sqrt(2/fan_in)), biases zero. A fixed sigma leaves a deep
/// relu stack's logits orders of magnitude below the hinge of the loss
/// on unit-range inputs; fan-in scaling keeps activations order-one.
pub fn init_sigma(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-example input shape, e.g. [3,32,32].
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Layers below this index are shared; layers at/above it belong to each
    /// task's head. 0 = nothing shared, layers.len() = everything shared.
    pub split_index: usize,
    /// Output units per head (2 for two-way softmax; the class count for a
    /// fully-shared classifier).
    pub head_output: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {:?} must be non-empty and positive",
                self.input_shape
            )));
        }
        if self.split_index > self.layers.len() {
            return Err(Error::Config(format!(
                "split index {} beyond layer count {}",
                self.split_index,
                self.layers.len()
            )));
        }
        if self.head_output == 0 {
            return Err(Error::Config("head output must be >= 1".into()));
        }
        let shapes = self.shape_chain()?;
        let final_shape = shapes.last().unwrap();
        if *final_shape != vec![self.head_output] {
            return Err(Error::shape(
                "model output",
                format!("[{}]", self.head_output),
                format!("{final_shape:?}"),
            ));
        }
        Ok(())
    }

    /// Per-example shapes after each layer; index 0 is the input shape.
    /// Errors on the first inconsistent layer pair.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            let next = layer.output_shape(shapes.last().unwrap()).map_err(|e| {
                Error::Config(format!("layer {i} ({}): {e}", layer.name()))
            })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn trunk_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.split_index]
    }

    pub fn head_layers(&self) -> &[LayerSpec] {
        &self.layers[self.split_index..]
    }

    /// Shape entering the head stack = shared feature shape.
    pub fn feature_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shape_chain()?[self.split_index].clone())
    }
}

/// The 32x32 classifier: three conv blocks then a fully-connected output.
/// Spatial chain 32 -> 15 -> 7 -> 3, so the final conv feeds 64*3*3 = 576
/// features to the output layer.
pub fn build_cifar_config() -> ModelConfig {
    let layers = vec![
        LayerSpec::Conv { filters: 32, kernel: 5, stride: 1, pad: 2 },
        LayerSpec::MaxPool { window: 3, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::Conv { filters: 32, kernel: 5, stride: 1, pad: 2 },
        LayerSpec::Relu,
        LayerSpec::AvgPool { window: 3, stride: 2 },
        LayerSpec::Conv { filters: 64, kernel: 5, stride: 1, pad: 2 },
        LayerSpec::Relu,
        LayerSpec::AvgPool { window: 3, stride: 2 },
        LayerSpec::FullyConnected { units: 2 },
    ];
    let split_index = layers.len() - 1;
    ModelConfig { input_shape: vec![3, 32, 32], layers, split_index, head_output: 2 }
}

/// Same trunk as [`build_cifar_config`] but fully shared with a single
/// `classes`-way output layer.
pub fn build_cifar_multiclass_config(classes: usize) -> ModelConfig {
    let mut config = build_cifar_config();
    if let Some(LayerSpec::FullyConnected { units }) = config.layers.last_mut() {
        *units = classes;
    }
    config.split_index = config.layers.len();
    config.head_output = classes;
    config
}

/// Independent per-task networks: the full 32x32 stack with nothing shared.
pub fn build_cifar_binary_config() -> ModelConfig {
    let mut config = build_cifar_config();
    config.split_index = 0;
    config
}

/// The 224x224 retrieval network: five conv layers and the first
/// fully-connected layer (4096 units, ReLU, dropout 0.5) are shared; each
/// head is a 4096 -> 2 output layer. Spatial chain 224 -> 55 -> 27 -> 13 -> 6.
pub fn build_retrieval_config() -> ModelConfig {
    let layers = vec![
        LayerSpec::Conv { filters: 96, kernel: 11, stride: 4, pad: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 3, stride: 2 },
        LayerSpec::response_norm_default(),
        LayerSpec::Conv { filters: 256, kernel: 5, stride: 1, pad: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 3, stride: 2 },
        LayerSpec::response_norm_default(),
        LayerSpec::Conv { filters: 384, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv { filters: 384, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv { filters: 384, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 3, stride: 2 },
        LayerSpec::FullyConnected { units: 4096 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::FullyConnected { units: 2 },
    ];
    let split_index = layers.len() - 1;
    ModelConfig { input_shape: vec![3, 224, 224], layers, split_index, head_output: 2 }
}

/// Mean image(s) subtracted from inputs before the first layer. Independent
/// per-task networks center with their own training mean; shared-trunk and
/// fully-shared models use one global mean so a given image produces the same
/// features regardless of which task asks.
#[derive(Clone, Debug, PartialEq)]
pub enum Centering<T: Scalar> {
    None,
    Global(Tensor<T>),
    /// Parallel to head registration order.
    PerTask(Vec<Tensor<T>>),
}

#[derive(Clone)]
pub struct TaskHead<T: Scalar> {
    pub task: String,
    pub params: Vec<LayerParams<T>>,
}

#[derive(Clone)]
pub struct MultiTaskModel<T: Scalar> {
    pub config: ModelConfig,
    pub trunk: Vec<LayerParams<T>>,
    pub heads: Vec<TaskHead<T>>,
    pub centering: Centering<T>,
    pub seed: u64,
}

/// Per-layer parameter gradients for one task's full stack.
pub struct StackGrads<T: Scalar> {
    pub trunk: Vec<LayerParams<T>>,
    pub head: Vec<LayerParams<T>>,
}

/// One task's examples as a dense batch: labels are class indices (relevant
/// = 1, irrelevant = 0 for two-way heads).
pub struct TaskBatch<T: Scalar> {
    pub task: String,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

fn init_params<T: Scalar>(
    layers: &[LayerSpec],
    shapes: &[Vec<usize>],
    seed: u64,
    owner: &[u64],
) -> Vec<LayerParams<T>> {
    layers
        .iter()
        .enumerate()
        .map(|(i, layer)| match layer.param_shapes(&shapes[i]) {
            Some((w_shape, b_len)) => {
                let mut labels = vec![stream::MODEL_INIT];
                labels.extend_from_slice(owner);
                labels.push(i as u64);
                let mut rng = rng_for(seed, &labels);
                let count = elem_count(&w_shape);
                // Fan-in is everything one output unit reads: channels x
                // kernel^2 for conv, the input width for fully-connected.
                let sigma = init_sigma(elem_count(&w_shape[1..]));
                let data: Vec<T> = (0..count)
                    .map(|_| T::from_f64(standard_normal(&mut rng) * sigma))
                    .collect();
                LayerParams {
                    weights: Some(Tensor::from_vec(&w_shape, data).unwrap()),
                    bias: Some(Tensor::zeros(&[b_len])),
                }
            }
            None => LayerParams::none(),
        })
        .collect()
}

impl<T: Scalar> MultiTaskModel<T> {
    /// Build a model with freshly initialized trunk and one head per task.
    /// A fully-shared config gets exactly one (empty-parameter) head.
    pub fn new(config: ModelConfig, seed: u64, tasks: &[String]) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::InvalidArg("a model needs at least one task".into()));
        }
        if config.split_index == config.layers.len() && tasks.len() != 1 {
            return Err(Error::Config(format!(
                "fully-shared model takes exactly one task, got {}",
                tasks.len()
            )));
        }
        {
            let mut seen = std::collections::BTreeSet::new();
            for t in tasks {
                if !seen.insert(t) {
                    return Err(Error::InvalidArg(format!("duplicate task id {t:?}")));
                }
            }
        }
        let shapes = config.shape_chain()?;
        let trunk =
            init_params(config.trunk_layers(), &shapes[..config.split_index + 1], seed, &[0]);
        let head_shapes = &shapes[config.split_index..];
        // Head streams key on task identity, not position: the same task gets
        // the same initial head whether it trains alone or alongside others.
        let heads = tasks
            .iter()
            .map(|task| TaskHead {
                task: task.clone(),
                params: init_params(
                    config.head_layers(),
                    head_shapes,
                    seed,
                    &[1, crate::rng::task_label(task)],
                ),
            })
            .collect();
        Ok(MultiTaskModel { config, trunk, heads, centering: Centering::None, seed })
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.heads.iter().map(|h| h.task.as_str()).collect()
    }

    pub fn head_index(&self, task: &str) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.task == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn set_centering(&mut self, centering: Centering<T>) -> Result<()> {
        match &centering {
            Centering::None => {}
            Centering::Global(mean) => {
                if mean.shape() != self.config.input_shape {
                    return Err(Error::shape(
                        "global mean image",
                        format!("{:?}", self.config.input_shape),
                        format!("{:?}", mean.shape()),
                    ));
                }
            }
            Centering::PerTask(means) => {
                if means.len() != self.heads.len() {
                    return Err(Error::shape(
                        "per-task mean images",
                        format!("{} tasks", self.heads.len()),
                        means.len().to_string(),
                    ));
                }
                for mean in means {
                    if mean.shape() != self.config.input_shape {
                        return Err(Error::shape(
                            "per-task mean image",
                            format!("{:?}", self.config.input_shape),
                            format!("{:?}", mean.shape()),
                        ));
                    }
                }
            }
        }
        self.centering = centering;
        Ok(())
    }

    fn check_batch_shape(&self, images: &Tensor<T>) -> Result<usize> {
        let shape = images.shape();
        if shape.len() != self.config.input_shape.len() + 1
            || shape[1..] != self.config.input_shape[..]
        {
            return Err(Error::shape(
                "image batch",
                format!("[N, {:?}]", self.config.input_shape),
                format!("{shape:?}"),
            ));
        }
        Ok(shape[0])
    }

    /// Subtract the mean image appropriate for `head_idx` (ignored unless
    /// centering is per-task).
    fn centered(&self, head_idx: Option<usize>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_batch_shape(images)?;
        let mean = match (&self.centering, head_idx) {
            (Centering::None, _) => return Ok(images.clone()),
            (Centering::Global(mean), _) => mean,
            (Centering::PerTask(means), Some(idx)) => &means[idx],
            (Centering::PerTask(_), None) => {
                return Err(Error::InvalidArg(
                    "per-task centering needs a task context".into(),
                ))
            }
        };
        let mut out = images.clone();
        let stride = mean.len();
        for img in 0..n {
            let slot = &mut out.data_mut()[img * stride..(img + 1) * stride];
            for (v, &m) in slot.iter_mut().zip(mean.data()) {
                *v -= m;
            }
        }
        Ok(out)
    }

    fn run_stack(
        layers: &[LayerSpec],
        params: &[LayerParams<T>],
        input: Tensor<T>,
        phase: &mut Phase<'_>,
        caches: Option<&mut Vec<LayerCache<T>>>,
    ) -> Result<Tensor<T>> {
        debug_assert_eq!(layers.len(), params.len());
        let mut current = input;
        let mut caches = caches;
        for (layer, p) in layers.iter().zip(params) {
            let (next, cache) = layer_forward(layer, p, &current, phase)?;
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            current = next;
        }
        Ok(current)
    }

    /// Features from the shared layers, inference mode. Identical for every
    /// task by construction. With nothing shared this is the (globally
    /// centered) input itself.
    pub fn forward_shared(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let centered = self.centered(None, images)?;
        Self::run_stack(
            self.config.trunk_layers(),
            &self.trunk,
            centered,
            &mut Phase::Eval,
            None,
        )
    }

    /// Head logits [N, head_output] for one task, inference mode.
    pub fn task_logits(&self, task: &str, images: &Tensor<T>) -> Result<Tensor<T>> {
        let idx = self.head_index(task)?;
        self.head_logits(idx, images)
    }

    pub fn head_logits(&self, head_idx: usize, images: &Tensor<T>) -> Result<Tensor<T>> {
        let centered = self.centered(Some(head_idx), images)?;
        let features = Self::run_stack(
            self.config.trunk_layers(),
            &self.trunk,
            centered,
            &mut Phase::Eval,
            None,
        )?;
        Self::run_stack(
            self.config.head_layers(),
            &self.heads[head_idx].params,
            features,
            &mut Phase::Eval,
            None,
        )
    }

    /// Relevance score per image: softmax probability of class 1 from the
    /// task's two-way head.
    pub fn relevance(&self, task: &str, images: &Tensor<T>) -> Result<Vec<f64>> {
        if self.config.head_output != 2 {
            return Err(Error::InvalidArg(format!(
                "relevance needs a two-way head, this model outputs {}",
                self.config.head_output
            )));
        }
        let logits = self.task_logits(task, images)?;
        let probs = softmax_probs(&logits)?;
        Ok((0..probs.shape()[0]).map(|i| probs.at(&[i, 1]).to_f64()).collect())
    }

    /// Class prediction per image. Fully-shared models take the argmax of
    /// their logits; everything else takes the argmax of per-task relevance
    /// over heads in registration order. Ties resolve to the lowest index.
    pub fn predict_class(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        if self.heads.is_empty() {
            return Err(Error::InvalidArg("no task heads registered".into()));
        }
        let n = self.check_batch_shape(images)?;
        if self.config.split_index == self.config.layers.len() {
            let logits = self.head_logits(0, images)?;
            let k = self.config.head_output;
            return Ok((0..n)
                .map(|i| {
                    let row = &logits.data()[i * k..(i + 1) * k];
                    argmax(row.iter().map(|&v| v.to_f64()))
                })
                .collect());
        }
        let mut best = vec![(f64::NEG_INFINITY, 0usize); n];
        for (hi, head) in self.heads.iter().enumerate() {
            let scores = self.relevance(&head.task, images)?;
            for (slot, s) in best.iter_mut().zip(scores) {
                if s > slot.0 {
                    *slot = (s, hi);
                }
            }
        }
        Ok(best.into_iter().map(|(_, hi)| hi).collect())
    }

    /// Training forward for one task: dropout live, every layer's state
    /// recorded. Returns logits plus the caches needed by [`Self::backward`].
    pub fn forward_train(
        &self,
        head_idx: usize,
        images: &Tensor<T>,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        if head_idx >= self.heads.len() {
            return Err(Error::UnknownTask(format!("head index {head_idx}")));
        }
        let centered = self.centered(Some(head_idx), images)?;
        let mut caches = Vec::with_capacity(self.config.layers.len());
        let mut phase = Phase::Train(rng);
        let features = Self::run_stack(
            self.config.trunk_layers(),
            &self.trunk,
            centered,
            &mut phase,
            Some(&mut caches),
        )?;
        let logits = Self::run_stack(
            self.config.head_layers(),
            &self.heads[head_idx].params,
            features,
            &mut phase,
            Some(&mut caches),
        )?;
        Ok((logits, caches))
    }

    /// Inference-mode forward that still records per-layer state. The
    /// gradient checker uses this so stochastic layers stay frozen while the
    /// backward pass under test is the same one training uses.
    pub fn forward_recorded_eval(
        &self,
        head_idx: usize,
        images: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        if head_idx >= self.heads.len() {
            return Err(Error::UnknownTask(format!("head index {head_idx}")));
        }
        let centered = self.centered(Some(head_idx), images)?;
        let mut caches = Vec::with_capacity(self.config.layers.len());
        let mut phase = Phase::Eval;
        let features = Self::run_stack(
            self.config.trunk_layers(),
            &self.trunk,
            centered,
            &mut phase,
            Some(&mut caches),
        )?;
        let logits = Self::run_stack(
            self.config.head_layers(),
            &self.heads[head_idx].params,
            features,
            &mut phase,
            Some(&mut caches),
        )?;
        Ok((logits, caches))
    }

    /// Reverse pass from d(loss)/d(logits) through head then trunk.
    pub fn backward(
        &self,
        head_idx: usize,
        caches: &[LayerCache<T>],
        grad_logits: &Tensor<T>,
    ) -> Result<StackGrads<T>> {
        if caches.len() != self.config.layers.len() {
            return Err(Error::InvalidArg(format!(
                "expected {} layer caches, got {}",
                self.config.layers.len(),
                caches.len()
            )));
        }
        let split = self.config.split_index;
        let mut trunk_grads: Vec<LayerParams<T>> = Vec::with_capacity(split);
        let mut head_grads: Vec<LayerParams<T>> = Vec::with_capacity(caches.len() - split);
        let mut grad = grad_logits.clone();
        for (i, layer) in self.config.layers.iter().enumerate().rev() {
            let params = if i < split {
                &self.trunk[i]
            } else {
                &self.heads[head_idx].params[i - split]
            };
            let lg = layer_backward(layer, params, &caches[i], &grad)?;
            grad = lg.input;
            let pg = LayerParams { weights: lg.weights, bias: lg.bias };
            if i < split {
                trunk_grads.push(pg);
            } else {
                head_grads.push(pg);
            }
        }
        trunk_grads.reverse();
        head_grads.reverse();
        Ok(StackGrads { trunk: trunk_grads, head: head_grads })
    }

    /// Mean loss over every task's examples: (1/N) * sum over tasks and
    /// examples of the two-way log loss, N = total example count. Inference
    /// mode, accumulated in f64, batched internally — so the value is
    /// independent of how callers split their data.
    pub fn objective(&self, data: &[TaskBatch<T>], batch: usize) -> Result<f64> {
        if batch == 0 {
            return Err(Error::InvalidArg("objective batch size must be >= 1".into()));
        }
        let mut total_examples = 0usize;
        let mut total_loss = 0.0f64;
        for tb in data {
            let idx = self.head_index(&tb.task)?;
            let n = self.check_batch_shape(&tb.images)?;
            if tb.labels.len() != n {
                return Err(Error::shape(
                    "task labels",
                    format!("{n} labels"),
                    tb.labels.len().to_string(),
                ));
            }
            let stride: usize = self.config.input_shape.iter().product();
            let mut start = 0usize;
            while start < n {
                let end = (start + batch).min(n);
                let chunk = Tensor::from_vec(
                    &batch_shape(&self.config.input_shape, end - start),
                    tb.images.data()[start * stride..end * stride].to_vec(),
                )?;
                let logits = self.head_logits_batch(idx, &chunk)?;
                let (loss, _) = softmax_logloss(&logits, &tb.labels[start..end])?;
                total_loss += loss * (end - start) as f64;
                start = end;
            }
            total_examples += n;
        }
        if total_examples == 0 {
            return Err(Error::EmptyDataset("objective over zero examples".into()));
        }
        Ok(total_loss / total_examples as f64)
    }

    fn head_logits_batch(&self, head_idx: usize, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.head_logits(head_idx, images)
    }

    /// Total parameter count across trunk and all heads.
    pub fn param_count(&self) -> usize {
        self.trunk.iter().map(|p| p.param_count()).sum::<usize>()
            + self
                .heads
                .iter()
                .map(|h| h.params.iter().map(|p| p.param_count()).sum::<usize>())
                .sum::<usize>()
    }
}

pub fn batch_shape(per_example: &[usize], n: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(per_example.len() + 1);
    s.push(n);
    s.extend_from_slice(per_example);
    s
}

pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    best_idx
}
