//! Layer vocabulary: forward/backward kernels for every layer type the
//! supported architectures use.
//!
//! Kernels are pure functions over their inputs. Stateful pieces (pool winner
//! indices, dropout masks, cached inputs) travel in explicit cache values so
//! a forward pass can be replayed backward without hidden state.

mod conv;
mod dropout;
mod fc;
mod pool;
mod relu;
mod response_norm;
mod softmax;

pub use conv::{conv2d_backward, conv2d_forward, conv_out_side};
pub use dropout::{dropout_backward, dropout_forward, DropoutMask};
pub use fc::{fc_backward, fc_forward};
pub use pool::{pool_backward, pool_forward, PoolCache, PoolMode};
pub use relu::{relu_backward, relu_forward};
pub use response_norm::{response_norm_backward, response_norm_forward};
pub use softmax::{softmax_logloss, softmax_probs};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Response-normalization defaults (across-channel, AlexNet-style constants).
pub const RNORM_DEFAULT_K: f64 = 2.0;
pub const RNORM_DEFAULT_N: usize = 5;
pub const RNORM_DEFAULT_ALPHA: f64 = 1e-4;
pub const RNORM_DEFAULT_BETA: f64 = 0.75;

/// One layer in an architecture. Each kind carries exactly the hyperparameters
/// that apply to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Relu,
    FullyConnected {
        units: usize,
    },
    Dropout {
        rate: f64,
    },
    ResponseNorm {
        k: f64,
        n: usize,
        alpha: f64,
        beta: f64,
    },
    /// Terminal loss layer. Never appears inside a model's layer stack; the
    /// loss site applies it to the head logits. Present in the vocabulary so
    /// the gradient checker can exercise it like any other layer.
    SoftmaxLogLoss,
}

impl LayerSpec {
    pub fn response_norm_default() -> LayerSpec {
        LayerSpec::ResponseNorm {
            k: RNORM_DEFAULT_K,
            n: RNORM_DEFAULT_N,
            alpha: RNORM_DEFAULT_ALPHA,
            beta: RNORM_DEFAULT_BETA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "max-pool",
            LayerSpec::AvgPool { .. } => "avg-pool",
            LayerSpec::Relu => "relu",
            LayerSpec::FullyConnected { .. } => "fully-connected",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::ResponseNorm { .. } => "response-norm",
            LayerSpec::SoftmaxLogLoss => "softmax-logloss",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv { filters, kernel, stride, .. } => {
                if filters == 0 || kernel == 0 {
                    return Err(Error::Config("conv needs filters >= 1 and kernel >= 1".into()));
                }
                if stride == 0 {
                    return Err(Error::Config("conv stride must be >= 1".into()));
                }
            }
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(Error::Config("pool needs window >= 1 and stride >= 1".into()));
                }
            }
            LayerSpec::FullyConnected { units } => {
                if units == 0 {
                    return Err(Error::Config("fully-connected needs units >= 1".into()));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
                }
            }
            LayerSpec::ResponseNorm { n, beta, .. } => {
                if n == 0 || beta <= 0.0 {
                    return Err(Error::Config("response-norm needs n >= 1 and beta > 0".into()));
                }
            }
            LayerSpec::Relu | LayerSpec::SoftmaxLogLoss => {}
        }
        Ok(())
    }

    /// Per-example output shape given a per-example input shape ([C,H,W] for
    /// spatial layers, [D] after flattening).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |ctx: &str| -> Result<(usize, usize, usize)> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                other => Err(Error::shape(ctx, "[C,H,W]", format!("{other:?}"))),
            }
        };
        match *self {
            LayerSpec::Conv { filters, kernel, stride, pad } => {
                let (_, h, w) = spatial("conv input")?;
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(Error::shape(
                        "conv input",
                        format!("spatial side + 2*{pad} >= {kernel}"),
                        format!("{h}x{w}"),
                    ));
                }
                Ok(vec![
                    filters,
                    conv_out_side(h, kernel, stride, pad),
                    conv_out_side(w, kernel, stride, pad),
                ])
            }
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                let (c, h, w) = spatial("pool input")?;
                if h < window || w < window {
                    return Err(Error::shape(
                        "pool input",
                        format!("spatial side >= {window}"),
                        format!("{h}x{w}"),
                    ));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::ResponseNorm { .. } => {
                spatial("response-norm input")?;
                Ok(input.to_vec())
            }
            LayerSpec::FullyConnected { units } => Ok(vec![units]),
            LayerSpec::SoftmaxLogLoss => Ok(input.to_vec()),
        }
    }

    /// Weight/bias shapes for parameterized layers, given the per-example
    /// input shape. `None` for parameterless layers.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv { filters, kernel, .. } => {
                let c = input[0];
                Some((vec![filters, c, kernel, kernel], filters))
            }
            LayerSpec::FullyConnected { units } => {
                let d: usize = input.iter().product();
                Some((vec![d, units], units))
            }
            _ => None,
        }
    }
}

/// Weights and bias for one layer. Both absent for parameterless layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Scalar> {
    pub weights: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn none() -> Self {
        LayerParams { weights: None, bias: None }
    }

    pub fn zeros_like(other: &LayerParams<T>) -> Self {
        LayerParams {
            weights: other.weights.as_ref().map(|w| Tensor::zeros(w.shape())),
            bias: other.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_ref().map_or(0, |w| w.len()) + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// Gradients produced by one backward step. Weight/bias slots mirror the
/// layer's parameters and are absent for parameterless layers.
#[derive(Clone, Debug)]
pub struct LayerGrad<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Forward-pass state a layer needs for its backward step.
pub enum LayerCache<T: Scalar> {
    None,
    /// The layer's input (conv, fc, relu, response-norm).
    Input(Tensor<T>),
    Pool(PoolCache),
    /// `None` when dropout ran as identity (inference or rate 0).
    Dropout(Option<DropoutMask>),
}

/// Whether a forward pass is part of training (dropout active) or inference.
pub enum Phase<'r> {
    Train(&'r mut rand_chacha::ChaCha8Rng),
    Eval,
}

pub fn layer_forward<T: Scalar>(
    spec: &LayerSpec,
    params: &LayerParams<T>,
    input: &Tensor<T>,
    phase: &mut Phase<'_>,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    match *spec {
        LayerSpec::Conv { stride, pad, .. } => {
            let w = params.weights.as_ref().ok_or_else(|| missing_params("conv"))?;
            let b = params.bias.as_ref().ok_or_else(|| missing_params("conv"))?;
            let out = conv2d_forward(input, w, b.data(), stride, pad)?;
            Ok((out, LayerCache::Input(input.clone())))
        }
        LayerSpec::MaxPool { window, stride } => {
            let (out, cache) = pool_forward(input, PoolMode::Max, window, stride)?;
            Ok((out, LayerCache::Pool(cache)))
        }
        LayerSpec::AvgPool { window, stride } => {
            let (out, cache) = pool_forward(input, PoolMode::Avg, window, stride)?;
            Ok((out, LayerCache::Pool(cache)))
        }
        LayerSpec::Relu => Ok((relu_forward(input), LayerCache::Input(input.clone()))),
        LayerSpec::FullyConnected { .. } => {
            let w = params.weights.as_ref().ok_or_else(|| missing_params("fully-connected"))?;
            let b = params.bias.as_ref().ok_or_else(|| missing_params("fully-connected"))?;
            let out = fc_forward(input, w, b.data())?;
            Ok((out, LayerCache::Input(input.clone())))
        }
        LayerSpec::Dropout { rate } => {
            let (out, mask) = match phase {
                Phase::Train(rng) => dropout_forward(input, rate, rng, true)?,
                Phase::Eval => {
                    let mut unused = crate::rng::rng_for(0, &[crate::rng::stream::DROPOUT]);
                    dropout_forward(input, rate, &mut unused, false)?
                }
            };
            Ok((out, LayerCache::Dropout(mask)))
        }
        LayerSpec::ResponseNorm { k, n, alpha, beta } => {
            let out = response_norm_forward(input, k, n, alpha, beta)?;
            Ok((out, LayerCache::Input(input.clone())))
        }
        LayerSpec::SoftmaxLogLoss => Err(Error::Config(
            "softmax-logloss is applied at the loss site, not inside a layer stack".into(),
        )),
    }
}

pub fn layer_backward<T: Scalar>(
    spec: &LayerSpec,
    params: &LayerParams<T>,
    cache: &LayerCache<T>,
    grad_output: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    match *spec {
        LayerSpec::Conv { stride, pad, .. } => {
            let input = cached_input(cache, "conv")?;
            let w = params.weights.as_ref().ok_or_else(|| missing_params("conv"))?;
            conv2d_backward(input, w, stride, pad, grad_output)
        }
        LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. } => {
            let cache = match cache {
                LayerCache::Pool(c) => c,
                _ => return Err(Error::InvalidArg("pool backward without recorded forward state".into())),
            };
            let input = pool_backward(cache, grad_output)?;
            Ok(LayerGrad { input, weights: None, bias: None })
        }
        LayerSpec::Relu => {
            let input = cached_input(cache, "relu")?;
            Ok(LayerGrad {
                input: relu_backward(input, grad_output)?,
                weights: None,
                bias: None,
            })
        }
        LayerSpec::FullyConnected { .. } => {
            let input = cached_input(cache, "fully-connected")?;
            let w = params.weights.as_ref().ok_or_else(|| missing_params("fully-connected"))?;
            fc_backward(input, w, grad_output)
        }
        LayerSpec::Dropout { .. } => {
            let mask = match cache {
                LayerCache::Dropout(m) => m,
                _ => return Err(Error::InvalidArg("dropout backward without recorded mask".into())),
            };
            Ok(LayerGrad {
                input: dropout_backward(mask.as_ref(), grad_output)?,
                weights: None,
                bias: None,
            })
        }
        LayerSpec::ResponseNorm { k, n, alpha, beta } => {
            let input = cached_input(cache, "response-norm")?;
            Ok(LayerGrad {
                input: response_norm_backward(input, k, n, alpha, beta, grad_output)?,
                weights: None,
                bias: None,
            })
        }
        LayerSpec::SoftmaxLogLoss => Err(Error::Config(
            "softmax-logloss is applied at the loss site, not inside a layer stack".into(),
        )),
    }
}

fn cached_input<'a, T: Scalar>(cache: &'a LayerCache<T>, layer: &str) -> Result<&'a Tensor<T>> {
    match cache {
        LayerCache::Input(t) => Ok(t),
        _ => Err(Error::InvalidArg(format!("{layer} backward without recorded forward state"))),
    }
}

fn missing_params(layer: &str) -> Error {
    Error::InvalidArg(format!("{layer} layer invoked without parameters"))
}
