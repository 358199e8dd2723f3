//! Inverted dropout: surviving units are scaled by 1/(1-rate) at train time
//! so inference is a plain identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which units survived one forward pass, with the survivor scale baked in.
pub struct DropoutMask {
    keep: Vec<bool>,
    scale: f64,
}

impl DropoutMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Train-time forward returns the mask used; inference (or rate 0) is the
/// identity and returns no mask.
pub fn dropout_forward<T: Scalar>(
    input: &Tensor<T>,
    rate: f64,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<(Tensor<T>, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArg(format!("dropout rate {rate} outside [0,1)")));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let scale = 1.0 / (1.0 - rate);
    let scale_t = T::from_f64(scale);
    let mut out = input.clone();
    let mut keep = vec![true; input.len()];
    for (v, k) in out.data_mut().iter_mut().zip(keep.iter_mut()) {
        // Draw in f64 so the stream is identical across scalar types.
        if rng.r#gen::<f64>() < rate {
            *v = T::zero();
            *k = false;
        } else {
            *v *= scale_t;
        }
    }
    Ok((out, Some(DropoutMask { keep, scale })))
}

pub fn dropout_backward<T: Scalar>(
    mask: Option<&DropoutMask>,
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    let Some(mask) = mask else {
        return Ok(grad_output.clone());
    };
    if mask.keep.len() != grad_output.len() {
        return Err(Error::shape(
            "dropout grad_output",
            format!("{} elements", mask.keep.len()),
            grad_output.len().to_string(),
        ));
    }
    let scale = T::from_f64(mask.scale);
    let mut out = grad_output.clone();
    for (g, &k) in out.data_mut().iter_mut().zip(&mask.keep) {
        if k {
            *g *= scale;
        } else {
            *g = T::zero();
        }
    }
    Ok(out)
}
