//! Elementwise rectifier. Subgradient at exactly zero is zero.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_output.shape() {
        return Err(Error::shape(
            "relu grad_output",
            format!("{:?}", input.shape()),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let mut out = grad_output.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives_passes_positives() {
        let input = Tensor::from_vec(&[4], vec![-1.0f64, 0.0, 0.5, 2.0]).unwrap();
        let out = relu_forward(&input);
        assert_eq!(out.data(), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn gradient_masks_non_positive_inputs() {
        let input = Tensor::from_vec(&[4], vec![-1.0f64, 0.0, 0.5, 2.0]).unwrap();
        let go = Tensor::filled(&[4], 3.0f64);
        let gi = relu_backward(&input, &go).unwrap();
        assert_eq!(gi.data(), &[0.0, 0.0, 3.0, 3.0]);
    }
}
