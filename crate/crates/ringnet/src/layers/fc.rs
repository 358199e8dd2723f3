//! Fully-connected layer. Input of any per-example shape is flattened
//! row-major to [N,D]; weights are [D,K], bias [K], output [N,K].

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::LayerGrad;

fn flat_dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if input.shape().is_empty() {
        return Err(Error::shape("fc input", "[N,...]", "[]"));
    }
    let n = input.shape()[0];
    let d_in = if n == 0 { 0 } else { input.len() / n };
    let (d, k) = match *weights.shape() {
        [d, k] => (d, k),
        ref other => return Err(Error::shape("fc weights", "[D,K]", format!("{other:?}"))),
    };
    if d_in != d {
        return Err(Error::shape(
            "fc input",
            format!("{d} features per example"),
            d_in.to_string(),
        ));
    }
    Ok((n, d, k))
}

pub fn fc_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (n, d, k) = flat_dims(input, weights)?;
    if bias.len() != k {
        return Err(Error::shape("fc bias", format!("{k} entries"), bias.len().to_string()));
    }
    let mut out = Tensor::zeros(&[n, k]);
    // [N,D] x [D,K] -> [N,K]
    unsafe {
        T::gemm(
            n,
            d,
            k,
            T::one(),
            input.data().as_ptr(),
            d as isize,
            1,
            weights.data().as_ptr(),
            k as isize,
            1,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            k as isize,
            1,
        );
    }
    for row in 0..n {
        let slot = &mut out.data_mut()[row * k..(row + 1) * k];
        for (v, &b) in slot.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn fc_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let (n, d, k) = flat_dims(input, weights)?;
    if grad_output.shape() != [n, k] {
        return Err(Error::shape(
            "fc grad_output",
            format!("[{n}, {k}]"),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = vec![T::zero(); k];
    // dX = GO [N,K] x W^T [K,D]
    unsafe {
        T::gemm(
            n,
            k,
            d,
            T::one(),
            grad_output.data().as_ptr(),
            k as isize,
            1,
            weights.data().as_ptr(),
            1,
            k as isize,
            T::zero(),
            grad_input.data_mut().as_mut_ptr(),
            d as isize,
            1,
        );
    }
    // dW = X^T [D,N] x GO [N,K]
    unsafe {
        T::gemm(
            d,
            n,
            k,
            T::one(),
            input.data().as_ptr(),
            1,
            d as isize,
            grad_output.data().as_ptr(),
            k as isize,
            1,
            T::zero(),
            grad_weights.data_mut().as_mut_ptr(),
            k as isize,
            1,
        );
    }
    for row in 0..n {
        for (acc, &g) in grad_bias.iter_mut().zip(&grad_output.data()[row * k..(row + 1) * k]) {
            *acc += g;
        }
    }
    Ok(LayerGrad {
        input: grad_input,
        weights: Some(grad_weights),
        bias: Some(Tensor::from_vec(&[k], grad_bias)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let input = Tensor::from_vec(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let mut weights = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            weights.set(&[i, i], 1.0);
        }
        let out = fc_forward(&input, &weights, &[0.0; 3]).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn bias_adds_per_output_unit() {
        let input = Tensor::from_vec(&[2, 2], vec![1.0f64, 1.0, -1.0, -1.0]).unwrap();
        let weights = Tensor::zeros(&[2, 3]);
        let out = fc_forward(&input, &weights, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn spatial_input_flattens_row_major() {
        // [1,1,2,2] flattens to 4 features in row-major order; weight picks
        // out the last feature.
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let weights = Tensor::from_vec(&[4, 1], vec![0.0f64, 0.0, 0.0, 1.0]).unwrap();
        let out = fc_forward(&input, &weights, &[0.0]).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn backward_shapes_mirror_parameters() {
        let input = Tensor::filled(&[2, 1, 2, 2], 1.0f64);
        let weights = Tensor::filled(&[4, 3], 0.5f64);
        let go = Tensor::filled(&[2, 3], 1.0f64);
        let grad = fc_backward(&input, &weights, &go).unwrap();
        assert_eq!(grad.input.shape(), input.shape());
        assert_eq!(grad.weights.as_ref().unwrap().shape(), weights.shape());
        assert_eq!(grad.bias.as_ref().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn feature_count_mismatch_is_rejected() {
        let input = Tensor::zeros(&[1, 5]);
        let weights = Tensor::zeros(&[4, 2]);
        assert!(fc_forward::<f64>(&input, &weights, &[0.0; 2]).is_err());
    }
}
