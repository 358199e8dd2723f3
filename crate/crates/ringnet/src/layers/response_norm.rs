//! Across-channel response normalization:
//!
//!   b[c] = a[c] * (k + alpha * sum_{c' in win(c)} a[c']^2)^(-beta)
//!
//! where win(c) spans n channels centered on c, clipped at the channel
//! boundaries. The window is symmetric, so d in win(c) iff c in win(d) —
//! the backward pass below relies on that.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn dims<T: Scalar>(input: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *input.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref other => Err(Error::shape("response-norm input", "[N,C,H,W]", format!("{other:?}"))),
    }
}

fn window(c: usize, channels: usize, n: usize) -> (usize, usize) {
    let half = n / 2;
    let lo = c.saturating_sub(half);
    let hi = (c + half).min(channels - 1);
    (lo, hi)
}

pub fn response_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    k: f64,
    n: usize,
    alpha: f64,
    beta: f64,
) -> Result<Tensor<T>> {
    let (batch, channels, h, w) = dims(input)?;
    if n == 0 {
        return Err(Error::InvalidArg("response-norm window must be >= 1".into()));
    }
    let mut out = Tensor::zeros(input.shape());
    let plane = h * w;
    let data = input.data();
    let out_data = out.data_mut();
    for img in 0..batch {
        let base = img * channels * plane;
        for pos in 0..plane {
            for c in 0..channels {
                let (lo, hi) = window(c, channels, n);
                let mut s = k;
                for cc in lo..=hi {
                    let v = data[base + cc * plane + pos].to_f64();
                    s += alpha * v * v;
                }
                let a = data[base + c * plane + pos].to_f64();
                out_data[base + c * plane + pos] = T::from_f64(a * s.powf(-beta));
            }
        }
    }
    Ok(out)
}

pub fn response_norm_backward<T: Scalar>(
    input: &Tensor<T>,
    k: f64,
    n: usize,
    alpha: f64,
    beta: f64,
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, channels, h, w) = dims(input)?;
    if grad_output.shape() != input.shape() {
        return Err(Error::shape(
            "response-norm grad_output",
            format!("{:?}", input.shape()),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let mut grad_input = Tensor::zeros(input.shape());
    let plane = h * w;
    let data = input.data();
    let go = grad_output.data();
    let gi = grad_input.data_mut();
    // Scratch per channel column: s[c] = k + alpha*sum a^2 over win(c),
    // t[c] = go[c] * a[c] * s[c]^(-beta-1).
    let mut s = vec![0.0f64; channels];
    let mut t = vec![0.0f64; channels];
    for img in 0..batch {
        let base = img * channels * plane;
        for pos in 0..plane {
            for c in 0..channels {
                let (lo, hi) = window(c, channels, n);
                let mut acc = k;
                for cc in lo..=hi {
                    let v = data[base + cc * plane + pos].to_f64();
                    acc += alpha * v * v;
                }
                s[c] = acc;
                t[c] = go[base + c * plane + pos].to_f64()
                    * data[base + c * plane + pos].to_f64()
                    * acc.powf(-beta - 1.0);
            }
            for d in 0..channels {
                let (lo, hi) = window(d, channels, n);
                let mut cross = 0.0;
                for c in lo..=hi {
                    cross += t[c];
                }
                let a_d = data[base + d * plane + pos].to_f64();
                let g_d = go[base + d * plane + pos].to_f64();
                gi[base + d * plane + pos] =
                    T::from_f64(g_d * s[d].powf(-beta) - 2.0 * alpha * beta * a_d * cross);
            }
        }
    }
    Ok(grad_input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{RNORM_DEFAULT_ALPHA, RNORM_DEFAULT_BETA, RNORM_DEFAULT_K, RNORM_DEFAULT_N};
    use crate::rng::{rng_for, standard_normal, stream};

    #[test]
    fn single_channel_matches_closed_form() {
        // One channel: window is just {c}, so b = a*(k + alpha*a^2)^-beta.
        let input = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0f64]).unwrap();
        let out = response_norm_forward(&input, 2.0, 5, 0.25, 0.5).unwrap();
        let expect = 2.0 * (2.0 + 0.25 * 4.0f64).powf(-0.5);
        assert!((out.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn default_constants_barely_perturb_unit_activations() {
        // alpha=1e-4 over a 5-channel window shifts the denominator by ~5e-4
        // relative to k=2; output stays close to a * 2^-0.75.
        let input = Tensor::filled(&[1, 8, 2, 2], 1.0f64);
        let out = response_norm_forward(
            &input,
            RNORM_DEFAULT_K,
            RNORM_DEFAULT_N,
            RNORM_DEFAULT_ALPHA,
            RNORM_DEFAULT_BETA,
        )
        .unwrap();
        let plain = 2.0f64.powf(-0.75);
        for &v in out.data() {
            assert!((v - plain).abs() < 1e-3, "{v} vs {plain}");
        }
    }

    #[test]
    fn window_clips_at_channel_boundaries() {
        assert_eq!(window(0, 8, 5), (0, 2));
        assert_eq!(window(4, 8, 5), (2, 6));
        assert_eq!(window(7, 8, 5), (5, 7));
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = rng_for(7, &[stream::GRAD_CHECK]);
        let shape = [2usize, 6, 3, 3];
        let count: usize = shape.iter().product();
        let vals: Vec<f64> = (0..count).map(|_| standard_normal(&mut rng)).collect();
        let input = Tensor::from_vec(&shape, vals).unwrap();
        let go_vals: Vec<f64> = (0..count).map(|_| standard_normal(&mut rng)).collect();
        let go = Tensor::from_vec(&shape, go_vals).unwrap();
        let (k, n, alpha, beta) = (2.0, 5, 0.1, 0.75);
        let gi = response_norm_backward(&input, k, n, alpha, beta, &go).unwrap();
        let eps = 1e-6;
        for idx in [0usize, 13, count / 2, count - 1] {
            let mut plus = input.clone();
            plus.data_mut()[idx] += eps;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= eps;
            let f = |t: &Tensor<f64>| -> f64 {
                let out = response_norm_forward(t, k, n, alpha, beta).unwrap();
                out.data().iter().zip(go.data()).map(|(a, b)| a * b).sum()
            };
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
            let analytic = gi.data()[idx];
            assert!(
                (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8) < 1e-7,
                "coord {idx}: numeric {numeric} analytic {analytic}"
            );
        }
    }
}
