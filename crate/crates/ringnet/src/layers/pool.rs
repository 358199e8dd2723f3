//! Max and average pooling over [N,C,H,W], no padding.
//!
//! Output side = floor((side - window) / stride) + 1, so overlapping windows
//! (window 3, stride 2) are fine and every window lies fully inside the input.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Forward-pass record needed to route gradients back. For max pooling,
/// `winners` stores the flat input index of each output element's argmax;
/// ties go to the lowest row-major index.
pub struct PoolCache {
    pub mode: PoolMode,
    pub window: usize,
    pub stride: usize,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    winners: Vec<usize>,
}

pub fn pool_forward<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolCache)> {
    let (n, c, h, w) = match *input.shape() {
        [n, c, h, w] => (n, c, h, w),
        ref other => return Err(Error::shape("pool input", "[N,C,H,W]", format!("{other:?}"))),
    };
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArg("pool needs window >= 1 and stride >= 1".into()));
    }
    if h < window || w < window {
        return Err(Error::shape(
            "pool input",
            format!("spatial side >= window {window}"),
            format!("{h}x{w}"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut winners = if mode == PoolMode::Max {
        vec![0usize; n * c * oh * ow]
    } else {
        Vec::new()
    };
    let inv_area = T::from_f64(1.0 / (window * window) as f64);
    let data = input.data();
    let out_data = out.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            let out_plane = (img * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    match mode {
                        PoolMode::Max => {
                            let mut best = data[plane + y0 * w + x0];
                            let mut best_idx = plane + y0 * w + x0;
                            for ky in 0..window {
                                let row = plane + (y0 + ky) * w + x0;
                                for kx in 0..window {
                                    let v = data[row + kx];
                                    if v > best {
                                        best = v;
                                        best_idx = row + kx;
                                    }
                                }
                            }
                            out_data[out_plane + oy * ow + ox] = best;
                            winners[out_plane + oy * ow + ox] = best_idx;
                        }
                        PoolMode::Avg => {
                            let mut acc = T::zero();
                            for ky in 0..window {
                                let row = plane + (y0 + ky) * w + x0;
                                for kx in 0..window {
                                    acc += data[row + kx];
                                }
                            }
                            out_data[out_plane + oy * ow + ox] = acc * inv_area;
                        }
                    }
                }
            }
        }
    }
    let cache = PoolCache {
        mode,
        window,
        stride,
        input_shape: input.shape().to_vec(),
        output_shape: vec![n, c, oh, ow],
        winners,
    };
    Ok((out, cache))
}

pub fn pool_backward<T: Scalar>(cache: &PoolCache, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_output.shape() != cache.output_shape {
        return Err(Error::shape(
            "pool grad_output",
            format!("{:?}", cache.output_shape),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let mut grad_input = Tensor::zeros(&cache.input_shape);
    let gi = grad_input.data_mut();
    match cache.mode {
        PoolMode::Max => {
            for (out_idx, &in_idx) in cache.winners.iter().enumerate() {
                gi[in_idx] += grad_output.data()[out_idx];
            }
        }
        PoolMode::Avg => {
            let (n, c, h, w) = (
                cache.input_shape[0],
                cache.input_shape[1],
                cache.input_shape[2],
                cache.input_shape[3],
            );
            let (oh, ow) = (cache.output_shape[2], cache.output_shape[3]);
            let inv_area = T::from_f64(1.0 / (cache.window * cache.window) as f64);
            for img in 0..n {
                for ch in 0..c {
                    let plane = (img * c + ch) * h * w;
                    let out_plane = (img * c + ch) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad_output.data()[out_plane + oy * ow + ox] * inv_area;
                            let y0 = oy * cache.stride;
                            let x0 = ox * cache.stride;
                            for ky in 0..cache.window {
                                let row = plane + (y0 + ky) * w + x0;
                                for kx in 0..cache.window {
                                    gi[row + kx] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_input)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_5x5() -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, 5, 5], (1..=25).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn max_pool_3x3_stride_2_on_ramp() {
        let (out, _) = pool_forward(&ramp_5x5(), PoolMode::Max, 3, 2).unwrap();
        assert_eq!(out.shape(), [1, 1, 2, 2]);
        assert_eq!(out.data(), &[13.0, 15.0, 23.0, 25.0]);
    }

    #[test]
    fn avg_pool_3x3_stride_2_on_ramp() {
        let (out, _) = pool_forward(&ramp_5x5(), PoolMode::Avg, 3, 2).unwrap();
        assert_eq!(out.shape(), [1, 1, 2, 2]);
        assert_eq!(out.data(), &[7.0, 9.0, 17.0, 19.0]);
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let input = Tensor::filled(&[1, 1, 2, 2], 4.0f64);
        let (out, cache) = pool_forward(&input, PoolMode::Max, 2, 1).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let go = Tensor::filled(&[1, 1, 1, 1], 1.0f64);
        let gi = pool_backward(&cache, &go).unwrap();
        // The whole unit of gradient lands on the first tied element.
        assert_eq!(gi.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn overlapping_max_windows_accumulate() {
        // window 3 stride 2 on 5x5: element 13 (center) wins only its own
        // window, but 25 at the corner wins exactly one too; check a case
        // where one input feeds two outputs.
        let mut v = vec![0.0f64; 25];
        v[12] = 9.0; // center of 5x5 wins all four 3x3 windows
        let input = Tensor::from_vec(&[1, 1, 5, 5], v).unwrap();
        let (_, cache) = pool_forward(&input, PoolMode::Max, 3, 2).unwrap();
        let go = Tensor::filled(&[1, 1, 2, 2], 1.0f64);
        let gi = pool_backward(&cache, &go).unwrap();
        assert_eq!(gi.data()[12], 4.0);
    }

    #[test]
    fn avg_backward_spreads_uniformly() {
        let input = ramp_5x5();
        let (_, cache) = pool_forward(&input, PoolMode::Avg, 3, 2).unwrap();
        let go = Tensor::from_vec(&[1, 1, 2, 2], vec![9.0, 0.0, 0.0, 0.0]).unwrap();
        let gi = pool_backward(&cache, &go).unwrap();
        // Only the top-left 3x3 window receives gradient, 9/9 = 1 each.
        assert_eq!(gi.at(&[0, 0, 0, 0]), 1.0);
        assert_eq!(gi.at(&[0, 0, 2, 2]), 1.0);
        assert_eq!(gi.at(&[0, 0, 0, 3]), 0.0);
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        let input = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(pool_forward::<f64>(&input, PoolMode::Max, 3, 1).is_err());
    }

    #[test]
    fn grad_shape_mismatch_is_rejected() {
        let (_, cache) = pool_forward(&ramp_5x5(), PoolMode::Max, 3, 2).unwrap();
        let bad = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(pool_backward::<f64>(&cache, &bad).is_err());
    }
}
