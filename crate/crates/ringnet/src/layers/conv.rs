//! 2-D convolution via im2col + GEMM.
//!
//! Layouts are row-major throughout: input [N,C,H,W], weights [F,C,K,K],
//! output [N,F,OH,OW]. The column buffer holds one image as [C*K*K, OH*OW]
//! so the per-image product is a single GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::LayerGrad;

/// Output spatial side: floor((side + 2*pad - kernel) / stride) + 1.
pub fn conv_out_side(side: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - kernel) / stride + 1
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn check_dims<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias_len: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let (n, c, h, w) = match *input.shape() {
        [n, c, h, w] => (n, c, h, w),
        ref other => return Err(Error::shape("conv input", "[N,C,H,W]", format!("{other:?}"))),
    };
    let (f, wc, kh, kw) = match *weights.shape() {
        [f, wc, kh, kw] => (f, wc, kh, kw),
        ref other => return Err(Error::shape("conv weights", "[F,C,K,K]", format!("{other:?}"))),
    };
    if kh != kw {
        return Err(Error::shape("conv weights", "square kernel", format!("{kh}x{kw}")));
    }
    if wc != c {
        return Err(Error::shape("conv weights", format!("{c} input channels"), wc.to_string()));
    }
    if bias_len != f {
        return Err(Error::shape("conv bias", format!("{f} entries"), bias_len.to_string()));
    }
    if stride == 0 {
        return Err(Error::InvalidArg("conv stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kh {
        return Err(Error::shape(
            "conv input",
            format!("padded side >= kernel {kh}"),
            format!("{h}x{w} with pad {pad}"),
        ));
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        f,
        k: kh,
        oh: conv_out_side(h, kh, stride, pad),
        ow: conv_out_side(w, kw, stride, pad),
    })
}

/// Expand one image [C,H,W] into columns [C*K*K, OH*OW]. Out-of-bounds taps
/// (from padding) become zeros.
fn im2col<T: Scalar>(
    image: &[T],
    d: &ConvDims,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let plane = d.h * d.w;
    let ohw = d.oh * d.ow;
    debug_assert_eq!(col.len(), d.c * d.k * d.k * ohw);
    let mut row = 0usize;
    for ci in 0..d.c {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let base = row * ohw;
                row += 1;
                for oy in 0..d.oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut col[base + oy * d.ow..base + (oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = ci * plane + iy as usize * d.w;
                    for (ox, slot) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *slot = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            image[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns [C*K*K, OH*OW] back into an image gradient [C,H,W].
/// Exact adjoint of `im2col`; overlapping taps accumulate.
fn col2im_add<T: Scalar>(
    col: &[T],
    d: &ConvDims,
    stride: usize,
    pad: usize,
    image: &mut [T],
) {
    let plane = d.h * d.w;
    let ohw = d.oh * d.ow;
    let mut row = 0usize;
    for ci in 0..d.c {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let base = row * ohw;
                row += 1;
                for oy in 0..d.oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = ci * plane + iy as usize * d.w;
                    let src = &col[base + oy * d.ow..base + (oy + 1) * d.ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            image[dst_row + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = check_dims(input, weights, bias.len(), stride, pad)?;
    let ckk = d.c * d.k * d.k;
    let ohw = d.oh * d.ow;
    let mut out = Tensor::zeros(&[d.n, d.f, d.oh, d.ow]);
    let mut col = vec![T::zero(); ckk * ohw];
    for img in 0..d.n {
        im2col(&input.data()[img * d.c * d.h * d.w..], &d, stride, pad, &mut col);
        let out_img = &mut out.data_mut()[img * d.f * ohw..(img + 1) * d.f * ohw];
        // [F,CKK] x [CKK,OHW] -> [F,OHW]
        unsafe {
            T::gemm(
                d.f,
                ckk,
                ohw,
                T::one(),
                weights.data().as_ptr(),
                ckk as isize,
                1,
                col.as_ptr(),
                ohw as isize,
                1,
                T::zero(),
                out_img.as_mut_ptr(),
                ohw as isize,
                1,
            );
        }
        for fi in 0..d.f {
            let b = bias[fi];
            for v in &mut out_img[fi * ohw..(fi + 1) * ohw] {
                *v += b;
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_output: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let d = check_dims(input, weights, weights.shape()[0], stride, pad)?;
    let expected = [d.n, d.f, d.oh, d.ow];
    if grad_output.shape() != expected {
        return Err(Error::shape(
            "conv grad_output",
            format!("{expected:?}"),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let ckk = d.c * d.k * d.k;
    let ohw = d.oh * d.ow;
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = vec![T::zero(); d.f];
    let mut col = vec![T::zero(); ckk * ohw];
    let mut col_grad = vec![T::zero(); ckk * ohw];
    for img in 0..d.n {
        let go_img = &grad_output.data()[img * d.f * ohw..(img + 1) * d.f * ohw];
        for fi in 0..d.f {
            let mut acc = T::zero();
            for &g in &go_img[fi * ohw..(fi + 1) * ohw] {
                acc += g;
            }
            grad_bias[fi] += acc;
        }
        im2col(&input.data()[img * d.c * d.h * d.w..], &d, stride, pad, &mut col);
        // dW += GO [F,OHW] x col^T [OHW,CKK]
        unsafe {
            T::gemm(
                d.f,
                ohw,
                ckk,
                T::one(),
                go_img.as_ptr(),
                ohw as isize,
                1,
                col.as_ptr(),
                1,
                ohw as isize,
                T::one(),
                grad_weights.data_mut().as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
        // dcol = W^T [CKK,F] x GO [F,OHW]
        unsafe {
            T::gemm(
                ckk,
                d.f,
                ohw,
                T::one(),
                weights.data().as_ptr(),
                1,
                ckk as isize,
                go_img.as_ptr(),
                ohw as isize,
                1,
                T::zero(),
                col_grad.as_mut_ptr(),
                ohw as isize,
                1,
            );
        }
        col2im_add(
            &col_grad,
            &d,
            stride,
            pad,
            &mut grad_input.data_mut()[img * d.c * d.h * d.w..(img + 1) * d.c * d.h * d.w],
        );
    }
    Ok(LayerGrad {
        input: grad_input,
        weights: Some(grad_weights),
        bias: Some(Tensor::from_vec(&[d.f], grad_bias)?),
    })
}
