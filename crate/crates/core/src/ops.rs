//! Differentiable primitives: 2-D convolution, ReLU, channel softmax and ×2
//! bilinear upsampling. Forward and backward passes are hand-written; all
//! accumulation runs in f64 and results are stored as f32.
//!
//! Every function is a pure function of its inputs. Internal parallelism
//! splits work along disjoint output (or input) channels with a fixed
//! per-element accumulation order, so results are bitwise identical
//! regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Work threshold (MACs) below which kernels stay single-threaded.
const MIN_PAR_WORK: usize = 1 << 16;

pub fn conv_out_dim(input: usize, pad: usize, k: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {} exceeds padded input {}", k, padded),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn check_conv_shapes(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if input.ndim() != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("input must be [Cin,H,W], got {:?}", input.shape()),
        ));
    }
    if weight.ndim() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("weight must be [Cout,Cin,kh,kw], got {:?}", weight.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be >= 1".to_string()));
    }
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (cout, wcin, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("weight Cin {} does not match input Cin {}", wcin, cin),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match Cout {}", bias.shape(), cout),
        ));
    }
    Ok((cin, h, w, cout, kh, kw, stride))
}

/// Cross-correlation of `input [Cin,H,W]` with `weight [Cout,Cin,kh,kw]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (cin, h, w, cout, kh, kw, stride) = check_conv_shapes(input, weight, bias, stride)?;
    let oh = conv_out_dim(h, pad, kh, stride)?;
    let ow = conv_out_dim(w, pad, kw, stride)?;

    let mut out = Tensor::zeros(&[cout, oh, ow]);
    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();

    let per_channel = oh * ow * cin * kh * kw;
    let body = |co: usize, chunk: &mut [f32]| {
        let w_base = co * cin * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b_data[co] as f64;
                for ci in 0..cin {
                    let in_base = ci * h * w;
                    let wk_base = w_base + ci * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = in_base + iy as usize * w;
                        let wrow = wk_base + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += in_data[row + ix as usize] as f64
                                * w_data[wrow + kx] as f64;
                        }
                    }
                }
                chunk[oy * ow + ox] = acc as f32;
            }
        }
    };

    if cout * per_channel >= MIN_PAR_WORK && cout > 1 {
        out.data_mut()
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(co, chunk)| body(co, chunk));
    } else {
        for (co, chunk) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            body(co, chunk);
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input, weight and bias given the upstream
/// gradient on the output.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (cout, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
    let (oh, ow) = (upstream.dim(1), upstream.dim(2));
    if upstream.dim(0) != cout {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream Cout {} vs weight Cout {}", upstream.dim(0), cout),
        ));
    }

    let in_data = input.data();
    let w_data = weight.data();
    let up = upstream.data();

    // Bias gradient.
    let mut grad_bias = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let mut acc = 0.0f64;
        for v in &up[co * oh * ow..(co + 1) * oh * ow] {
            acc += *v as f64;
        }
        grad_bias.data_mut()[co] = acc as f32;
    }

    // Weight gradient, parallel over output channels.
    let mut grad_weight = Tensor::zeros(weight.shape());
    let wstride = cin * kh * kw;
    let weight_body = |co: usize, chunk: &mut [f32]| {
        let up_base = co * oh * ow;
        for ci in 0..cin {
            let in_base = ci * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0f64;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = in_base + iy as usize * w;
                        let uprow = up_base + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += up[uprow + ox] as f64 * in_data[row + ix as usize] as f64;
                        }
                    }
                    chunk[(ci * kh + ky) * kw + kx] = acc as f32;
                }
            }
        }
    };
    if cout * wstride * oh * ow >= MIN_PAR_WORK && cout > 1 {
        grad_weight
            .data_mut()
            .par_chunks_mut(wstride)
            .enumerate()
            .for_each(|(co, chunk)| weight_body(co, chunk));
    } else {
        for (co, chunk) in grad_weight.data_mut().chunks_mut(wstride).enumerate() {
            weight_body(co, chunk);
        }
    }

    // Input gradient, parallel over input channels with per-channel f64
    // accumulation buffers.
    let mut grad_input = Tensor::zeros(input.shape());
    let input_body = |ci: usize, chunk: &mut [f32]| {
        let mut acc = vec![0.0f64; h * w];
        for co in 0..cout {
            let up_base = co * oh * ow;
            let wk_base = (co * cin + ci) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w_data[wk_base + ky * kw + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        let uprow = up_base + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc[row + ix as usize] += up[uprow + ox] as f64 * wv;
                        }
                    }
                }
            }
        }
        for (dst, v) in chunk.iter_mut().zip(&acc) {
            *dst = *v as f32;
        }
    };
    if cin * cout * kh * kw * oh * ow >= MIN_PAR_WORK && cin > 1 {
        grad_input
            .data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(ci, chunk)| input_body(ci, chunk));
    } else {
        for (ci, chunk) in grad_input.data_mut().chunks_mut(h * w).enumerate() {
            input_body(ci, chunk);
        }
    }

    Ok((grad_input, grad_weight, grad_bias))
}

/// Elementwise max(0, x).
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// ReLU gradient. The subgradient at exactly 0 is 0.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Tensor {
    debug_assert_eq!(input.shape(), upstream.shape());
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("shapes match")
}

/// Softmax over the channel axis of a `[C,H,W]` tensor, stabilized by
/// per-pixel max subtraction.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    if input.ndim() != 3 {
        return Err(Error::shape(
            "softmax_channels",
            format!("expected [C,H,W], got {:?}", input.shape()),
        ));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let plane = h * w;
    let mut out = Tensor::zeros(input.shape());
    let src = input.data();
    let dst = out.data_mut();
    for p in 0..plane {
        let mut m = f32::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(src[ch * plane + p]);
        }
        let mut sum = 0.0f64;
        for ch in 0..c {
            let e = ((src[ch * plane + p] - m) as f64).exp();
            dst[ch * plane + p] = e as f32;
            sum += e;
        }
        for ch in 0..c {
            dst[ch * plane + p] = (dst[ch * plane + p] as f64 / sum) as f32;
        }
    }
    Ok(out)
}

/// Softmax gradient given the softmax output `probs` and the upstream
/// gradient: dx[c] = y[c] * (g[c] - sum_j g[j] * y[j]) per pixel.
pub fn softmax_channels_backward(probs: &Tensor, upstream: &Tensor) -> Tensor {
    debug_assert_eq!(probs.shape(), upstream.shape());
    let (c, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2));
    let plane = h * w;
    let y = probs.data();
    let g = upstream.data();
    let mut out = Tensor::zeros(probs.shape());
    let dst = out.data_mut();
    for p in 0..plane {
        let mut dot = 0.0f64;
        for ch in 0..c {
            dot += g[ch * plane + p] as f64 * y[ch * plane + p] as f64;
        }
        for ch in 0..c {
            let i = ch * plane + p;
            dst[i] = (y[i] as f64 * (g[i] as f64 - dot)) as f32;
        }
    }
    out
}

/// Source coordinate for align-corners ×2 upsampling: output index `i` over
/// `2n` samples maps to `i * (n - 1) / (2n - 1)` in input space.
#[inline]
pub fn upsample_src_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 * (n - 1) as f64 / (2 * n - 1) as f64
    }
}

/// Bilinear ×2 upsampling with align-corners sampling: `[C,H,W]` -> `[C,2H,2W]`.
pub fn upsample_x2(input: &Tensor) -> Result<Tensor> {
    if input.ndim() != 3 {
        return Err(Error::shape(
            "upsample_x2",
            format!("expected [C,H,W], got {:?}", input.shape()),
        ));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let src = input.data();
    let body = |ch: usize, chunk: &mut [f32]| {
        let base = ch * h * w;
        for oy in 0..oh {
            let fy = upsample_src_coord(oy, h);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = fy - y0 as f64;
            for ox in 0..ow {
                let fx = upsample_src_coord(ox, w);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = fx - x0 as f64;
                let v = (1.0 - dy) * (1.0 - dx) * src[base + y0 * w + x0] as f64
                    + (1.0 - dy) * dx * src[base + y0 * w + x1] as f64
                    + dy * (1.0 - dx) * src[base + y1 * w + x0] as f64
                    + dy * dx * src[base + y1 * w + x1] as f64;
                chunk[oy * ow + ox] = v as f32;
            }
        }
    };
    if c * oh * ow >= MIN_PAR_WORK && c > 1 {
        out.data_mut()
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(ch, chunk)| body(ch, chunk));
    } else {
        for (ch, chunk) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            body(ch, chunk);
        }
    }
    Ok(out)
}

/// Gradient of `upsample_x2`: distributes the upstream gradient back by the
/// same interpolation weights.
pub fn upsample_x2_backward(input_shape: &[usize], upstream: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    debug_assert_eq!(upstream.shape(), &[c, oh, ow]);
    let up = upstream.data();
    let mut grad = Tensor::zeros(input_shape);
    let body = |ch: usize, chunk: &mut [f32]| {
        let mut acc = vec![0.0f64; h * w];
        let base = ch * oh * ow;
        for oy in 0..oh {
            let fy = upsample_src_coord(oy, h);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = fy - y0 as f64;
            for ox in 0..ow {
                let fx = upsample_src_coord(ox, w);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = fx - x0 as f64;
                let g = up[base + oy * ow + ox] as f64;
                acc[y0 * w + x0] += g * (1.0 - dy) * (1.0 - dx);
                acc[y0 * w + x1] += g * (1.0 - dy) * dx;
                acc[y1 * w + x0] += g * dy * (1.0 - dx);
                acc[y1 * w + x1] += g * dy * dx;
            }
        }
        for (dst, v) in chunk.iter_mut().zip(&acc) {
            *dst = *v as f32;
        }
    };
    if c * oh * ow >= MIN_PAR_WORK && c > 1 {
        grad.data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(ch, chunk)| body(ch, chunk));
    } else {
        for (ch, chunk) in grad.data_mut().chunks_mut(h * w).enumerate() {
            body(ch, chunk);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let input = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let weight = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &weight, &bias, 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_ones_counts_overlap() {
        let input = Tensor::filled(&[1, 4, 4], 1.0);
        let weight = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &weight, &bias, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        assert_eq!(out.at3(0, 1, 1), 9.0);
        assert_eq!(out.at3(0, 0, 0), 4.0);
        assert_eq!(out.at3(0, 3, 3), 4.0);
        assert_eq!(out.at3(0, 0, 1), 6.0);
    }

    #[test]
    fn conv_rejects_mismatched_cin() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let weight = Tensor::zeros(&[1, 3, 3, 3]);
        let bias = Tensor::zeros(&[1]);
        let err = conv2d(&input, &weight, &bias, 1, 1).unwrap_err();
        assert!(err.to_string().contains("Cin"));
    }

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);

        let up = Tensor::filled(&[3], 1.0);
        let g = relu_backward(&x, &up);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);

        let x = Tensor::from_vec(&[2], vec![-0.5, 0.5]).unwrap();
        let g = relu_backward(&x, &Tensor::filled(&[2], 1.0));
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_identity_on_positive() {
        let x = Tensor::from_vec(&[2, 2], vec![0.5, 1.0, 2.0, 3.5]).unwrap();
        assert_eq!(relu(&x), x);
    }

    #[test]
    fn softmax_single_channel_is_one() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![3.0, -1.0, 0.0, 7.0]).unwrap();
        let y = softmax_channels(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_symmetric_logits() {
        let x = Tensor::zeros(&[2, 1, 1]);
        let y = softmax_channels(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_stable() {
        let x = Tensor::from_vec(&[2, 1, 1], vec![1000.0, 0.0]).unwrap();
        let y = softmax_channels(&x).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1] < 1e-6);
    }

    #[test]
    fn upsample_preserves_constant() {
        let x = Tensor::filled(&[1, 3, 4], 3.0);
        let y = upsample_x2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 6, 8]);
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn upsample_degenerate_one_pixel() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![2.5]).unwrap();
        let y = upsample_x2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }
}
