//! Convolution kernels used by the tape ops: im2col/col2im plus the three
//! GEMM-backed primitives (forward, backward-data, backward-weights).
//!
//! Layout conventions:
//! - feature maps are `[B, C, H, W]`,
//! - conv weights are `[Co, Ci, k, k]`, transposed-conv weights `[Ci, Co, k, k]`,
//! - `im2col_t` produces `[C*k*k, B*OH*OW]` so the heavy step is a single
//!   `[Co, C*k*k] x [C*k*k, B*OH*OW]` GEMM per layer.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4};

/// Output spatial size of a convolution with square kernel `k`.
pub fn conv_out_size(in_size: usize, k: usize, stride: usize, pad: usize) -> usize {
    debug_assert!(in_size + 2 * pad >= k);
    (in_size + 2 * pad - k) / stride + 1
}

/// Output spatial size of a transposed convolution (inverse of `conv_out_size`).
pub fn conv_transpose_out_size(in_size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_size - 1) * stride + k - 2 * pad
}

/// Gather patches: `[B,C,H,W] -> [C*k*k, B*OH*OW]`.
pub fn im2col_t(x: &ArrayView4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * k * k, b * oh * ow));
    let xs = x.as_slice().expect("im2col input must be contiguous");
    let cs = cols.as_slice_mut().unwrap();
    let ncols = b * oh * ow;
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let out_row = &mut cs[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let x_base = (bi * c + ci) * h * w;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + kh) as isize - pad as isize;
                        let dst = &mut out_row[(bi * oh + ohi) * ow..(bi * oh + ohi + 1) * ow];
                        if ih < 0 || ih >= h as isize {
                            for v in dst.iter_mut() {
                                *v = 0.0;
                            }
                            continue;
                        }
                        let x_row = &xs[x_base + ih as usize * w..x_base + (ih as usize + 1) * w];
                        for (owi, v) in dst.iter_mut().enumerate() {
                            let iw = (owi * stride + kw) as isize - pad as isize;
                            *v = if iw < 0 || iw >= w as isize {
                                0.0
                            } else {
                                x_row[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add patches back: `[C*k*k, B*OH*OW] -> [B,C,H,W]`.
pub fn col2im_t(
    cols: &ArrayView2<f64>,
    bchw: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = bchw;
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let ncols = b * oh * ow;
    debug_assert_eq!(cols.dim(), (c * k * k, ncols));
    let mut x = Array4::<f64>::zeros((b, c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("col2im input must be contiguous");
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src_row = &cs[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let x_base = (bi * c + ci) * h * w;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &src_row[(bi * oh + ohi) * ow..(bi * oh + ohi + 1) * ow];
                        let x_off = x_base + ih as usize * w;
                        for (owi, v) in src.iter().enumerate() {
                            let iw = (owi * stride + kw) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                xs[x_off + iw as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B,C,H,W] -> [C, B*H*W]` (channel-major matrix view used around GEMM calls).
pub fn chw_to_mat(x: &ArrayView4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let hw = h * w;
    let mut m = Array2::<f64>::zeros((c, b * hw));
    let xs = x.as_slice().expect("contiguous");
    let ms = m.as_slice_mut().unwrap();
    for ci in 0..c {
        for bi in 0..b {
            let src = &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            ms[ci * b * hw + bi * hw..ci * b * hw + (bi + 1) * hw].copy_from_slice(src);
        }
    }
    m
}

/// Inverse of [`chw_to_mat`].
pub fn mat_to_chw(m: &ArrayView2<f64>, bchw: (usize, usize, usize, usize)) -> Array4<f64> {
    let (b, c, h, w) = bchw;
    let hw = h * w;
    debug_assert_eq!(m.dim(), (c, b * hw));
    let mut x = Array4::<f64>::zeros((b, c, h, w));
    let ms = m.as_slice().expect("contiguous");
    let xs = x.as_slice_mut().unwrap();
    for ci in 0..c {
        for bi in 0..b {
            let src = &ms[ci * b * hw + bi * hw..ci * b * hw + (bi + 1) * hw];
            xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].copy_from_slice(src);
        }
    }
    x
}

/// Forward convolution. Returns the output and the im2col matrix (cached for backward).
pub fn conv_fwd(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    bias: &ArrayView1<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array2<f64>) {
    let (b, ci, h, wd) = x.dim();
    let (co, ci_w, k, _) = w.dim();
    debug_assert_eq!(ci, ci_w);
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(wd, k, stride, pad);
    let cols = im2col_t(x, k, stride, pad);
    let w_mat = w.to_shape((co, ci * k * k)).unwrap();
    let mut y_mat = w_mat.dot(&cols); // [Co, B*OH*OW]
    for (mut row, bval) in y_mat.rows_mut().into_iter().zip(bias.iter()) {
        row += *bval;
    }
    let y = mat_to_chw(&y_mat.view(), (b, co, oh, ow));
    (y, cols)
}

/// Gradient of a convolution w.r.t. its input (also the transposed-conv forward map).
pub fn conv_bwd_data(
    dy: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Array4<f64> {
    let (b, co, _, _) = dy.dim();
    let (co_w, ci, k, _) = w.dim();
    debug_assert_eq!(co, co_w);
    let dy_mat = chw_to_mat(dy);
    let w_mat = w.to_shape((co, ci * k * k)).unwrap();
    let dcols = w_mat.t().dot(&dy_mat); // [Ci*k*k, B*OH*OW]
    col2im_t(&dcols.view(), (b, ci, in_hw.0, in_hw.1), k, stride, pad)
}

/// Gradient of a convolution w.r.t. its weights, given the cached im2col matrix.
pub fn conv_bwd_weights(
    dy: &ArrayView4<f64>,
    cols: &ArrayView2<f64>,
    w_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let dy_mat = chw_to_mat(dy);
    let dw_mat = dy_mat.dot(&cols.t()); // [Co, Ci*k*k]
    dw_mat.into_shape_with_order(w_dim).unwrap()
}

/// Per-output-channel bias gradient: sum over batch and spatial axes.
pub fn conv_bwd_bias(dy: &ArrayView4<f64>) -> Array1<f64> {
    let (b, co, h, w) = dy.dim();
    let mut db = Array1::<f64>::zeros(co);
    let s = dy.as_slice().expect("contiguous");
    for bi in 0..b {
        for c in 0..co {
            let base = (bi * co + c) * h * w;
            db[c] += s[base..base + h * w].iter().sum::<f64>();
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn im2col_roundtrip_counts_overlaps() {
        // col2im(im2col(x)) multiplies each pixel by the number of windows covering it.
        let x = Array::linspace(1.0, 16.0, 16)
            .into_shape_with_order((1, 1, 4, 4))
            .unwrap();
        let cols = im2col_t(&x.view(), 2, 2, 0);
        let back = col2im_t(&cols.view(), (1, 1, 4, 4), 2, 2, 0);
        // Non-overlapping 2x2 windows with stride 2: every pixel covered exactly once.
        assert_eq!(back, x);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = Array::linspace(0.0, 1.0, 2 * 3 * 4 * 4)
            .into_shape_with_order((2, 3, 4, 4))
            .unwrap();
        let mut w = Array4::<f64>::zeros((3, 3, 1, 1));
        for c in 0..3 {
            w[[c, c, 0, 0]] = 1.0;
        }
        let bias = Array1::<f64>::zeros(3);
        let (y, _) = conv_fwd(&x.view(), &w.view(), &bias.view(), 1, 0);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_halves_and_transpose_doubles_spatial_size() {
        assert_eq!(conv_out_size(32, 4, 2, 1), 16);
        assert_eq!(conv_transpose_out_size(16, 4, 2, 1), 32);
        assert_eq!(conv_out_size(8, 4, 2, 1), 4);
        assert_eq!(conv_transpose_out_size(4, 4, 2, 1), 8);
    }
}
