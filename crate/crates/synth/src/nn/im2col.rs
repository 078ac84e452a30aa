//! Patch-matrix lowering for GEMM-backed convolutions.
//!
//! `im2col` unrolls every receptive field of a padded input into one row of
//! a 2-D matrix so the convolution becomes a single matrix product; `col2im`
//! scatter-adds rows back, which is exactly the transpose map needed for the
//! input gradient.

use super::Float;
use ndarray::{Array2, Array4, ArrayView4};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Unroll `x` (N, C, H, W) into (N·OH·OW, C·K·K) patch rows.
///
/// Row `n·OH·OW + oh·OW + ow` holds the receptive field of output pixel
/// `(oh, ow)` of item `n`, flattened in (C, KH, KW) order — the same order a
/// (C_out, C, KH, KW) weight tensor flattens to row-major.
pub fn im2col<F: Float>(
    x: &ArrayView4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut cols = Array2::<F>::zeros((n * oh * ow, c * k * k));

    for ni in 0..n {
        for ohi in 0..oh {
            let ih0 = (ohi * stride) as isize - pad as isize;
            for owi in 0..ow {
                let iw0 = (owi * stride) as isize - pad as isize;
                let row = ni * oh * ow + ohi * ow + owi;
                let mut out_row = cols.row_mut(row);
                let slice = out_row.as_slice_mut().expect("cols row contiguous");
                for ci in 0..c {
                    for kh in 0..k {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= h as isize {
                            continue; // zero padding, row pre-zeroed
                        }
                        for kw in 0..k {
                            let iw = iw0 + kw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            slice[ci * k * k + kh * k + kw] =
                                x[[ni, ci, ih as usize, iw as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add patch rows back into an (N, C, H, W) image — the adjoint of
/// [`im2col`] with identical geometry.
pub fn col2im<F: Float>(
    cols: &Array2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (n * oh * ow, c * k * k));
    let mut x = Array4::<F>::zeros((n, c, h, w));

    for ni in 0..n {
        for ohi in 0..oh {
            let ih0 = (ohi * stride) as isize - pad as isize;
            for owi in 0..ow {
                let iw0 = (owi * stride) as isize - pad as isize;
                let row = cols.row(row_index(ni, ohi, owi, oh, ow));
                let slice = row.as_slice().expect("cols row contiguous");
                for ci in 0..c {
                    for kh in 0..k {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = iw0 + kw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            x[[ni, ci, ih as usize, iw as usize]] +=
                                slice[ci * k * k + kh * k + kw];
                        }
                    }
                }
            }
        }
    }
    x
}

fn row_index(n: usize, oh: usize, ow: usize, n_oh: usize, n_ow: usize) -> usize {
    debug_assert!(oh < n_oh);
    n * n_oh * n_ow + oh * n_ow + ow
}
