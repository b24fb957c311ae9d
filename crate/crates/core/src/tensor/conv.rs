//! 2-D convolution kernels: forward, input gradient, weight gradient.
//!
//! Each sample's receptive-field windows are gathered into contiguous rows
//! (`im2row`), so every output element is a dot product of two contiguous
//! slices. Work is split across threads by sample (or output channel for
//! the weight gradient); every output element is written by exactly one
//! task with a fixed accumulation order, so results are identical no matter
//! how many threads run.

use rayon::prelude::*;

use crate::num::Scalar;
use crate::tensor::Tensor;

/// Output extent of a 1-D convolution, or None when degenerate.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// How out-of-bounds positions of the input window are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Pad with zeros (the default convolution semantics).
    Zeros,
    /// Clamp to the nearest edge pixel, so a constant image produces a
    /// constant (for high-pass kernels: zero) response at the borders too.
    Replicate,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl ConvDims {
    pub fn window_len(&self) -> usize {
        self.in_channels * self.k_h * self.k_w
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Dot product with eight independent accumulators combined in a fixed
/// order: deterministic, and free of the serial-dependency chain that
/// blocks vectorization of a naive reduction.
#[inline]
fn dot8<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let base = c * 8;
        for j in 0..8 {
            acc[j] += a[base + j] * b[base + j];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// y += alpha * x, elementwise.
#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Gather the zero-padded receptive field of every output position of one
/// sample into contiguous rows of length `window_len`, ordered
/// (in_channel, kernel_row, kernel_col).
/// Source index for a (possibly out-of-bounds) padded coordinate, or None
/// for positions that read the zero pad.
#[inline]
fn pad_coord(i: isize, extent: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && i < extent as isize {
        Some(i as usize)
    } else {
        match mode {
            PadMode::Zeros => None,
            PadMode::Replicate => Some(i.clamp(0, extent as isize - 1) as usize),
        }
    }
}

fn im2row_sample<T: Scalar>(sample: &[T], d: &ConvDims, rows: &mut [T]) {
    let window = d.window_len();
    debug_assert_eq!(rows.len(), d.positions() * window);
    for oy in 0..d.out_h {
        for ox in 0..d.out_w {
            let row = &mut rows[(oy * d.out_w + ox) * window..][..window];
            let mut w_idx = 0;
            for c in 0..d.in_channels {
                let plane = &sample[c * d.in_h * d.in_w..][..d.in_h * d.in_w];
                for ky in 0..d.k_h {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    let src_y = pad_coord(iy, d.in_h, d.pad_mode);
                    for kx in 0..d.k_w {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        row[w_idx] = match (src_y, pad_coord(ix, d.in_w, d.pad_mode)) {
                            (Some(y), Some(x)) => plane[y * d.in_w + x],
                            _ => T::zero(),
                        };
                        w_idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add a per-position window gradient back into a sample gradient
/// (the transpose of `im2row_sample`).
fn row2im_sample<T: Scalar>(rows: &[T], d: &ConvDims, sample_grad: &mut [T]) {
    let window = d.window_len();
    for oy in 0..d.out_h {
        for ox in 0..d.out_w {
            let row = &rows[(oy * d.out_w + ox) * window..][..window];
            let mut w_idx = 0;
            for c in 0..d.in_channels {
                let plane = &mut sample_grad[c * d.in_h * d.in_w..][..d.in_h * d.in_w];
                for ky in 0..d.k_h {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    let src_y = pad_coord(iy, d.in_h, d.pad_mode);
                    for kx in 0..d.k_w {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if let (Some(y), Some(x)) = (src_y, pad_coord(ix, d.in_w, d.pad_mode)) {
                            plane[y * d.in_w + x] += row[w_idx];
                        }
                        w_idx += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, d: &ConvDims) -> Tensor<T> {
    let window = d.window_len();
    let positions = d.positions();
    let x = input.data();
    let w = weights.data();
    let mut out = vec![T::zero(); d.n * d.out_channels * positions];
    let sample_in = d.in_channels * d.in_h * d.in_w;
    out.par_chunks_mut(d.out_channels * positions)
        .enumerate()
        .for_each(|(s, out_s)| {
            let mut rows = vec![T::zero(); positions * window];
            im2row_sample(&x[s * sample_in..][..sample_in], d, &mut rows);
            for oc in 0..d.out_channels {
                let w_oc = &w[oc * window..][..window];
                for p in 0..positions {
                    out_s[oc * positions + p] = dot8(w_oc, &rows[p * window..][..window]);
                }
            }
        });
    Tensor::from_parts(vec![d.n, d.out_channels, d.out_h, d.out_w], out)
}

/// Gradients of a convolution. Either output may be skipped when the
/// corresponding operand does not require a gradient.
pub(crate) fn backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &[T],
    d: &ConvDims,
    need_input: bool,
    need_weights: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let window = d.window_len();
    let positions = d.positions();
    let sample_in = d.in_channels * d.in_h * d.in_w;
    let x = input.data();
    let w = weights.data();

    let grad_input = need_input.then(|| {
        let mut gx = vec![T::zero(); x.len()];
        gx.par_chunks_mut(sample_in).enumerate().for_each(|(s, gx_s)| {
            let go_s = &grad_out[s * d.out_channels * positions..][..d.out_channels * positions];
            let mut grad_rows = vec![T::zero(); positions * window];
            for oc in 0..d.out_channels {
                let w_oc = &w[oc * window..][..window];
                for p in 0..positions {
                    let g = go_s[oc * positions + p];
                    if g != T::zero() {
                        axpy(g, w_oc, &mut grad_rows[p * window..][..window]);
                    }
                }
            }
            row2im_sample(&grad_rows, d, gx_s);
        });
        Tensor::from_parts(input.shape().to_vec(), gx)
    });

    let grad_weights = need_weights.then(|| {
        // Rows for the whole batch are materialized once and shared by all
        // output channels; threads own disjoint channel ranges.
        let mut all_rows = vec![T::zero(); d.n * positions * window];
        all_rows
            .par_chunks_mut(positions * window)
            .enumerate()
            .for_each(|(s, rows)| im2row_sample(&x[s * sample_in..][..sample_in], d, rows));
        let mut gw = vec![T::zero(); w.len()];
        let chunk_oc = d.out_channels.div_ceil(4 * rayon::current_num_threads().max(1)).max(1);
        gw.par_chunks_mut(window * chunk_oc)
            .enumerate()
            .for_each(|(chunk, gw_chunk)| {
                let oc0 = chunk * chunk_oc;
                for (i, gw_oc) in gw_chunk.chunks_mut(window).enumerate() {
                    let oc = oc0 + i;
                    for s in 0..d.n {
                        let rows = &all_rows[s * positions * window..][..positions * window];
                        let go_s = &grad_out[(s * d.out_channels + oc) * positions..][..positions];
                        for p in 0..positions {
                            let g = go_s[p];
                            if g != T::zero() {
                                axpy(g, &rows[p * window..][..window], gw_oc);
                            }
                        }
                    }
                }
            });
        Tensor::from_parts(weights.shape().to_vec(), gw)
    });

    (grad_input, grad_weights)
}

/// Dense (affine) forward: x[N,D] @ w[D,K] + b[K].
pub(crate) fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let d_in = x.shape()[1];
    let k = w.shape()[1];
    // Transposed weight copy so each output is a contiguous dot product.
    let wt = transpose_2d(w.data(), d_in, k);
    let mut out = vec![T::zero(); n * k];
    out.par_chunks_mut(k).enumerate().for_each(|(s, row)| {
        let xs = &x.data()[s * d_in..][..d_in];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot8(xs, &wt[j * d_in..][..d_in]) + b.data()[j];
        }
    });
    Tensor::from_parts(vec![n, k], out)
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &[T],
    need_input: bool,
    need_weights: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let n = x.shape()[0];
    let d_in = x.shape()[1];
    let k = w.shape()[1];

    let grad_input = need_input.then(|| {
        let mut gx = vec![T::zero(); n * d_in];
        gx.par_chunks_mut(d_in).enumerate().for_each(|(s, gx_s)| {
            let go = &grad_out[s * k..][..k];
            for (j, &g) in go.iter().enumerate() {
                if g != T::zero() {
                    for i in 0..d_in {
                        gx_s[i] += g * w.data()[i * k + j];
                    }
                }
            }
        });
        Tensor::from_parts(vec![n, d_in], gx)
    });

    let (grad_weights, grad_bias) = if need_weights {
        let mut gw = vec![T::zero(); d_in * k];
        let mut gb = vec![T::zero(); k];
        for s in 0..n {
            let xs = &x.data()[s * d_in..][..d_in];
            let go = &grad_out[s * k..][..k];
            for (i, &xv) in xs.iter().enumerate() {
                if xv != T::zero() {
                    axpy(xv, go, &mut gw[i * k..][..k]);
                }
            }
            axpy(T::one(), go, &mut gb);
        }
        (
            Some(Tensor::from_parts(vec![d_in, k], gw)),
            Some(Tensor::from_parts(vec![k], gb)),
        )
    } else {
        (None, None)
    };

    (grad_input, grad_weights, grad_bias)
}

fn transpose_2d<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dim_formula() {
        assert_eq!(conv_out_dim(28, 8, 2, 3), Some(14));
        assert_eq!(conv_out_dim(14, 6, 2, 0), Some(5));
        assert_eq!(conv_out_dim(5, 5, 1, 0), Some(1));
        assert_eq!(conv_out_dim(3, 5, 1, 0), None);
        assert_eq!(conv_out_dim(4, 2, 0, 0), None);
    }

    #[test]
    fn dot8_matches_sequential_sum() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let b: Vec<f64> = (0..37).map(|i| 0.3 - (i as f64) * 0.05).collect();
        let seq: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot8(&a, &b) - seq).abs() < 1e-12);
    }
}
