//! Raw forward and backward kernels over flat slices.
//!
//! Shared by the tape (recording path) and by tape-free inference. All
//! kernels accumulate into their output buffers, so callers zero-initialize.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Validated output shape of a conv2d, plus the (oh, ow) pair.
pub fn conv2d_out_shape(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(Vec<usize>, (usize, usize))> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected input [N,C,H,W] and kernel [F,C,kH,kW], got {input:?} and {kernel:?}"),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
    }
    let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (f, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels but kernel expects {kc}"),
        ));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    Ok((vec![n, f, oh, ow], (oh, ow)))
}

/// Range of output columns `ow` whose input column `ow*stride + k - padding`
/// lands inside `[0, w)`, as a half-open range.
#[inline]
fn valid_ow_range(w: usize, ow_count: usize, stride: usize, k: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k + stride - 1) / stride
    };
    // iw <= w - 1  =>  ow <= (w - 1 + padding - k) / stride
    let hi_num = w as isize - 1 + padding as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(ow_count);
    (lo.min(hi), hi)
}

pub fn conv2d_forward<S: Scalar>(
    input: &[S],
    in_shape: &[usize],
    kernel: &[S],
    k_shape: &[usize],
    stride: usize,
    padding: usize,
    out: &mut [S],
) {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (f_count, _, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    for ni in 0..n {
        for fi in 0..f_count {
            let out_plane = &mut out[((ni * f_count + fi) * oh * ow)..((ni * f_count + fi + 1) * oh * ow)];
            for ci in 0..c {
                let in_plane = &input[((ni * c + ci) * h * w)..((ni * c + ci + 1) * h * w)];
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = kernel[((fi * c + ci) * kh + khi) * kw + kwi];
                        let (lo, hi) = valid_ow_range(w, ow, stride, kwi, padding);
                        if lo >= hi {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + khi) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[(ih as usize) * w..(ih as usize + 1) * w];
                            let out_row = &mut out_plane[ohi * ow..(ohi + 1) * ow];
                            let base = lo * stride + kwi;
                            if stride == 1 {
                                // base - padding is the input column at ow = lo
                                let start = (base as isize - padding as isize) as usize;
                                let src = &in_row[start..start + (hi - lo)];
                                let dst = &mut out_row[lo..hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d = *d + wv * *s;
                                }
                            } else {
                                let mut iw = base as isize - padding as isize;
                                for owi in lo..hi {
                                    out_row[owi] = out_row[owi] + wv * in_row[iw as usize];
                                    iw += stride as isize;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_input<S: Scalar>(
    grad_out: &[S],
    in_shape: &[usize],
    kernel: &[S],
    k_shape: &[usize],
    stride: usize,
    padding: usize,
    grad_in: &mut [S],
) {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (f_count, _, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    for ni in 0..n {
        for fi in 0..f_count {
            let go_plane = &grad_out[((ni * f_count + fi) * oh * ow)..((ni * f_count + fi + 1) * oh * ow)];
            for ci in 0..c {
                let gi_plane = &mut grad_in[((ni * c + ci) * h * w)..((ni * c + ci + 1) * h * w)];
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = kernel[((fi * c + ci) * kh + khi) * kw + kwi];
                        let (lo, hi) = valid_ow_range(w, ow, stride, kwi, padding);
                        if lo >= hi {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + khi) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let gi_row = &mut gi_plane[(ih as usize) * w..(ih as usize + 1) * w];
                            let go_row = &go_plane[ohi * ow..(ohi + 1) * ow];
                            if stride == 1 {
                                let start = (lo + kwi) as isize - padding as isize;
                                let dst = &mut gi_row[start as usize..start as usize + (hi - lo)];
                                let src = &go_row[lo..hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d = *d + wv * *s;
                                }
                            } else {
                                let mut iw = (lo * stride + kwi) as isize - padding as isize;
                                for owi in lo..hi {
                                    gi_row[iw as usize] = gi_row[iw as usize] + wv * go_row[owi];
                                    iw += stride as isize;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_kernel<S: Scalar>(
    grad_out: &[S],
    input: &[S],
    in_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    padding: usize,
    grad_kernel: &mut [S],
) {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (f_count, _, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    for ni in 0..n {
        for fi in 0..f_count {
            let go_plane = &grad_out[((ni * f_count + fi) * oh * ow)..((ni * f_count + fi + 1) * oh * ow)];
            for ci in 0..c {
                let in_plane = &input[((ni * c + ci) * h * w)..((ni * c + ci + 1) * h * w)];
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let (lo, hi) = valid_ow_range(w, ow, stride, kwi, padding);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = S::zero();
                        for ohi in 0..oh {
                            let ih = (ohi * stride + khi) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[(ih as usize) * w..(ih as usize + 1) * w];
                            let go_row = &go_plane[ohi * ow..(ohi + 1) * ow];
                            if stride == 1 {
                                let start = (lo + kwi) as isize - padding as isize;
                                let src = &in_row[start as usize..start as usize + (hi - lo)];
                                for (g, s) in go_row[lo..hi].iter().zip(src) {
                                    acc = acc + *g * *s;
                                }
                            } else {
                                let mut iw = (lo * stride + kwi) as isize - padding as isize;
                                for owi in lo..hi {
                                    acc = acc + go_row[owi] * in_row[iw as usize];
                                    iw += stride as isize;
                                }
                            }
                        }
                        let gk = &mut grad_kernel[((fi * c + ci) * kh + khi) * kw + kwi];
                        *gk = *gk + acc;
                    }
                }
            }
        }
    }
}

/// Adds `bias[c]` across dimension 1 of a tensor shaped [N, C, ...rest].
pub fn bias_add_forward<S: Scalar>(input: &[S], shape: &[usize], bias: &[S], out: &mut [S]) {
    let channels = shape[1];
    let trailing: usize = shape[2..].iter().product();
    let mut idx = 0;
    for _n in 0..shape[0] {
        for c in 0..channels {
            let b = bias[c];
            for _ in 0..trailing {
                out[idx] = input[idx] + b;
                idx += 1;
            }
        }
    }
}

pub fn bias_add_backward<S: Scalar>(grad_out: &[S], shape: &[usize], grad_bias: &mut [S]) {
    let channels = shape[1];
    let trailing: usize = shape[2..].iter().product();
    let mut idx = 0;
    for _n in 0..shape[0] {
        for c in 0..channels {
            let mut acc = S::zero();
            for _ in 0..trailing {
                acc = acc + grad_out[idx];
                idx += 1;
            }
            grad_bias[c] = grad_bias[c] + acc;
        }
    }
}

pub fn relu_forward<S: Scalar>(input: &[S], out: &mut [S]) {
    for (o, &v) in out.iter_mut().zip(input) {
        *o = if v > S::zero() { v } else { S::zero() };
    }
}

pub fn relu_backward<S: Scalar>(grad_out: &[S], input: &[S], grad_in: &mut [S]) {
    for ((g, &v), go) in grad_in.iter_mut().zip(input).zip(grad_out) {
        if v > S::zero() {
            *g = *g + *go;
        }
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
///
/// `argmax` records, per output element, the flat input index of the chosen
/// element. Ties go to the lowest flat index so backward is deterministic.
pub fn maxpool2_forward<S: Scalar>(
    input: &[S],
    shape: &[usize],
    out: &mut [S],
    argmax: &mut [u32],
) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    debug_assert!(input.len() <= u32::MAX as usize);
    let mut oidx = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let base = plane + (ohi * 2) * w + owi * 2;
                    let candidates = [base, base + 1, base + w, base + w + 1];
                    let mut best = candidates[0];
                    let mut best_v = input[best];
                    for &idx in &candidates[1..] {
                        if input[idx] > best_v {
                            best_v = input[idx];
                            best = idx;
                        }
                    }
                    out[oidx] = best_v;
                    argmax[oidx] = best as u32;
                    oidx += 1;
                }
            }
        }
    }
}

pub fn maxpool2_backward<S: Scalar>(grad_out: &[S], argmax: &[u32], grad_in: &mut [S]) {
    for (g, &src) in grad_out.iter().zip(argmax) {
        grad_in[src as usize] = grad_in[src as usize] + *g;
    }
}

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// dA[m,k] += G[m,n] * B^T
pub fn matmul_backward_lhs<S: Scalar>(grad_out: &[S], b: &[S], m: usize, k: usize, n: usize, grad_a: &mut [S]) {
    for i in 0..m {
        let g_row = &grad_out[i * n..(i + 1) * n];
        let ga_row = &mut grad_a[i * k..(i + 1) * k];
        for (p, gav) in ga_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&g, &bv) in g_row.iter().zip(b_row) {
                acc = acc + g * bv;
            }
            *gav = *gav + acc;
        }
    }
}

/// dB[k,n] += A^T * G[m,n]
pub fn matmul_backward_rhs<S: Scalar>(grad_out: &[S], a: &[S], m: usize, k: usize, n: usize, grad_b: &mut [S]) {
    for i in 0..m {
        let g_row = &grad_out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let gb_row = &mut grad_b[p * n..(p + 1) * n];
            for (gb, &g) in gb_row.iter_mut().zip(g_row) {
                *gb = *gb + av * g;
            }
        }
    }
}

/// Row-wise stabilized softmax of an [n, classes] matrix.
pub fn softmax_rows<S: Scalar>(logits: &[S], classes: usize, out: &mut [S]) {
    for (row, orow) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum = sum + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// Mean softmax cross-entropy against soft target rows.
///
/// Log-sum-exp stabilized, so saturated logits produce a finite loss.
/// Returns the loss and caches the softmax probabilities for backward.
pub fn softmax_cross_entropy_forward<S: Scalar>(
    logits: &[S],
    targets: &[S],
    classes: usize,
    probs: &mut [S],
) -> S {
    let rows = logits.len() / classes;
    softmax_rows(logits, classes, probs);
    let mut loss = S::zero();
    for (row, trow) in logits.chunks(classes).zip(targets.chunks(classes)) {
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        for &v in row {
            sum = sum + (v - m).exp();
        }
        let lse = m + sum.ln();
        let mut dot = S::zero();
        for (&t, &z) in trow.iter().zip(row) {
            dot = dot + t * z;
        }
        loss = loss + lse - dot;
    }
    loss / S::from_f64(rows as f64)
}

/// dlogits += upstream * (probs - targets) / rows
pub fn softmax_cross_entropy_backward<S: Scalar>(
    upstream: S,
    probs: &[S],
    targets: &[S],
    classes: usize,
    grad_logits: &mut [S],
) {
    let rows = probs.len() / classes;
    let scale = upstream / S::from_f64(rows as f64);
    for ((g, &p), &t) in grad_logits.iter_mut().zip(probs).zip(targets) {
        *g = *g + scale * (p - t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-nested-loop convolution, kept deliberately naive as an
    /// independent oracle for the production kernel.
    pub fn conv2d_naive(
        input: &[f64],
        in_shape: &[usize],
        kernel: &[f64],
        k_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (f, _, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let ih = (ohi * stride + khi) as isize - padding as isize;
                                    let iw = (owi * stride + kwi) as isize - padding as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let iv = input[((ni * c + ci) * h + ih as usize) * w + iw as usize];
                                    let kv = kernel[((fi * c + ci) * kh + khi) * kw + kwi];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + ohi) * ow + owi] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        let mut rng = crate::rng::SplitMix64::keyed(99, "conv-oracle");
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 0), (2, 1), (3, 2)] {
            let in_shape = [1, 2, 8, 8];
            let k_shape = [3, 2, 3, 3];
            let input: Vec<f64> = (0..in_shape.iter().product::<usize>())
                .map(|_| rng.next_range(-1.0, 1.0))
                .collect();
            let kernel: Vec<f64> = (0..k_shape.iter().product::<usize>())
                .map(|_| rng.next_range(-1.0, 1.0))
                .collect();
            let (out_shape, _) =
                conv2d_out_shape(&in_shape, &k_shape, stride, padding).unwrap();
            let mut out = vec![0.0; out_shape.iter().product()];
            conv2d_forward(&input, &in_shape, &kernel, &k_shape, stride, padding, &mut out);
            let expect = conv2d_naive(&input, &in_shape, &kernel, &k_shape, stride, padding);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {padding}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn maxpool_prefers_lowest_flat_index_on_ties() {
        let input = vec![1.0f64, 1.0, 1.0, 1.0];
        let mut out = vec![0.0];
        let mut argmax = vec![0u32];
        maxpool2_forward(&input, &[1, 1, 2, 2], &mut out, &mut argmax);
        assert_eq!(out[0], 1.0);
        assert_eq!(argmax[0], 0);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        // logits [0, 0] against class 1: ln 2.
        let mut probs = vec![0.0f64; 2];
        let loss = softmax_cross_entropy_forward(&[0.0, 0.0], &[0.0, 1.0], 2, &mut probs);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // Saturated logits stay finite under the log-sum-exp form.
        let loss = softmax_cross_entropy_forward(&[1000.0, -1000.0], &[1.0, 0.0], 2, &mut probs);
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-12);
    }
}
