//! Raw numeric kernels for the graph primitives.
//!
//! Every kernel fixes its floating-point summation order (contraction indices
//! ascending, one accumulator per output element) so results are bit-identical
//! across runs and match naive triple-loop oracles.

use crate::tensor::Tensor;

/// Effective dims of a stored `rows x cols` matrix under an optional transpose.
#[inline]
fn eff(rows: usize, cols: usize, trans: bool) -> (usize, usize) {
    if trans {
        (cols, rows)
    } else {
        (rows, cols)
    }
}

#[inline]
fn at(data: &[f64], cols: usize, trans: bool, i: usize, l: usize) -> f64 {
    if trans {
        data[l * cols + i]
    } else {
        data[i * cols + l]
    }
}

/// General matrix product over stored layouts: `out = A_eff * B_eff`.
///
/// `out` must have length `m * n` where `m` and `n` are the effective row and
/// column counts. Existing contents of `out` are overwritten.
pub fn gemm(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    out: &mut [f64],
) {
    let (m, k) = eff(a_dims.0, a_dims.1, trans_a);
    let (k2, n) = eff(b_dims.0, b_dims.1, trans_b);
    debug_assert_eq!(k, k2);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += at(a, a_dims.1, trans_a, i, l) * at(b, b_dims.1, trans_b, l, j);
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out += A_eff * B_eff`, same conventions as [`gemm`].
pub fn gemm_acc(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    out: &mut [f64],
) {
    let (m, k) = eff(a_dims.0, a_dims.1, trans_a);
    let (_, n) = eff(b_dims.0, b_dims.1, trans_b);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += at(a, a_dims.1, trans_a, i, l) * at(b, b_dims.1, trans_b, l, j);
            }
            out[i * n + j] += acc;
        }
    }
}

/// Top/left padding used by "same" conv at stride 1.
#[inline]
pub fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

/// Zero-pad a `[c, h, w]` image by `(k_h - 1, k_w - 1)` total rows/cols.
pub fn pad_image(input: &[f64], c: usize, h: usize, w: usize, k_h: usize, k_w: usize) -> Vec<f64> {
    let ph = h + k_h - 1;
    let pw = w + k_w - 1;
    let top = same_pad(k_h);
    let left = same_pad(k_w);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &input[ch * h * w + y * w..ch * h * w + y * w + w];
            let dst_off = ch * ph * pw + (y + top) * pw + left;
            out[dst_off..dst_off + w].copy_from_slice(src);
        }
    }
    out
}

/// Output spatial dims of a stride-1 convolution.
pub fn conv_out_dims(h: usize, w: usize, k_h: usize, k_w: usize, same: bool) -> (usize, usize) {
    if same {
        (h, w)
    } else {
        (h - k_h + 1, w - k_w + 1)
    }
}

/// Stride-1 2-D convolution (cross-correlation) of a `[c_in, h, w]` image with
/// a `[c_out, c_in, k_h, k_w]` kernel. For "same" padding the input is
/// zero-padded symmetrically; output is `[c_out, oh, ow]`.
pub fn conv2d_forward(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    kernel: &[f64],
    (c_out, k_h, k_w): (usize, usize, usize),
    same: bool,
) -> Vec<f64> {
    let (oh, ow) = conv_out_dims(h, w, k_h, k_w, same);
    let (src, sh, sw): (std::borrow::Cow<[f64]>, usize, usize) = if same {
        (
            pad_image(input, c_in, h, w, k_h, k_w).into(),
            h + k_h - 1,
            w + k_w - 1,
        )
    } else {
        (input.into(), h, w)
    };
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        let out_ch = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..c_in {
            for ky in 0..k_h {
                for kx in 0..k_w {
                    let kv = kernel[((o * c_in + c) * k_h + ky) * k_w + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let src_row = &src[c * sh * sw + (y + ky) * sw + kx..];
                        let dst_row = &mut out_ch[y * ow..(y + 1) * ow];
                        for (d, s) in dst_row.iter_mut().zip(src_row[..ow].iter()) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv2d_forward`]: accumulates gradients w.r.t. the
/// input and the kernel given the output gradient `g` of shape
/// `[c_out, oh, ow]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    kernel: &[f64],
    (c_out, k_h, k_w): (usize, usize, usize),
    same: bool,
    g: &[f64],
    d_input: &mut [f64],
    d_kernel: &mut [f64],
) {
    let (oh, ow) = conv_out_dims(h, w, k_h, k_w, same);
    let (sh, sw) = if same { (h + k_h - 1, w + k_w - 1) } else { (h, w) };
    let src: std::borrow::Cow<[f64]> = if same {
        pad_image(input, c_in, h, w, k_h, k_w).into()
    } else {
        input.into()
    };
    // Gradient w.r.t. the padded input, cropped afterwards.
    let mut d_src = vec![0.0; c_in * sh * sw];
    for o in 0..c_out {
        let g_ch = &g[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..c_in {
            for ky in 0..k_h {
                for kx in 0..k_w {
                    let kidx = ((o * c_in + c) * k_h + ky) * k_w + kx;
                    let kv = kernel[kidx];
                    let mut kg = 0.0;
                    for y in 0..oh {
                        let g_row = &g_ch[y * ow..(y + 1) * ow];
                        let src_off = c * sh * sw + (y + ky) * sw + kx;
                        let src_row = &src[src_off..src_off + ow];
                        let d_row = &mut d_src[src_off..src_off + ow];
                        for x in 0..ow {
                            kg += g_row[x] * src_row[x];
                            d_row[x] += g_row[x] * kv;
                        }
                    }
                    d_kernel[kidx] += kg;
                }
            }
        }
    }
    // Crop padding back off.
    if same {
        let top = same_pad(k_h);
        let left = same_pad(k_w);
        for c in 0..c_in {
            for y in 0..h {
                for x in 0..w {
                    d_input[c * h * w + y * w + x] += d_src[c * sh * sw + (y + top) * sw + x + left];
                }
            }
        }
    } else {
        for (d, s) in d_input.iter_mut().zip(d_src.iter()) {
            *d += s;
        }
    }
}

/// Mean softmax cross-entropy over rows of `[n, c]` logits.
pub fn softmax_xent_forward(logits: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len();
    let c = logits.shape()[1];
    let data = logits.data();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &data[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - m).exp();
        }
        total += sum.ln() - (row[y] - m);
    }
    total / n as f64
}

/// Gradient of the mean softmax cross-entropy w.r.t. the logits, scaled by the
/// upstream scalar gradient `g`.
pub fn softmax_xent_backward(logits: &Tensor, labels: &[usize], g: f64, d_logits: &mut [f64]) {
    let n = labels.len();
    let c = logits.shape()[1];
    let data = logits.data();
    let scale = g / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = &data[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - m).exp();
        }
        for j in 0..c {
            let p = (row[j] - m).exp() / sum;
            let ind = if j == y { 1.0 } else { 0.0 };
            d_logits[i * c + j] += scale * (p - ind);
        }
    }
}
