//! Raw loops behind the convolution, pooling and matrix nodes.
//!
//! Feature maps are `H×W×C` (channel fastest); filters are `k×k×Cin×Cout`.
//! For every output value the convolution accumulates in `(ky, kx, ci)` order
//! starting from zero and adds the bias last, so a plain nested loop written in
//! the same order reproduces it bit for bit.

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        self.kernel / 2
    }
}

/// Filter rows computed together by the specialised filter-gradient kernel.
const X_BLOCK: usize = 4;

/// Copy of `input` with `pad` zero rows and columns around it and
/// `extra_right` more zero columns on the right.
fn zero_padded<T: Scalar>(input: &[T], dims: ConvDims, extra_right: usize) -> (Vec<T>, usize) {
    let pad = dims.pad();
    let cin = dims.in_channels;
    let pw = dims.width + 2 * pad + extra_right;
    let ph = dims.height + 2 * pad;
    let mut out = vec![T::zero(); ph * pw * cin];
    for y in 0..dims.height {
        let src = &input[y * dims.width * cin..][..dims.width * cin];
        out[((y + pad) * pw + pad) * cin..][..dims.width * cin].copy_from_slice(src);
    }
    (out, pw)
}

/// Same-padded, stride-1 cross-correlation.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    filters: &[T],
    bias: &[T],
    dims: ConvDims,
    out: &mut [T],
) {
    debug_assert_eq!(input.len(), dims.height * dims.width * dims.in_channels);
    debug_assert_eq!(filters.len(), dims.kernel * dims.kernel * dims.in_channels * dims.out_channels);
    debug_assert_eq!(out.len(), dims.height * dims.width * dims.out_channels);
    match dims.out_channels {
        4 => forward_fixed::<T, 4, 8>(input, filters, bias, dims, out),
        8 => forward_fixed::<T, 8, 8>(input, filters, bias, dims, out),
        16 => forward_fixed::<T, 16, 4>(input, filters, bias, dims, out),
        32 => forward_fixed::<T, 32, 4>(input, filters, bias, dims, out),
        64 => forward_fixed::<T, 64, 2>(input, filters, bias, dims, out),
        _ => forward_generic(input, filters, bias, dims, out),
    }
}

// Padding taps contribute `0 · w`, which leaves every accumulator value
// unchanged, so the result equals the generic loop.
fn forward_fixed<T: Scalar, const N: usize, const XB: usize>(
    input: &[T],
    filters: &[T],
    bias: &[T],
    dims: ConvDims,
    out: &mut [T],
) {
    let (height, width, cin, k) = (dims.height, dims.width, dims.in_channels, dims.kernel);
    let (padded, pw) = zero_padded(input, dims, XB);
    let bias: &[T; N] = bias.try_into().expect("bias length");
    for y in 0..height {
        for x0 in (0..width).step_by(XB) {
            let mut acc = [[T::zero(); N]; XB];
            for ky in 0..k {
                let row = (y + ky) * pw + x0;
                for kx in 0..k {
                    let taps = &padded[(row + kx) * cin..][..(XB - 1) * cin + cin];
                    let wbase = (ky * k + kx) * cin * N;
                    for ci in 0..cin {
                        let wrow: &[T; N] = filters[wbase + ci * N..][..N].try_into().unwrap();
                        for (j, a) in acc.iter_mut().enumerate() {
                            let v = taps[j * cin + ci];
                            for n in 0..N {
                                a[n] += v * wrow[n];
                            }
                        }
                    }
                }
            }
            for (j, a) in acc.iter().enumerate().take(width - x0) {
                let dst = &mut out[(y * width + x0 + j) * N..][..N];
                for n in 0..N {
                    dst[n] = a[n] + bias[n];
                }
            }
        }
    }
}

fn forward_generic<T: Scalar>(
    input: &[T],
    filters: &[T],
    bias: &[T],
    dims: ConvDims,
    out: &mut [T],
) {
    let ConvDims {
        height,
        width,
        in_channels: cin,
        out_channels: cout,
        kernel: k,
    } = dims;
    let pad = dims.pad();
    for y in 0..height {
        for x in 0..width {
            let acc = &mut out[(y * width + x) * cout..][..cout];
            acc.fill(T::zero());
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < height) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < width) else {
                        continue;
                    };
                    let px = &input[(iy * width + ix) * cin..][..cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        let wrow = &filters[wbase + ci * cout..][..cout];
                        for (a, &w) in acc.iter_mut().zip(wrow) {
                            *a += v * w;
                        }
                    }
                }
            }
            for (a, &b) in acc.iter_mut().zip(bias) {
                *a += b;
            }
        }
    }
}

/// Accumulates filter and bias gradients, and the input gradient when asked.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    filters: &[T],
    grad_out: &[T],
    dims: ConvDims,
    grad_filters: &mut [T],
    grad_bias: &mut [T],
    grad_input: Option<&mut [T]>,
) {
    match dims.out_channels {
        4 => backward_fixed::<T, 4>(input, filters, grad_out, dims, grad_filters, grad_bias, grad_input),
        8 => backward_fixed::<T, 8>(input, filters, grad_out, dims, grad_filters, grad_bias, grad_input),
        16 => backward_fixed::<T, 16>(input, filters, grad_out, dims, grad_filters, grad_bias, grad_input),
        32 => backward_fixed::<T, 32>(input, filters, grad_out, dims, grad_filters, grad_bias, grad_input),
        64 => backward_fixed::<T, 64>(input, filters, grad_out, dims, grad_filters, grad_bias, grad_input),
        _ => backward_generic(input, filters, grad_out, dims, grad_filters, grad_bias, grad_input),
    }
}

fn backward_fixed<T: Scalar, const N: usize>(
    input: &[T],
    filters: &[T],
    grad_out: &[T],
    dims: ConvDims,
    grad_filters: &mut [T],
    grad_bias: &mut [T],
    grad_input: Option<&mut [T]>,
) {
    let (height, width, cin, k) = (dims.height, dims.width, dims.in_channels, dims.kernel);
    let (padded, pw) = zero_padded(input, dims, 0);
    let g_rows: &[[T; N]] = grad_out.as_chunks::<N>().0;

    let mut gb = [T::zero(); N];
    for g in g_rows {
        for n in 0..N {
            gb[n] += g[n];
        }
    }
    for n in 0..N {
        grad_bias[n] += gb[n];
    }

    // Four filter rows (tap, input channel) share each output-gradient row.
    let rows = k * k * cin;
    let offsets: Vec<usize> = (0..rows)
        .map(|r| {
            let (tap, ci) = (r / cin, r % cin);
            ((tap / k) * pw + tap % k) * cin + ci
        })
        .collect();
    for r0 in (0..rows).step_by(X_BLOCK) {
        let mut off = [0usize; X_BLOCK];
        for (j, o) in off.iter_mut().enumerate() {
            *o = offsets[(r0 + j).min(rows - 1)];
        }
        let mut acc = [[T::zero(); N]; X_BLOCK];
        for y in 0..height {
            let base = y * pw * cin;
            for (x, g) in g_rows[y * width..][..width].iter().enumerate() {
                let pb = base + x * cin;
                for (a, &o) in acc.iter_mut().zip(&off) {
                    let v = padded[pb + o];
                    for n in 0..N {
                        a[n] += v * g[n];
                    }
                }
            }
        }
        for (j, a) in acc.iter().enumerate().take(rows - r0) {
            let dst = &mut grad_filters[(r0 + j) * N..][..N];
            for n in 0..N {
                dst[n] += a[n];
            }
        }
    }

    let Some(grad_input) = grad_input else {
        return;
    };
    // The input gradient is a same-padded correlation of the output gradient
    // with the spatially flipped filters, transposed to k×k×Cout×Cin.
    let mut flipped = vec![T::zero(); filters.len()];
    for ky in 0..k {
        for kx in 0..k {
            let src_tap = (k - 1 - ky) * k + (k - 1 - kx);
            let dst_tap = ky * k + kx;
            for ci in 0..cin {
                for co in 0..N {
                    flipped[(dst_tap * N + co) * cin + ci] = filters[(src_tap * cin + ci) * N + co];
                }
            }
        }
    }
    let back = ConvDims {
        height,
        width,
        in_channels: N,
        out_channels: cin,
        kernel: k,
    };
    let zero_bias = vec![T::zero(); cin];
    let mut gi = vec![T::zero(); grad_input.len()];
    conv2d_forward(grad_out, &flipped, &zero_bias, back, &mut gi);
    for (d, s) in grad_input.iter_mut().zip(gi) {
        *d += s;
    }
}

fn backward_generic<T: Scalar>(
    input: &[T],
    filters: &[T],
    grad_out: &[T],
    dims: ConvDims,
    grad_filters: &mut [T],
    grad_bias: &mut [T],
    grad_input: Option<&mut [T]>,
) {
    let ConvDims {
        height,
        width,
        in_channels: cin,
        out_channels: cout,
        kernel: k,
    } = dims;
    let pad = dims.pad();

    for y in 0..height {
        for x in 0..width {
            let g = &grad_out[(y * width + x) * cout..][..cout];
            for (b, &gv) in grad_bias.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < height) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < width) else {
                        continue;
                    };
                    let px = &input[(iy * width + ix) * cin..][..cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        let grow = &mut grad_filters[wbase + ci * cout..][..cout];
                        for (gw, &gv) in grow.iter_mut().zip(g) {
                            *gw += v * gv;
                        }
                    }
                }
            }
        }
    }

    let Some(grad_input) = grad_input else {
        return;
    };
    // Filters transposed to k×k×Cout×Cin so the inner loop runs over input channels.
    let mut transposed = vec![T::zero(); filters.len()];
    for tap in 0..k * k {
        for ci in 0..cin {
            for co in 0..cout {
                transposed[(tap * cout + co) * cin + ci] = filters[(tap * cin + ci) * cout + co];
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            let g = &grad_out[(y * width + x) * cout..][..cout];
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < height) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < width) else {
                        continue;
                    };
                    let gin = &mut grad_input[(iy * width + ix) * cin..][..cin];
                    let tbase = (ky * k + kx) * cout * cin;
                    for (co, &gv) in g.iter().enumerate() {
                        let wrow = &transposed[tbase + co * cin..][..cin];
                        for (d, &w) in gin.iter_mut().zip(wrow) {
                            *d += gv * w;
                        }
                    }
                }
            }
        }
    }
}

/// Output extent and leading pad of a 3-wide, stride-2, same-padded window.
pub fn pool_extent(len: usize) -> (usize, usize) {
    let out = len.div_ceil(2);
    let total_pad = ((out.saturating_sub(1)) * 2 + 3).saturating_sub(len);
    (out, total_pad / 2)
}

/// 3×3 stride-2 max pooling with same padding. Returns the output and, per
/// output value, the flat input index that produced it (first maximum in
/// window scan order).
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    height: usize,
    width: usize,
    channels: usize,
) -> (Vec<T>, Vec<u32>, usize, usize) {
    let (oh, pad_y) = pool_extent(height);
    let (ow, pad_x) = pool_extent(width);
    let mut out = vec![T::neg_infinity(); oh * ow * channels];
    let mut arg = vec![0u32; oh * ow * channels];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * channels;
            for dy in 0..3 {
                let Some(iy) = (oy * 2 + dy).checked_sub(pad_y).filter(|&v| v < height) else {
                    continue;
                };
                for dx in 0..3 {
                    let Some(ix) = (ox * 2 + dx).checked_sub(pad_x).filter(|&v| v < width) else {
                        continue;
                    };
                    let ibase = (iy * width + ix) * channels;
                    for c in 0..channels {
                        let v = input[ibase + c];
                        if v > out[obase + c] {
                            out[obase + c] = v;
                            arg[obase + c] = (ibase + c) as u32;
                        }
                    }
                }
            }
        }
    }
    (out, arg, oh, ow)
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..][..n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..][..n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_extents() {
        assert_eq!(pool_extent(160), (80, 0));
        assert_eq!(pool_extent(5), (3, 1));
        assert_eq!(pool_extent(1), (1, 1));
        let mut h = 160;
        let mut w = 640;
        for _ in 0..5 {
            h = pool_extent(h).0;
            w = pool_extent(w).0;
        }
        assert_eq!((h, w), (5, 20));
    }
}
