//! Dense 3-D convolution via im2col and matrix multiplication.
//!
//! For each sample, the padded input is unfolded into a column matrix of
//! shape [Ci*kd*kh*kw, od*oh*ow]; the kernel acts as a [Co, Ci*kd*kh*kw]
//! matrix so the convolution reduces to one GEMM per sample. 1x1x1 kernels
//! with unit stride skip the unfold and multiply the input view directly.

use super::Scalar;
use ndarray::{ArrayView2, ArrayViewMut2};

pub fn output_dims(xs: [usize; 5], ws: [usize; 5], stride: usize, pad: usize) -> [usize; 5] {
    let sp = |i: usize, k: usize| (i + 2 * pad - k) / stride + 1;
    [
        xs[0],
        ws[0],
        sp(xs[2], ws[2]),
        sp(xs[3], ws[3]),
        sp(xs[4], ws[4]),
    ]
}

fn is_pointwise(ws: [usize; 5], stride: usize, pad: usize) -> bool {
    ws[2] == 1 && ws[3] == 1 && ws[4] == 1 && stride == 1 && pad == 0
}

/// Stride-1 cubic kernels on long rows skip im2col for a direct accumulation
/// over padded rows, which avoids materializing the k-fold column matrix.
/// Short rows stay on the GEMM path where its packing overhead is small.
fn is_direct(ws: [usize; 5], os: [usize; 5], stride: usize, pad: usize) -> bool {
    stride == 1 && ws[2] == ws[3] && ws[3] == ws[4] && ws[2] > 1 && ws[2] > pad && os[4] >= 16
}

/// Copies one sample [ci, d, h, w] into a zero-padded slab
/// [ci, d+2p, h+2p, w+2p].
fn pad_sample<T: Scalar>(x: &[T], ci: usize, d: usize, h: usize, w: usize, p: usize, xp: &mut [T]) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let dp = d + 2 * p;
    xp.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..ci {
        for z in 0..d {
            for y in 0..h {
                let src = ((c * d + z) * h + y) * w;
                let dst = ((c * dp + z + p) * hp + y + p) * wp + p;
                xp[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
}

/// Width of the register tile used by the direct kernels.
const TILE: usize = 16;

/// Direct 3x3x3 convolution of one padded sample. Output channels are
/// processed four at a time so each sixteen-wide tile carries four
/// independent accumulator chains, and tap windows are fixed-size arrays so
/// the innermost loops run without bounds checks. Requires co % 4 == 0.
/// `out` is one sample [co, od, oh, ow].
#[allow(clippy::too_many_arguments)]
fn direct_conv3_sample<T: Scalar>(
    xp: &[T],
    ci: usize,
    dp: usize,
    hp: usize,
    wp: usize,
    w: &[T],
    co: usize,
    bias: Option<&[T]>,
    out: &mut [T],
    od: usize,
    oh: usize,
    ow: usize,
) {
    debug_assert_eq!(co % 4, 0);
    let tiles = ow / TILE;
    let rem = ow % TILE;
    let stride_oc = od * oh * ow;
    for z in 0..od {
        for y in 0..oh {
            for t in 0..tiles {
                let x0 = t * TILE;
                for ob in 0..co / 4 {
                    let oc0 = ob * 4;
                    let mut a0 = [bias.map_or_else(T::zero, |b| b[oc0]); TILE];
                    let mut a1 = [bias.map_or_else(T::zero, |b| b[oc0 + 1]); TILE];
                    let mut a2 = [bias.map_or_else(T::zero, |b| b[oc0 + 2]); TILE];
                    let mut a3 = [bias.map_or_else(T::zero, |b| b[oc0 + 3]); TILE];
                    for c in 0..ci {
                        let w0 = &w[(oc0 * ci + c) * 27..][..27];
                        let w1 = &w[((oc0 + 1) * ci + c) * 27..][..27];
                        let w2 = &w[((oc0 + 2) * ci + c) * 27..][..27];
                        let w3 = &w[((oc0 + 3) * ci + c) * 27..][..27];
                        for kd in 0..3 {
                            let rz = (c * dp + z + kd) * hp;
                            for kh in 0..3 {
                                let r = (rz + y + kh) * wp + x0;
                                let win: &[T; TILE + 2] = xp[r..r + TILE + 2].try_into().unwrap();
                                let tb = (kd * 3 + kh) * 3;
                                let (c00, c01, c02) = (w0[tb], w0[tb + 1], w0[tb + 2]);
                                let (c10, c11, c12) = (w1[tb], w1[tb + 1], w1[tb + 2]);
                                let (c20, c21, c22) = (w2[tb], w2[tb + 1], w2[tb + 2]);
                                let (c30, c31, c32) = (w3[tb], w3[tb + 1], w3[tb + 2]);
                                for l in 0..TILE {
                                    let (s0, s1, s2) = (win[l], win[l + 1], win[l + 2]);
                                    a0[l] = a0[l] + c00 * s0 + c01 * s1 + c02 * s2;
                                    a1[l] = a1[l] + c10 * s0 + c11 * s1 + c12 * s2;
                                    a2[l] = a2[l] + c20 * s0 + c21 * s1 + c22 * s2;
                                    a3[l] = a3[l] + c30 * s0 + c31 * s1 + c32 * s2;
                                }
                            }
                        }
                    }
                    let o0 = ((oc0 * od + z) * oh + y) * ow + x0;
                    out[o0..o0 + TILE].copy_from_slice(&a0);
                    out[o0 + stride_oc..][..TILE].copy_from_slice(&a1);
                    out[o0 + 2 * stride_oc..][..TILE].copy_from_slice(&a2);
                    out[o0 + 3 * stride_oc..][..TILE].copy_from_slice(&a3);
                }
            }
            if rem > 0 {
                let x0 = tiles * TILE;
                for oc in 0..co {
                    let mut acc = [bias.map_or_else(T::zero, |b| b[oc]); TILE];
                    for c in 0..ci {
                        let wr = &w[(oc * ci + c) * 27..][..27];
                        for kd in 0..3 {
                            let rz = (c * dp + z + kd) * hp;
                            for kh in 0..3 {
                                let r = (rz + y + kh) * wp + x0;
                                for kw in 0..3 {
                                    let cf = wr[(kd * 3 + kh) * 3 + kw];
                                    let s = &xp[r + kw..r + kw + rem];
                                    for (a, &sv) in acc.iter_mut().zip(s) {
                                        *a = *a + cf * sv;
                                    }
                                }
                            }
                        }
                    }
                    let o0 = ((oc * od + z) * oh + y) * ow + x0;
                    out[o0..o0 + rem].copy_from_slice(&acc[..rem]);
                }
            }
        }
    }
}

/// Direct convolution of one padded sample. Each output row is processed in
/// sixteen-wide tiles held in a local accumulator across all taps, so every
/// output value is stored exactly once. The output-channel loop sits inside
/// the tile loop so the tap rows are reused from cache across channels.
/// `out` is one sample [co, od, oh, ow].
#[allow(clippy::too_many_arguments)]
fn direct_conv_sample<T: Scalar>(
    xp: &[T],
    ci: usize,
    dp: usize,
    hp: usize,
    wp: usize,
    w: &[T],
    co: usize,
    k: usize,
    bias: Option<&[T]>,
    out: &mut [T],
    od: usize,
    oh: usize,
    ow: usize,
) {
    let kvol = k * k * k;
    let tiles = ow / TILE;
    let rem = ow % TILE;
    for z in 0..od {
        for y in 0..oh {
            for t in 0..tiles {
                let x0 = t * TILE;
                for oc in 0..co {
                    let b = bias.map_or_else(T::zero, |bb| bb[oc]);
                    let mut acc = [b; TILE];
                    for c in 0..ci {
                        let wb = (oc * ci + c) * kvol;
                        for kd in 0..k {
                            for kh in 0..k {
                                let srow = ((c * dp + z + kd) * hp + y + kh) * wp + x0;
                                let wrow = wb + (kd * k + kh) * k;
                                for kw in 0..k {
                                    let cf = w[wrow + kw];
                                    let s = &xp[srow + kw..srow + kw + TILE];
                                    for l in 0..TILE {
                                        acc[l] = acc[l] + cf * s[l];
                                    }
                                }
                            }
                        }
                    }
                    let obase = ((oc * od + z) * oh + y) * ow + x0;
                    out[obase..obase + TILE].copy_from_slice(&acc);
                }
            }
            if rem > 0 {
                let x0 = tiles * TILE;
                for oc in 0..co {
                    let b = bias.map_or_else(T::zero, |bb| bb[oc]);
                    let mut acc = [b; TILE];
                    for c in 0..ci {
                        let wb = (oc * ci + c) * kvol;
                        for kd in 0..k {
                            for kh in 0..k {
                                let srow = ((c * dp + z + kd) * hp + y + kh) * wp + x0;
                                let wrow = wb + (kd * k + kh) * k;
                                for kw in 0..k {
                                    let cf = w[wrow + kw];
                                    let s = &xp[srow + kw..srow + kw + rem];
                                    for (a, &sv) in acc.iter_mut().zip(s) {
                                        *a = *a + cf * sv;
                                    }
                                }
                            }
                        }
                    }
                    let obase = ((oc * od + z) * oh + y) * ow + x0;
                    out[obase..obase + rem].copy_from_slice(&acc[..rem]);
                }
            }
        }
    }
}

/// Dot product with eight independent accumulation lanes so the reduction
/// vectorizes under strict float semantics.
#[inline]
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] = lanes[l] + ca[l] * cb[l];
        }
    }
    let mut acc = T::zero();
    for v in a[chunks * 8..].iter().zip(&b[chunks * 8..]) {
        acc = acc + *v.0 * *v.1;
    }
    for l in lanes {
        acc = acc + l;
    }
    acc
}

/// Kernel gradient of one padded sample for 3x3x3 taps. For each channel
/// pair and depth offset, the nine (kh, kw) taps accumulate in sixteen-wide
/// vector lanes that live across every output row, so each gradient row is
/// loaded once and the horizontal reduction happens once per tap.
#[allow(clippy::too_many_arguments)]
fn direct_dw3_sample<T: Scalar>(
    xp: &[T],
    ci: usize,
    dp: usize,
    hp: usize,
    wp: usize,
    g: &[T],
    co: usize,
    dw: &mut [T],
    od: usize,
    oh: usize,
    ow: usize,
) {
    let rem = ow % TILE;
    for oc in 0..co {
        for c in 0..ci {
            for kd in 0..3 {
                let mut t00 = [T::zero(); TILE];
                let mut t01 = [T::zero(); TILE];
                let mut t02 = [T::zero(); TILE];
                let mut t10 = [T::zero(); TILE];
                let mut t11 = [T::zero(); TILE];
                let mut t12 = [T::zero(); TILE];
                let mut t20 = [T::zero(); TILE];
                let mut t21 = [T::zero(); TILE];
                let mut t22 = [T::zero(); TILE];
                for z in 0..od {
                    let zrow = (c * dp + z + kd) * hp;
                    for y in 0..oh {
                        let grow = &g[((oc * od + z) * oh + y) * ow..][..ow];
                        let rb = (zrow + y) * wp;
                        let row0 = &xp[rb..rb + ow + 2];
                        let row1 = &xp[rb + wp..rb + wp + ow + 2];
                        let row2 = &xp[rb + 2 * wp..rb + 2 * wp + ow + 2];
                        let mut o = 0usize;
                        for gv in grow.chunks_exact(TILE) {
                            let w0: &[T; TILE + 2] = row0[o..o + TILE + 2].try_into().unwrap();
                            let w1: &[T; TILE + 2] = row1[o..o + TILE + 2].try_into().unwrap();
                            let w2: &[T; TILE + 2] = row2[o..o + TILE + 2].try_into().unwrap();
                            for l in 0..TILE {
                                t00[l] = t00[l] + gv[l] * w0[l];
                            }
                            for l in 0..TILE {
                                t01[l] = t01[l] + gv[l] * w0[l + 1];
                            }
                            for l in 0..TILE {
                                t02[l] = t02[l] + gv[l] * w0[l + 2];
                            }
                            for l in 0..TILE {
                                t10[l] = t10[l] + gv[l] * w1[l];
                            }
                            for l in 0..TILE {
                                t11[l] = t11[l] + gv[l] * w1[l + 1];
                            }
                            for l in 0..TILE {
                                t12[l] = t12[l] + gv[l] * w1[l + 2];
                            }
                            for l in 0..TILE {
                                t20[l] = t20[l] + gv[l] * w2[l];
                            }
                            for l in 0..TILE {
                                t21[l] = t21[l] + gv[l] * w2[l + 1];
                            }
                            for l in 0..TILE {
                                t22[l] = t22[l] + gv[l] * w2[l + 2];
                            }
                            o += TILE;
                        }
                        if rem > 0 {
                            let gv = &grow[o..o + rem];
                            for l in 0..rem {
                                let gl = gv[l];
                                t00[l] = t00[l] + gl * row0[o + l];
                                t01[l] = t01[l] + gl * row0[o + l + 1];
                                t02[l] = t02[l] + gl * row0[o + l + 2];
                                t10[l] = t10[l] + gl * row1[o + l];
                                t11[l] = t11[l] + gl * row1[o + l + 1];
                                t12[l] = t12[l] + gl * row1[o + l + 2];
                                t20[l] = t20[l] + gl * row2[o + l];
                                t21[l] = t21[l] + gl * row2[o + l + 1];
                                t22[l] = t22[l] + gl * row2[o + l + 2];
                            }
                        }
                    }
                }
                let base = ((oc * ci + c) * 3 + kd) * 9;
                for (t, lanes) in [t00, t01, t02, t10, t11, t12, t20, t21, t22]
                    .iter()
                    .enumerate()
                {
                    let mut s = T::zero();
                    for &l in lanes {
                        s = s + l;
                    }
                    dw[base + t] = dw[base + t] + s;
                }
            }
        }
    }
}

/// Kernel gradient of one padded sample: per (co, ci, tap) a dot product of
/// the output-gradient row with the shifted input row. Accumulates into `dw`.
#[allow(clippy::too_many_arguments)]
fn direct_dw_sample<T: Scalar>(
    xp: &[T],
    ci: usize,
    dp: usize,
    hp: usize,
    wp: usize,
    g: &[T],
    co: usize,
    k: usize,
    dw: &mut [T],
    od: usize,
    oh: usize,
    ow: usize,
) {
    let kvol = k * k * k;
    let mut tap = vec![T::zero(); kvol];
    for oc in 0..co {
        for c in 0..ci {
            tap.iter_mut().for_each(|v| *v = T::zero());
            for z in 0..od {
                for y in 0..oh {
                    let grow = &g[((oc * od + z) * oh + y) * ow..][..ow];
                    for kd in 0..k {
                        for kh in 0..k {
                            let srow = ((c * dp + z + kd) * hp + y + kh) * wp;
                            for kw in 0..k {
                                let s = &xp[srow + kw..srow + kw + ow];
                                let t = (kd * k + kh) * k + kw;
                                tap[t] = tap[t] + dot_lanes(grow, s);
                            }
                        }
                    }
                }
            }
            let base = (oc * ci + c) * kvol;
            for t in 0..kvol {
                dw[base + t] = dw[base + t] + tap[t];
            }
        }
    }
}

/// Unfolds one sample into `col` ([k_total, out_vol], zero-initialized by the
/// caller so padded taps stay zero).
fn im2col<T: Scalar>(x: &[T], xs: [usize; 5], ws: [usize; 5], stride: usize, pad: usize, col: &mut [T]) {
    let (ci, d, h, w) = (xs[1], xs[2], xs[3], xs[4]);
    let os = output_dims(xs, ws, stride, pad);
    let (od, oh, ow) = (os[2], os[3], os[4]);
    let out_vol = od * oh * ow;
    let mut row = 0usize;
    for c in 0..ci {
        let cbase = c * d * h * w;
        for kd in 0..ws[2] {
            for kh in 0..ws[3] {
                for kw in 0..ws[4] {
                    let dst_row = &mut col[row * out_vol..(row + 1) * out_vol];
                    for o_d in 0..od {
                        let id = (o_d * stride + kd) as isize - pad as isize;
                        if id < 0 || id as usize >= d {
                            continue;
                        }
                        let id = id as usize;
                        for o_h in 0..oh {
                            let ih = (o_h * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            let ih = ih as usize;
                            let src_row = cbase + (id * h + ih) * w;
                            let dst_off = (o_d * oh + o_h) * ow;
                            // Output columns whose input x-index lands in range.
                            let lo = ow_lo(kw, pad, stride);
                            let hi = ow_hi(kw, pad, stride, w, ow);
                            if stride == 1 {
                                if hi > lo {
                                    let iw0 = lo + kw - pad;
                                    dst_row[dst_off + lo..dst_off + hi]
                                        .copy_from_slice(&x[src_row + iw0..src_row + iw0 + (hi - lo)]);
                                }
                            } else {
                                for o_w in lo..hi {
                                    let iw = o_w * stride + kw - pad;
                                    dst_row[dst_off + o_w] = x[src_row + iw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// First output x-index whose tap stays in bounds on the low side.
fn ow_lo(kw: usize, pad: usize, stride: usize) -> usize {
    if kw >= pad {
        0
    } else {
        (pad - kw).div_ceil(stride)
    }
}

/// One past the last in-bounds output x-index: needs `ow*stride + kw - pad < w`.
fn ow_hi(kw: usize, pad: usize, stride: usize, w: usize, ow: usize) -> usize {
    let limit = w + pad;
    if kw >= limit {
        return 0;
    }
    (((limit - kw - 1) / stride) + 1).min(ow)
}

pub fn forward<T: Scalar>(
    x: &[T],
    xs: [usize; 5],
    w: &[T],
    ws: [usize; 5],
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> (Vec<T>, [usize; 5]) {
    let os = output_dims(xs, ws, stride, pad);
    let (n, co) = (os[0], os[1]);
    let out_vol = os[2] * os[3] * os[4];
    let k_total = ws[1] * ws[2] * ws[3] * ws[4];
    let in_vol = xs[1] * xs[2] * xs[3] * xs[4];
    let mut out = vec![T::zero(); n * co * out_vol];
    let pointwise = is_pointwise(ws, stride, pad);
    let direct = !pointwise && is_direct(ws, os, stride, pad);

    if direct {
        let (ci, d, h, wd) = (xs[1], xs[2], xs[3], xs[4]);
        let (dp, hp, wp) = (d + 2 * pad, h + 2 * pad, wd + 2 * pad);
        let mut xp = vec![T::zero(); ci * dp * hp * wp];
        let blocked = ws[2] == 3 && co % 4 == 0;
        for s in 0..n {
            pad_sample(&x[s * in_vol..(s + 1) * in_vol], ci, d, h, wd, pad, &mut xp);
            let on = &mut out[s * co * out_vol..(s + 1) * co * out_vol];
            if blocked {
                direct_conv3_sample(&xp, ci, dp, hp, wp, w, co, bias, on, os[2], os[3], os[4]);
            } else {
                direct_conv_sample(&xp, ci, dp, hp, wp, w, co, ws[2], bias, on, os[2], os[3], os[4]);
            }
        }
        return (out, os);
    }

    let wv = ArrayView2::from_shape((co, k_total), w).unwrap();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k_total * out_vol]
    };
    for s in 0..n {
        let xn = &x[s * in_vol..(s + 1) * in_vol];
        let mut ov =
            ArrayViewMut2::from_shape((co, out_vol), &mut out[s * co * out_vol..(s + 1) * co * out_vol])
                .unwrap();
        if pointwise {
            let cv = ArrayView2::from_shape((k_total, out_vol), xn).unwrap();
            ndarray::linalg::general_mat_mul(T::one(), &wv, &cv, T::zero(), &mut ov);
        } else {
            col.iter_mut().for_each(|v| *v = T::zero());
            im2col(xn, xs, ws, stride, pad, &mut col);
            let cv = ArrayView2::from_shape((k_total, out_vol), &col[..]).unwrap();
            ndarray::linalg::general_mat_mul(T::one(), &wv, &cv, T::zero(), &mut ov);
        }
    }
    if let Some(b) = bias {
        for s in 0..n {
            for c in 0..co {
                let off = (s * co + c) * out_vol;
                let bc = b[c];
                for v in &mut out[off..off + out_vol] {
                    *v = *v + bc;
                }
            }
        }
    }
    (out, os)
}

/// Scatters one sample's column-gradient back onto the input gradient.
fn col2im<T: Scalar>(dcol: &[T], xs: [usize; 5], ws: [usize; 5], stride: usize, pad: usize, dx: &mut [T]) {
    let (ci, d, h, w) = (xs[1], xs[2], xs[3], xs[4]);
    let os = output_dims(xs, ws, stride, pad);
    let (od, oh, ow) = (os[2], os[3], os[4]);
    let out_vol = od * oh * ow;
    let mut row = 0usize;
    for c in 0..ci {
        let cbase = c * d * h * w;
        for kd in 0..ws[2] {
            for kh in 0..ws[3] {
                for kw in 0..ws[4] {
                    let src_row = &dcol[row * out_vol..(row + 1) * out_vol];
                    for o_d in 0..od {
                        let id = (o_d * stride + kd) as isize - pad as isize;
                        if id < 0 || id as usize >= d {
                            continue;
                        }
                        let id = id as usize;
                        for o_h in 0..oh {
                            let ih = (o_h * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            let ih = ih as usize;
                            let dst_base = cbase + (id * h + ih) * w;
                            let src_off = (o_d * oh + o_h) * ow;
                            let lo = ow_lo(kw, pad, stride);
                            let hi = ow_hi(kw, pad, stride, w, ow);
                            for o_w in lo..hi {
                                let iw = o_w * stride + kw - pad;
                                dx[dst_base + iw] = dx[dst_base + iw] + src_row[src_off + o_w];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Kernel with input/output channels swapped and taps flipped, so the input
/// gradient of a stride-1 convolution is itself a convolution of the output
/// gradient (pad' = k - 1 - pad per axis).
fn transpose_flip_kernel<T: Scalar>(w: &[T], ws: [usize; 5]) -> Vec<T> {
    let (co, ci, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let kvol = kd * kh * kw;
    let mut wt = vec![T::zero(); ci * co * kvol];
    for o in 0..co {
        for i in 0..ci {
            for t in 0..kvol {
                wt[(i * co + o) * kvol + (kvol - 1 - t)] = w[(o * ci + i) * kvol + t];
            }
        }
    }
    wt
}

#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    x: &[T],
    xs: [usize; 5],
    w: &[T],
    ws: [usize; 5],
    grad_out: &[T],
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let os = output_dims(xs, ws, stride, pad);
    let (n, co) = (os[0], os[1]);
    let out_vol = os[2] * os[3] * os[4];
    let k_total = ws[1] * ws[2] * ws[3] * ws[4];
    let in_vol = xs[1] * xs[2] * xs[3] * xs[4];
    let pointwise = is_pointwise(ws, stride, pad);

    let mut dx = if need_dx { Some(vec![T::zero(); n * in_vol]) } else { None };
    let mut dw = if need_dw { Some(vec![T::zero(); co * k_total]) } else { None };
    let mut db = if need_db { Some(vec![T::zero(); co]) } else { None };

    if let Some(db) = db.as_mut() {
        for s in 0..n {
            for c in 0..co {
                let off = (s * co + c) * out_vol;
                let mut acc = T::zero();
                for &gv in &grad_out[off..off + out_vol] {
                    acc = acc + gv;
                }
                db[c] = db[c] + acc;
            }
        }
    }

    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }

    let direct = !pointwise && is_direct(ws, os, stride, pad);
    if direct {
        let (ci, d, h, wd) = (xs[1], xs[2], xs[3], xs[4]);
        let k = ws[2];
        let (dp, hp, wp) = (d + 2 * pad, h + 2 * pad, wd + 2 * pad);
        // Input gradient is the stride-1 convolution of the output gradient
        // with the channel-swapped, tap-flipped kernel at pad' = k - 1 - pad.
        let padt = k - 1 - pad;
        let (gdp, ghp, gwp) = (os[2] + 2 * padt, os[3] + 2 * padt, os[4] + 2 * padt);
        let wt = if dx.is_some() {
            transpose_flip_kernel(w, ws)
        } else {
            Vec::new()
        };
        let mut xp = if dw.is_some() {
            vec![T::zero(); ci * dp * hp * wp]
        } else {
            Vec::new()
        };
        let mut gp = if dx.is_some() {
            vec![T::zero(); co * gdp * ghp * gwp]
        } else {
            Vec::new()
        };
        for s in 0..n {
            let gn = &grad_out[s * co * out_vol..(s + 1) * co * out_vol];
            if let Some(dw) = dw.as_mut() {
                pad_sample(&x[s * in_vol..(s + 1) * in_vol], ci, d, h, wd, pad, &mut xp);
                if k == 3 {
                    direct_dw3_sample(&xp, ci, dp, hp, wp, gn, co, dw, os[2], os[3], os[4]);
                } else {
                    direct_dw_sample(&xp, ci, dp, hp, wp, gn, co, k, dw, os[2], os[3], os[4]);
                }
            }
            if let Some(dx) = dx.as_mut() {
                pad_sample(gn, co, os[2], os[3], os[4], padt, &mut gp);
                let dxs = &mut dx[s * in_vol..(s + 1) * in_vol];
                if k == 3 && ci % 4 == 0 {
                    direct_conv3_sample(&gp, co, gdp, ghp, gwp, &wt, ci, None, dxs, d, h, wd);
                } else {
                    direct_conv_sample(&gp, co, gdp, ghp, gwp, &wt, ci, k, None, dxs, d, h, wd);
                }
            }
        }
        return (dx, dw, db);
    }

    let wv = ArrayView2::from_shape((co, k_total), w).unwrap();
    // Stride-1 cubic kernels admit a transposed-convolution form for the
    // input gradient: convolve the output gradient with the channel-swapped,
    // tap-flipped kernel at pad' = k - 1 - pad. That replaces the scattered
    // col2im accumulation with a second GEMM over a gradient column matrix.
    let trans_dx = dx.is_some()
        && !pointwise
        && stride == 1
        && ws[2] == ws[3]
        && ws[3] == ws[4]
        && ws[2] > 1
        && ws[2] > pad;
    let kvol = ws[2] * ws[3] * ws[4];
    let spat = xs[2] * xs[3] * xs[4];
    let (wt, wts, padt) = if trans_dx {
        (
            transpose_flip_kernel(w, ws),
            [xs[1], co, ws[2], ws[3], ws[4]],
            ws[2] - 1 - pad,
        )
    } else {
        (Vec::new(), ws, 0)
    };
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k_total * out_vol]
    };
    let mut dcol = if pointwise || dx.is_none() || trans_dx {
        Vec::new()
    } else {
        vec![T::zero(); k_total * out_vol]
    };
    let mut gcol = if trans_dx {
        vec![T::zero(); co * kvol * spat]
    } else {
        Vec::new()
    };

    for s in 0..n {
        let gn = &grad_out[s * co * out_vol..(s + 1) * co * out_vol];
        let gv = ArrayView2::from_shape((co, out_vol), gn).unwrap();
        let xn = &x[s * in_vol..(s + 1) * in_vol];
        if pointwise {
            if let Some(dw) = dw.as_mut() {
                let cv = ArrayView2::from_shape((k_total, out_vol), xn).unwrap();
                let mut dwv = ArrayViewMut2::from_shape((co, k_total), &mut dw[..]).unwrap();
                ndarray::linalg::general_mat_mul(T::one(), &gv, &cv.t(), T::one(), &mut dwv);
            }
            if let Some(dx) = dx.as_mut() {
                let mut dxv =
                    ArrayViewMut2::from_shape((k_total, out_vol), &mut dx[s * in_vol..(s + 1) * in_vol])
                        .unwrap();
                ndarray::linalg::general_mat_mul(T::one(), &wv.t(), &gv, T::zero(), &mut dxv);
            }
        } else {
            if dw.is_some() {
                col.iter_mut().for_each(|v| *v = T::zero());
                im2col(xn, xs, ws, stride, pad, &mut col);
                let cv = ArrayView2::from_shape((k_total, out_vol), &col[..]).unwrap();
                let dwm = dw.as_mut().unwrap();
                let mut dwv = ArrayViewMut2::from_shape((co, k_total), &mut dwm[..]).unwrap();
                ndarray::linalg::general_mat_mul(T::one(), &gv, &cv.t(), T::one(), &mut dwv);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * in_vol..(s + 1) * in_vol];
                if trans_dx {
                    gcol.iter_mut().for_each(|v| *v = T::zero());
                    im2col(gn, os, wts, 1, padt, &mut gcol);
                    let cv = ArrayView2::from_shape((co * kvol, spat), &gcol[..]).unwrap();
                    let wtv = ArrayView2::from_shape((xs[1], co * kvol), &wt[..]).unwrap();
                    let mut dxv = ArrayViewMut2::from_shape((xs[1], spat), dxs).unwrap();
                    ndarray::linalg::general_mat_mul(T::one(), &wtv, &cv, T::zero(), &mut dxv);
                } else {
                    let mut dcv =
                        ArrayViewMut2::from_shape((k_total, out_vol), &mut dcol[..]).unwrap();
                    ndarray::linalg::general_mat_mul(T::one(), &wv.t(), &gv, T::zero(), &mut dcv);
                    col2im(&dcol, xs, ws, stride, pad, dxs);
                }
            }
        }
    }
    (dx, dw, db)
}
