//! Anti-aliased stride-2 downsampling and trilinear upsampling.

use super::Scalar;

/// Binomial blur taps [1, 4, 6, 4, 1] / 16.
const TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Blurs one axis of a [D, H, W] volume with clamp-to-edge padding.
/// `axis` 0 = z (slowest), 2 = x (fastest).
fn blur_axis<T: Scalar>(src: &[T], dims: [usize; 3], axis: usize, dst: &mut [T]) {
    let (d, h, w) = (dims[0], dims[1], dims[2]);
    let taps: [T; 5] = std::array::from_fn(|i| T::from_f64c(TAPS[i]));
    let n = dims[axis] as isize;
    let clamp = |i: isize| i.clamp(0, n - 1) as usize;
    match axis {
        2 => {
            for row in 0..d * h {
                let s = &src[row * w..(row + 1) * w];
                let o = &mut dst[row * w..(row + 1) * w];
                for i in 0..w as isize {
                    let mut acc = T::zero();
                    for (k, &t) in taps.iter().enumerate() {
                        acc = acc + t * s[clamp(i + k as isize - 2)];
                    }
                    o[i as usize] = acc;
                }
            }
        }
        1 => {
            for z in 0..d {
                let sl = &src[z * h * w..(z + 1) * h * w];
                let ol = &mut dst[z * h * w..(z + 1) * h * w];
                for y in 0..h as isize {
                    let orow = &mut ol[y as usize * w..(y as usize + 1) * w];
                    orow.iter_mut().for_each(|v| *v = T::zero());
                    for (k, &t) in taps.iter().enumerate() {
                        let sy = clamp(y + k as isize - 2);
                        let srow = &sl[sy * w..(sy + 1) * w];
                        for (ov, &sv) in orow.iter_mut().zip(srow) {
                            *ov = *ov + t * sv;
                        }
                    }
                }
            }
        }
        0 => {
            for z in 0..d as isize {
                let ol = &mut dst[z as usize * h * w..(z as usize + 1) * h * w];
                ol.iter_mut().for_each(|v| *v = T::zero());
                for (k, &t) in taps.iter().enumerate() {
                    let sz = clamp(z + k as isize - 2);
                    let sl = &src[sz * h * w..(sz + 1) * h * w];
                    for (ov, &sv) in ol.iter_mut().zip(sl) {
                        *ov = *ov + t * sv;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Transpose of `blur_axis`: scatters `src` back with the same taps and
/// clamped indices, accumulating into `dst`.
fn blur_axis_transpose<T: Scalar>(src: &[T], dims: [usize; 3], axis: usize, dst: &mut [T]) {
    let (d, h, w) = (dims[0], dims[1], dims[2]);
    let taps: [T; 5] = std::array::from_fn(|i| T::from_f64c(TAPS[i]));
    let n = dims[axis] as isize;
    let clamp = |i: isize| i.clamp(0, n - 1) as usize;
    dst.iter_mut().for_each(|v| *v = T::zero());
    match axis {
        2 => {
            for row in 0..d * h {
                let s = &src[row * w..(row + 1) * w];
                let o = &mut dst[row * w..(row + 1) * w];
                for i in 0..w as isize {
                    let g = s[i as usize];
                    for (k, &t) in taps.iter().enumerate() {
                        let j = clamp(i + k as isize - 2);
                        o[j] = o[j] + t * g;
                    }
                }
            }
        }
        1 => {
            for z in 0..d {
                let sl = &src[z * h * w..(z + 1) * h * w];
                let ol = &mut dst[z * h * w..(z + 1) * h * w];
                for y in 0..h as isize {
                    let srow = &sl[y as usize * w..(y as usize + 1) * w];
                    for (k, &t) in taps.iter().enumerate() {
                        let dy = clamp(y + k as isize - 2);
                        let orow = &mut ol[dy * w..(dy + 1) * w];
                        for (ov, &sv) in orow.iter_mut().zip(srow) {
                            *ov = *ov + t * sv;
                        }
                    }
                }
            }
        }
        0 => {
            for z in 0..d as isize {
                let sl = &src[z as usize * h * w..(z as usize + 1) * h * w];
                for (k, &t) in taps.iter().enumerate() {
                    let dz = clamp(z + k as isize - 2);
                    let ol = &mut dst[dz * h * w..(dz + 1) * h * w];
                    for (ov, &sv) in ol.iter_mut().zip(sl) {
                        *ov = *ov + t * sv;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

pub fn blurpool_forward<T: Scalar>(x: &[T], xs: [usize; 5]) -> (Vec<T>, [usize; 5]) {
    let dims = [xs[2], xs[3], xs[4]];
    let (d, h, w) = (dims[0], dims[1], dims[2]);
    let (od, oh, ow) = (half(d), half(h), half(w));
    let vol = d * h * w;
    let out_vol = od * oh * ow;
    let nc = xs[0] * xs[1];
    let mut out = vec![T::zero(); nc * out_vol];
    let mut t1 = vec![T::zero(); vol];
    let mut t2 = vec![T::zero(); vol];
    for c in 0..nc {
        let src = &x[c * vol..(c + 1) * vol];
        blur_axis(src, dims, 2, &mut t1);
        blur_axis(&t1, dims, 1, &mut t2);
        blur_axis(&t2, dims, 0, &mut t1);
        let o = &mut out[c * out_vol..(c + 1) * out_vol];
        for zd in 0..od {
            for yh in 0..oh {
                let srow = (2 * zd * h + 2 * yh) * w;
                let orow = (zd * oh + yh) * ow;
                for xw in 0..ow {
                    o[orow + xw] = t1[srow + 2 * xw];
                }
            }
        }
    }
    (out, [xs[0], xs[1], od, oh, ow])
}

pub fn blurpool_backward<T: Scalar>(grad_out: &[T], xs: [usize; 5]) -> Vec<T> {
    let dims = [xs[2], xs[3], xs[4]];
    let (d, h, w) = (dims[0], dims[1], dims[2]);
    let (od, oh, ow) = (half(d), half(h), half(w));
    let vol = d * h * w;
    let out_vol = od * oh * ow;
    let nc = xs[0] * xs[1];
    let mut dx = vec![T::zero(); nc * vol];
    let mut t1 = vec![T::zero(); vol];
    let mut t2 = vec![T::zero(); vol];
    for c in 0..nc {
        let g = &grad_out[c * out_vol..(c + 1) * out_vol];
        // Transpose of subsampling: place gradients at even coordinates.
        t1.iter_mut().for_each(|v| *v = T::zero());
        for zd in 0..od {
            for yh in 0..oh {
                let drow = (2 * zd * h + 2 * yh) * w;
                let grow = (zd * oh + yh) * ow;
                for xw in 0..ow {
                    t1[drow + 2 * xw] = g[grow + xw];
                }
            }
        }
        blur_axis_transpose(&t1, dims, 0, &mut t2);
        blur_axis_transpose(&t2, dims, 1, &mut t1);
        blur_axis_transpose(&t1, dims, 2, &mut dx[c * vol..(c + 1) * vol]);
    }
    dx
}

/// Source index pair and interpolation weight for one output coordinate when
/// doubling an axis: centers map as `src = (out + 0.5)/2 - 0.5`, clamped.
fn up_axis_table(n_in: usize) -> Vec<(usize, usize, f64)> {
    let n_out = 2 * n_in;
    (0..n_out)
        .map(|o| {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let s = s.clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn upsample_forward<T: Scalar>(x: &[T], xs: [usize; 5]) -> (Vec<T>, [usize; 5]) {
    let (d, h, w) = (xs[2], xs[3], xs[4]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let tz = up_axis_table(d);
    let ty = up_axis_table(h);
    let tx = up_axis_table(w);
    let vol = d * h * w;
    let out_vol = od * oh * ow;
    let nc = xs[0] * xs[1];
    let mut out = vec![T::zero(); nc * out_vol];
    for c in 0..nc {
        let src = &x[c * vol..(c + 1) * vol];
        let o = &mut out[c * out_vol..(c + 1) * out_vol];
        for (zo, &(z0, z1, fz)) in tz.iter().enumerate() {
            for (yo, &(y0, y1, fy)) in ty.iter().enumerate() {
                let r00 = (z0 * h + y0) * w;
                let r01 = (z0 * h + y1) * w;
                let r10 = (z1 * h + y0) * w;
                let r11 = (z1 * h + y1) * w;
                let orow = (zo * oh + yo) * ow;
                for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let c00 = lerp(src[r00 + x0], src[r00 + x1], fx);
                    let c01 = lerp(src[r01 + x0], src[r01 + x1], fx);
                    let c10 = lerp(src[r10 + x0], src[r10 + x1], fx);
                    let c11 = lerp(src[r11 + x0], src[r11 + x1], fx);
                    let c0 = lerp(c00, c01, fy);
                    let c1 = lerp(c10, c11, fy);
                    o[orow + xo] = lerp(c0, c1, fz);
                }
            }
        }
    }
    (out, [xs[0], xs[1], od, oh, ow])
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, f: f64) -> T {
    a + T::from_f64c(f) * (b - a)
}

pub fn upsample_backward<T: Scalar>(grad_out: &[T], xs: [usize; 5]) -> Vec<T> {
    let (d, h, w) = (xs[2], xs[3], xs[4]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let tz = up_axis_table(d);
    let ty = up_axis_table(h);
    let tx = up_axis_table(w);
    let vol = d * h * w;
    let out_vol = od * oh * ow;
    let nc = xs[0] * xs[1];
    let mut dx = vec![T::zero(); nc * vol];
    for c in 0..nc {
        let g = &grad_out[c * out_vol..(c + 1) * out_vol];
        let o = &mut dx[c * vol..(c + 1) * vol];
        for (zo, &(z0, z1, fz)) in tz.iter().enumerate() {
            let (wz0, wz1) = (1.0 - fz, fz);
            for (yo, &(y0, y1, fy)) in ty.iter().enumerate() {
                let (wy0, wy1) = (1.0 - fy, fy);
                let grow = (zo * oh + yo) * ow;
                for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = g[grow + xo].to_f64c();
                    let (wx0, wx1) = (1.0 - fx, fx);
                    for &(zi, wz) in &[(z0, wz0), (z1, wz1)] {
                        for &(yi, wy) in &[(y0, wy0), (y1, wy1)] {
                            let row = (zi * h + yi) * w;
                            for &(xi, wx) in &[(x0, wx0), (x1, wx1)] {
                                let idx = row + xi;
                                o[idx] = o[idx] + T::from_f64c(gv * wz * wy * wx);
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
