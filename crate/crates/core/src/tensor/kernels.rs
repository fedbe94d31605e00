//! Raw forward/backward kernels over contiguous row-major buffers.

use super::Scalar;

#[inline]
fn span(pad: usize, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // Output positions whose input index `o + k - pad` lands inside [0, in_len).
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

pub fn dense_forward<T: Scalar>(x: &[T], n: usize, inp: usize, w: &[T], b: &[T], out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * out];
    for ni in 0..n {
        let xr = &x[ni * inp..][..inp];
        for oi in 0..out {
            let wr = &w[oi * inp..][..inp];
            let mut acc = b[oi];
            for (a, c) in wr.iter().zip(xr) {
                acc += *a * *c;
            }
            y[ni * out + oi] = acc;
        }
    }
    y
}

pub fn dense_backward<T: Scalar>(
    x: &[T],
    n: usize,
    inp: usize,
    w: &[T],
    out: usize,
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); n * inp];
    let mut gw = vec![T::zero(); out * inp];
    let mut gb = vec![T::zero(); out];
    for ni in 0..n {
        let xr = &x[ni * inp..][..inp];
        let gxr = &mut gx[ni * inp..][..inp];
        for oi in 0..out {
            let g = gy[ni * out + oi];
            gb[oi] += g;
            let wr = &w[oi * inp..][..inp];
            let gwr = &mut gw[oi * inp..][..inp];
            for k in 0..inp {
                gxr[k] += g * wr[k];
                gwr[k] += g * xr[k];
            }
        }
    }
    (gx, gw, gb)
}

pub fn conv2d_out(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> Option<(usize, usize)> {
    let oh = (h + 2 * pad + 1).checked_sub(kh)?;
    let ow = (w + 2 * pad + 1).checked_sub(kw)?;
    (oh > 0 && ow > 0).then_some((oh, ow))
}

/// Stride-1 zero-padded convolution. `x`: (n,c,h,w), `w`: (o,c,kh,kw).
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    [n, c, h, wd]: [usize; 4],
    w: &[T],
    [o, _, kh, kw]: [usize; 4],
    b: &[T],
    pad: usize,
) -> Vec<T> {
    let (oh, ow) = conv2d_out(h, wd, kh, kw, pad).expect("validated");
    let mut out = vec![T::zero(); n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            let ob = &mut out[(ni * o + oi) * oh * ow..][..oh * ow];
            ob.iter_mut().for_each(|v| *v = b[oi]);
            for ci in 0..c {
                let xb = &x[(ni * c + ci) * h * wd..][..h * wd];
                for ky in 0..kh {
                    let (y0, y1) = span(pad, ky, h, oh);
                    for kx in 0..kw {
                        let wv = w[((oi * c + ci) * kh + ky) * kw + kx];
                        let (x0, x1) = span(pad, kx, wd, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y + ky - pad;
                            let orow = &mut ob[y * ow + x0..y * ow + x1];
                            let irow = &xb[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                            for (a, &v) in orow.iter_mut().zip(irow) {
                                *a += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    [n, c, h, wd]: [usize; 4],
    w: &[T],
    [o, _, kh, kw]: [usize; 4],
    pad: usize,
    gy: &[T],
    want_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (oh, ow) = conv2d_out(h, wd, kh, kw, pad).expect("validated");
    let mut gx = want_input.then(|| vec![T::zero(); n * c * h * wd]);
    let mut gw = vec![T::zero(); o * c * kh * kw];
    let mut gb = vec![T::zero(); o];
    for ni in 0..n {
        for oi in 0..o {
            let gb_ = &gy[(ni * o + oi) * oh * ow..][..oh * ow];
            gb[oi] += gb_.iter().copied().sum::<T>();
            for ci in 0..c {
                let xb = &x[(ni * c + ci) * h * wd..][..h * wd];
                for ky in 0..kh {
                    let (y0, y1) = span(pad, ky, h, oh);
                    for kx in 0..kw {
                        let widx = ((oi * c + ci) * kh + ky) * kw + kx;
                        let wv = w[widx];
                        let (x0, x1) = span(pad, kx, wd, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let iy = y + ky - pad;
                            let grow = &gb_[y * ow + x0..y * ow + x1];
                            let irow = &xb[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                            for (&g, &v) in grow.iter().zip(irow) {
                                acc += g * v;
                            }
                            if let Some(gx) = gx.as_mut() {
                                let gxb = &mut gx[(ni * c + ci) * h * wd..][..h * wd];
                                let xrow =
                                    &mut gxb[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                                for (a, &g) in xrow.iter_mut().zip(grow) {
                                    *a += wv * g;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub fn tconv2d_out(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (h - 1) * stride + k;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

/// Transposed convolution. `x`: (n,c,h,w), `w`: (c,o,k,k).
pub fn tconv2d_forward<T: Scalar>(
    x: &[T],
    [n, c, h, wd]: [usize; 4],
    w: &[T],
    [_, o, k, _]: [usize; 4],
    b: &[T],
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = tconv2d_out(h, k, stride, pad).expect("validated");
    let ow = tconv2d_out(wd, k, stride, pad).expect("validated");
    let mut out = vec![T::zero(); n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            out[(ni * o + oi) * oh * ow..][..oh * ow]
                .iter_mut()
                .for_each(|v| *v = b[oi]);
        }
        for ci in 0..c {
            let xb = &x[(ni * c + ci) * h * wd..][..h * wd];
            for oi in 0..o {
                let ob = &mut out[(ni * o + oi) * oh * ow..][..oh * ow];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((ci * o + oi) * k + ky) * k + kx];
                        for y in 0..h {
                            let oy = y * stride + ky;
                            if oy < pad || oy - pad >= oh {
                                continue;
                            }
                            let oy = oy - pad;
                            for xx in 0..wd {
                                let ox = xx * stride + kx;
                                if ox < pad || ox - pad >= ow {
                                    continue;
                                }
                                ob[oy * ow + ox - pad] += wv * xb[y * wd + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn tconv2d_backward<T: Scalar>(
    x: &[T],
    [n, c, h, wd]: [usize; 4],
    w: &[T],
    [_, o, k, _]: [usize; 4],
    stride: usize,
    pad: usize,
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let oh = tconv2d_out(h, k, stride, pad).expect("validated");
    let ow = tconv2d_out(wd, k, stride, pad).expect("validated");
    let mut gx = vec![T::zero(); n * c * h * wd];
    let mut gw = vec![T::zero(); c * o * k * k];
    let mut gb = vec![T::zero(); o];
    for ni in 0..n {
        for oi in 0..o {
            gb[oi] += gy[(ni * o + oi) * oh * ow..][..oh * ow]
                .iter()
                .copied()
                .sum::<T>();
        }
        for ci in 0..c {
            let xb = &x[(ni * c + ci) * h * wd..][..h * wd];
            for oi in 0..o {
                let gb_ = &gy[(ni * o + oi) * oh * ow..][..oh * ow];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((ci * o + oi) * k + ky) * k + kx;
                        let wv = w[widx];
                        let mut acc = T::zero();
                        for y in 0..h {
                            let oy = y * stride + ky;
                            if oy < pad || oy - pad >= oh {
                                continue;
                            }
                            let oy = oy - pad;
                            for xx in 0..wd {
                                let ox = xx * stride + kx;
                                if ox < pad || ox - pad >= ow {
                                    continue;
                                }
                                let g = gb_[oy * ow + ox - pad];
                                acc += g * xb[y * wd + xx];
                                gx[(ni * c + ci) * h * wd + y * wd + xx] += g * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Stride-1 zero-padded volumetric convolution. `x`: (n,c,d,h,w), `w`: (o,c,k,k,k).
pub fn conv3d_forward<T: Scalar>(
    x: &[T],
    xs: [usize; 5],
    w: &[T],
    ws: [usize; 5],
    b: &[T],
    pad: usize,
) -> Vec<T> {
    let [n, c, d, h, wd] = xs;
    let [o, _, kd, kh, kw] = ws;
    let (od, oh, ow) = (d + 2 * pad + 1 - kd, h + 2 * pad + 1 - kh, wd + 2 * pad + 1 - kw);
    let mut out = vec![T::zero(); n * o * od * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            let ob = &mut out[(ni * o + oi) * od * oh * ow..][..od * oh * ow];
            ob.iter_mut().for_each(|v| *v = b[oi]);
            for ci in 0..c {
                let xb = &x[(ni * c + ci) * d * h * wd..][..d * h * wd];
                for kz in 0..kd {
                    let (z0, z1) = span(pad, kz, d, od);
                    for ky in 0..kh {
                        let (y0, y1) = span(pad, ky, h, oh);
                        for kx in 0..kw {
                            let (x0, x1) = span(pad, kx, wd, ow);
                            let wv = w[(((oi * c + ci) * kd + kz) * kh + ky) * kw + kx];
                            for z in z0..z1 {
                                let iz = z + kz - pad;
                                for y in y0..y1 {
                                    let iy = y + ky - pad;
                                    for xx in x0..x1 {
                                        let ix = xx + kx - pad;
                                        ob[(z * oh + y) * ow + xx] += wv * xb[(iz * h + iy) * wd + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    xs: [usize; 5],
    w: &[T],
    ws: [usize; 5],
    pad: usize,
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, d, h, wd] = xs;
    let [o, _, kd, kh, kw] = ws;
    let (od, oh, ow) = (d + 2 * pad + 1 - kd, h + 2 * pad + 1 - kh, wd + 2 * pad + 1 - kw);
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); o];
    for ni in 0..n {
        for oi in 0..o {
            let gb_ = &gy[(ni * o + oi) * od * oh * ow..][..od * oh * ow];
            gb[oi] += gb_.iter().copied().sum::<T>();
            for ci in 0..c {
                let base = (ni * c + ci) * d * h * wd;
                for kz in 0..kd {
                    let (z0, z1) = span(pad, kz, d, od);
                    for ky in 0..kh {
                        let (y0, y1) = span(pad, ky, h, oh);
                        for kx in 0..kw {
                            let (x0, x1) = span(pad, kx, wd, ow);
                            let widx = (((oi * c + ci) * kd + kz) * kh + ky) * kw + kx;
                            let wv = w[widx];
                            let mut acc = T::zero();
                            for z in z0..z1 {
                                let iz = z + kz - pad;
                                for y in y0..y1 {
                                    let iy = y + ky - pad;
                                    for xx in x0..x1 {
                                        let ix = xx + kx - pad;
                                        let g = gb_[(z * oh + y) * ow + xx];
                                        let xi = base + (iz * h + iy) * wd + ix;
                                        acc += g * x[xi];
                                        gx[xi] += g * wv;
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Non-overlapping 2×2 max pooling over the last two axes; returns argmax offsets.
pub fn maxpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Non-overlapping average pooling with window (kh, kw) over the last two axes.
pub fn avgpool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (oh, ow) = (h / kh, w / kw);
    let scale = T::one() / T::of((kh * kw) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let xb = &x[p * h * w..][..h * w];
        let ob = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..h {
            let orow = &mut ob[(y / kh) * ow..][..ow];
            let irow = &xb[y * w..][..w];
            for (xx, &v) in irow.iter().enumerate() {
                orow[xx / kw] += v;
            }
        }
        ob.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

pub fn avgpool_backward<T: Scalar>(gy: &[T], planes: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (oh, ow) = (h / kh, w / kw);
    let scale = T::one() / T::of((kh * kw) as f64);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let gb = &gy[p * oh * ow..][..oh * ow];
        for y in 0..h {
            for xx in 0..w {
                gx[p * h * w + y * w + xx] = gb[(y / kh) * ow + xx / kw] * scale;
            }
        }
    }
    gx
}

/// Interpolation taps for one output coordinate: `lerp(v[lo], v[hi], t)`.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

/// Half-pixel linear taps mapping `in_len` samples onto `out_len`.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, t: src - lo as f64 }
        })
        .collect()
}

/// Resample the middle axis of an (outer, len, inner) buffer.
pub fn resample_axis<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize, taps: &[Tap]) -> Vec<T> {
    let out_len = taps.len();
    let mut out = vec![T::zero(); outer * out_len * inner];
    for o in 0..outer {
        let xb = &x[o * len * inner..][..len * inner];
        let ob = &mut out[o * out_len * inner..][..out_len * inner];
        for (j, tap) in taps.iter().enumerate() {
            let t = T::of(tap.t);
            let lo = &xb[tap.lo * inner..][..inner];
            let hi = &xb[tap.hi * inner..][..inner];
            for (k, dst) in ob[j * inner..][..inner].iter_mut().enumerate() {
                *dst = lo[k] + t * (hi[k] - lo[k]);
            }
        }
    }
    out
}

pub fn resample_axis_backward<T: Scalar>(
    gy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    taps: &[Tap],
) -> Vec<T> {
    let out_len = taps.len();
    let mut gx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let gb = &gy[o * out_len * inner..][..out_len * inner];
        let xb = &mut gx[o * len * inner..][..len * inner];
        for (j, tap) in taps.iter().enumerate() {
            let t = T::of(tap.t);
            for k in 0..inner {
                let g = gb[j * inner + k];
                xb[tap.lo * inner + k] += (T::one() - t) * g;
                xb[tap.hi * inner + k] += t * g;
            }
        }
    }
    gx
}

/// Separable linear resampling over the trailing `spatial` axes of `shape`.
pub fn resample_forward<T: Scalar>(x: &[T], shape: &[usize], out_spatial: &[usize]) -> Vec<T> {
    let r = shape.len();
    let k = out_spatial.len();
    let mut cur = x.to_vec();
    let mut dims = shape.to_vec();
    for axis in (r - k..r).rev() {
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let target = out_spatial[axis - (r - k)];
        let taps = linear_taps(dims[axis], target);
        cur = resample_axis(&cur, outer, dims[axis], inner, &taps);
        dims[axis] = target;
    }
    cur
}

pub fn resample_backward<T: Scalar>(gy: &[T], shape: &[usize], out_spatial: &[usize]) -> Vec<T> {
    let r = shape.len();
    let k = out_spatial.len();
    // Replay the forward dimension sequence, then undo it in reverse.
    let mut stages = Vec::with_capacity(k);
    let mut dims = shape.to_vec();
    for axis in (r - k..r).rev() {
        stages.push((axis, dims.clone()));
        dims[axis] = out_spatial[axis - (r - k)];
    }
    let mut cur = gy.to_vec();
    for (axis, before) in stages.into_iter().rev() {
        let outer: usize = before[..axis].iter().product();
        let inner: usize = before[axis + 1..].iter().product();
        let taps = linear_taps(before[axis], out_spatial[axis - (r - k)]);
        cur = resample_axis_backward(&cur, outer, before[axis], inner, &taps);
    }
    cur
}

pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..][..cols];
        let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in out[r * cols..][..cols].iter_mut().zip(xr) {
            *o = (v - m).exp();
            total += *o;
        }
        out[r * cols..][..cols].iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_for_doubling_follow_half_pixel_centres() {
        let taps = linear_taps(4, 8);
        assert_eq!((taps[0].lo, taps[0].t), (0, 0.0));
        assert_eq!((taps[1].lo, taps[1].hi, taps[1].t), (0, 1, 0.25));
        assert_eq!((taps[2].lo, taps[2].hi, taps[2].t), (0, 1, 0.75));
        assert_eq!((taps[7].lo, taps[7].t), (3, 0.0));
    }

    #[test]
    fn conv_span_covers_valid_outputs_only() {
        assert_eq!(span(1, 0, 4, 4), (1, 4));
        assert_eq!(span(1, 2, 4, 4), (0, 3));
        assert_eq!(span(0, 0, 4, 2), (0, 2));
    }
}
