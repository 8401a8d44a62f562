//! Forward and backward loops for the spatial operators. Everything here
//! works on flat row-major slices; shape validation happens in the tape.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    /// Output extent along one axis, or `None` if the window does not fit.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Range of output positions `o` for which `o*stride + offset` lands inside `[0, len)`.
fn valid_range(out_len: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = (len as isize - offset + s - 1) / s;
    let hi = hi.clamp(0, out_len as isize);
    let lo = lo.clamp(0, hi);
    (lo as usize, hi as usize)
}

pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv2d_forward<T: Scalar>(input: &[T], kernel: &[T], d: &ConvDims, g: ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); d.c_out * d.oh * d.ow];
    for co in 0..d.c_out {
        let plane = &mut out[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.c_in {
            let src = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                let oy_off = (ky * g.dilation) as isize - g.padding as isize;
                let (y0, y1) = valid_range(d.oh, g.stride, oy_off, d.h);
                for kx in 0..d.kw {
                    let wv = kernel[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                    let ox_off = (kx * g.dilation) as isize - g.padding as isize;
                    let (x0, x1) = valid_range(d.ow, g.stride, ox_off, d.w);
                    for oy in y0..y1 {
                        let iy = (oy * g.stride) as isize + oy_off;
                        let row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let orow = &mut plane[oy * d.ow..(oy + 1) * d.ow];
                        for ox in x0..x1 {
                            let ix = ((ox * g.stride) as isize + ox_off) as usize;
                            orow[ox] = orow[ox] + wv * row[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    kernel: &[T],
    d: &ConvDims,
    g: ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let mut gin = vec![T::zero(); input.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    for co in 0..d.c_out {
        let gplane = &grad_out[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.c_in {
            let base = ci * d.h * d.w;
            for ky in 0..d.kh {
                let oy_off = (ky * g.dilation) as isize - g.padding as isize;
                let (y0, y1) = valid_range(d.oh, g.stride, oy_off, d.h);
                for kx in 0..d.kw {
                    let kidx = ((co * d.c_in + ci) * d.kh + ky) * d.kw + kx;
                    let wv = kernel[kidx];
                    let ox_off = (kx * g.dilation) as isize - g.padding as isize;
                    let (x0, x1) = valid_range(d.ow, g.stride, ox_off, d.w);
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = ((oy * g.stride) as isize + oy_off) as usize;
                        let grow = &gplane[oy * d.ow..(oy + 1) * d.ow];
                        for ox in x0..x1 {
                            let ix = ((ox * g.stride) as isize + ox_off) as usize;
                            let go = grow[ox];
                            let at = base + iy * d.w + ix;
                            acc = acc + go * input[at];
                            gin[at] = gin[at] + go * wv;
                        }
                    }
                    gk[kidx] = gk[kidx] + acc;
                }
            }
        }
    }
    (gin, gk)
}

/// Average pooling over non-overlapping `window × window` cells. Extents that
/// are not a multiple of the window are zero-padded on the bottom/right.
pub fn avg_pool2d_forward<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<T>, usize, usize) {
    let oh = h.div_ceil(window);
    let ow = w.div_ceil(window);
    let norm = T::from_usize(window * window);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let o = (ch * oh + y / window) * ow + x / window;
                out[o] = out[o] + input[(ch * h + y) * w + x];
            }
        }
    }
    for v in &mut out {
        *v = *v / norm;
    }
    (out, oh, ow)
}

pub fn avg_pool2d_backward<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize, window: usize) -> Vec<T> {
    let oh = h.div_ceil(window);
    let ow = w.div_ceil(window);
    let norm = T::from_usize(window * window);
    let mut gin = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                gin[(ch * h + y) * w + x] = grad_out[(ch * oh + y / window) * ow + x / window] / norm;
            }
        }
    }
    gin
}

/// Per-output-index interpolation taps along one axis (half-pixel centers,
/// source coordinates clamped to the valid range).
fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let gx = T::one() - fx;
                let top = src[y0 * w + x0] * gx + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * gx + src[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = top * gy + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut gin = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let dst = &mut gin[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let gx = T::one() - fx;
                let go = grad_out[(ch * oh + oy) * ow + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + go * gy * gx;
                dst[y0 * w + x1] = dst[y0 * w + x1] + go * gy * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + go * fy * gx;
                dst[y1 * w + x1] = dst[y1 * w + x1] + go * fy * fx;
            }
        }
    }
    gin
}
