//! Resampling and smoothing kernels on single planes, with their adjoints.
//!
//! Every linear kernel here has an `_adjoint` companion that applies the
//! transposed operator; the graph layer uses them for backpropagation.

use crate::error::{DialError, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Image, Tensor};

/// Two-tap sampling table for one axis under the half-pixel-center convention.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

pub(crate) fn axis_taps<T: Scalar>(n_in: usize, n_out: usize) -> AxisTaps<T> {
    let scale = n_in as f64 / n_out as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        frac: Vec::with_capacity(n_out),
    };
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(lit(src - lo as f64));
    }
    taps
}

pub(crate) fn resize_plane<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let ty = axis_taps::<T>(h, out_h);
    let tx = axis_taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for ox in 0..out_w {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

pub(crate) fn resize_plane_adjoint<T: Scalar>(
    grad: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if h == out_h && w == out_w {
        return grad.to_vec();
    }
    let ty = axis_taps::<T>(h, out_h);
    let tx = axis_taps::<T>(w, out_w);
    let mut out = vec![T::zero(); h * w];
    let one = T::one();
    for oy in 0..out_h {
        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
        for ox in 0..out_w {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let g = grad[oy * out_w + ox];
            out[y0 * w + x0] += g * (one - fy) * (one - fx);
            out[y0 * w + x1] += g * (one - fy) * fx;
            out[y1 * w + x0] += g * fy * (one - fx);
            out[y1 * w + x1] += g * fy * fx;
        }
    }
    out
}

/// Bilinear resampling with half-pixel centers (`(i + 0.5) / n`), edge-clamped.
pub fn bilinear_resize<T: Scalar>(img: &Image<T>, out_h: usize, out_w: usize) -> Result<Image<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(DialError::invalid(format!(
            "resize target {out_h}x{out_w} is empty"
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        data.extend(resize_plane(img.plane(c), h, w, out_h, out_w));
    }
    Image::new(out_h, out_w, data)
}

/// Windowed sums over `[y-r, y+r] x [x-r, x+r]` clipped to the plane, via an integral image.
fn box_sum_plane<T: Scalar>(src: &[T], h: usize, w: usize, r: usize, out: &mut [T]) {
    let stride = w + 1;
    let mut integral = vec![T::zero(); (h + 1) * stride];
    for y in 0..h {
        let mut run = T::zero();
        for x in 0..w {
            run += src[y * w + x];
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + run;
        }
    }
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            out[y * w + x] = integral[y1 * stride + x1] - integral[y0 * stride + x1]
                - integral[y1 * stride + x0]
                + integral[y0 * stride + x0];
        }
    }
}

/// Reciprocal clipped window extents along one axis.
fn inv_extents<T: Scalar>(n: usize, r: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::from_usize((i + r + 1).min(n) - i.saturating_sub(r)).unwrap().recip())
        .collect()
}

pub(crate) fn box_mean_plane<T: Scalar>(src: &[T], h: usize, w: usize, r: usize, out: &mut [T]) {
    box_sum_plane(src, h, w, r, out);
    let (iy, ix) = (inv_extents::<T>(h, r), inv_extents::<T>(w, r));
    for (row, &fy) in out.chunks_mut(w).zip(&iy) {
        for (v, &fx) in row.iter_mut().zip(&ix) {
            *v *= fy * fx;
        }
    }
}

/// Transpose of [`box_mean_plane`]. Windows are symmetric, so this is a box sum
/// of the count-normalized gradient.
pub(crate) fn box_mean_plane_adjoint<T: Scalar>(
    grad: &[T],
    h: usize,
    w: usize,
    r: usize,
    out: &mut [T],
) {
    let (iy, ix) = (inv_extents::<T>(h, r), inv_extents::<T>(w, r));
    let mut scaled = grad.to_vec();
    for (row, &fy) in scaled.chunks_mut(w).zip(&iy) {
        for (v, &fx) in row.iter_mut().zip(&ix) {
            *v *= fy * fx;
        }
    }
    box_sum_plane(&scaled, h, w, r, out);
}

/// Mean filter of radius `r` over a 2-D tensor; clipped windows are normalized
/// by their actual pixel count.
pub fn box_mean_filter<T: Scalar>(t: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r < 1 {
        return Err(DialError::invalid("box filter radius must be >= 1"));
    }
    let (h, w) = match t.shape() {
        [h, w] => (*h, *w),
        s => return Err(DialError::invalid(format!("expected a 2-d tensor, got {s:?}"))),
    };
    let mut out = vec![T::zero(); h * w];
    box_mean_plane(t.data(), h, w, r, &mut out);
    Tensor::new(vec![h, w], out)
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel<T: Scalar>(sigma: f64, radius: usize) -> Result<Vec<T>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DialError::invalid(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    if radius < 1 {
        return Err(DialError::invalid("gaussian radius must be >= 1"));
    }
    let r = radius as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| lit(v / z)).collect())
}

/// Separable convolution with edge replication.
pub(crate) fn separable_plane<T: Scalar>(src: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                let sx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += t * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for (k, &t) in taps.iter().enumerate() {
            let sy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
            let src_row = &tmp[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, &s) in dst.iter_mut().zip(src_row) {
                *d += t * s;
            }
        }
    }
    out
}

pub(crate) fn separable_plane_adjoint<T: Scalar>(
    grad: &[T],
    h: usize,
    w: usize,
    taps: &[T],
) -> Vec<T> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        for (k, &t) in taps.iter().enumerate() {
            let sy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
            for x in 0..w {
                tmp[sy * w + x] += t * grad[y * w + x];
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            for (k, &t) in taps.iter().enumerate() {
                let sx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                out[y * w + sx] += t * g;
            }
        }
    }
    out
}

/// Gaussian smoothing of every channel.
pub fn gaussian_blur<T: Scalar>(img: &Image<T>, sigma: f64, radius: usize) -> Result<Image<T>> {
    let taps = gaussian_kernel::<T>(sigma, radius)?;
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        data.extend(separable_plane(img.plane(c), h, w, &taps));
    }
    Image::new(h, w, data)
}

/// Geometry of a 2-D convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    /// Padding before (top/left).
    pub pad_lo: usize,
    /// Padding after (bottom/right).
    pub pad_hi: usize,
}

impl ConvGeom {
    pub fn symmetric(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad_lo: pad,
            pad_hi: pad,
        }
    }

    pub fn out_len(&self, n: usize) -> Option<usize> {
        let padded = n + self.pad_lo + self.pad_hi;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output length of the transposed convolution.
    pub fn transposed_len(&self, n: usize) -> Option<usize> {
        ((n - 1) * self.stride + self.kernel).checked_sub(self.pad_lo + self.pad_hi)
    }
}

/// Unfolds `[C, H, W]` into a `[C*k*k, Ho*Wo]` column matrix (zero padding).
pub(crate) fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let n = ho * wo;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad_lo as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_lo as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back, accumulating into `[C, H, W]`.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let k = g.kernel;
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad_lo as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let out_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad_lo as isize;
                        if ix >= 0 && (ix as usize) < w {
                            out_row[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
