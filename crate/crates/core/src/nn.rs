//! Network building blocks recorded on a [`Graph`]: convolutions, dense layers,
//! pooling and the spatial kernels, plus the named parameter store.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DialError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::kernels::{self, col2im, im2col, ConvGeom};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Ordered, uniquely named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Gradients for vars previously returned by [`ParamSet::bind`].
    pub fn collect_grads(&self, grads: &mut Gradients<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| grads.take_or_zeros(v, t.shape()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Anything holding learnable parameters.
pub trait Network<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
}

/// Learnable-scalar totals, per layer and overall.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub per_layer: Vec<(String, usize)>,
    pub total: usize,
}

/// Counts learnable scalars, grouping `layer.weight`/`layer.bias` by layer name.
pub fn parameter_count<T: Scalar>(params: &ParamSet<T>) -> ParamReport {
    let mut per_layer: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
        match per_layer.last_mut() {
            Some((l, n)) if l == layer => *n += t.len(),
            _ => per_layer.push((layer.to_string(), t.len())),
        }
    }
    let total = per_layer.iter().map(|(_, n)| n).sum();
    ParamReport { per_layer, total }
}

/// He-normal initialization for a leaky-rectifier layer with the given fan-in.
pub fn kaiming_normal<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    slope: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    normal(shape, std, rng)
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| lit(dist.sample(rng)))
}

fn conv_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
    match (x, w) {
        ([n, ci, h, wd], [co, wci, k1, k2]) if ci == wci && k1 == k2 => {
            Ok((*n, *ci, *h, *wd, *co, *k1))
        }
        _ => Err(DialError::invalid(format!(
            "conv: input {x:?} incompatible with weight {w:?}"
        ))),
    }
}

/// 2-D cross-correlation; `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
pub fn conv2d<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
    let (n, ci, h, wd, co, k) = conv_dims(g.shape(x), g.shape(w))?;
    if k != geom.kernel || g.shape(b) != [co] {
        return Err(DialError::invalid("conv2d: kernel/bias shape mismatch"));
    }
    let (ho, wo) = match (geom.out_len(h), geom.out_len(wd)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(DialError::invalid(format!(
                "conv2d: {h}x{wd} input smaller than kernel {k}"
            )))
        }
    };
    let kk = ci * k * k;
    let npix = ho * wo;
    // 1x1 stride-1 unpadded kernels read the input planes as columns directly.
    let pointwise = k == 1 && geom.stride == 1 && geom.pad_lo == 0 && geom.pad_hi == 0;
    let mut out = vec![T::zero(); n * co * npix];
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * npix }];
    {
        let (xv, wv, bv) = (g.value(x).data(), g.value(w).data(), g.value(b).data());
        for s in 0..n {
            let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, ci, h, wd, geom, ho, wo, &mut cols);
                &cols
            };
            let dst = &mut out[s * co * npix..(s + 1) * co * npix];
            for (o, chunk) in dst.chunks_mut(npix).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[o]);
            }
            T::gemm(
                co, kk, npix, T::one(), wv, kk as isize, 1, src, npix as isize, 1, T::one(),
                dst, npix as isize, 1,
            );
        }
    }
    let value = Tensor::from_parts(vec![n, co, ho, wo], out);
    Ok(g.custom(&[x, w, b], value, move |args| {
        let (xv, wv) = (args.inputs[0].data(), args.inputs[1].data());
        let gy = args.grad.data();
        let scratch = if pointwise { 0 } else { kk * npix };
        let mut cols = vec![T::zero(); scratch];
        let mut gx = args.needs[0].then(|| vec![T::zero(); n * ci * h * wd]);
        let mut gw = args.needs[1].then(|| vec![T::zero(); co * kk]);
        let mut gb = args.needs[2].then(|| vec![T::zero(); co]);
        let mut gcols = vec![T::zero(); scratch];
        for s in 0..n {
            let gys = &gy[s * co * npix..(s + 1) * co * npix];
            if let Some(gb) = gb.as_mut() {
                for (o, chunk) in gys.chunks(npix).enumerate() {
                    gb[o] += chunk.iter().copied().sum::<T>();
                }
            }
            if let Some(gw) = gw.as_mut() {
                let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
                let src: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, ci, h, wd, geom, ho, wo, &mut cols);
                    &cols
                };
                // gw += gy_s [co, npix] * cols^T [npix, kk]
                T::gemm(
                    co, npix, kk, T::one(), gys, npix as isize, 1, src, 1, npix as isize,
                    T::one(), gw, kk as isize, 1,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx[s * ci * h * wd..(s + 1) * ci * h * wd];
                // gcols = w^T [kk, co] * gy_s [co, npix]
                let dst: &mut [T] = if pointwise { gxs } else { &mut gcols };
                T::gemm(
                    kk, co, npix, T::one(), wv, 1, kk as isize, gys, npix as isize, 1, T::zero(),
                    dst, npix as isize, 1,
                );
                if !pointwise {
                    col2im(&gcols, ci, h, wd, geom, ho, wo, gxs);
                }
            }
        }
        vec![
            gx.map(|d| Tensor::from_parts(vec![n, ci, h, wd], d)),
            gw.map(|d| Tensor::from_parts(vec![co, ci, k, k], d)),
            gb.map(|d| Tensor::from_parts(vec![co], d)),
        ]
    }))
}

/// Transposed convolution; `x: [N, Ci, H, W]`, `w: [Ci, Co, k, k]`, `b: [Co]`.
pub fn conv_transpose2d<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Var,
    geom: ConvGeom,
) -> Result<Var> {
    let (n, ci, hi, wi, co, k) = match (g.shape(x), g.shape(w)) {
        ([n, ci, h, wd], [wci, co, k1, k2]) if ci == wci && k1 == k2 => {
            (*n, *ci, *h, *wd, *co, *k1)
        }
        (xs, ws) => {
            return Err(DialError::invalid(format!(
                "conv_transpose2d: input {xs:?} incompatible with weight {ws:?}"
            )))
        }
    };
    if k != geom.kernel || g.shape(b) != [co] {
        return Err(DialError::invalid("conv_transpose2d: kernel/bias shape mismatch"));
    }
    let (ho, wo) = match (geom.transposed_len(hi), geom.transposed_len(wi)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => return Err(DialError::invalid("conv_transpose2d: empty output")),
    };
    let kk = co * k * k;
    let nin = hi * wi;
    let nout = ho * wo;
    let mut out = vec![T::zero(); n * co * nout];
    let mut cols = vec![T::zero(); kk * nin];
    {
        let (xv, wv, bv) = (g.value(x).data(), g.value(w).data(), g.value(b).data());
        for s in 0..n {
            // cols [kk, nin] = w^T [kk, ci] * x_s [ci, nin]
            T::gemm(
                kk, ci, nin, T::one(), wv, 1, kk as isize, &xv[s * ci * nin..], nin as isize, 1,
                T::zero(), &mut cols, nin as isize, 1,
            );
            let dst = &mut out[s * co * nout..(s + 1) * co * nout];
            for (o, chunk) in dst.chunks_mut(nout).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[o]);
            }
            col2im(&cols, co, ho, wo, geom, hi, wi, dst);
        }
    }
    let value = Tensor::from_parts(vec![n, co, ho, wo], out);
    Ok(g.custom(&[x, w, b], value, move |args| {
        let (xv, wv) = (args.inputs[0].data(), args.inputs[1].data());
        let gy = args.grad.data();
        let mut gcols = vec![T::zero(); kk * nin];
        let mut gx = args.needs[0].then(|| vec![T::zero(); n * ci * nin]);
        let mut gw = args.needs[1].then(|| vec![T::zero(); ci * kk]);
        let mut gb = args.needs[2].then(|| vec![T::zero(); co]);
        for s in 0..n {
            let gys = &gy[s * co * nout..(s + 1) * co * nout];
            if let Some(gb) = gb.as_mut() {
                for (o, chunk) in gys.chunks(nout).enumerate() {
                    gb[o] += chunk.iter().copied().sum::<T>();
                }
            }
            if gx.is_none() && gw.is_none() {
                continue;
            }
            im2col(gys, co, ho, wo, geom, hi, wi, &mut gcols);
            if let Some(gx) = gx.as_mut() {
                // gx_s [ci, nin] = w [ci, kk] * gcols [kk, nin]
                T::gemm(
                    ci, kk, nin, T::one(), wv, kk as isize, 1, &gcols, nin as isize, 1,
                    T::zero(), &mut gx[s * ci * nin..(s + 1) * ci * nin], nin as isize, 1,
                );
            }
            if let Some(gw) = gw.as_mut() {
                // gw [ci, kk] += x_s [ci, nin] * gcols^T [nin, kk]
                T::gemm(
                    ci, nin, kk, T::one(), &xv[s * ci * nin..], nin as isize, 1, &gcols, 1,
                    nin as isize, T::one(), gw, kk as isize, 1,
                );
            }
        }
        vec![
            gx.map(|d| Tensor::from_parts(vec![n, ci, hi, wi], d)),
            gw.map(|d| Tensor::from_parts(vec![ci, co, k, k], d)),
            gb.map(|d| Tensor::from_parts(vec![co], d)),
        ]
    }))
}

/// Dense layer; `x: [N, In]`, `w: [Out, In]`, `b: [Out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (n, din, dout) = match (g.shape(x), g.shape(w), g.shape(b)) {
        ([n, din], [dout, win], [bout]) if din == win && dout == bout => (*n, *din, *dout),
        (xs, ws, bs) => {
            return Err(DialError::invalid(format!(
                "linear: shapes {xs:?} x {ws:?} + {bs:?}"
            )))
        }
    };
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(g.value(b).data());
    }
    T::gemm(
        n, din, dout, T::one(), g.value(x).data(), din as isize, 1, g.value(w).data(), 1,
        din as isize, T::one(), &mut out, dout as isize, 1,
    );
    let value = Tensor::from_parts(vec![n, dout], out);
    Ok(g.custom(&[x, w, b], value, move |args| {
        let (xv, wv, gy) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
        let gx = args.needs[0].then(|| {
            let mut d = vec![T::zero(); n * din];
            T::gemm(
                n, dout, din, T::one(), gy, dout as isize, 1, wv, din as isize, 1, T::zero(),
                &mut d, din as isize, 1,
            );
            Tensor::from_parts(vec![n, din], d)
        });
        let gw = args.needs[1].then(|| {
            let mut d = vec![T::zero(); dout * din];
            T::gemm(
                dout, n, din, T::one(), gy, 1, dout as isize, xv, din as isize, 1, T::zero(),
                &mut d, din as isize, 1,
            );
            Tensor::from_parts(vec![dout, din], d)
        });
        let gb = args.needs[2].then(|| {
            let mut d = vec![T::zero(); dout];
            for row in gy.chunks(dout) {
                d.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            Tensor::from_parts(vec![dout], d)
        });
        vec![gx, gw, gb]
    }))
}

/// `[N, C, H, W]` -> `[N, C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(x).nchw()?;
    let plane = h * w;
    let inv = T::from_usize(plane).unwrap().recip();
    let data = g
        .value(x)
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    let value = Tensor::from_parts(vec![n, c], data);
    Ok(g.custom(&[x], value, move |args| {
        let data = args
            .grad
            .data()
            .iter()
            .flat_map(|&gv| std::iter::repeat_n(gv * inv, plane))
            .collect();
        vec![Some(Tensor::from_parts(vec![n, c, h, w], data))]
    }))
}

fn planewise<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    out_hw: (usize, usize),
    fwd: impl Fn(&[T]) -> Vec<T>,
    bwd: impl Fn(&[T]) -> Vec<T> + 'static,
) -> Result<Var> {
    let (n, c, h, w) = g.value(x).nchw()?;
    let (oh, ow) = out_hw;
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for p in g.value(x).data().chunks(h * w) {
        data.extend(fwd(p));
    }
    let value = Tensor::from_parts(vec![n, c, oh, ow], data);
    Ok(g.custom(&[x], value, move |args| {
        let mut gx = Vec::with_capacity(n * c * h * w);
        for p in args.grad.data().chunks(oh * ow) {
            gx.extend(bwd(p));
        }
        vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
    }))
}

/// Bilinear resampling of every plane of `[N, C, H, W]`.
pub fn resize<T: Scalar>(g: &mut Graph<T>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    if out_h == 0 || out_w == 0 {
        return Err(DialError::invalid("resize target is empty"));
    }
    let (_, _, h, w) = g.value(x).nchw()?;
    planewise(
        g,
        x,
        (out_h, out_w),
        |p| kernels::resize_plane(p, h, w, out_h, out_w),
        move |p| kernels::resize_plane_adjoint(p, h, w, out_h, out_w),
    )
}

/// Count-normalized mean filter of radius `r` on every plane.
pub fn box_mean<T: Scalar>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var> {
    if r < 1 {
        return Err(DialError::invalid("box filter radius must be >= 1"));
    }
    let (_, _, h, w) = g.value(x).nchw()?;
    planewise(
        g,
        x,
        (h, w),
        |p| {
            let mut o = vec![T::zero(); h * w];
            kernels::box_mean_plane(p, h, w, r, &mut o);
            o
        },
        move |p| {
            let mut o = vec![T::zero(); h * w];
            kernels::box_mean_plane_adjoint(p, h, w, r, &mut o);
            o
        },
    )
}

/// Separable Gaussian smoothing (edge replication) of every plane.
pub fn gaussian<T: Scalar>(g: &mut Graph<T>, x: Var, sigma: f64, radius: usize) -> Result<Var> {
    let taps = kernels::gaussian_kernel::<T>(sigma, radius)?;
    let (_, _, h, w) = g.value(x).nchw()?;
    let taps_b = taps.clone();
    planewise(
        g,
        x,
        (h, w),
        |p| kernels::separable_plane(p, h, w, &taps),
        move |p| kernels::separable_plane_adjoint(p, h, w, &taps_b),
    )
}

/// Elementwise multiply by a fixed mask (dropout with pre-scaled keep mask).
pub fn mask<T: Scalar>(g: &mut Graph<T>, x: Var, m: Tensor<T>) -> Var {
    assert_eq!(g.shape(x), m.shape());
    let value = crate::graph::zip_map(g.value(x), &m, |a, b| a * b);
    g.custom(&[x], value, move |args| {
        vec![Some(crate::graph::zip_map(args.grad, &m, |a, b| a * b))]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(
        x: &[f64],
        (ci, h, w): (usize, usize, usize),
        wt: &[f64],
        b: &[f64],
        co: usize,
        geom: ConvGeom,
    ) -> Vec<f64> {
        let k = geom.kernel;
        let ho = geom.out_len(h).unwrap();
        let wo = geom.out_len(w).unwrap();
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * geom.stride + ky) as isize - geom.pad_lo as isize;
                                let ix = (ox * geom.stride + kx) as isize - geom.pad_lo as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[((o * ci + c) * k + ky) * k + kx]
                                        * x[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for geom in [
            ConvGeom::symmetric(3, 2, 1),
            ConvGeom::symmetric(1, 1, 0),
            ConvGeom {
                kernel: 4,
                stride: 1,
                pad_lo: 1,
                pad_hi: 2,
            },
        ] {
            let k = geom.kernel;
            let x = normal::<f64>(&[1, 2, 7, 6], 1.0, &mut rng);
            let w = normal::<f64>(&[3, 2, k, k], 1.0, &mut rng);
            let b = normal::<f64>(&[3], 1.0, &mut rng);
            let expect = naive_conv(x.data(), (2, 7, 6), w.data(), b.data(), 3, geom);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
            let y = conv2d(&mut g, xv, wv, bv, geom).unwrap();
            for (a, e) in g.value(y).data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = ConvGeom::symmetric(4, 2, 1);
        let x = normal::<f64>(&[1, 3, 8, 8], 1.0, &mut rng);
        let w = normal::<f64>(&[2, 3, 4, 4], 1.0, &mut rng);
        let y = normal::<f64>(&[1, 2, 4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
        let b2 = g.constant(Tensor::zeros(&[2]));
        let b3 = g.constant(Tensor::zeros(&[3]));
        let cx = conv2d(&mut g, xv, wv, b2, geom).unwrap();
        let ty = conv_transpose2d(&mut g, yv, wv, b3, geom).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(g.value(cx).data(), y.data());
        let rhs = dot(x.data(), g.value(ty).data());
        assert!((lhs - rhs).abs() < 1e-10);
        assert_eq!(g.shape(ty), &[1, 3, 8, 8]);
    }

    #[test]
    fn parameter_report_groups_layers() {
        let mut p = ParamSet::<f32>::new();
        p.add("a.weight", Tensor::zeros(&[2, 3]));
        p.add("a.bias", Tensor::zeros(&[2]));
        p.add("b.weight", Tensor::zeros(&[4]));
        let r = parameter_count(&p);
        assert_eq!(r.per_layer, vec![("a".into(), 8), ("b".into(), 4)]);
        assert_eq!(r.total, 12);
        assert_eq!(parameter_count(&ParamSet::<f32>::new()).total, 0);
    }
}
