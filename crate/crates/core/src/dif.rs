//! Differentiable image filters: exposure, gamma, contrast and sharpen.
//!
//! Each filter is a fused graph operation with a hand-written backward rule
//! covering both the image and the filter's scalar hyperparameter. Batched
//! variants take an `[N, 3, H, W]` image tensor and one hyperparameter per
//! sample. Every stage clamps to `[0, 1]` and passes zero gradient wherever
//! the pre-clamp value fell outside that range.

use std::f64::consts::{LN_2, PI};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DialError, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::kernels;
use crate::scalar::{lit, Scalar};
use crate::tensor::{Image, Tensor};

/// Luminance weights for R, G, B.
pub const LUMA: [f64; 3] = [0.27, 0.67, 0.06];
/// Below this luminance the contrast filter passes pixels through.
const LUM_FLOOR: f64 = 1e-12;
/// Below this luminance the derivative of the enhancement ratio uses its series.
const LUM_SERIES: f64 = 1e-3;
/// Lower bound applied to the base in the gamma derivative.
const GAMMA_BASE_FLOOR: f64 = 1e-4;

/// The four DIF hyperparameters of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams<T> {
    /// Exposure in stops.
    pub exposure: T,
    /// Gamma exponent.
    pub gamma: T,
    /// Contrast blend weight.
    pub contrast: T,
    /// Unsharp-mask strength.
    pub sharpen: T,
}

impl<T: Scalar> FilterParams<T> {
    pub fn identity() -> Self {
        FilterParams {
            exposure: T::zero(),
            gamma: T::one(),
            contrast: T::zero(),
            sharpen: T::zero(),
        }
    }

    pub fn to_array(self) -> [T; 4] {
        [self.exposure, self.gamma, self.contrast, self.sharpen]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        FilterParams {
            exposure: a[0],
            gamma: a[1],
            contrast: a[2],
            sharpen: a[3],
        }
    }

    pub fn get(&self, kind: FilterKind) -> T {
        self.to_array()[kind.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Exposure,
    Gamma,
    Contrast,
    Sharpen,
}

impl FilterKind {
    pub const ALL: [FilterKind; 4] = [
        FilterKind::Exposure,
        FilterKind::Gamma,
        FilterKind::Contrast,
        FilterKind::Sharpen,
    ];

    /// Column of this filter's hyperparameter in a parameter row.
    pub fn index(self) -> usize {
        match self {
            FilterKind::Exposure => 0,
            FilterKind::Gamma => 1,
            FilterKind::Contrast => 2,
            FilterKind::Sharpen => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Exposure => "exposure",
            FilterKind::Gamma => "gamma",
            FilterKind::Contrast => "contrast",
            FilterKind::Sharpen => "sharpen",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Admissible interval of each hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterRanges {
    pub exposure: Interval,
    pub gamma: Interval,
    pub contrast: Interval,
    pub sharpen: Interval,
}

impl Default for FilterRanges {
    fn default() -> Self {
        FilterRanges {
            exposure: Interval::new(-2.0, 2.0),
            gamma: Interval::new(1.0 / 3.0, 3.0),
            contrast: Interval::new(0.0, 1.0),
            sharpen: Interval::new(0.0, 2.0),
        }
    }
}

impl FilterRanges {
    pub fn get(&self, kind: FilterKind) -> Interval {
        match kind {
            FilterKind::Exposure => self.exposure,
            FilterKind::Gamma => self.gamma,
            FilterKind::Contrast => self.contrast,
            FilterKind::Sharpen => self.sharpen,
        }
    }

    /// Intervals must be non-degenerate and contain the identity setting.
    pub fn validate(&self) -> Result<()> {
        let identity = FilterParams::<f64>::identity();
        for kind in FilterKind::ALL {
            let iv = self.get(kind);
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo < iv.hi) {
                return Err(DialError::Config(format!(
                    "{kind} range [{}, {}] is degenerate",
                    iv.lo, iv.hi
                )));
            }
            if !iv.contains(identity.get(kind)) {
                return Err(DialError::Config(format!(
                    "{kind} range [{}, {}] excludes the identity value {}",
                    iv.lo,
                    iv.hi,
                    identity.get(kind)
                )));
            }
        }
        if self.gamma.lo <= 0.0 {
            return Err(DialError::Config("gamma range must be positive".into()));
        }
        Ok(())
    }

    pub fn check<T: Scalar>(&self, p: &FilterParams<T>) -> Result<()> {
        for kind in FilterKind::ALL {
            let v = p.get(kind).to_f64_lossy();
            let iv = self.get(kind);
            if !iv.contains(v) {
                return Err(DialError::invalid(format!(
                    "{kind} = {v} outside [{}, {}]",
                    iv.lo, iv.hi
                )));
            }
        }
        Ok(())
    }
}

/// Pipeline settings: stage order, sharpen kernel and parameter ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifConfig {
    pub order: [FilterKind; 4],
    pub sharpen_sigma: f64,
    pub sharpen_radius: usize,
    pub ranges: FilterRanges,
}

impl Default for DifConfig {
    fn default() -> Self {
        DifConfig {
            order: FilterKind::ALL,
            sharpen_sigma: 1.0,
            sharpen_radius: 2,
            ranges: FilterRanges::default(),
        }
    }
}

impl DifConfig {
    pub fn validate(&self) -> Result<()> {
        self.ranges.validate()?;
        for kind in FilterKind::ALL {
            if !self.order.contains(&kind) {
                return Err(DialError::Config(format!("filter order is missing {kind}")));
            }
        }
        kernels::gaussian_kernel::<f64>(self.sharpen_sigma, self.sharpen_radius)
            .map_err(|e| DialError::Config(e.to_string()))?;
        Ok(())
    }
}

#[inline]
fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

#[inline]
fn inside<T: Scalar>(v: T) -> bool {
    v >= T::zero() && v <= T::one()
}

fn per_sample(shape: &[usize], params: usize, op: &str) -> usize {
    assert!(
        shape.len() == 4 && shape[1] == 3,
        "{op}: expected [N, 3, H, W], got {shape:?}"
    );
    assert_eq!(shape[0], params, "{op}: one hyperparameter per sample");
    3 * shape[2] * shape[3]
}

/// Exposure stage on a batch; `e` holds one exposure per sample.
pub fn exposure_op<T: Scalar>(g: &mut Graph<T>, x: Var, e: Var) -> Var {
    let per = per_sample(g.shape(x), g.value(e).len(), "exposure");
    let ln2: T = lit(LN_2);
    let scales: Vec<T> = g.value(e).data().iter().map(|&v| (v * ln2).exp()).collect();
    let data = g
        .value(x)
        .data()
        .chunks(per)
        .zip(&scales)
        .flat_map(|(c, &k)| c.iter().map(move |&v| clamp01(v * k)))
        .collect();
    let value = Tensor::from_parts(g.shape(x).to_vec(), data);
    g.custom(&[x, e], value, move |args| {
        let (xv, ev) = (args.inputs[0], args.inputs[1]);
        let mut gx = vec![T::zero(); xv.len()];
        let mut ge = vec![T::zero(); ev.len()];
        for (s, &ex) in ev.data().iter().enumerate() {
            let k = (ex * ln2).exp();
            let span = s * per..(s + 1) * per;
            for ((&gy, &xi), dx) in args.grad.data()[span.clone()]
                .iter()
                .zip(&xv.data()[span.clone()])
                .zip(&mut gx[span])
            {
                let pre = xi * k;
                if inside(pre) {
                    *dx = gy * k;
                    ge[s] += gy * pre * ln2;
                }
            }
        }
        vec![
            Some(Tensor::from_parts(xv.shape().to_vec(), gx)),
            Some(Tensor::from_parts(ev.shape().to_vec(), ge)),
        ]
    })
}

/// Gamma stage on a batch; inputs are expected in `[0, 1]`.
pub fn gamma_op<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var) -> Var {
    let per = per_sample(g.shape(x), g.value(gamma).len(), "gamma");
    let data = g
        .value(x)
        .data()
        .chunks(per)
        .zip(g.value(gamma).data())
        .flat_map(|(c, &gm)| c.iter().map(move |&v| clamp01(v.max(T::zero()).powf(gm))))
        .collect();
    let value = Tensor::from_parts(g.shape(x).to_vec(), data);
    let floor: T = lit(GAMMA_BASE_FLOOR);
    g.custom(&[x, gamma], value, move |args| {
        let (xv, gv) = (args.inputs[0], args.inputs[1]);
        let mut gx = vec![T::zero(); xv.len()];
        let mut gg = vec![T::zero(); gv.len()];
        for (s, &gm) in gv.data().iter().enumerate() {
            let span = s * per..(s + 1) * per;
            for ((&gy, &xi), dx) in args.grad.data()[span.clone()]
                .iter()
                .zip(&xv.data()[span.clone()])
                .zip(&mut gx[span])
            {
                let base = xi.max(T::zero());
                *dx = gy * gm * base.max(floor).powf(gm - T::one());
                if base > T::zero() {
                    gg[s] += gy * base.powf(gm) * base.ln();
                }
            }
        }
        vec![
            Some(Tensor::from_parts(xv.shape().to_vec(), gx)),
            Some(Tensor::from_parts(gv.shape().to_vec(), gg)),
        ]
    })
}

/// Enhancement ratio `EnLum(L) / L` and its derivative.
fn enhance_ratio<T: Scalar>(l: T) -> (T, T) {
    let pi: T = lit(PI);
    let half: T = lit(0.5);
    let sin_half = (pi * l * half).sin();
    let en = sin_half * sin_half;
    let s = en / l;
    let ds = if l < lit(LUM_SERIES) {
        let p2 = pi * pi;
        p2 * lit(0.25) - p2 * p2 * l * l / lit(16.0) + p2 * p2 * p2 * l * l * l * l / lit(288.0)
    } else {
        let den = pi * half * (pi * l).sin();
        (den * l - en) / (l * l)
    };
    (s, ds)
}

/// Contrast stage: blends each pixel with its luminance-enhanced version.
pub fn contrast_op<T: Scalar>(g: &mut Graph<T>, x: Var, alpha: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let per = per_sample(&shape, g.value(alpha).len(), "contrast");
    let plane = per / 3;
    let w: [T; 3] = LUMA.map(lit);
    let floor: T = lit(LUM_FLOOR);
    let mut data = vec![T::zero(); g.value(x).len()];
    for (s, &a) in g.value(alpha).data().iter().enumerate() {
        let src = &g.value(x).data()[s * per..(s + 1) * per];
        let dst = &mut data[s * per..(s + 1) * per];
        for p in 0..plane {
            let rgb = [src[p], src[plane + p], src[2 * plane + p]];
            let l = w[0] * rgb[0] + w[1] * rgb[1] + w[2] * rgb[2];
            let ratio = if l > floor { enhance_ratio(l).0 } else { T::one() };
            for c in 0..3 {
                let en = rgb[c] * ratio;
                dst[c * plane + p] = clamp01(a * en + (T::one() - a) * rgb[c]);
            }
        }
    }
    let value = Tensor::from_parts(shape, data);
    g.custom(&[x, alpha], value, move |args| {
        let (xv, av) = (args.inputs[0], args.inputs[1]);
        let mut gx = vec![T::zero(); xv.len()];
        let mut ga = vec![T::zero(); av.len()];
        for (s, &a) in av.data().iter().enumerate() {
            let src = &xv.data()[s * per..(s + 1) * per];
            let gy = &args.grad.data()[s * per..(s + 1) * per];
            let dx = &mut gx[s * per..(s + 1) * per];
            for p in 0..plane {
                let rgb = [src[p], src[plane + p], src[2 * plane + p]];
                let l = w[0] * rgb[0] + w[1] * rgb[1] + w[2] * rgb[2];
                let (ratio, dratio) = if l > floor {
                    enhance_ratio(l)
                } else {
                    (T::one(), T::zero())
                };
                let mut through_lum = T::zero();
                for c in 0..3 {
                    let pre = a * rgb[c] * ratio + (T::one() - a) * rgb[c];
                    if !inside(pre) {
                        continue;
                    }
                    let m = gy[c * plane + p];
                    ga[s] += m * (rgb[c] * ratio - rgb[c]);
                    dx[c * plane + p] += m * (a * ratio + T::one() - a);
                    through_lum += m * a * rgb[c] * dratio;
                }
                for c in 0..3 {
                    dx[c * plane + p] += through_lum * w[c];
                }
            }
        }
        vec![
            Some(Tensor::from_parts(xv.shape().to_vec(), gx)),
            Some(Tensor::from_parts(av.shape().to_vec(), ga)),
        ]
    })
}

/// Unsharp-mask stage: `x + lambda * (x - gaussian(x))`.
pub fn sharpen_op<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    lambda: Var,
    sigma: f64,
    radius: usize,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let per = per_sample(&shape, g.value(lambda).len(), "sharpen");
    let (h, w) = (shape[2], shape[3]);
    let taps = kernels::gaussian_kernel::<T>(sigma, radius)?;
    let blurred: Vec<T> = g
        .value(x)
        .data()
        .chunks(h * w)
        .flat_map(|p| kernels::separable_plane(p, h, w, &taps))
        .collect();
    let detail: Vec<T> = g
        .value(x)
        .data()
        .iter()
        .zip(&blurred)
        .map(|(&v, &b)| v - b)
        .collect();
    let mut data = Vec::with_capacity(detail.len());
    for (s, &lam) in g.value(lambda).data().iter().enumerate() {
        let span = s * per..(s + 1) * per;
        for (&v, &d) in g.value(x).data()[span.clone()].iter().zip(&detail[span]) {
            data.push(clamp01(v + lam * d));
        }
    }
    let value = Tensor::from_parts(shape.clone(), data);
    Ok(g.custom(&[x, lambda], value, move |args| {
        let (xv, lv) = (args.inputs[0], args.inputs[1]);
        let mut masked = vec![T::zero(); xv.len()];
        let mut gl = vec![T::zero(); lv.len()];
        for (s, &lam) in lv.data().iter().enumerate() {
            for i in s * per..(s + 1) * per {
                let pre = xv.data()[i] + lam * detail[i];
                if inside(pre) {
                    masked[i] = args.grad.data()[i];
                    gl[s] += masked[i] * detail[i];
                }
            }
        }
        let mut gx = Vec::with_capacity(xv.len());
        for (s, &lam) in lv.data().iter().enumerate() {
            for pi in 0..3 {
                let off = s * per + pi * h * w;
                let m = &masked[off..off + h * w];
                let back = kernels::separable_plane_adjoint(m, h, w, &taps);
                gx.extend(
                    m.iter()
                        .zip(&back)
                        .map(|(&mv, &bv)| mv * (T::one() + lam) - lam * bv),
                );
            }
        }
        vec![
            Some(Tensor::from_parts(xv.shape().to_vec(), gx)),
            Some(Tensor::from_parts(lv.shape().to_vec(), gl)),
        ]
    }))
}

/// One stage of the pipeline, applied to a batch.
pub fn stage_op<T: Scalar>(
    g: &mut Graph<T>,
    kind: FilterKind,
    x: Var,
    p: Var,
    cfg: &DifConfig,
) -> Result<Var> {
    Ok(match kind {
        FilterKind::Exposure => exposure_op(g, x, p),
        FilterKind::Gamma => gamma_op(g, x, p),
        FilterKind::Contrast => contrast_op(g, x, p),
        FilterKind::Sharpen => sharpen_op(g, x, p, cfg.sharpen_sigma, cfg.sharpen_radius)?,
    })
}

/// Full pipeline on a batch with `params: [N, 4]` (exposure, gamma, contrast,
/// sharpen). Returns the output after every stage, in pipeline order.
pub fn dif_op<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    params: Var,
    cfg: &DifConfig,
) -> Result<Vec<(FilterKind, Var)>> {
    let mut cur = x;
    let mut stages = Vec::with_capacity(4);
    for kind in cfg.order {
        let col = g.column(params, kind.index());
        cur = stage_op(g, kind, cur, col, cfg)?;
        stages.push((kind, cur));
    }
    Ok(stages)
}

/// Maps unconstrained `[N, 4]` predictor outputs into the parameter ranges.
///
/// Exposure, contrast and sharpen use a scaled logistic; gamma is logistic in
/// log space, so a zero input lands on the interval midpoint (log-midpoint
/// for gamma).
pub fn squash_op<T: Scalar>(g: &mut Graph<T>, raw: Var, ranges: &FilterRanges) -> Result<Var> {
    let shape = g.shape(raw).to_vec();
    if shape.len() != 2 || shape[1] != 4 {
        return Err(DialError::invalid(format!(
            "squash expects [N, 4] raw values, got {shape:?}"
        )));
    }
    if let Some(i) = g.value(raw).data().iter().position(|v| !v.is_finite()) {
        return Err(DialError::NumericFailure(format!(
            "raw filter parameter {} of sample {} is not finite",
            i % 4,
            i / 4
        )));
    }
    let spans: [(f64, f64, bool); 4] = FilterKind::ALL.map(|k| {
        let iv = ranges.get(k);
        match k {
            FilterKind::Gamma => (iv.lo.ln(), iv.hi.ln(), true),
            _ => (iv.lo, iv.hi, false),
        }
    });
    let bounds: [(f64, f64); 4] = FilterKind::ALL.map(|k| (ranges.get(k).lo, ranges.get(k).hi));
    let data = g
        .value(raw)
        .data()
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let (lo, hi, log) = spans[i % 4];
            let t = lit::<T>(lo) + lit::<T>(hi - lo) * sigmoid(r);
            let v = if log { t.exp() } else { t };
            v.max(lit(bounds[i % 4].0)).min(lit(bounds[i % 4].1))
        })
        .collect();
    let value = Tensor::from_parts(shape.clone(), data);
    Ok(g.custom(&[raw], value, move |args| {
        let data = args
            .inputs[0]
            .data()
            .iter()
            .zip(args.output.data())
            .zip(args.grad.data())
            .enumerate()
            .map(|(i, ((&r, &out), &gy))| {
                let (lo, hi, log) = spans[i % 4];
                let sg = sigmoid(r);
                let dt = lit::<T>(hi - lo) * sg * (T::one() - sg);
                gy * if log { out * dt } else { dt }
            })
            .collect();
        vec![Some(Tensor::from_parts(shape.clone(), data))]
    }))
}

/// Plain-value [`squash_op`] for a single parameter row.
pub fn squash_params<T: Scalar>(raw: [T; 4], ranges: &FilterRanges) -> Result<FilterParams<T>> {
    let mut g = Graph::new();
    let r = g.constant(Tensor::from_parts(vec![1, 4], raw.to_vec()));
    let p = squash_op(&mut g, r, ranges)?;
    let d = g.value(p).data();
    Ok(FilterParams::from_array([d[0], d[1], d[2], d[3]]))
}

fn run_stage<T: Scalar>(img: &Image<T>, kind: FilterKind, v: T, cfg: &DifConfig) -> Result<Image<T>> {
    let mut g = Graph::new();
    let x = g.constant(img.to_tensor());
    let p = g.constant(Tensor::scalar(v));
    let y = stage_op(&mut g, kind, x, p, cfg)?;
    Image::from_tensor(g.value(y), 0)
}

pub fn exposure_filter<T: Scalar>(img: &Image<T>, exposure: T) -> Image<T> {
    run_stage(img, FilterKind::Exposure, exposure, &DifConfig::default()).expect("exposure")
}

pub fn gamma_filter<T: Scalar>(img: &Image<T>, gamma: T) -> Image<T> {
    run_stage(img, FilterKind::Gamma, gamma, &DifConfig::default()).expect("gamma")
}

pub fn contrast_filter<T: Scalar>(img: &Image<T>, alpha: T) -> Image<T> {
    run_stage(img, FilterKind::Contrast, alpha, &DifConfig::default()).expect("contrast")
}

pub fn sharpen_filter<T: Scalar>(img: &Image<T>, lambda: T, sigma: f64, radius: usize) -> Result<Image<T>> {
    let cfg = DifConfig {
        sharpen_sigma: sigma,
        sharpen_radius: radius,
        ..DifConfig::default()
    };
    run_stage(img, FilterKind::Sharpen, lambda, &cfg)
}

/// Every intermediate of the pipeline on one image, in stage order.
pub fn apply_dif_stages<T: Scalar>(
    img: &Image<T>,
    p: &FilterParams<T>,
    cfg: &DifConfig,
) -> Result<Vec<(FilterKind, Image<T>)>> {
    cfg.ranges.check(p)?;
    let mut g = Graph::new();
    let x = g.constant(img.to_tensor());
    let params = g.constant(Tensor::from_parts(vec![1, 4], p.to_array().to_vec()));
    dif_op(&mut g, x, params, cfg)?
        .into_iter()
        .map(|(k, v)| Ok((k, Image::from_tensor(g.value(v), 0)?)))
        .collect()
}

/// Runs the full pipeline on one image after range-checking `p`.
pub fn apply_dif<T: Scalar>(img: &Image<T>, p: &FilterParams<T>, cfg: &DifConfig) -> Result<Image<T>> {
    let mut stages = apply_dif_stages(img, p, cfg)?;
    Ok(stages.pop().expect("four stages").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Image<f64> {
        Image::from_fn(h, w, |_, _, _| rng.random_range(lo..hi))
    }

    #[test]
    fn exposure_scalar_cases() {
        let im = Image::<f64>::constant(2, 2, 0.25);
        assert_eq!(exposure_filter(&im, 0.0), im);
        assert!(exposure_filter(&im, 1.0).data().iter().all(|&v| v == 0.5));
        let im = Image::<f64>::constant(1, 1, 0.3);
        let out = exposure_filter(&im, 0.5);
        // 0.3 * sqrt(2)
        assert!((out.get(0, 0, 0) - 0.42426).abs() < 1e-5);
        assert!((out.get(0, 0, 0) - 0.3 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gamma_scalar_cases() {
        let im = Image::<f64>::constant(1, 1, 0.5);
        assert_eq!(gamma_filter(&im, 1.0), im);
        assert_eq!(gamma_filter(&im, 2.0).get(1, 0, 0), 0.25);
        let q = Image::<f64>::constant(1, 1, 0.25);
        assert_eq!(gamma_filter(&q, 0.5).get(2, 0, 0), 0.5);
    }

    #[test]
    fn contrast_scalar_cases() {
        let gray = Image::<f64>::constant(1, 1, 0.5);
        assert_eq!(contrast_filter(&gray, 0.0), gray);
        let out = contrast_filter(&gray, 1.0);
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let px = Image::<f64>::new(1, 1, vec![0.2, 0.4, 0.1]).unwrap();
        let out = contrast_filter(&px, 0.5);
        // Direct evaluation: L = 0.328, EnLum = (1 - cos(pi L)) / 2.
        let l: f64 = 0.27 * 0.2 + 0.67 * 0.4 + 0.06 * 0.1;
        let ratio = 0.5 * (1.0 - (PI * l).cos()) / l;
        for (c, v) in [0.2, 0.4, 0.1].into_iter().enumerate() {
            let want = 0.5 * v * ratio + 0.5 * v;
            assert!((out.get(c, 0, 0) - want).abs() < 1e-12);
        }
        assert!((out.get(0, 0, 0) - 0.1740).abs() < 1e-4);
        assert!((out.get(1, 0, 0) - 0.3481).abs() < 1e-4);
        assert!((out.get(2, 0, 0) - 0.0870).abs() < 1e-4);

        let black = Image::<f64>::constant(2, 2, 0.0);
        assert_eq!(contrast_filter(&black, 1.0), black);
    }

    #[test]
    fn sharpen_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let im = random_image(&mut rng, 5, 6, 0.0, 1.0);
        assert_eq!(sharpen_filter(&im, 0.0, 1.0, 2).unwrap(), im);
        let c = Image::<f64>::constant(4, 4, 0.6);
        let out = sharpen_filter(&c, 1.7, 1.0, 2).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-12));

        // 1x8 step row 0.2 | 0.7: hand-convolve the 5-tap kernel with replicated edges.
        let row: Vec<f64> = (0..8).map(|x| if x < 4 { 0.2 } else { 0.7 }).collect();
        let step = Image::<f64>::from_fn(1, 8, |_, _, x| row[x]);
        let taps: Vec<f64> = {
            let raw: Vec<f64> = (-2i32..=2).map(|k| (-(k * k) as f64 / 2.0).exp()).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|v| v / z).collect()
        };
        let out = sharpen_filter(&step, 1.0, 1.0, 2).unwrap();
        for x in 0..8 {
            let blur: f64 = (0..5)
                .map(|k| taps[k] * row[(x as i64 + k as i64 - 2).clamp(0, 7) as usize])
                .sum();
            let want = (row[x] + (row[x] - blur)).clamp(0.0, 1.0);
            assert!((out.get(0, 0, x) - want).abs() < 1e-12, "x={x}");
        }
        assert!(out.get(0, 0, 3) < 0.2 && out.get(0, 0, 4) > 0.7);
    }

    #[test]
    fn pipeline_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let im = random_image(&mut rng, 9, 7, 0.0, 1.0);
        let cfg = DifConfig::default();
        assert_eq!(apply_dif(&im, &FilterParams::identity(), &cfg).unwrap(), im);
        let im32: Image<f32> = im.cast();
        assert_eq!(apply_dif(&im32, &FilterParams::identity(), &cfg).unwrap(), im32);
    }

    #[test]
    fn pipeline_on_constant_gray() {
        let cfg = DifConfig::default();
        let p = FilterParams {
            exposure: -0.5,
            gamma: 1.4,
            contrast: 0.6,
            sharpen: 1.3,
        };
        let expect = {
            let v: f64 = (0.5 * 2f64.powf(-0.5)).powf(1.4);
            let ratio = 0.5 * (1.0 - (PI * v).cos()) / v;
            0.6 * v * ratio + 0.4 * v
        };
        for (h, w) in [(40, 30), (16, 16)] {
            let out = apply_dif(&Image::<f64>::constant(h, w, 0.5), &p, &cfg).unwrap();
            assert!(out.data().iter().all(|&v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn out_of_range_parameters_are_named() {
        let p = FilterParams {
            exposure: 0.0,
            gamma: 5.0,
            contrast: 0.0,
            sharpen: 0.0,
        };
        let err = apply_dif(&Image::<f64>::constant(2, 2, 0.5), &p, &DifConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("gamma"), "{err}");
    }

    #[test]
    fn squash_midpoints_and_saturation() {
        let ranges = FilterRanges::default();
        let p = squash_params([0.0f64; 4], &ranges).unwrap();
        assert!(p.exposure.abs() < 1e-15);
        assert!((p.gamma - 1.0).abs() < 1e-15);
        assert!((p.contrast - 0.5).abs() < 1e-15);
        assert!((p.sharpen - 1.0).abs() < 1e-15);
        let hi = squash_params([1e6f64; 4], &ranges).unwrap();
        assert_eq!(hi.to_array(), [2.0, 3.0, 1.0, 2.0]);
        let lo = squash_params([-1e6f64; 4], &ranges).unwrap();
        assert_eq!(lo.to_array(), [-2.0, 1.0 / 3.0, 0.0, 0.0]);
        assert!(squash_params([f64::NAN, 0.0, 0.0, 0.0], &ranges).is_err());
    }

    #[test]
    fn ranges_must_contain_identity() {
        let mut r = FilterRanges::default();
        assert!(r.validate().is_ok());
        r.gamma = Interval::new(1.5, 3.0);
        assert!(r.validate().is_err());
        r.gamma = Interval::new(2.0, 2.0);
        assert!(r.validate().is_err());
    }

    fn check_stage(kind: FilterKind, value: f64, seed: u64, lo: f64, hi: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 6, 5, lo, hi).to_tensor();
        let cfg = DifConfig::default();
        let pv = Tensor::scalar(value);
        let r = grad_check(
            |g, x| {
                let p = g.constant(pv.clone());
                stage_op(g, kind, x, p, &cfg)
            },
            &img,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{kind} wrt image: {r:?}");
        let r = grad_check(
            |g, p| {
                let x = g.constant(img.clone());
                stage_op(g, kind, x, p, &cfg)
            },
            &pv,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{kind} wrt parameter: {r:?}");
    }

    #[test]
    fn stage_gradients_match_central_differences() {
        for seed in 0..10 {
            check_stage(FilterKind::Exposure, -0.7 + 0.1 * seed as f64, seed, 0.05, 0.5);
            check_stage(FilterKind::Gamma, 0.5 + 0.2 * seed as f64, seed, 0.05, 0.95);
            check_stage(FilterKind::Contrast, 0.1 + 0.08 * seed as f64, seed, 0.05, 0.9);
            check_stage(FilterKind::Sharpen, 0.1 * seed as f64, seed, 0.3, 0.7);
        }
    }

    #[test]
    fn exposure_gradient_at_single_precision_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let img = random_image(&mut rng, 8, 8, 0.05, 0.45).to_tensor();
        let r = grad_check(
            |g, e| {
                let x = g.constant(img.clone());
                Ok(exposure_op(g, x, e))
            },
            &Tensor::scalar(0.3),
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4);
    }

    #[test]
    fn squash_gradient_and_pipeline_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ranges = FilterRanges::default();
        let raw = Tensor::<f64>::from_fn(&[3, 4], |_| rng.random_range(-3.0..3.0));
        let r = grad_check(|g, v| squash_op(g, v, &ranges), &raw, 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");

        let img = Tensor::<f64>::from_fn(&[2, 3, 5, 5], |_| rng.random_range(0.2..0.6));
        let cfg = DifConfig::default();
        let raw = Tensor::<f64>::from_fn(&[2, 4], |_| rng.random_range(-0.5..0.5));
        let r = grad_check(
            |g, rv| {
                let x = g.constant(img.clone());
                let p = squash_op(g, rv, &cfg.ranges)?;
                Ok(dif_op(g, x, p, &cfg)?.pop().unwrap().1)
            },
            &raw,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }
}
