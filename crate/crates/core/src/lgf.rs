//! Learnable guided filter: a per-pixel guide transform followed by the
//! guided-filter local linear model, channel `c` of the guide steering
//! channel `c` of the segmentation scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DialError, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, ConvGeom};
use crate::nn::{self, Network, ParamSet};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Image, Tensor, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidedFilterConfig {
    pub radius: usize,
    pub epsilon: f64,
}

impl Default for GuidedFilterConfig {
    fn default() -> Self {
        GuidedFilterConfig {
            radius: 4,
            epsilon: 1e-2,
        }
    }
}

impl GuidedFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(DialError::Config("guided filter radius must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(DialError::Config("guided filter epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Two 1x1 convolutions (3 -> hidden -> 19) with a leaky rectifier between.
#[derive(Clone, Debug)]
pub struct GuideTransform<T> {
    slope: f64,
    params: ParamSet<T>,
}

impl<T: Scalar> GuideTransform<T> {
    pub const HIDDEN: usize = 64;

    pub fn new(rng: &mut impl Rng) -> Self {
        let slope = 0.01;
        let h = Self::HIDDEN;
        let mut params = ParamSet::new();
        params.add("conv1.weight", nn::kaiming_normal(&[h, 3, 1, 1], 3, slope, rng));
        params.add("conv1.bias", Tensor::zeros(&[h]));
        params.add(
            "conv2.weight",
            nn::kaiming_normal(&[NUM_CLASSES, h, 1, 1], h, 1.0, rng),
        );
        params.add("conv2.bias", Tensor::zeros(&[NUM_CLASSES]));
        GuideTransform { slope, params }
    }

    /// All-zero transform; its guide map is identically zero.
    pub fn zeroed() -> Self {
        let mut t = Self::new(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        for p in t.params.tensors_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        t
    }

    /// `[N, 3, H, W]` image -> `[N, 19, H, W]` guide.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], img: Var) -> Result<Var> {
        let geom = ConvGeom::symmetric(1, 1, 0);
        let h = nn::conv2d(g, img, vars[0], vars[1], geom)?;
        let h = g.leaky_relu(h, lit(self.slope));
        nn::conv2d(g, h, vars[2], vars[3], geom)
    }

    /// Guide map of a single image.
    pub fn guide_transform(&self, img: &Image<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }
}

impl<T: Scalar> Network<T> for GuideTransform<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

/// Guided filter of `p` steered by `guide`, plane by plane; both `[N, C, H, W]`.
///
/// `q = mean(a) * I + mean(b)` with `a = cov(I, p) / (var(I) + eps)` and
/// `b = mean(p) - a * mean(I)`, all means over clipped square windows.
/// Differentiable with respect to both inputs.
pub fn guided_filter_op<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    guide: Var,
    cfg: &GuidedFilterConfig,
) -> Result<Var> {
    cfg.validate()?;
    if g.shape(p) != g.shape(guide) {
        return Err(DialError::invalid(format!(
            "guided filter: input {:?} and guide {:?} differ",
            g.shape(p),
            g.shape(guide)
        )));
    }
    let (n, c, h, w) = g.value(p).nchw()?;
    let (r, eps): (usize, T) = (cfg.radius, lit(cfg.epsilon));
    let plane = h * w;
    let total = n * c * plane;
    let box_mean = |src: &[T], out: &mut [T]| kernels::box_mean_plane(src, h, w, r, out);

    // Saved for the backward pass: mean_I, mean_p, a, var_I + eps, mean(a).
    let mut m_i = vec![T::zero(); total];
    let mut m_p = vec![T::zero(); total];
    let mut a = vec![T::zero(); total];
    let mut den = vec![T::zero(); total];
    let mut m_a = vec![T::zero(); total];
    let mut q = vec![T::zero(); total];
    {
        let (pv, iv) = (g.value(p).data(), g.value(guide).data());
        let mut prod = vec![T::zero(); plane];
        let mut c_ii = vec![T::zero(); plane];
        let mut c_ip = vec![T::zero(); plane];
        let mut b = vec![T::zero(); plane];
        let mut m_b = vec![T::zero(); plane];
        for k in 0..n * c {
            let sl = k * plane..(k + 1) * plane;
            let (pp, ii) = (&pv[sl.clone()], &iv[sl.clone()]);
            box_mean(ii, &mut m_i[sl.clone()]);
            box_mean(pp, &mut m_p[sl.clone()]);
            prod.iter_mut().zip(ii).for_each(|(o, &v)| *o = v * v);
            box_mean(&prod, &mut c_ii);
            prod.iter_mut().zip(ii.iter().zip(pp)).for_each(|(o, (&u, &v))| *o = u * v);
            box_mean(&prod, &mut c_ip);
            for j in 0..plane {
                let (mi, mp) = (m_i[k * plane + j], m_p[k * plane + j]);
                let d = c_ii[j] - mi * mi + eps;
                let aj = (c_ip[j] - mi * mp) / d;
                den[k * plane + j] = d;
                a[k * plane + j] = aj;
                b[j] = mp - aj * mi;
            }
            box_mean(&a[sl.clone()], &mut m_a[sl.clone()]);
            box_mean(&b, &mut m_b);
            for j in 0..plane {
                q[k * plane + j] = m_a[k * plane + j] * ii[j] + m_b[j];
            }
        }
    }
    let shape = vec![n, c, h, w];
    let value = Tensor::from_parts(shape.clone(), q);
    Ok(g.custom(&[p, guide], value, move |args| {
        let adjoint = |src: &[T], out: &mut [T]| kernels::box_mean_plane_adjoint(src, h, w, r, out);
        let (pv, iv, gq) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
        let mut gp = vec![T::zero(); total];
        let mut gi = vec![T::zero(); total];
        let mut buf = vec![T::zero(); plane];
        let mut ga = vec![T::zero(); plane];
        let mut gb = vec![T::zero(); plane];
        let mut g_mp = vec![T::zero(); plane];
        let mut g_mi = vec![T::zero(); plane];
        let mut g_cip = vec![T::zero(); plane];
        let mut g_cii = vec![T::zero(); plane];
        let mut t = vec![T::zero(); plane];
        let two = T::one() + T::one();
        for k in 0..n * c {
            let o = k * plane;
            let sl = o..o + plane;
            let (pp, ii, gqs) = (&pv[sl.clone()], &iv[sl.clone()], &gq[sl.clone()]);
            buf.iter_mut().zip(gqs.iter().zip(ii)).for_each(|(d, (&u, &v))| *d = u * v);
            adjoint(&buf, &mut ga);
            adjoint(gqs, &mut gb);
            for j in 0..plane {
                let (mi, mp, aj, d) = (m_i[o + j], m_p[o + j], a[o + j], den[o + j]);
                let ga_j = ga[j] - gb[j] * mi;
                let g_cov = ga_j / d;
                let g_var = -ga_j * aj / d;
                g_mp[j] = gb[j] - g_cov * mi;
                g_mi[j] = -gb[j] * aj - g_cov * mp - two * g_var * mi;
                g_cip[j] = g_cov;
                g_cii[j] = g_var;
            }
            let (gps, gis) = (&mut gp[sl.clone()], &mut gi[sl.clone()]);
            adjoint(&g_mp, gps);
            adjoint(&g_mi, gis);
            adjoint(&g_cip, &mut t);
            for j in 0..plane {
                gps[j] += ii[j] * t[j];
                gis[j] += gqs[j] * m_a[o + j] + pp[j] * t[j];
            }
            adjoint(&g_cii, &mut t);
            for j in 0..plane {
                gis[j] += two * ii[j] * t[j];
            }
        }
        vec![
            Some(Tensor::from_parts(shape.clone(), gp)),
            Some(Tensor::from_parts(shape.clone(), gi)),
        ]
    }))
}

/// Guided filter of one 2-D map.
pub fn guided_filter<T: Scalar>(
    p: &Tensor<T>,
    guide: &Tensor<T>,
    cfg: &GuidedFilterConfig,
) -> Result<Tensor<T>> {
    let (h, w) = match (p.shape(), guide.shape()) {
        ([h, w], [gh, gw]) if h == gh && w == gw => (*h, *w),
        (a, b) => {
            return Err(DialError::invalid(format!(
                "guided filter needs equal 2-d maps, got {a:?} and {b:?}"
            )))
        }
    };
    let mut g = Graph::new();
    let pv = g.constant(p.clone().reshape(&[1, 1, h, w])?);
    let iv = g.constant(guide.clone().reshape(&[1, 1, h, w])?);
    let q = guided_filter_op(&mut g, pv, iv, cfg)?;
    g.value(q).clone().reshape(&[h, w])
}

/// Filters `[N, 19, H, W]` scores with the guide computed from the enhanced image.
pub fn apply_lgf<T: Scalar>(
    g: &mut Graph<T>,
    transform: &GuideTransform<T>,
    vars: &[Var],
    logits: Var,
    enhanced: Var,
    cfg: &GuidedFilterConfig,
) -> Result<Var> {
    let (ln, lc, lh, lw) = g.value(logits).nchw()?;
    let (en, _, eh, ew) = g.value(enhanced).nchw()?;
    if (ln, lh, lw) != (en, eh, ew) || lc != NUM_CLASSES {
        return Err(DialError::invalid(format!(
            "LGF: scores {:?} do not match image {:?}",
            g.shape(logits),
            g.shape(enhanced)
        )));
    }
    let guide = transform.forward(g, vars, enhanced)?;
    guided_filter_op(g, logits, guide, cfg)
}
