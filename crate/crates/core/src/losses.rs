//! Class re-weighting, segmentation/static/adversarial losses and the
//! patch discriminator.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DialError, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::nn::{self, Network, ParamSet};
use crate::scalar::{lit, Scalar};
use crate::tensor::{LabelMap, Tensor, IGNORE_LABEL, NUM_CLASSES};

/// Probabilities are floored here before taking logarithms.
const PROB_FLOOR: f64 = 1e-12;

/// Per-category loss weights derived from pixel proportions.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    /// Fraction of labeled pixels in each category.
    pub proportions: Vec<f64>,
    /// `-ln(proportion)`.
    pub raw: Vec<f64>,
    /// Standardized weights with mean 1 and standard deviation `spread`.
    pub weights: Vec<f64>,
    pub spread: f64,
}

impl ClassWeights {
    /// All weights equal to one.
    pub fn uniform(k: usize) -> Self {
        ClassWeights {
            proportions: vec![1.0 / k as f64; k],
            raw: vec![(k as f64).ln(); k],
            weights: vec![1.0; k],
            spread: 0.0,
        }
    }

    /// Builds weights from proportions. Categories with zero proportion get
    /// the largest raw weight among the observed ones.
    pub fn from_proportions(proportions: &[f64], spread: f64) -> Result<Self> {
        if proportions.is_empty() {
            return Err(DialError::invalid("no categories"));
        }
        if proportions.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DialError::invalid("proportions must be finite and >= 0"));
        }
        let observed: Vec<f64> = proportions
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| -p.ln())
            .collect();
        if observed.is_empty() {
            return Err(DialError::Data("no labeled pixels to weight".into()));
        }
        let fallback = observed.iter().copied().fold(f64::MIN, f64::max);
        let raw: Vec<f64> = proportions
            .iter()
            .enumerate()
            .map(|(m, &p)| {
                if p > 0.0 {
                    -p.ln()
                } else {
                    warn!("category {m} has no labeled pixels; using the largest observed weight");
                    fallback
                }
            })
            .collect();
        Ok(ClassWeights {
            proportions: proportions.to_vec(),
            weights: standardize(&raw, spread),
            raw,
            spread,
        })
    }

    /// Weights of the given categories, as the working scalar type.
    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.weights.iter().map(|&w| lit(w)).collect()
    }
}

/// `(x - mean) / std * spread + 1`, or all ones when the values do not vary.
pub fn standardize(raw: &[f64], spread: f64) -> Vec<f64> {
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return vec![1.0; raw.len()];
    }
    raw.iter().map(|v| (v - mean) / std * spread + 1.0).collect()
}

/// Pixel-proportion weights over the 19-category taxonomy.
pub fn class_weights(labels: &[&LabelMap], spread: f64) -> Result<ClassWeights> {
    let mut counts = [0u64; NUM_CLASSES];
    for lm in labels {
        for &v in lm.data() {
            if v != IGNORE_LABEL {
                counts[v as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(DialError::Data("labels contain no valid pixels".into()));
    }
    let proportions: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    ClassWeights::from_proportions(&proportions, spread)
}

/// Weighted cross-entropy over softmax probabilities `[N, K, H, W]`:
/// `-(1 / (N_valid * K)) * sum_pixels w_gt * ln P_gt`. Ignored pixels add nothing.
pub fn weighted_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &[&LabelMap],
    weights: &ClassWeights,
) -> Result<Var> {
    let (n, k, h, w) = g.value(probs).nchw()?;
    if labels.len() != n || weights.weights.len() != k {
        return Err(DialError::invalid(format!(
            "weighted CE: {} label maps / {} weights for probabilities {:?}",
            labels.len(),
            weights.weights.len(),
            g.shape(probs)
        )));
    }
    if let Some(lm) = labels.iter().find(|l| l.height() != h || l.width() != w) {
        return Err(DialError::invalid(format!(
            "label map {}x{} does not match {h}x{w} predictions",
            lm.height(),
            lm.width()
        )));
    }
    let plane = h * w;
    let wts: Vec<T> = weights.as_scalars();
    let floor: T = lit(PROB_FLOOR);
    // (flat index, weight) of every labeled pixel's ground-truth channel.
    let mut picks: Vec<(usize, T)> = Vec::new();
    for (s, lm) in labels.iter().enumerate() {
        for (p, &v) in lm.data().iter().enumerate() {
            if v != IGNORE_LABEL {
                let m = v as usize;
                picks.push(((s * k + m) * plane + p, wts[m]));
            }
        }
    }
    if picks.is_empty() {
        warn!("weighted CE over a batch without valid pixels; returning 0");
    }
    let norm = if picks.is_empty() {
        T::zero()
    } else {
        T::from_usize(picks.len() * k).unwrap().recip()
    };
    let pv = g.value(probs).data();
    let total: T = picks
        .iter()
        .map(|&(i, wt)| wt * pv[i].max(floor).ln())
        .sum::<T>();
    let value = Tensor::scalar(-total * norm);
    let shape = g.shape(probs).to_vec();
    Ok(g.custom(&[probs], value, move |args| {
        let gy = args.grad.data()[0];
        let pv = args.inputs[0].data();
        let mut gp = Tensor::zeros(&shape);
        for &(i, wt) in &picks {
            if pv[i] > floor {
                gp.data_mut()[i] -= gy * norm * wt / pv[i];
            }
        }
        vec![Some(gp)]
    }))
}

/// Static categories and the pseudo-label match window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaticConfig {
    pub categories: Vec<u8>,
    pub window: usize,
}

impl Default for StaticConfig {
    fn default() -> Self {
        // road, sidewalk, wall, vegetation, terrain, sky
        StaticConfig {
            categories: vec![0, 1, 3, 8, 9, 10],
            window: 3,
        }
    }
}

impl StaticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(DialError::Config("static category set is empty".into()));
        }
        if let Some(c) = self.categories.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(DialError::Config(format!("static category {c} is not a trainId")));
        }
        if self.window % 2 == 0 {
            return Err(DialError::Config("static match window must be odd".into()));
        }
        Ok(())
    }
}

/// Pseudo labels from daytime probabilities `[N, 19, H, W]`: per pixel, the
/// static category maximizing `w_m * P_m`.
pub fn build_pseudo_labels<T: Scalar>(
    probs: &Tensor<T>,
    weights: &ClassWeights,
    cfg: &StaticConfig,
) -> Result<Vec<LabelMap>> {
    cfg.validate()?;
    let (n, k, h, w) = probs.nchw()?;
    if weights.weights.len() != k {
        return Err(DialError::invalid("weights do not match probability channels"));
    }
    let plane = h * w;
    let wts: Vec<T> = weights.as_scalars();
    (0..n)
        .map(|s| {
            let data = (0..plane)
                .map(|p| {
                    let mut best = cfg.categories[0];
                    let mut best_v = T::neg_infinity();
                    for &c in &cfg.categories {
                        let v = wts[c as usize] * probs.data()[(s * k + c as usize) * plane + p];
                        if v > best_v {
                            best_v = v;
                            best = c;
                        }
                    }
                    best
                })
                .collect();
            LabelMap::new(h, w, data)
        })
        .collect()
}

/// Static loss of nighttime probabilities `[N, 19, H, W]` against pseudo labels.
///
/// `tau(c, i) = P(c, i)` when category `c` occurs in the pseudo-label window
/// around `i` and zero otherwise; zero entries are skipped. The loss is
/// `-(1/N) * sum (1 - P(c, i)) * ln tau(c, i)` over static channels.
pub fn static_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    pseudo: &[&LabelMap],
    cfg: &StaticConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (n, k, h, w) = g.value(probs).nchw()?;
    if pseudo.len() != n || pseudo.iter().any(|l| l.height() != h || l.width() != w) {
        return Err(DialError::invalid("pseudo labels do not match predictions"));
    }
    let plane = h * w;
    let r = cfg.window / 2;
    let floor: T = lit(PROB_FLOOR);
    let mut entries: Vec<usize> = Vec::new();
    let mut valid = 0usize;
    for (s, lm) in pseudo.iter().enumerate() {
        valid += lm.valid_pixels();
        for &c in &cfg.categories {
            for y in 0..h {
                for x in 0..w {
                    let present = (y.saturating_sub(r)..=(y + r).min(h - 1)).any(|yy| {
                        (x.saturating_sub(r)..=(x + r).min(w - 1)).any(|xx| lm.get(yy, xx) == c)
                    });
                    if present {
                        entries.push((s * k + c as usize) * plane + y * w + x);
                    }
                }
            }
        }
    }
    if valid == 0 {
        warn!("static loss over empty pseudo labels; returning 0");
    }
    let norm = if valid == 0 {
        T::zero()
    } else {
        T::from_usize(valid).unwrap().recip()
    };
    let pv = g.value(probs).data();
    let total: T = entries
        .iter()
        .map(|&i| (T::one() - pv[i]) * pv[i].max(floor).ln())
        .sum();
    let value = Tensor::scalar(-total * norm);
    let shape = g.shape(probs).to_vec();
    Ok(g.custom(&[probs], value, move |args| {
        let gy = args.grad.data()[0];
        let pv = args.inputs[0].data();
        let mut gp = Tensor::zeros(&shape);
        for &i in &entries {
            let p = pv[i];
            let d = if p > floor {
                p.ln() - (T::one() - p) / p
            } else {
                floor.ln()
            };
            gp.data_mut()[i] += gy * norm * d;
        }
        vec![Some(gp)]
    }))
}

/// Five 4x4 conv blocks with leaky rectifiers producing patch scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub channels: [usize; 5],
    pub strides: [usize; 5],
    pub kernel: usize,
    pub slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            channels: [64, 128, 256, 256, 1],
            strides: [2, 2, 1, 1, 1],
            kernel: 4,
            slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    /// Same topology with the first four widths divided by eight.
    pub fn desk() -> Self {
        DiscriminatorSpec {
            channels: [8, 16, 32, 32, 1],
            ..Self::default()
        }
    }

    fn geom(&self, i: usize) -> ConvGeom {
        let k = self.kernel;
        if self.strides[i] == 1 {
            // Pads (k-1) in total so stride-1 blocks keep the resolution.
            ConvGeom {
                kernel: k,
                stride: 1,
                pad_lo: (k - 1) / 2,
                pad_hi: k / 2,
            }
        } else {
            ConvGeom::symmetric(k, self.strides[i], (k - self.strides[i]) / 2)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    params: ParamSet<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.channels[4] != 1 || spec.channels.contains(&0) || spec.strides.contains(&0) {
            return Err(DialError::Config(
                "discriminator needs positive widths/strides and one output channel".into(),
            ));
        }
        let mut params = ParamSet::new();
        let mut cin = NUM_CLASSES;
        let k = spec.kernel;
        for (i, &cout) in spec.channels.iter().enumerate() {
            params.add(
                format!("conv{}.weight", i + 1),
                nn::kaiming_normal(&[cout, cin, k, k], cin * k * k, spec.slope, rng),
            );
            params.add(format!("conv{}.bias", i + 1), Tensor::zeros(&[cout]));
            cin = cout;
        }
        Ok(Discriminator { spec, params })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// `[N, 19, H, W]` probabilities -> `[N, 1, H/4, W/4]` patch scores.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], probs: Var) -> Result<Var> {
        let slope = lit(self.spec.slope);
        let mut cur = probs;
        for i in 0..5 {
            cur = nn::conv2d(g, cur, vars[2 * i], vars[2 * i + 1], self.spec.geom(i))?;
            cur = g.leaky_relu(cur, slope);
        }
        Ok(cur)
    }

    pub fn discriminator_forward(&self, probs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(probs.clone());
        let y = self.forward(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Scalar> Network<T> for Discriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

/// Loss mixing weights and the domain labels of the least-squares objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg: f64,
    pub static_: f64,
    pub adv: f64,
    pub source_label: f64,
    pub target_label: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg: 1.0,
            static_: 1.0,
            adv: 0.01,
            source_label: 1.0,
            target_label: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.seg,
            self.static_,
            self.adv,
            self.source_label,
            self.target_label,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(DialError::Config("loss weights must be finite".into()));
        }
        if self.source_label == self.target_label {
            return Err(DialError::Config(
                "source and target domain labels must differ".into(),
            ));
        }
        Ok(())
    }
}

/// Mean over patches of `(score - label)^2`.
pub fn lsgan_term<T: Scalar>(g: &mut Graph<T>, scores: Var, label: f64) -> Var {
    let d = g.add_const(scores, lit(-label));
    let sq = g.square(d);
    g.mean(sq)
}

/// Generator term: both target-domain predictions pushed toward the source label.
pub fn generator_adv_loss<T: Scalar>(g: &mut Graph<T>, d_td: Var, n_tn: Var, lw: &LossWeights) -> Var {
    let a = lsgan_term(g, d_td, lw.source_label);
    let b = lsgan_term(g, n_tn, lw.source_label);
    g.add(a, b)
}

/// Discriminator term: source scores toward `s`, target scores toward `t`, each halved.
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<T>, src: Var, tgt: Var, lw: &LossWeights) -> Var {
    let a = lsgan_term(g, src, lw.source_label);
    let b = lsgan_term(g, tgt, lw.target_label);
    let s = g.add(a, b);
    g.mul_const(s, lit(0.5))
}

/// Patch scores from both discriminators.
pub struct DiscriminatorScores<'a, T> {
    /// Day discriminator on source predictions.
    pub day_src: &'a Tensor<T>,
    /// Day discriminator on target-day predictions.
    pub day_td: &'a Tensor<T>,
    /// Night discriminator on source predictions.
    pub night_src: &'a Tensor<T>,
    /// Night discriminator on target-night predictions.
    pub night_tn: &'a Tensor<T>,
}

/// Values of `(L_adv, L_d, L_n)`.
pub fn adversarial_losses<T: Scalar>(scores: &DiscriminatorScores<'_, T>, lw: &LossWeights) -> (T, T, T) {
    let mut g = Graph::new();
    let ds = g.constant(scores.day_src.clone());
    let dt = g.constant(scores.day_td.clone());
    let ns = g.constant(scores.night_src.clone());
    let nt = g.constant(scores.night_tn.clone());
    let adv = generator_adv_loss(&mut g, dt, nt, lw);
    let ld = discriminator_loss(&mut g, ds, dt, lw);
    let ln = discriminator_loss(&mut g, ns, nt, lw);
    let v = |x: Var| g.value(x).data()[0];
    (v(adv), v(ld), v(ln))
}

/// `seg * L_seg + static * L_static + adv * L_adv`; refuses non-finite parts.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    seg: Var,
    static_: Var,
    adv: Var,
    lw: &LossWeights,
) -> Result<Var> {
    for (name, v) in [("L_seg", seg), ("L_static", static_), ("L_adv", adv)] {
        if !g.value(v).all_finite() {
            return Err(DialError::NumericFailure(format!("{name} is not finite")));
        }
    }
    let a = g.mul_const(seg, lit(lw.seg));
    let b = g.mul_const(static_, lit(lw.static_));
    let c = g.mul_const(adv, lit(lw.adv));
    let ab = g.add(a, b);
    Ok(g.add(ab, c))
}

/// [`total_loss`] on plain values.
pub fn total_loss_value(seg: f64, static_: f64, adv: f64, lw: &LossWeights) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let parts = [seg, static_, adv].map(|v| g.constant(Tensor::scalar(v)));
    let t = total_loss(&mut g, parts[0], parts[1], parts[2], lw)?;
    Ok(g.value(t).data()[0])
}
