//! The segmentation model ensemble and its supervised and day/night
//! adaptation training loops.

use std::fmt;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::checkpoint::Checkpoint;
use crate::cnnpp::{CnnPp, PredictorConfig};
use crate::dataio::{compute_miou, MiouReport};
use crate::dif::{dif_op, squash_op, DifConfig, FilterKind, FilterParams};
use crate::error::{DialError, Result};
use crate::graph::{Graph, Var};
use crate::lgf::{apply_lgf, GuideTransform, GuidedFilterConfig};
use crate::losses::{
    build_pseudo_labels, class_weights, discriminator_loss, generator_adv_loss, static_loss, total_loss,
    weighted_ce_loss, ClassWeights, Discriminator, DiscriminatorSpec, LossWeights, StaticConfig,
};
use crate::nn::{Network, ParamSet};
use crate::optim::{poly_lr, Optimizer, OptimizerConfig};
use crate::scalar::{lit, Scalar};
use crate::segnet::{Backbone, BackboneSpec};
use crate::tensor::{stack_images, Image, LabelMap, Tensor, NUM_CLASSES};

/// How images are enhanced before segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifMode {
    /// Per-image parameters predicted by the CNN-PP.
    Adaptive,
    /// The same parameters for every image.
    Fixed,
    /// No enhancement.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dif_mode: DifMode,
    /// Exposure, gamma, contrast and sharpen used in fixed mode. The default
    /// lifts shadows with gamma alone, which never clips bright pixels.
    pub fixed_params: [f64; 4],
    pub use_lgf: bool,
    pub predictor: PredictorConfig,
    pub backbone: BackboneSpec,
    pub dif: DifConfig,
    pub guided_filter: GuidedFilterConfig,
    pub discriminator: DiscriminatorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dif_mode: DifMode::Adaptive,
            fixed_params: [0.0, 0.6, 0.0, 0.0],
            use_lgf: true,
            predictor: PredictorConfig::default(),
            backbone: BackboneSpec::default(),
            dif: DifConfig::default(),
            guided_filter: GuidedFilterConfig::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

impl ModelConfig {
    /// Sized for 64x64 images on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            predictor: PredictorConfig {
                input_size: 64,
                ..PredictorConfig::default()
            },
            discriminator: DiscriminatorSpec::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.predictor.validate()?;
        self.dif.validate()?;
        self.guided_filter.validate()?;
        let fixed = FilterParams::from_array(self.fixed_params);
        self.dif
            .ranges
            .check(&fixed)
            .map_err(|e| DialError::Config(format!("fixed_params: {e}")))?;
        Ok(())
    }
}

/// CNN-PP, backbone and guide transform. All three always exist so that
/// checkpoints share one layout; the mode decides which of them run.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub cnnpp: CnnPp<T>,
    pub backbone: Backbone<T>,
    pub guide: GuideTransform<T>,
}

/// Graph handles of the model parameters.
pub struct Bound {
    pub cnnpp: Vec<Var>,
    pub backbone: Vec<Var>,
    pub guide: Vec<Var>,
}

/// Intermediate values of one forward pass.
pub struct Forward {
    /// Squashed `[N, 4]` filter parameters, when filtering is on.
    pub params: Option<Var>,
    /// Output of every filter stage in order.
    pub stages: Vec<(FilterKind, Var)>,
    pub enhanced: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Result of running the model on one image.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub labels: LabelMap,
    pub probs: Tensor<T>,
    pub params: Option<FilterParams<T>>,
    pub stages: Vec<(FilterKind, Image<T>)>,
}

pub const CNNPP_PREFIX: &str = "cnnpp";
pub const BACKBONE_PREFIX: &str = "backbone";
pub const GUIDE_PREFIX: &str = "guide";
pub const DISC_DAY_PREFIX: &str = "disc_day";
pub const DISC_NIGHT_PREFIX: &str = "disc_night";

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let cnnpp = CnnPp::new(cfg.predictor.clone(), rng)?;
        let backbone = Backbone::new(cfg.backbone.clone(), rng)?;
        let guide = GuideTransform::new(rng);
        Ok(Model {
            cfg,
            cnnpp,
            backbone,
            guide,
        })
    }

    fn trains_cnnpp(&self) -> bool {
        self.cfg.dif_mode == DifMode::Adaptive
    }

    pub fn bind(&self, g: &mut Graph<T>, training: bool) -> Bound {
        Bound {
            cnnpp: self.cnnpp.params().bind(g, training && self.trains_cnnpp()),
            backbone: self.backbone.params().bind(g, training),
            guide: self.guide.params().bind(g, training && self.cfg.use_lgf),
        }
    }

    /// Enhance, segment and (optionally) guided-filter a `[N, 3, H, W]` batch.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, x: Var, dropout: Option<&mut dyn RngCore>) -> Result<Forward> {
        let (n, ..) = g.value(x).nchw()?;
        let params = match self.cfg.dif_mode {
            DifMode::Off => None,
            DifMode::Fixed => {
                let row = self.cfg.fixed_params.map(lit::<T>);
                Some(g.constant(Tensor::from_fn(&[n, 4], |i| row[i % 4])))
            }
            DifMode::Adaptive => {
                let small = self.cnnpp.downsample(g, x)?;
                let raw = self.cnnpp.forward(g, &b.cnnpp, small, dropout)?;
                Some(squash_op(g, raw, &self.cfg.dif.ranges)?)
            }
        };
        let stages = match params {
            Some(p) => dif_op(g, x, p, &self.cfg.dif)?,
            None => Vec::new(),
        };
        let enhanced = stages.last().map_or(x, |s| s.1);
        let mut logits = self.backbone.forward(g, &b.backbone, enhanced)?;
        if self.cfg.use_lgf {
            logits = apply_lgf(g, &self.guide, &b.guide, logits, enhanced, &self.cfg.guided_filter)?;
        }
        let probs = g.softmax_channels(logits);
        Ok(Forward {
            params,
            stages,
            enhanced,
            logits,
            probs,
        })
    }

    /// Evaluation-mode prediction for one image.
    pub fn predict(&self, img: &Image<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let f = self.forward(&mut g, &b, x, None)?;
        let probs = g.value(f.probs).clone();
        let labels = argmax_labels(&probs)?.remove(0);
        let params = f.params.map(|p| {
            let d = g.value(p).data();
            FilterParams::from_array([d[0], d[1], d[2], d[3]])
        });
        let stages = f
            .stages
            .iter()
            .map(|&(k, v)| Ok((k, Image::from_tensor(g.value(v), 0)?)))
            .collect::<Result<_>>()?;
        Ok(Prediction {
            labels,
            probs,
            params,
            stages,
        })
    }

    pub fn networks(&self) -> [(&'static str, &ParamSet<T>); 3] {
        [
            (CNNPP_PREFIX, self.cnnpp.params()),
            (BACKBONE_PREFIX, self.backbone.params()),
            (GUIDE_PREFIX, self.guide.params()),
        ]
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        for (prefix, p) in self.networks() {
            ck.push_params(prefix, p)?;
        }
        Ok(ck)
    }

    /// Restores all three networks, or none of them on error.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut staged = self.clone();
        ck.restore_params(CNNPP_PREFIX, staged.cnnpp.params_mut())?;
        ck.restore_params(BACKBONE_PREFIX, staged.backbone.params_mut())?;
        ck.restore_params(GUIDE_PREFIX, staged.guide.params_mut())?;
        *self = staged;
        Ok(())
    }
}

/// Per-pixel argmax of `[N, K, H, W]` scores.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<LabelMap>> {
    let (n, k, h, w) = scores.nchw()?;
    let plane = h * w;
    (0..n)
        .map(|s| {
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if scores.data()[(s * k + c) * plane + p] > scores.data()[(s * k + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, data)
        })
        .collect()
}

/// mIoU of the model's predictions over labeled samples.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[(Image<T>, LabelMap)]) -> Result<(MiouReport, Vec<LabelMap>)> {
    let preds = samples
        .iter()
        .map(|(img, _)| model.predict(img).map(|p| p.labels))
        .collect::<Result<Vec<_>>>()?;
    let pr: Vec<&LabelMap> = preds.iter().collect();
    let gt: Vec<&LabelMap> = samples.iter().map(|s| &s.1).collect();
    Ok((compute_miou(&pr, &gt, NUM_CLASSES)?, preds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub poly_power: f64,
    /// Generator optimizer; its `lr` is the base rate of the poly schedule.
    pub generator: OptimizerConfig,
    /// Multiplier on the generator rate for the parameter predictor.
    pub predictor_lr_scale: f64,
    pub discriminator: OptimizerConfig,
    pub source_augment: AugmentConfig,
    pub target_augment: AugmentConfig,
    pub class_weight_spread: f64,
    pub losses: LossWeights,
    /// Adaptation steps run with zero static and adversarial weights, so the
    /// pseudo labels come from a model that already segments daytime scenes.
    pub adapt_warmup: usize,
    #[serde(rename = "static")]
    pub static_: StaticConfig,
    /// Steps between checkpoints; zero keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 2000,
            batch_size: 4,
            seed: 0,
            poly_power: 0.9,
            generator: OptimizerConfig::sgd(),
            predictor_lr_scale: 1.0,
            discriminator: OptimizerConfig::adam(),
            source_augment: AugmentConfig {
                crop: 64,
                scale_min: 0.9,
                scale_max: 1.1,
                flip: true,
            },
            target_augment: AugmentConfig {
                crop: 64,
                scale_min: 0.9,
                scale_max: 1.1,
                flip: true,
            },
            class_weight_spread: 0.05,
            losses: LossWeights::default(),
            adapt_warmup: 0,
            static_: StaticConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for the 64x64 synthetic set: adaptive-moment optimizers at
    /// 1e-3 for the generator and both discriminators, with the predictor at
    /// 0.3 of the generator rate. At the full rate its sigmoid outputs can
    /// saturate early and never recover.
    ///
    /// Adaptation starts after 500 source-only steps, and the static term is
    /// weighted 0.1. Pseudo labels from an untrained model are mostly wrong,
    /// and at full weight the static loss outweighs the class-averaged
    /// segmentation loss and drives every stream to road and sky.
    pub fn desk() -> Self {
        TrainConfig {
            predictor_lr_scale: 0.3,
            adapt_warmup: 500,
            losses: LossWeights {
                static_: 0.1,
                ..LossWeights::default()
            },
            generator: OptimizerConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..OptimizerConfig::adam()
            },
            discriminator: OptimizerConfig {
                lr: 1e-3,
                ..OptimizerConfig::adam()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.batch_size == 0 {
            return Err(DialError::Config("max_steps and batch_size must be >= 1".into()));
        }
        if !(self.predictor_lr_scale > 0.0) || !self.predictor_lr_scale.is_finite() {
            return Err(DialError::Config("predictor_lr_scale must be > 0".into()));
        }
        if !(self.poly_power >= 0.0) || !(self.class_weight_spread >= 0.0) {
            return Err(DialError::Config("poly_power and class_weight_spread must be >= 0".into()));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.source_augment.validate()?;
        self.target_augment.validate()?;
        self.losses.validate()?;
        self.static_.validate()
    }
}

/// Loss values of one step; absent terms are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub seg: Option<f64>,
    pub static_: Option<f64>,
    pub adv: Option<f64>,
    pub d: Option<f64>,
    pub n: Option<f64>,
}

impl fmt::Display for LossRecord {
    /// `step lr L_seg L_static L_adv L_d L_n`, dashes for absent terms.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.6e}", self.step, self.lr)?;
        for v in [self.seg, self.static_, self.adv, self.d, self.n] {
            match v {
                Some(v) => write!(f, " {v:.8e}")?,
                None => write!(f, " -")?,
            }
        }
        Ok(())
    }
}

/// Cycles through shuffled epochs of `0..n`.
#[derive(Clone, Debug)]
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    /// Indices plus one augmentation seed per index.
    fn batch(&mut self, size: usize) -> Vec<(usize, u64)> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                (self.order[self.pos - 1], self.rng.random())
            })
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Model, discriminators and optimizer state.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub cfg: TrainConfig,
    pub disc_day: Discriminator<T>,
    pub disc_night: Discriminator<T>,
    opt_cnnpp: Optimizer<T>,
    opt_backbone: Optimizer<T>,
    opt_guide: Optimizer<T>,
    opt_day: Optimizer<T>,
    opt_night: Optimizer<T>,
    dropout_rng: ChaCha8Rng,
    // Target streams draw their own dropout masks so the source stream sees
    // the same randomness in both training schemes.
    target_dropout_rng: ChaCha8Rng,
    step: usize,
}

/// Detached probabilities from the generator pass of a [`Trainer::uda_step`].
pub struct StreamProbs<T> {
    pub src: Tensor<T>,
    pub td: Tensor<T>,
    pub tn: Tensor<T>,
}

impl<T: Scalar> Trainer<T> {
    /// All weights derive from `cfg.seed`; the discriminators draw from their
    /// own stream so supervised and adaptation runs start from the same model.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, &mut stream(cfg.seed, 0))?;
        let mut drng = stream(cfg.seed, 1);
        let spec = model.cfg.discriminator.clone();
        let disc_day = Discriminator::new(spec.clone(), &mut drng)?;
        let disc_night = Discriminator::new(spec, &mut drng)?;
        Ok(Trainer {
            opt_cnnpp: Optimizer::new(cfg.generator, model.cnnpp.params())?,
            opt_backbone: Optimizer::new(cfg.generator, model.backbone.params())?,
            opt_guide: Optimizer::new(cfg.generator, model.guide.params())?,
            opt_day: Optimizer::new(cfg.discriminator, disc_day.params())?,
            opt_night: Optimizer::new(cfg.discriminator, disc_night.params())?,
            dropout_rng: stream(cfg.seed, 2),
            target_dropout_rng: stream(cfg.seed, 5),
            model,
            cfg,
            disc_day,
            disc_night,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn lr(&self, base: f64) -> Result<f64> {
        poly_lr(self.step.min(self.cfg.max_steps), self.cfg.max_steps, base, self.cfg.poly_power)
    }

    fn update_generator(&mut self, g: &Graph<T>, b: &Bound, loss: Var, lr: f64) -> Result<()> {
        let mut grads = g.backward(loss)?;
        let gc = self.model.cnnpp.params().collect_grads(&mut grads, &b.cnnpp);
        let gb = self.model.backbone.params().collect_grads(&mut grads, &b.backbone);
        let gg = self.model.guide.params().collect_grads(&mut grads, &b.guide);
        if self.model.trains_cnnpp() {
            let plr = lr * self.cfg.predictor_lr_scale;
            self.opt_cnnpp.step(self.model.cnnpp.params_mut(), &gc, plr)?;
        }
        self.opt_backbone.step(self.model.backbone.params_mut(), &gb, lr)?;
        if self.model.cfg.use_lgf {
            self.opt_guide.step(self.model.guide.params_mut(), &gg, lr)?;
        }
        Ok(())
    }

    /// One optimizer step on the weighted segmentation loss of a labeled batch.
    pub fn supervised_step(&mut self, batch: &[(Image<T>, LabelMap)], weights: &ClassWeights) -> Result<LossRecord> {
        let lr = self.lr(self.cfg.generator.lr)?;
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, true);
        let seg = self.segmentation_loss(&mut g, &b, batch, weights)?.1;
        let zero = g.constant(Tensor::scalar(T::zero()));
        let total = total_loss(&mut g, seg, zero, zero, &self.cfg.losses)?;
        self.update_generator(&g, &b, total, lr)?;
        let rec = LossRecord {
            step: self.step,
            lr,
            seg: Some(scalar(&g, seg)),
            static_: None,
            adv: None,
            d: None,
            n: None,
        };
        self.step += 1;
        Ok(rec)
    }

    fn segmentation_loss(
        &mut self,
        g: &mut Graph<T>,
        b: &Bound,
        batch: &[(Image<T>, LabelMap)],
        weights: &ClassWeights,
    ) -> Result<(Forward, Var)> {
        if batch.is_empty() {
            return Err(DialError::Config("empty source batch".into()));
        }
        let imgs: Vec<&Image<T>> = batch.iter().map(|s| &s.0).collect();
        let labels: Vec<&LabelMap> = batch.iter().map(|s| &s.1).collect();
        let x = g.constant(stack_images(&imgs)?);
        let f = self.model.forward(g, b, x, Some(&mut self.dropout_rng))?;
        let seg = weighted_ce_loss(g, f.probs, &labels, weights)?;
        Ok((f, seg))
    }

    /// Generator update over the three streams followed by one update of each
    /// discriminator on detached probabilities.
    pub fn uda_step(
        &mut self,
        src: &[(Image<T>, LabelMap)],
        td: &[Image<T>],
        tn: &[Image<T>],
        weights: &ClassWeights,
    ) -> Result<LossRecord> {
        if td.is_empty() || tn.is_empty() {
            return Err(DialError::Config("adaptation needs target-day and target-night batches".into()));
        }
        if td.len() != tn.len() {
            return Err(DialError::Config("target-day and target-night batches must pair up".into()));
        }
        let lr = self.lr(self.cfg.generator.lr)?;
        let mut lw = self.cfg.losses;
        if self.step < self.cfg.adapt_warmup {
            lw.static_ = 0.0;
            lw.adv = 0.0;
        }
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, true);
        let (fs, seg) = self.segmentation_loss(&mut g, &b, src, weights)?;

        let td_refs: Vec<&Image<T>> = td.iter().collect();
        let tn_refs: Vec<&Image<T>> = tn.iter().collect();
        let xd = g.constant(stack_images(&td_refs)?);
        let xn = g.constant(stack_images(&tn_refs)?);
        let fd = self.model.forward(&mut g, &b, xd, Some(&mut self.target_dropout_rng))?;
        let fnight = self.model.forward(&mut g, &b, xn, Some(&mut self.target_dropout_rng))?;

        let pseudo = build_pseudo_labels(g.value(fd.probs), weights, &self.cfg.static_)?;
        let pseudo_refs: Vec<&LabelMap> = pseudo.iter().collect();
        let stat = static_loss(&mut g, fnight.probs, &pseudo_refs, &self.cfg.static_)?;

        // Discriminators enter the generator graph as constants.
        let dv = self.disc_day.params().bind(&mut g, false);
        let nv = self.disc_night.params().bind(&mut g, false);
        let sd = self.disc_day.forward(&mut g, &dv, fd.probs)?;
        let sn = self.disc_night.forward(&mut g, &nv, fnight.probs)?;
        let adv = generator_adv_loss(&mut g, sd, sn, &lw);

        let total = total_loss(&mut g, seg, stat, adv, &lw)?;
        self.update_generator(&g, &b, total, lr)?;

        let probs = StreamProbs {
            src: g.value(fs.probs).clone(),
            td: g.value(fd.probs).clone(),
            tn: g.value(fnight.probs).clone(),
        };
        let (ld, ln) = self.discriminator_step(&probs)?;
        let rec = LossRecord {
            step: self.step,
            lr,
            seg: Some(scalar(&g, seg)),
            static_: Some(scalar(&g, stat)),
            adv: Some(scalar(&g, adv)),
            d: Some(ld),
            n: Some(ln),
        };
        self.step += 1;
        Ok(rec)
    }

    /// Updates both discriminators: source probabilities toward the source
    /// label, target-day (resp. night) toward the target label.
    pub fn discriminator_step(&mut self, p: &StreamProbs<T>) -> Result<(f64, f64)> {
        let lr = self.lr(self.cfg.discriminator.lr)?;
        let lw = self.cfg.losses;
        let mut out = [0.0; 2];
        for (i, tgt) in [&p.td, &p.tn].into_iter().enumerate() {
            let (disc, opt) = if i == 0 {
                (&mut self.disc_day, &mut self.opt_day)
            } else {
                (&mut self.disc_night, &mut self.opt_night)
            };
            let mut g = Graph::new();
            let vars = disc.params().bind(&mut g, true);
            let s = g.constant(p.src.clone());
            let t = g.constant(tgt.clone());
            let ss = disc.forward(&mut g, &vars, s)?;
            let ts = disc.forward(&mut g, &vars, t)?;
            let loss = discriminator_loss(&mut g, ss, ts, &lw);
            out[i] = scalar(&g, loss);
            if !out[i].is_finite() {
                return Err(DialError::NumericFailure(format!(
                    "{} is not finite",
                    if i == 0 { "L_d" } else { "L_n" }
                )));
            }
            let mut grads = g.backward(loss)?;
            let gr = disc.params().collect_grads(&mut grads, &vars);
            opt.step(disc.params_mut(), &gr, lr)?;
        }
        Ok((out[0], out[1]))
    }

    /// Mean patch-score gap `mean D(src) - mean D(tgt)` of one discriminator.
    pub fn score_gap(&self, night: bool, src: &Tensor<T>, tgt: &Tensor<T>) -> Result<f64> {
        let d = if night { &self.disc_night } else { &self.disc_day };
        let mut g = Graph::new();
        let vars = d.params().bind(&mut g, false);
        let s = g.constant(src.clone());
        let t = g.constant(tgt.clone());
        let ss = d.forward(&mut g, &vars, s)?;
        let ts = d.forward(&mut g, &vars, t)?;
        let mean = |v: Var, g: &Graph<T>| g.value(v).sum().to_f64().unwrap() / g.value(v).len() as f64;
        Ok(mean(ss, &g) - mean(ts, &g))
    }

    /// Supervised training over in-memory samples; `on_step` sees every record.
    pub fn train_supervised(
        &mut self,
        data: &[(Image<T>, LabelMap)],
        mut on_step: impl FnMut(&Self, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        if data.is_empty() {
            return Err(DialError::Data("no training samples".into()));
        }
        let weights = self.source_weights(data)?;
        let mut sampler = Sampler::new(data.len(), stream(self.cfg.seed, 3));
        let mut log = Vec::with_capacity(self.cfg.max_steps);
        while self.step < self.cfg.max_steps {
            let batch = self.source_batch(data, &mut sampler)?;
            let rec = self.supervised_step(&batch, &weights)?;
            debug!("{rec}");
            on_step(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }

    /// Adaptation training: labeled source samples plus aligned day/night pairs.
    pub fn train_uda(
        &mut self,
        src: &[(Image<T>, LabelMap)],
        pairs: &[(Image<T>, Image<T>)],
        mut on_step: impl FnMut(&Self, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        if src.is_empty() {
            return Err(DialError::Data("no source samples".into()));
        }
        if pairs.is_empty() {
            return Err(DialError::Config("no target day/night pairs".into()));
        }
        let weights = self.source_weights(src)?;
        let mut src_sampler = Sampler::new(src.len(), stream(self.cfg.seed, 3));
        let mut tgt_sampler = Sampler::new(pairs.len(), stream(self.cfg.seed, 4));
        let mut log = Vec::with_capacity(self.cfg.max_steps);
        while self.step < self.cfg.max_steps {
            let batch = self.source_batch(src, &mut src_sampler)?;
            let (mut td, mut tn) = (Vec::new(), Vec::new());
            for (i, seed) in tgt_sampler.batch(self.cfg.batch_size) {
                // One seed for both views keeps the pair spatially aligned.
                td.push(augment(&pairs[i].0, None, &self.cfg.target_augment, seed)?.0);
                tn.push(augment(&pairs[i].1, None, &self.cfg.target_augment, seed)?.0);
            }
            let rec = self.uda_step(&batch, &td, &tn, &weights)?;
            debug!("{rec}");
            on_step(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }

    fn source_weights(&self, data: &[(Image<T>, LabelMap)]) -> Result<ClassWeights> {
        let labels: Vec<&LabelMap> = data.iter().map(|s| &s.1).collect();
        class_weights(&labels, self.cfg.class_weight_spread)
    }

    fn source_batch(&self, data: &[(Image<T>, LabelMap)], sampler: &mut Sampler) -> Result<Vec<(Image<T>, LabelMap)>> {
        sampler
            .batch(self.cfg.batch_size)
            .into_iter()
            .map(|(i, seed)| {
                let (img, lab) = augment(&data[i].0, Some(&data[i].1), &self.cfg.source_augment, seed)?;
                Ok((img, lab.expect("labels were given")))
            })
            .collect()
    }

    /// Model plus both discriminators.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        ck.push_params(DISC_DAY_PREFIX, self.disc_day.params())?;
        ck.push_params(DISC_NIGHT_PREFIX, self.disc_night.params())?;
        Ok(ck)
    }
}

fn scalar<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64().unwrap()
}
