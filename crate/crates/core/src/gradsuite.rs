//! Double-precision gradient checks of every differentiable operation,
//! grouped by module.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cnnpp::{CnnPp, PredictorConfig};
use crate::dif::{self, DifConfig, FilterRanges};
use crate::error::{DialError, Result};
use crate::gradcheck::grad_check_scaled;
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::lgf::{apply_lgf, guided_filter_op, GuideTransform, GuidedFilterConfig};
use crate::losses::{
    discriminator_loss, generator_adv_loss, static_loss, total_loss, weighted_ce_loss, ClassWeights, Discriminator,
    DiscriminatorSpec, LossWeights, StaticConfig,
};
use crate::nn::{self, Network, ParamSet};
use crate::segnet::{Backbone, BackboneSpec};
use crate::tensor::{LabelMap, Tensor, NUM_CLASSES};

/// Relative-error bound every operation must meet.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteModule {
    All,
    Dif,
    Lgf,
    Losses,
    Nets,
}

impl FromStr for SuiteModule {
    type Err = DialError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => SuiteModule::All,
            "dif" => SuiteModule::Dif,
            "lgf" => SuiteModule::Lgf,
            "losses" => SuiteModule::Losses,
            "nets" => SuiteModule::Nets,
            other => return Err(DialError::invalid(format!("unknown gradient-check module {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub module: &'static str,
    pub op: &'static str,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

impl fmt::Display for OpReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<7} {:<20} {:.3e} {}",
            self.module,
            self.op,
            self.max_rel_error,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

type G = Graph<f64>;

/// Collects the worst error over several inputs of one operation.
struct Checker<'a> {
    module: &'static str,
    corrupt: Option<&'a str>,
    out: Vec<OpReport>,
}

impl Checker<'_> {
    fn op(&mut self, name: &'static str, checks: Vec<Result<f64>>) -> Result<()> {
        let mut worst = 0.0f64;
        for c in checks {
            worst = worst.max(c?);
        }
        self.out.push(OpReport {
            module: self.module,
            op: name,
            max_rel_error: worst,
        });
        Ok(())
    }

    fn scale(&self, name: &str) -> f64 {
        if self.corrupt == Some(name) {
            1.5
        } else {
            1.0
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(f(x) * r)` for a fixed random `r`, so outputs with constant sums
/// (softmax) still give informative gradients.
fn check(
    scale: f64,
    seed: u64,
    x: &Tensor<f64>,
    f: impl Fn(&mut G, Var) -> Result<Var>,
) -> Result<f64> {
    let mut probe: Option<Tensor<f64>> = None;
    let r = grad_check_scaled(
        |g, v| {
            let y = f(g, v)?;
            let shape = g.shape(y).to_vec();
            let w = match &probe {
                Some(w) if w.shape() == shape.as_slice() => w.clone(),
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rand_tensor(&mut rng, &shape, -1.0, 1.0)
                }
            };
            let wv = g.constant(w);
            Ok(g.mul(y, wv))
        },
        x,
        STEP,
        scale,
    )?;
    probe.take();
    Ok(r.max_rel_error)
}

/// Checks `f` with respect to every parameter tensor of `params` in turn.
fn check_params(
    scale: f64,
    seed: u64,
    params: &ParamSet<f64>,
    f: impl Fn(&mut G, &[Var]) -> Result<Var>,
) -> Vec<Result<f64>> {
    (0..params.len())
        .map(|slot| {
            check(scale, seed, &params.tensors()[slot], |g, v| {
                let vars: Vec<Var> = params
                    .tensors()
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == slot { v } else { g.constant(t.clone()) })
                    .collect();
                f(g, &vars)
            })
        })
        .collect()
}

fn dif_suite(c: &mut Checker<'_>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = rand_tensor(&mut rng, &[2, 3, 7, 6], 0.15, 0.6);
    let cfg = DifConfig::default();
    let per_sample = |v: [f64; 2]| Tensor::new(vec![2], v.to_vec()).unwrap();
    let stages: [(&'static str, Tensor<f64>); 4] = [
        ("exposure", per_sample([0.3, -0.4])),
        ("gamma", per_sample([0.8, 1.4])),
        ("contrast", per_sample([0.3, 0.7])),
        ("sharpen", per_sample([0.5, 1.2])),
    ];
    for (i, (name, p)) in stages.into_iter().enumerate() {
        let kind = dif::FilterKind::ALL[i];
        let s = c.scale(name);
        let (img2, p2) = (img.clone(), p.clone());
        let cfg2 = cfg.clone();
        c.op(
            name,
            vec![
                check(s, 1, &img, |g, x| {
                    let pv = g.constant(p.clone());
                    dif::stage_op(g, kind, x, pv, &cfg)
                }),
                check(s, 2, &p2, |g, pv| {
                    let x = g.constant(img2.clone());
                    dif::stage_op(g, kind, x, pv, &cfg2)
                }),
            ],
        )?;
    }
    let raw = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let s = c.scale("squash");
    c.op(
        "squash",
        vec![check(s, 3, &raw, squash_default)],
    )?;
    let s = c.scale("dif_pipeline");
    let raw = rand_tensor(&mut rng, &[2, 4], -0.5, 0.5);
    let (img2, raw2) = (img.clone(), raw.clone());
    c.op(
        "dif_pipeline",
        vec![
            check(s, 4, &raw, |g, r| {
                let x = g.constant(img.clone());
                let p = squash_default(g, r)?;
                Ok(dif::dif_op(g, x, p, &DifConfig::default())?[3].1)
            }),
            check(s, 5, &img2, |g, x| {
                let r = g.constant(raw2.clone());
                let p = squash_default(g, r)?;
                Ok(dif::dif_op(g, x, p, &DifConfig::default())?[3].1)
            }),
        ],
    )
}

fn squash_default(g: &mut G, raw: Var) -> Result<Var> {
    dif::squash_op(g, raw, &FilterRanges::default())
}

fn lgf_suite(c: &mut Checker<'_>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t = GuideTransform::<f64>::new(&mut rng);
    let img = rand_tensor(&mut rng, &[1, 3, 6, 5], 0.0, 1.0);
    let s = c.scale("guide_transform");
    let mut checks = check_params(s, 6, t.params(), |g, vars| {
        let x = g.constant(img.clone());
        t.forward(g, vars, x)
    });
    let tp = t.params().clone();
    checks.push(check(s, 7, &img, |g, x| {
        let vars = tp.bind(g, false);
        t.forward(g, &vars, x)
    }));
    c.op("guide_transform", checks)?;

    let cfg = GuidedFilterConfig {
        radius: 2,
        epsilon: 0.05,
    };
    let p = rand_tensor(&mut rng, &[1, 2, 7, 6], -2.0, 2.0);
    let guide = rand_tensor(&mut rng, &[1, 2, 7, 6], 0.0, 1.0);
    let s = c.scale("guided_filter");
    c.op(
        "guided_filter",
        vec![
            check(s, 8, &p, |g, x| {
                let i = g.constant(guide.clone());
                guided_filter_op(g, x, i, &cfg)
            }),
            check(s, 9, &guide, |g, i| {
                let x = g.constant(p.clone());
                guided_filter_op(g, x, i, &cfg)
            }),
        ],
    )?;

    let logits = rand_tensor(&mut rng, &[1, NUM_CLASSES, 5, 5], -2.0, 2.0);
    let small = rand_tensor(&mut rng, &[1, 3, 5, 5], 0.0, 1.0);
    let s = c.scale("apply_lgf");
    let tp = t.params().clone();
    let mut checks = vec![
        check(s, 10, &logits, |g, l| {
            let vars = tp.bind(g, false);
            let e = g.constant(small.clone());
            apply_lgf(g, &t, &vars, l, e, &cfg)
        }),
        check(s, 11, &small, |g, e| {
            let vars = tp.bind(g, false);
            let l = g.constant(logits.clone());
            apply_lgf(g, &t, &vars, l, e, &cfg)
        }),
    ];
    checks.extend(check_params(s, 12, t.params(), |g, vars| {
        let l = g.constant(logits.clone());
        let e = g.constant(small.clone());
        apply_lgf(g, &t, vars, l, e, &cfg)
    }));
    c.op("apply_lgf", checks)
}

fn tiny_discriminator(rng: &mut ChaCha8Rng) -> Result<Discriminator<f64>> {
    Discriminator::new(
        DiscriminatorSpec {
            channels: [3, 3, 3, 3, 1],
            ..DiscriminatorSpec::default()
        },
        rng,
    )
}

fn softmax_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(rng, shape, -1.5, 1.5));
    let p = g.softmax_channels(x);
    g.value(p).clone()
}

fn losses_suite(c: &mut Checker<'_>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let probs = softmax_input(&mut rng, &[2, NUM_CLASSES, 4, 4]).map(|p| 0.05 + p);
    let labels: Vec<LabelMap> = (0..2)
        .map(|_| {
            let d = (0..16)
                .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..19u8) })
                .collect();
            LabelMap::new(4, 4, d).unwrap()
        })
        .collect();
    let refs: Vec<&LabelMap> = labels.iter().collect();
    let props: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.random_range(0.01..0.2)).collect();
    let weights = ClassWeights::from_proportions(&props, 0.05)?;
    let s = c.scale("weighted_ce");
    c.op(
        "weighted_ce",
        vec![check(s, 13, &probs, |g, p| weighted_ce_loss(g, p, &refs, &weights))],
    )?;

    let scfg = StaticConfig::default();
    let pseudo: Vec<LabelMap> = (0..2)
        .map(|_| {
            let d = (0..16).map(|_| scfg.categories[rng.random_range(0..scfg.categories.len())]).collect();
            LabelMap::new(4, 4, d).unwrap()
        })
        .collect();
    let prefs: Vec<&LabelMap> = pseudo.iter().collect();
    let s = c.scale("static_loss");
    c.op(
        "static_loss",
        vec![check(s, 14, &probs, |g, p| static_loss(g, p, &prefs, &scfg))],
    )?;

    let lw = LossWeights::default();
    let day = rand_tensor(&mut rng, &[2, 1, 3, 3], -1.0, 2.0);
    let night = rand_tensor(&mut rng, &[2, 1, 3, 3], -1.0, 2.0);
    let s = c.scale("adversarial");
    let (day2, night2) = (day.clone(), night.clone());
    c.op(
        "adversarial",
        vec![
            check(s, 15, &day, |g, d| {
                let n = g.constant(night2.clone());
                Ok(generator_adv_loss(g, d, n, &lw))
            }),
            check(s, 16, &night, |g, n| {
                let d = g.constant(day2.clone());
                Ok(generator_adv_loss(g, d, n, &lw))
            }),
        ],
    )?;

    // Day and night discriminator objectives through their networks.
    let src = softmax_input(&mut rng, &[1, NUM_CLASSES, 8, 8]);
    for (name, seed) in [("discriminator_day", 17u64), ("discriminator_night", 18)] {
        let tgt = softmax_input(&mut rng, &[1, NUM_CLASSES, 8, 8]);
        let d = tiny_discriminator(&mut rng)?;
        let s = c.scale(name);
        let checks = check_params(s, seed, d.params(), |g, vars| {
            let a = g.constant(src.clone());
            let b = g.constant(tgt.clone());
            let sa = d.forward(g, vars, a)?;
            let sb = d.forward(g, vars, b)?;
            Ok(discriminator_loss(g, sa, sb, &lw))
        });
        c.op(name, checks)?;
    }

    let parts = Tensor::new(vec![3], vec![0.7, 0.2, 1.3])?;
    let s = c.scale("total_loss");
    c.op(
        "total_loss",
        vec![check(s, 19, &parts, |g, v| {
            let row = g.reshape(v, &[1, 3]);
            let seg = g.column(row, 0);
            let st = g.column(row, 1);
            let adv = g.column(row, 2);
            total_loss(g, seg, st, adv, &lw)
        })],
    )
}

fn nets_suite(c: &mut Checker<'_>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);

    let x = rand_tensor(&mut rng, &[2, 3, 6, 7], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    let geom = ConvGeom {
        kernel: 3,
        stride: 2,
        pad_lo: 1,
        pad_hi: 2,
    };
    let s = c.scale("conv2d");
    c.op("conv2d", three_way(s, 20, [&x, &w, &b], move |g, v| nn::conv2d(g, v[0], v[1], v[2], geom)))?;

    let wt = rand_tensor(&mut rng, &[3, 2, 4, 4], -0.5, 0.5);
    let bt = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    let s = c.scale("conv_transpose2d");
    c.op(
        "conv_transpose2d",
        three_way(s, 21, [&x, &wt, &bt], |g, v| {
            nn::conv_transpose2d(g, v[0], v[1], v[2], ConvGeom::symmetric(4, 2, 1))
        }),
    )?;

    let xl = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let wl = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let bl = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let s = c.scale("linear");
    c.op("linear", three_way(s, 22, [&xl, &wl, &bl], |g, v| nn::linear(g, v[0], v[1], v[2])))?;

    let unary: [(&'static str, Box<dyn Fn(&mut G, Var) -> Result<Var>>); 8] = [
        ("leaky_relu", Box::new(|g: &mut G, v| Ok(g.leaky_relu(v, 0.1)))),
        ("sigmoid", Box::new(|g: &mut G, v| Ok(g.sigmoid(v)))),
        ("softmax", Box::new(|g: &mut G, v| Ok(g.softmax_channels(v)))),
        ("global_avg_pool", Box::new(|g: &mut G, v| nn::global_avg_pool(g, v))),
        ("resize", Box::new(|g: &mut G, v| nn::resize(g, v, 4, 11))),
        ("box_mean", Box::new(|g: &mut G, v| nn::box_mean(g, v, 2))),
        ("gaussian", Box::new(|g: &mut G, v| nn::gaussian(g, v, 1.0, 2))),
        ("elementwise", Box::new(elementwise_mix)),
    ];
    for (i, (name, f)) in unary.into_iter().enumerate() {
        let s = c.scale(name);
        c.op(name, vec![check(s, 30 + i as u64, &x, |g, v| f(g, v))])?;
    }

    let pcfg = PredictorConfig {
        channels: [2, 3, 3, 3, 3],
        input_size: 32,
        ..PredictorConfig::default()
    };
    let mut net = CnnPp::<f64>::new(pcfg, &mut rng)?;
    // A nonzero head makes every upstream weight matter.
    for t in net.params_mut().tensors_mut().iter_mut().rev().take(2) {
        *t = rand_tensor(&mut rng, t.shape(), -0.5, 0.5);
    }
    let img = rand_tensor(&mut rng, &[2, 3, 40, 40], 0.0, 1.0);
    let s = c.scale("cnnpp");
    let mut checks = check_params(s, 40, net.params(), |g, vars| {
        let x = g.constant(img.clone());
        let small = net.downsample(g, x)?;
        net.forward(g, vars, small, None)
    });
    let np = net.params().clone();
    checks.push(check(s, 41, &img, |g, x| {
        let vars = np.bind(g, false);
        let small = net.downsample(g, x)?;
        net.forward(g, &vars, small, None)
    }));
    c.op("cnnpp", checks)?;

    let bb = Backbone::<f64>::new(
        BackboneSpec {
            channels: [3, 3, 4, 4],
            ..BackboneSpec::default()
        },
        &mut rng,
    )?;
    let img = rand_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let s = c.scale("backbone");
    let mut checks = check_params(s, 42, bb.params(), |g, vars| {
        let x = g.constant(img.clone());
        bb.forward(g, vars, x)
    });
    let bp = bb.params().clone();
    checks.push(check(s, 43, &img, |g, x| {
        let vars = bp.bind(g, false);
        bb.forward(g, &vars, x)
    }));
    c.op("backbone", checks)?;

    let d = tiny_discriminator(&mut rng)?;
    let probs = softmax_input(&mut rng, &[1, NUM_CLASSES, 8, 8]);
    let s = c.scale("discriminator");
    let dp = d.params().clone();
    c.op(
        "discriminator",
        vec![check(s, 44, &probs, |g, x| {
            let vars = dp.bind(g, false);
            d.forward(g, &vars, x)
        })],
    )
}

/// Arithmetic graph primitives chained together.
fn elementwise_mix(g: &mut G, v: Var) -> Result<Var> {
    let a = g.square(v);
    let b = g.exp(v);
    let c = g.add_const(a, 1.5);
    let d = g.ln(c);
    let e = g.div(b, c);
    let f = g.mul(d, e);
    let h = g.sub(f, v);
    let k = g.neg(h);
    let m = g.mul_const(k, 0.7);
    let n = g.add(m, a);
    let s = g.sum(n);
    let mean = g.mean(n);
    let t = g.add(s, mean);
    let (batch, ..) = g.value(v).nchw()?;
    let row = g.reshape(v, &[batch, g.value(v).len() / batch]);
    let col = g.column(row, 1);
    let scaled = g.scale_samples(v, col);
    let picked = g.select_channels(scaled, &[2, 0]);
    let sum2 = g.sum(picked);
    Ok(g.add(t, sum2))
}

fn three_way(
    scale: f64,
    seed: u64,
    inputs: [&Tensor<f64>; 3],
    f: impl Fn(&mut G, [Var; 3]) -> Result<Var>,
) -> Vec<Result<f64>> {
    (0..3)
        .map(|slot| {
            check(scale, seed + slot as u64, inputs[slot], |g, v| {
                let vars = [0, 1, 2].map(|i| if i == slot { v } else { g.constant(inputs[i].clone()) });
                f(g, vars)
            })
        })
        .collect()
}

/// Runs the selected suites. `corrupt` names one operation whose analytic
/// gradient is scaled by 1.5 before comparison; it must then fail.
pub fn run_suite(module: SuiteModule, corrupt: Option<&str>) -> Result<Vec<OpReport>> {
    let suites: [(SuiteModule, &'static str, fn(&mut Checker<'_>) -> Result<()>); 4] = [
        (SuiteModule::Dif, "dif", dif_suite),
        (SuiteModule::Lgf, "lgf", lgf_suite),
        (SuiteModule::Losses, "losses", losses_suite),
        (SuiteModule::Nets, "nets", nets_suite),
    ];
    let mut out = Vec::new();
    for (m, name, run) in suites {
        if module == SuiteModule::All || module == m {
            let mut c = Checker {
                module: name,
                corrupt,
                out: Vec::new(),
            };
            run(&mut c)?;
            out.extend(c.out);
        }
    }
    Ok(out)
}
