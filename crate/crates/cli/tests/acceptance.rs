//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion names as arguments to run a subset.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dial_core::checkpoint::Checkpoint;
use dial_core::cnnpp::{CnnPp, PredictorConfig};
use dial_core::dataio::{compute_miou, synth_dataset, DatasetManifest};
use dial_core::dif::{
    apply_dif, contrast_filter, exposure_filter, gamma_filter, sharpen_filter, squash_params, DifConfig,
    FilterParams, FilterRanges,
};
use dial_core::gradcheck::grad_check;
use dial_core::kernels::{bilinear_resize, box_mean_filter, gaussian_blur};
use dial_core::lgf::{guided_filter, GuideTransform, GuidedFilterConfig};
use dial_core::losses::{standardize, ClassWeights};
use dial_core::nn::{parameter_count, Network, ParamSet};
use dial_core::optim::{poly_lr, Optimizer, OptimizerConfig};
use dial_core::trainer::{evaluate, DifMode, ModelConfig, TrainConfig, Trainer};
use dial_core::{Image, LabelMap, Model32, Tensor, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Check = Result<String, String>;
type Samples = Vec<(Image<f32>, LabelMap)>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol:e})");
    Ok(())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn px(v: f64) -> Image<f64> {
    Image::constant(1, 1, v)
}

fn filter_math() -> Check {
    let mut n = 0usize;
    let mut ok = |r: Result<(), String>| -> Result<(), String> {
        n += 1;
        r
    };
    // Resampling, box mean and blur.
    let c = Image::<f64>::constant(5, 7, 0.7);
    ok(close(bilinear_resize(&c, 11, 3).unwrap().data().iter().map(|v| (v - 0.7).abs()).fold(0.0, f64::max), 0.0, 1e-15, "constant resize"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = Image::<f64>::from_fn(6, 5, |_, _, _| rng.random());
    ok(if bilinear_resize(&r, 6, 5).unwrap() == r { Ok(()) } else { Err("same-size resize changed the image".into()) })?;
    let row = bilinear_resize(&Image::<f64>::from_fn(1, 2, |_, _, x| x as f64), 1, 4).unwrap();
    for (i, v) in row.plane(0).iter().enumerate() {
        // Pixel-center alignment: output center i maps to (i + 0.5) / 2 - 0.5,
        // clamped to the outer samples.
        let src: f64 = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
        ok(close(*v, src, 1e-12, "bilinear row"))?;
    }
    let t = Tensor::<f64>::full(&[4, 6], 0.3);
    ok(close(box_mean_filter(&t, 2).unwrap().data().iter().map(|v| (v - 0.3).abs()).fold(0.0, f64::max), 0.0, 1e-15, "constant box"))?;
    let d: Vec<f64> = (0..9).map(|_| rng.random()).collect();
    let m = box_mean_filter(&Tensor::new(vec![3, 3], d.clone()).unwrap(), 1).unwrap();
    ok(close(m.data()[4], d.iter().sum::<f64>() / 9.0, 1e-15, "3x3 center"))?;
    let d: Vec<f64> = (0..64).map(|_| rng.random()).collect();
    let m = box_mean_filter(&Tensor::new(vec![8, 8], d.clone()).unwrap(), 2).unwrap();
    for y in 0..8usize {
        for x in 0..8usize {
            let mut acc = (0.0, 0.0);
            for yy in y.saturating_sub(2)..=(y + 2).min(7) {
                for xx in x.saturating_sub(2)..=(x + 2).min(7) {
                    acc = (acc.0 + d[yy * 8 + xx], acc.1 + 1.0);
                }
            }
            ok(close(m.data()[y * 8 + x], acc.0 / acc.1, 1e-6, "8x8 box"))?;
        }
    }
    let g = gaussian_blur(&Image::<f64>::constant(6, 6, 0.4), 1.0, 2).unwrap();
    ok(close(g.data().iter().map(|v| (v - 0.4).abs()).fold(0.0, f64::max), 0.0, 1e-15, "constant blur"))?;
    let imp = Image::<f64>::from_fn(9, 9, |_, y, x| if (y, x) == (4, 4) { 1.0 } else { 0.0 });
    let k: Vec<f64> = (-2..=2).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
    let k0 = 1.0 / k.iter().sum::<f64>();
    let center = gaussian_blur(&imp, 1.0, 2).unwrap().get(0, 4, 4);
    ok(close(center, k0 * k0, 1e-9, "impulse center vs kernel"))?;
    ok(close(center, 0.16210, 5e-6, "impulse center"))?;
    let asym = Image::<f64>::from_fn(5, 7, |_, _, _| rng.random());
    ok(close(
        gaussian_blur(&asym.flip_horizontal(), 1.0, 2).unwrap().max_abs_diff_img(&gaussian_blur(&asym, 1.0, 2).unwrap().flip_horizontal()),
        0.0,
        1e-12,
        "blur/flip",
    ))?;

    // Gradient checker sanity.
    let x = Tensor::<f64>::from_fn(&[7], |_| rng.random_range(-1.0..1.0));
    let e = grad_check(|g, v| Ok(g.square(v)), &x, 1e-4).unwrap().max_rel_error;
    ok(close(e, 0.0, 1e-6, "grad_check quadratic"))?;
    let cst = grad_check(|g, v| Ok(g.mul_const(v, 0.0)), &x, 1e-4).unwrap().max_rel_error;
    ok(close(cst, 0.0, 0.0, "grad_check constant"))?;
    let img = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |_| rng.random_range(0.1..0.4));
    let echeck = grad_check(
        |g, ev| {
            let x = g.constant(img.clone());
            Ok(dial_core::dif::exposure_op(g, x, ev))
        },
        &Tensor::new(vec![1], vec![0.3]).unwrap(),
        1e-4,
    )
    .unwrap()
    .max_rel_error;
    ok(close(echeck, 0.0, 1e-4, "exposure gradient"))?;

    // The four filters.
    let v = |im: Image<f64>| im.get(0, 0, 0);
    let rim = Image::<f64>::from_fn(4, 5, |_, _, _| rng.random());
    ok(if exposure_filter(&rim, 0.0) == rim { Ok(()) } else { Err("E=0".into()) })?;
    ok(close(v(exposure_filter(&px(0.25), 1.0)), 0.5, 0.0, "E=1"))?;
    ok(close(v(exposure_filter(&px(0.3), 0.5)), 0.3 * 2f64.sqrt(), 1e-9, "E=0.5 oracle"))?;
    ok(close(v(exposure_filter(&px(0.3), 0.5)), 0.42426, 5e-6, "E=0.5"))?;
    ok(if gamma_filter(&rim, 1.0) == rim { Ok(()) } else { Err("G=1".into()) })?;
    ok(close(v(gamma_filter(&px(0.5), 2.0)), 0.25, 1e-15, "G=2"))?;
    ok(close(v(gamma_filter(&px(0.25), 0.5)), 0.5, 1e-15, "G=0.5"))?;
    ok(if contrast_filter(&rim, 0.0) == rim { Ok(()) } else { Err("alpha=0".into()) })?;
    ok(close(v(contrast_filter(&px(0.5), 1.0)), 0.5, 1e-15, "gray fixed point"))?;
    let cp = contrast_filter(&Image::<f64>::new(1, 1, vec![0.2, 0.4, 0.1]).unwrap(), 0.5);
    let lum: f64 = 0.27 * 0.2 + 0.67 * 0.4 + 0.06 * 0.1;
    let ratio = 0.5 * (1.0 - (PI * lum).cos()) / lum;
    for (c, (x, printed)) in [(0.2, 0.1740), (0.4, 0.3481), (0.1, 0.0870)].into_iter().enumerate() {
        ok(close(cp.get(c, 0, 0), 0.5 * x * ratio + 0.5 * x, 1e-9, "contrast oracle"))?;
        ok(close(cp.get(c, 0, 0), printed, 1e-4, "contrast printed"))?;
    }
    ok(if sharpen_filter(&rim, 0.0, 1.0, 2).unwrap() == rim { Ok(()) } else { Err("lambda=0".into()) })?;
    let flat = Image::<f64>::constant(4, 4, 0.6);
    ok(close(sharpen_filter(&flat, 1.3, 1.0, 2).unwrap().data().iter().map(|v| (v - 0.6).abs()).fold(0.0, f64::max), 0.0, 1e-12, "flat sharpen"))?;
    let step = Image::<f64>::from_fn(1, 8, |_, _, x| if x < 4 { 0.2 } else { 0.7 });
    let sh = sharpen_filter(&step, 1.0, 1.0, 2).unwrap();
    let kn: Vec<f64> = k.iter().map(|v| v * k0).collect();
    for x in 0..8usize {
        // Direct 5-tap blur of the row with replicated borders.
        let blur: f64 = (0..5)
            .map(|j| kn[j] * step.get(0, 0, (x as isize + j as isize - 2).clamp(0, 7) as usize))
            .sum();
        let want = (step.get(0, 0, x) + (step.get(0, 0, x) - blur)).clamp(0.0, 1.0);
        ok(close(sh.get(0, 0, x), want, 1e-9, "step edge"))?;
    }
    ok(if apply_dif(&rim, &FilterParams::identity(), &DifConfig::default()).unwrap() == rim { Ok(()) } else { Err("identity dif".into()) })?;
    let p = FilterParams { exposure: 0.4, gamma: 1.3, contrast: 0.6, sharpen: 1.1 };
    let gray = apply_dif(&Image::<f64>::constant(6, 6, 0.5), &p, &DifConfig::default()).unwrap();
    let mut s = (0.5 * 0.4f64.exp2()).min(1.0).powf(1.3);
    let en = 0.5 * (1.0 - (PI * s).cos());
    s = 0.6 * en + 0.4 * s;
    ok(close(gray.data().iter().map(|v| (v - s).abs()).fold(0.0, f64::max), 0.0, 1e-9, "gray pipeline"))?;
    let small = apply_dif(&Image::<f64>::constant(2, 2, 0.5), &p, &DifConfig::default()).unwrap();
    ok(close(small.get(0, 0, 0), gray.get(0, 0, 0), 1e-15, "resolution independence"))?;
    let mid = squash_params([0.0; 4], &FilterRanges::default()).unwrap();
    ok(if mid == (FilterParams { exposure: 0.0, gamma: 1.0, contrast: 0.5, sharpen: 1.0 }) { Ok(()) } else { Err(format!("midpoints {mid:?}")) })?;
    let hi = squash_params([1e6; 4], &FilterRanges::default()).unwrap();
    let rg = FilterRanges::default();
    ok(if rg.check(&hi).is_ok() && (hi.exposure - rg.exposure.hi).abs() < 1e-9 { Ok(()) } else { Err(format!("saturation {hi:?}")) })?;

    // Networks, losses and schedules with closed forms.
    let empty = ParamSet::<f64>::new();
    ok(close(parameter_count(&empty).total as f64, 0.0, 0.0, "empty count"))?;
    let z = GuideTransform::<f64>::zeroed().guide_transform(&rim).unwrap();
    ok(close(z.data().iter().map(|v| v.abs()).fold(0.0, f64::max), 0.0, 0.0, "zero guide"))?;
    let cfg = GuidedFilterConfig { radius: 2, epsilon: 0.01 };
    let constant = Tensor::<f64>::full(&[6, 7], 0.8);
    let guide = Tensor::<f64>::from_fn(&[6, 7], |_| rng.random());
    let q = guided_filter(&constant, &guide, &cfg).unwrap();
    ok(close(q.max_abs_diff(&constant), 0.0, 1e-12, "constant p"))?;
    ok(close(poly_lr(0, 100, 2.5e-4, 0.9).unwrap(), 2.5e-4, 0.0, "poly 0"))?;
    ok(close(poly_lr(100, 100, 2.5e-4, 0.9).unwrap(), 0.0, 0.0, "poly end"))?;
    ok(close(poly_lr(50, 100, 2.5e-4, 0.9).unwrap(), 2.5e-4 * 0.5f64.powf(0.9), 1e-15, "poly half oracle"))?;
    ok(close(poly_lr(50, 100, 2.5e-4, 0.9).unwrap(), 1.3397e-4, 5e-9, "poly half"))?;
    let mut ps = ParamSet::<f64>::new();
    ps.add("p", Tensor::new(vec![1], vec![1.0]).unwrap());
    let sgd = OptimizerConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0, ..OptimizerConfig::sgd() };
    Optimizer::new(sgd, &ps).unwrap().step(&mut ps, &[Tensor::new(vec![1], vec![1.0]).unwrap()], 0.1).unwrap();
    ok(close(ps.tensors()[0].data()[0], 0.9, 1e-15, "sgd step"))?;
    for g0 in [1.0, -3.0, 250.0] {
        let mut ps = ParamSet::<f64>::new();
        ps.add("p", Tensor::new(vec![1], vec![0.0]).unwrap());
        let adam = OptimizerConfig { lr: 0.01, ..OptimizerConfig::adam() };
        Optimizer::new(adam, &ps).unwrap().step(&mut ps, &[Tensor::new(vec![1], vec![g0]).unwrap()], 0.01).unwrap();
        ok(close(ps.tensors()[0].data()[0], -0.01 * g0.signum(), 1e-9, "adam first step"))?;
    }
    let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
    let pr = LabelMap::new(1, 4, vec![0, 1, 1, 1]).unwrap();
    let rep = compute_miou(&[&pr], &[&gt], 2).unwrap();
    ok(close(rep.mean, (0.5 + 2.0 / 3.0) / 2.0, 1e-12, "miou oracle"))?;
    ok(close(rep.mean, 0.58333, 5e-6, "miou"))?;
    Ok(format!("{n} checks"))
}

trait ImgDiff {
    fn max_abs_diff_img(&self, other: &Self) -> f64;
}

impl ImgDiff for Image<f64> {
    fn max_abs_diff_img(&self, other: &Self) -> f64 {
        self.data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_dial"))
        .args(["gradcheck", "--module", "all"])
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    ensure!(out.status.success(), "gradcheck failed:\n{text}");
    let ops: Vec<&str> = text.lines().filter_map(|l| l.split_whitespace().nth(1)).collect();
    for want in [
        "exposure", "gamma", "contrast", "sharpen", "squash", "cnnpp", "backbone", "guide_transform",
        "guided_filter", "weighted_ce", "static_loss", "adversarial", "discriminator_day", "discriminator_night",
        "total_loss",
    ] {
        ensure!(ops.contains(&want), "{want} missing from the report");
    }
    let worst = text
        .lines()
        .filter_map(|l| l.split_whitespace().nth(2)?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("{} ops, worst {worst:.2e}, {:.1}s", ops.len() - 1, elapsed.as_secs_f64()))
}

fn naive_guided_filter(p: &[f64], guide: &[f64], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
    let window = |y: usize, x: usize| {
        let mut idx = Vec::new();
        for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                idx.push(yy * w + xx);
            }
        }
        idx
    };
    let (mut a, mut b) = (vec![0.0; h * w], vec![0.0; h * w]);
    for k in 0..h * w {
        let idx = window(k / w, k % w);
        let n = idx.len() as f64;
        let mu = idx.iter().map(|&i| guide[i]).sum::<f64>() / n;
        let pm = idx.iter().map(|&i| p[i]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (guide[i] - mu).powi(2)).sum::<f64>() / n;
        let cov = idx.iter().map(|&i| (guide[i] - mu) * (p[i] - pm)).sum::<f64>() / n;
        a[k] = cov / (var + eps);
        b[k] = pm - a[k] * mu;
    }
    (0..h * w)
        .map(|i| {
            let idx = window(i / w, i % w);
            let n = idx.len() as f64;
            idx.iter().map(|&k| a[k]).sum::<f64>() / n * guide[i] + idx.iter().map(|&k| b[k]).sum::<f64>() / n
        })
        .collect()
}

fn guided_filter_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let r = rng.random_range(1..6);
        let eps = 10f64.powf(rng.random_range(-4.0..0.0));
        let p: Vec<f64> = (0..h * w).map(|_| rng.random_range(-4.0..4.0)).collect();
        let guide: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let q = guided_filter(
            &Tensor::new(vec![h, w], p.clone()).unwrap(),
            &Tensor::new(vec![h, w], guide.clone()).unwrap(),
            &GuidedFilterConfig { radius: r, epsilon: eps },
        )
        .map_err(|e| e.to_string())?;
        for (a, b) in q.data().iter().zip(naive_guided_filter(&p, &guide, h, w, r, eps)) {
            worst = worst.max((a - b).abs());
        }
        ensure!(worst <= 1e-5, "case {case} ({h}x{w}, r={r}, eps={eps:.1e}): error {worst:e}");
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "took {t:?}");
    Ok(format!("200 cases, worst {worst:.1e}, {:.1}s", t.as_secs_f64()))
}

fn parameter_counts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let guide = parameter_count(GuideTransform::<f32>::new(&mut rng).params()).total;
    let cnnpp = parameter_count(CnnPp::<f32>::new(PredictorConfig::default(), &mut rng).unwrap().params()).total;
    ensure!(guide == 1491, "guide transform has {guide}");
    ensure!(cnnpp == 245_540, "CNN-PP has {cnnpp}");
    Ok(format!("guide {guide}, CNN-PP {cnnpp}"))
}

fn reweighting() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_mean, mut worst_std, mut worst_base) = (0.0f64, 0.0f64, 0.0f64);
    let mut tested = 0;
    while tested < 1000 {
        let k = rng.random_range(2..=NUM_CLASSES);
        let mut props: Vec<f64> = (0..k).map(|_| rng.random_range(1e-5..1.0)).collect();
        if rng.random_bool(0.2) {
            // Ties among some entries, still at least two distinct values.
            let v = props[0];
            for p in props.iter_mut().skip(1).step_by(2) {
                *p = v;
            }
        }
        if props.iter().all(|&p| p == props[0]) {
            continue;
        }
        let total: f64 = props.iter().sum();
        props.iter_mut().for_each(|p| *p /= total);
        let w = ClassWeights::from_proportions(&props, 0.05).map_err(|e| e.to_string())?.weights;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        tested += 1;
        worst_mean = worst_mean.max((mean - 1.0).abs());
        worst_std = worst_std.max((std - 0.05).abs());
        for base in [2.0, 10.0, 7.3] {
            let other: Vec<f64> = props.iter().map(|p| -p.log(base)).collect();
            for (a, b) in w.iter().zip(standardize(&other, 0.05)) {
                worst_base = worst_base.max((a - b).abs());
            }
        }
    }
    ensure!(worst_mean <= 1e-6, "mean off by {worst_mean:e}");
    ensure!(worst_std <= 1e-6, "std off by {worst_std:e}");
    // Changing the base rescales the raw weights, which standardization
    // removes up to rounding.
    ensure!(worst_base <= 1e-12, "log base changes weights by {worst_base:e}");
    Ok(format!(
        "1000 vectors, |mean-1| {worst_mean:.1e}, |std-0.05| {worst_std:.1e}, base {worst_base:.1e}"
    ))
}

fn labeled(m: &DatasetManifest) -> Samples {
    (0..m.len())
        .map(|i| {
            let (img, lab) = m.load_sample(i).unwrap();
            (img, lab.unwrap())
        })
        .collect()
}

/// Synthetic data shared by the training criteria.
struct Toy {
    _dir: TempDir,
    train: Samples,
    test: Samples,
}

impl Toy {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let train = synth_dataset(40, 100, &dir.path().join("train")).unwrap();
        let test = synth_dataset(20, 999, &dir.path().join("test")).unwrap();
        Toy {
            train: labeled(&train.mixed),
            test: labeled(&test.mixed),
            _dir: dir,
        }
    }
}

const TOY_STEPS: usize = 800;
const SEEDS: [u64; 3] = [0, 1, 2];

fn toy_miou(toy: &Toy, mode: DifMode, use_lgf: bool, seed: u64) -> f64 {
    let model = ModelConfig {
        dif_mode: mode,
        use_lgf,
        ..ModelConfig::desk()
    };
    let cfg = TrainConfig {
        max_steps: TOY_STEPS,
        seed,
        ..TrainConfig::desk()
    };
    let mut t = Trainer::<f32>::new(model, cfg).unwrap();
    t.train_supervised(&toy.train, |_, _| Ok(())).unwrap();
    evaluate(&t.model, &toy.test).unwrap().0.mean
}

fn fmt3(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

fn supervised_toy(toy: &Toy, full: &mut Vec<f64>) -> Check {
    let start = Instant::now();
    let mut base = Vec::new();
    for seed in SEEDS {
        full.push(toy_miou(toy, DifMode::Adaptive, true, seed));
        base.push(toy_miou(toy, DifMode::Off, false, seed));
    }
    let t = start.elapsed();
    let (f, b) = (median(full), median(&base));
    let msg = format!(
        "full {} (median {f:.4}) vs plain {} (median {b:.4}), {:.0}s",
        fmt3(full),
        fmt3(&base),
        t.as_secs_f64()
    );
    ensure!(f > b, "{msg}");
    ensure!(t < Duration::from_secs(15 * 60), "{msg}: over 15 min");
    Ok(msg)
}

fn ablation(toy: &Toy, adaptive: &[f64]) -> Check {
    let (mut fixed, mut none) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        fixed.push(toy_miou(toy, DifMode::Fixed, true, seed));
        none.push(toy_miou(toy, DifMode::Off, true, seed));
    }
    let (a, f, n) = (median(adaptive), median(&fixed), median(&none));
    let msg = format!(
        "adaptive {a:.4} ({}) >= fixed {f:.4} ({}) >= none {n:.4} ({})",
        fmt3(adaptive),
        fmt3(&fixed),
        fmt3(&none)
    );
    ensure!(a >= f && f >= n, "{msg}");
    Ok(msg)
}

fn uda_smoke() -> Check {
    let start = Instant::now();
    let dir = TempDir::new().unwrap();
    let src_set = synth_dataset(40, 100, &dir.path().join("src")).unwrap();
    let tgt_set = synth_dataset(40, 200, &dir.path().join("tgt")).unwrap();
    let test_set = synth_dataset(20, 999, &dir.path().join("test")).unwrap();
    let src = labeled(&src_set.day);
    let pairs: Vec<(Image<f32>, Image<f32>)> = dial_core::dataio::pair_by_key(&tgt_set.day, &tgt_set.night)
        .unwrap()
        .into_iter()
        .map(|(d, n)| (tgt_set.day.load_sample(d).unwrap().0, tgt_set.night.load_sample(n).unwrap().0))
        .collect();
    let night_test = labeled(&test_set.night);
    let probe_src: Vec<&Image<f32>> = src.iter().take(8).map(|s| &s.0).collect();
    let probe_day: Vec<&Image<f32>> = pairs.iter().take(8).map(|p| &p.0).collect();
    let probe_night: Vec<&Image<f32>> = pairs.iter().take(8).map(|p| &p.1).collect();
    let (mut uda, mut base, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let cfg = uda_config(seed);
        let mut b = Trainer::<f32>::new(ModelConfig::desk(), cfg.clone()).unwrap();
        b.train_supervised(&src, |_, _| Ok(())).unwrap();
        base.push(evaluate(&b.model, &night_test).unwrap().0.mean);

        let mut t = Trainer::<f32>::new(ModelConfig::desk(), cfg).unwrap();
        let log = t.train_uda(&src, &pairs, |_, _| Ok(())).map_err(|e| e.to_string())?;
        ensure!(log.len() == 2000, "ran {} steps", log.len());
        for r in &log {
            let all = [r.seg, r.static_, r.adv, r.d, r.n];
            ensure!(all.iter().all(|v| v.is_some_and(f64::is_finite)), "non-finite record {r}");
        }
        let ps = batch_probs(&t.model, &probe_src);
        let gd = t.score_gap(false, &ps, &batch_probs(&t.model, &probe_day)).unwrap();
        let gn = t.score_gap(true, &ps, &batch_probs(&t.model, &probe_night)).unwrap();
        gaps.push((gd, gn));
        uda.push(evaluate(&t.model, &night_test).unwrap().0.mean);
    }
    let t = start.elapsed();
    let (u, b) = (median(&uda), median(&base));
    let gap_day = median(&gaps.iter().map(|g| g.0).collect::<Vec<_>>());
    let gap_night = median(&gaps.iter().map(|g| g.1).collect::<Vec<_>>());
    let msg = format!(
        "night mIoU {u:.4} ({}) vs source-only {b:.4} ({}), gap day {gap_day:.4} night {gap_night:.4}, {:.0}s",
        fmt3(&uda),
        fmt3(&base),
        t.as_secs_f64()
    );
    ensure!(u >= b, "{msg}");
    ensure!(gap_day > 0.0 && gap_night > 0.0, "{msg}");
    ensure!(t < Duration::from_secs(30 * 60), "{msg}: over 30 min");
    Ok(msg)
}

fn uda_config(seed: u64) -> TrainConfig {
    TrainConfig {
        max_steps: 2000,
        batch_size: 2,
        seed,
        ..TrainConfig::desk()
    }
}

fn batch_probs(m: &Model32, imgs: &[&Image<f32>]) -> Tensor<f32> {
    let mut data = Vec::new();
    for im in imgs {
        data.extend_from_slice(m.predict(im).unwrap().probs.data());
    }
    let (h, w) = (imgs[0].height(), imgs[0].width());
    Tensor::new(vec![imgs.len(), NUM_CLASSES, h, w], data).unwrap()
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push((p.to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    synth_dataset(4, 3, &data).unwrap();
    let mut cfg = dial_core::config::RunConfig::desk();
    cfg.train.max_steps = 30;
    cfg.train.checkpoint_every = 10;
    cfg.data.source = Some(data.join("day.tsv"));
    cfg.data.target_day = Some(data.join("day.tsv"));
    cfg.data.target_night = Some(data.join("night.tsv"));
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let mut compared = 0;
    for mode in ["supervised", "uda"] {
        let mut runs = Vec::new();
        for i in 0..2 {
            let out = dir.path().join(format!("{mode}{i}"));
            let st = Command::new(env!("CARGO_BIN_EXE_dial"))
                .args(["train", "--mode", mode, "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out)
                .env("RUST_LOG", "warn")
                .status()
                .map_err(|e| e.to_string())?;
            ensure!(st.success(), "{mode} run {i} failed");
            let files: Vec<(String, Vec<u8>)> = files_under(&out)
                .into_iter()
                .filter(|(n, _)| n.ends_with("metrics.log") || n.ends_with(".ckpt"))
                .map(|(n, b)| (n.replace(&format!("{mode}{i}"), mode), b))
                .collect();
            runs.push(files);
        }
        ensure!(runs[0].len() == 4, "{mode}: expected a log and three checkpoints");
        ensure!(runs[0] == runs[1], "{mode}: artifacts differ between runs");
        compared += runs[0].len();
    }
    Ok(format!("{compared} artifacts byte-identical across reruns"))
}

fn checkpoint_round_trip() -> Check {
    let mut t = Trainer::<f32>::new(ModelConfig::desk(), TrainConfig { max_steps: 3, ..TrainConfig::desk() }).unwrap();
    let data: Samples = dial_core::dataio::synth_pairs::<f32>(2, 9)
        .unwrap()
        .into_iter()
        .map(|p| (p.night, p.labels))
        .collect();
    t.train_supervised(&data, |_, _| Ok(())).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.ckpt");
    t.to_checkpoint().unwrap().save(&path).unwrap();

    let mut fresh = Model32::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    fresh.load_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let a = t.model.predict(&data[0].0).unwrap().probs;
    let b = fresh.predict(&data[0].0).unwrap().probs;
    let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(bits(&a) == bits(&b), "restored model predicts differently");
    for ((_, x), (_, y)) in t.model.networks().iter().zip(fresh.networks().iter()) {
        for (p, q) in x.tensors().iter().zip(y.tensors()) {
            ensure!(bits(p) == bits(q), "weights differ after reload");
        }
    }

    let bytes = fs::read(&path).unwrap();
    let victim = Model32::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let snapshot: Vec<Vec<u32>> = victim.networks().iter().flat_map(|(_, p)| p.tensors().iter().map(bits)).collect();
    let mut rejected = 0;
    // Every cut inside the header region, then evenly spaced cuts.
    let cuts = (0..512.min(bytes.len())).chain((512..bytes.len()).step_by(bytes.len() / 500 + 1));
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    let mut trailing = bytes.clone();
    trailing.push(0);
    let bad_inputs = cuts.map(|n| &bytes[..n]).chain([&flipped[..], &trailing[..]]);
    for bad in bad_inputs {
        let bad_path = dir.path().join("bad.ckpt");
        fs::write(&bad_path, bad).unwrap();
        let mut m = victim.clone();
        let res = Checkpoint::load(&bad_path).and_then(|ck| m.load_checkpoint(&ck));
        ensure!(res.is_err(), "a corrupt file of {} bytes was accepted", bad.len());
        let after: Vec<Vec<u32>> = m.networks().iter().flat_map(|(_, p)| p.tensors().iter().map(bits)).collect();
        ensure!(after == snapshot, "a rejected file modified the model");
        rejected += 1;
    }
    // A structurally valid file that lacks one network is refused as a whole.
    let mut partial = Checkpoint::new();
    partial.push_params("cnnpp", t.model.cnnpp.params()).unwrap();
    partial.push_params("backbone", t.model.backbone.params()).unwrap();
    let mut m = victim.clone();
    ensure!(m.load_checkpoint(&partial).is_err(), "partial checkpoint accepted");
    let after: Vec<Vec<u32>> = m.networks().iter().flat_map(|(_, p)| p.tensors().iter().map(bits)).collect();
    ensure!(after == snapshot, "partial checkpoint modified the model");
    Ok(format!("bit-exact reload, {} corrupt files rejected cleanly", rejected + 1))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut failed = 0;
    let mut report = |name: &str, r: Check| {
        match r {
            Ok(m) => println!("PASS {name}: {m}"),
            Err(m) => {
                failed += 1;
                println!("FAIL {name}: {m}");
            }
        }
    };
    if wanted("filter-math") {
        report("filter-math", filter_math());
    }
    if wanted("gradient-suite") {
        report("gradient-suite", gradient_suite());
    }
    if wanted("guided-filter-oracle") {
        report("guided-filter-oracle", guided_filter_oracle());
    }
    if wanted("parameter-counts") {
        report("parameter-counts", parameter_counts());
    }
    if wanted("reweighting") {
        report("reweighting", reweighting());
    }
    if wanted("supervised-toy") || wanted("ablation") {
        let toy = Toy::new();
        let mut full = Vec::new();
        let sup = supervised_toy(&toy, &mut full);
        if wanted("supervised-toy") {
            report("supervised-toy", sup);
        }
        if wanted("ablation") {
            report("ablation", ablation(&toy, &full));
        }
    }
    if wanted("uda-smoke") {
        report("uda-smoke", uda_smoke());
    }
    if wanted("determinism") {
        report("determinism", determinism());
    }
    if wanted("checkpoint-round-trip") {
        report("checkpoint-round-trip", checkpoint_round_trip());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
