use dial_core::checkpoint::Checkpoint;
use dial_core::dataio::compute_miou;
use dial_core::dif::{apply_dif, squash_params, DifConfig, FilterParams, FilterRanges};
use dial_core::kernels::{bilinear_resize, box_mean_filter, gaussian_blur};
use dial_core::lgf::{guided_filter, GuidedFilterConfig};
use dial_core::losses::{standardize, ClassWeights};
use dial_core::nn::ParamSet;
use dial_core::{Image, LabelMap, Tensor};
use proptest::prelude::*;

fn image(h: usize, w: usize, data: Vec<f64>) -> Image<f64> {
    Image::new(h, w, data).unwrap()
}

fn sized_image() -> impl Strategy<Value = Image<f64>> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..1.0, 3 * h * w).prop_map(move |d| image(h, w, d))
    })
}

fn map_pair() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(-1.0f64..1.0, h * w),
            prop::collection::vec(0.0f64..1.0, h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guided_filter_is_linear_in_the_input((h, w, p, guide) in map_pair(), a in -2.0f64..2.0, r in 1usize..3) {
        let cfg = GuidedFilterConfig { radius: r, epsilon: 0.05 };
        let t = |d: Vec<f64>| Tensor::new(vec![h, w], d).unwrap();
        let q = guided_filter(&t(p.clone()), &t(guide.clone()), &cfg).unwrap();
        let scaled: Vec<f64> = p.iter().map(|v| a * v + 0.3).collect();
        let qs = guided_filter(&t(scaled), &t(guide), &cfg).unwrap();
        for (x, y) in q.data().iter().zip(qs.data()) {
            prop_assert!((a * x + 0.3 - y).abs() < 1e-9);
        }
    }

    #[test]
    fn box_mean_stays_within_input_bounds((h, w, p, _g) in map_pair(), r in 1usize..4) {
        let t = Tensor::new(vec![h, w], p.clone()).unwrap();
        let m = box_mean_filter(&t, r).unwrap();
        let (lo, hi) = p.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for v in m.data() {
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn standardized_weights_have_unit_mean_and_given_spread(
        props in prop::collection::vec(1e-4f64..1.0, 2..19),
        spread in 0.01f64..0.5,
    ) {
        let w = ClassWeights::from_proportions(&props, spread).unwrap().weights;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        let distinct = props.iter().any(|p| (p - props[0]).abs() > 1e-9);
        if distinct {
            let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!((std - spread).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_ignore_the_logarithm_base(
        props in prop::collection::vec(1e-4f64..1.0, 2..19),
        base in 1.5f64..20.0,
    ) {
        let natural: Vec<f64> = props.iter().map(|p| -p.ln()).collect();
        let other: Vec<f64> = props.iter().map(|p| -p.log(base)).collect();
        for (a, b) in standardize(&natural, 0.05).iter().zip(standardize(&other, 0.05)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn squashed_parameters_stay_in_range(raw in prop::array::uniform4(-1e3f64..1e3)) {
        let ranges = FilterRanges::default();
        let p = squash_params(raw, &ranges).unwrap();
        prop_assert!(ranges.check(&p).is_ok());
    }

    #[test]
    fn identity_filters_leave_images_alone(img in sized_image()) {
        let out = apply_dif(&img, &FilterParams::identity(), &DifConfig::default()).unwrap();
        prop_assert_eq!(out.data(), img.data());
    }

    #[test]
    fn filters_keep_pixels_in_the_unit_interval(
        img in sized_image(),
        e in -2.0f64..2.0, gm in 0.34f64..3.0, a in 0.0f64..1.0, l in 0.0f64..2.0,
    ) {
        let p = FilterParams { exposure: e, gamma: gm, contrast: a, sharpen: l };
        let out = apply_dif(&img, &p, &DifConfig::default()).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn resize_and_blur_preserve_constants(c in 0.0f64..1.0, h in 1usize..12, w in 1usize..12, oh in 1usize..12, ow in 1usize..12) {
        let img = Image::constant(h, w, c);
        let r = bilinear_resize(&img, oh, ow).unwrap();
        prop_assert!(r.data().iter().all(|v| (v - c).abs() < 1e-12));
        let b = gaussian_blur(&img, 1.0, 2).unwrap();
        prop_assert!(b.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn miou_matches_brute_force(
        data in prop::collection::vec((0u8..4, 0u8..4), 1..64),
    ) {
        let gt: Vec<u8> = data.iter().map(|d| if d.0 == 3 { 255 } else { d.0 }).collect();
        let pr: Vec<u8> = data.iter().map(|d| d.1.min(2)).collect();
        let n = gt.len();
        let g = LabelMap::new(1, n, gt.clone()).unwrap();
        let p = LabelMap::new(1, n, pr.clone()).unwrap();
        let rep = compute_miou(&[&p], &[&g], 3).unwrap();
        let mut ious = Vec::new();
        for c in 0..3u8 {
            let valid = |i: usize| gt[i] != 255;
            let inter = (0..n).filter(|&i| valid(i) && gt[i] == c && pr[i] == c).count();
            let union = (0..n).filter(|&i| valid(i) && (gt[i] == c || pr[i] == c)).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        if !ious.is_empty() {
            let mean = ious.iter().sum::<f64>() / ious.len() as f64;
            prop_assert!((rep.mean - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(vals in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let mut ps = ParamSet::<f32>::new();
        ps.add("layer.weight", Tensor::new(vec![vals.len()], vals.clone()).unwrap());
        let mut ck = Checkpoint::new();
        ck.push_params("net", &ps).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let mut fresh = ParamSet::<f32>::new();
        fresh.add("layer.weight", Tensor::zeros(&[vals.len()]));
        back.restore_params("net", &mut fresh).unwrap();
        let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(fresh.tensors()[0].data()), bits(&vals));
    }
}
