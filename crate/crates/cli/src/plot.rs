//! Loss-curve raster written by `dial train`.

use dial_core::trainer::LossRecord;
use dial_core::{Image, Result};

const WIDTH: usize = 640;
const HEIGHT: usize = 360;
const MARGIN: usize = 24;
const COLORS: [[u8; 3]; 5] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189]];

/// One polyline per loss column on a log10 vertical axis. The legend order
/// is L_seg, L_static, L_adv, L_d, L_n.
pub fn loss_curve(log: &[LossRecord]) -> Result<Image<f32>> {
    let series: Vec<Vec<Option<f64>>> = (0..5)
        .map(|k| {
            log.iter()
                .map(|r| {
                    [r.seg, r.static_, r.adv, r.d, r.n][k]
                        .filter(|v| *v > 0.0 && v.is_finite())
                        .map(f64::log10)
                })
                .collect()
        })
        .collect();
    let all = series.iter().flatten().flatten();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut px = vec![255u8; WIDTH * HEIGHT * 3];
    let mut put = |x: usize, y: usize, c: [u8; 3]| {
        if x < WIDTH && y < HEIGHT {
            px[3 * (y * WIDTH + x)..3 * (y * WIDTH + x) + 3].copy_from_slice(&c);
        }
    };
    for x in MARGIN..WIDTH - MARGIN {
        put(x, HEIGHT - MARGIN, [0, 0, 0]);
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        put(MARGIN, y, [0, 0, 0]);
    }
    if lo.is_finite() && log.len() > 1 {
        let span = (hi - lo).max(1e-12);
        let (pw, ph) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
        let to_px = |i: usize, v: f64| {
            let x = MARGIN as f64 + pw * i as f64 / (log.len() - 1) as f64;
            let y = (HEIGHT - MARGIN) as f64 - ph * (v - lo) / span;
            (x, y)
        };
        for (k, s) in series.iter().enumerate() {
            let mut prev: Option<(f64, f64)> = None;
            for (i, v) in s.iter().enumerate() {
                let Some(v) = v else {
                    prev = None;
                    continue;
                };
                let p = to_px(i, *v);
                let a = prev.unwrap_or(p);
                let n = ((p.0 - a.0).abs().max((p.1 - a.1).abs()).ceil() as usize).max(1);
                for t in 0..=n {
                    let f = t as f64 / n as f64;
                    put(
                        (a.0 + f * (p.0 - a.0)).round() as usize,
                        (a.1 + f * (p.1 - a.1)).round() as usize,
                        COLORS[k],
                    );
                }
                prev = Some(p);
            }
        }
    }
    Image::from_rgb8(HEIGHT, WIDTH, &px)
}
