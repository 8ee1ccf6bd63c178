//! Random scale, crop and horizontal flip applied jointly to images and labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DialError, Result};
use crate::kernels::bilinear_resize;
use crate::scalar::Scalar;
use crate::tensor::{Image, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: 64,
            scale_min: 0.9,
            scale_max: 1.1,
            flip: true,
        }
    }
}

impl AugmentConfig {
    /// No geometric change beyond cropping to `crop`.
    pub fn none(crop: usize) -> Self {
        AugmentConfig {
            crop,
            scale_min: 1.0,
            scale_max: 1.0,
            flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(DialError::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// One sampled geometric transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub scaled_h: usize,
    pub scaled_w: usize,
    pub top: usize,
    pub left: usize,
    pub crop: usize,
    pub flip: bool,
}

impl AugmentPlan {
    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let scaled_h = ((height as f64 * s).round() as usize).max(1);
        let scaled_w = ((width as f64 * s).round() as usize).max(1);
        let top = rng.random_range(0..=scaled_h.saturating_sub(cfg.crop));
        let left = rng.random_range(0..=scaled_w.saturating_sub(cfg.crop));
        let flip = cfg.flip && rng.random_bool(0.5);
        Ok(AugmentPlan {
            scaled_h,
            scaled_w,
            top,
            left,
            crop: cfg.crop,
            flip,
        })
    }

    /// Source row/column of crop pixel `(y, x)` in the scaled frame, with
    /// edge replication when the scaled image is smaller than the crop.
    fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let x = if self.flip { self.crop - 1 - x } else { x };
        (
            (self.top + y).min(self.scaled_h - 1),
            (self.left + x).min(self.scaled_w - 1),
        )
    }

    pub fn apply_image<T: Scalar>(&self, img: &Image<T>) -> Result<Image<T>> {
        let scaled = if (img.height(), img.width()) == (self.scaled_h, self.scaled_w) {
            img.clone()
        } else {
            bilinear_resize(img, self.scaled_h, self.scaled_w)?
        };
        Ok(Image::from_fn(self.crop, self.crop, |c, y, x| {
            let (sy, sx) = self.source(y, x);
            scaled.get(c, sy, sx)
        }))
    }

    /// Nearest-neighbor counterpart of [`AugmentPlan::apply_image`].
    pub fn apply_labels(&self, labels: &LabelMap) -> Result<LabelMap> {
        let (h, w) = (labels.height(), labels.width());
        let nearest = |i: usize, from: usize, to: usize| {
            (((i as f64 + 0.5) * from as f64 / to as f64).floor() as usize).min(from - 1)
        };
        let mut data = Vec::with_capacity(self.crop * self.crop);
        for y in 0..self.crop {
            for x in 0..self.crop {
                let (sy, sx) = self.source(y, x);
                data.push(labels.get(nearest(sy, h, self.scaled_h), nearest(sx, w, self.scaled_w)));
            }
        }
        LabelMap::new(self.crop, self.crop, data)
    }
}

/// Samples a plan from `seed` and applies it to the image and optional labels.
pub fn augment<T: Scalar>(
    img: &Image<T>,
    labels: Option<&LabelMap>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Image<T>, Option<LabelMap>)> {
    if let Some(l) = labels {
        if (l.height(), l.width()) != (img.height(), img.width()) {
            return Err(DialError::Data(format!(
                "label map {}x{} does not match image {}x{}",
                l.height(),
                l.width(),
                img.height(),
                img.width()
            )));
        }
    }
    let plan = AugmentPlan::sample(cfg, img.height(), img.width(), seed)?;
    let out = plan.apply_image(img)?;
    let lab = labels.map(|l| plan.apply_labels(l)).transpose()?;
    Ok((out, lab))
}
