//! Small convolutional predictor of the four filter hyperparameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DialError, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::nn::{self, Network, ParamSet};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Image, Tensor};

/// Number of hyperparameters the predictor emits.
pub const NUM_FILTER_PARAMS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// Output channels of the five convolutional blocks.
    pub channels: [usize; 5],
    pub kernel: usize,
    pub stride: usize,
    pub slope: f64,
    /// Dropout rate on the head input (training only).
    pub dropout: f64,
    /// Side length of the square downsample fed to the network.
    pub input_size: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            channels: [16, 32, 64, 128, 128],
            kernel: 3,
            stride: 2,
            slope: 0.01,
            dropout: 0.5,
            input_size: 256,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.kernel == 0 || self.stride == 0 || self.input_size == 0
        {
            return Err(DialError::Config("predictor extents must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DialError::Config(format!(
                "predictor dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Five strided conv blocks, global average pooling, dropout and a dense head.
#[derive(Clone, Debug)]
pub struct CnnPp<T> {
    cfg: PredictorConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> CnnPp<T> {
    /// Kaiming-initialized convolutions and an all-zero head, so a fresh
    /// predictor emits raw zeros.
    pub fn new(cfg: PredictorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut cin = 3;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let fan_in = cin * cfg.kernel * cfg.kernel;
            params.add(
                format!("conv{}.weight", i + 1),
                nn::kaiming_normal(&[cout, cin, cfg.kernel, cfg.kernel], fan_in, cfg.slope, rng),
            );
            params.add(format!("conv{}.bias", i + 1), Tensor::zeros(&[cout]));
            cin = cout;
        }
        params.add("fc.weight", Tensor::zeros(&[NUM_FILTER_PARAMS, cin]));
        params.add("fc.bias", Tensor::zeros(&[NUM_FILTER_PARAMS]));
        Ok(CnnPp { cfg, params })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    /// Bilinear downsample of a `[N, 3, H, W]` batch to the predictor input size.
    pub fn downsample(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        nn::resize(g, x, self.cfg.input_size, self.cfg.input_size)
    }

    /// Raw `[N, 4]` outputs for an already downsampled batch.
    ///
    /// `dropout_rng` switches on training-mode dropout.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        let (_, c, h, w) = g.value(x).nchw()?;
        if c != 3 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(DialError::invalid(format!(
                "predictor expects [N, 3, {s}, {s}] input, got {:?}",
                g.shape(x),
                s = self.cfg.input_size
            )));
        }
        let geom = ConvGeom::symmetric(self.cfg.kernel, self.cfg.stride, self.cfg.kernel / 2);
        let slope = lit(self.cfg.slope);
        let mut h = x;
        for i in 0..5 {
            h = nn::conv2d(g, h, vars[2 * i], vars[2 * i + 1], geom)?;
            h = g.leaky_relu(h, slope);
        }
        let mut feat = nn::global_avg_pool(g, h)?;
        if let (Some(rng), true) = (dropout_rng, self.cfg.dropout > 0.0) {
            let keep = 1.0 - self.cfg.dropout;
            let scale: T = lit(1.0 / keep);
            let shape = g.shape(feat).to_vec();
            let mask = Tensor::from_fn(&shape, |_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            });
            feat = nn::mask(g, feat, mask);
        }
        nn::linear(g, feat, vars[10], vars[11])
    }

    /// Evaluation-mode raw prediction for one full-resolution image.
    pub fn predict_filter_params(&self, img: &Image<T>) -> Result<[T; 4]> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let small = self.downsample(&mut g, x)?;
        let out = self.forward(&mut g, &vars, small, None)?;
        let d = g.value(out).data();
        Ok([d[0], d[1], d[2], d[3]])
    }
}

impl<T: Scalar> Network<T> for CnnPp<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}
