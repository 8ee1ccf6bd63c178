//! Pluggable segmentation backbone. Ships one small encoder-decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DialError, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::nn::{self, Network, ParamSet};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Image, Tensor, NUM_CLASSES};

/// Architecture id plus hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub arch: String,
    /// Output channels of the four stride-2 encoder blocks.
    pub channels: [usize; 4],
    /// Add encoder features onto the matching decoder resolution.
    pub skip: bool,
    pub slope: f64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            arch: Backbone::<f32>::TOY.into(),
            channels: [16, 32, 64, 128],
            skip: true,
            slope: 0.01,
        }
    }
}

/// Toy encoder-decoder: four stride-2 3x3 conv blocks, two stride-2
/// transposed-conv blocks, a 1x1 head to 19 channels, then bilinear
/// upsampling back to the input size.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    spec: BackboneSpec,
    params: ParamSet<T>,
}

impl<T: Scalar> Backbone<T> {
    pub const TOY: &'static str = "toy";
    /// Input sides must be multiples of this.
    pub const STRIDE: usize = 16;

    pub fn new(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.arch != Self::TOY {
            return Err(DialError::Config(format!(
                "unsupported backbone architecture {:?}",
                spec.arch
            )));
        }
        if spec.channels.contains(&0) {
            return Err(DialError::Config("backbone channels must be positive".into()));
        }
        let s = spec.slope;
        let c = spec.channels;
        let mut params = ParamSet::new();
        let mut cin = 3;
        for (i, &cout) in c.iter().enumerate() {
            params.add(
                format!("enc{}.weight", i + 1),
                nn::kaiming_normal(&[cout, cin, 3, 3], cin * 9, s, rng),
            );
            params.add(format!("enc{}.bias", i + 1), Tensor::zeros(&[cout]));
            cin = cout;
        }
        // Transposed weights are [Cin, Cout, k, k]; each output sees ~Cin*4 taps.
        params.add("dec1.weight", nn::kaiming_normal(&[c[3], c[2], 4, 4], c[3] * 4, s, rng));
        params.add("dec1.bias", Tensor::zeros(&[c[2]]));
        params.add("dec2.weight", nn::kaiming_normal(&[c[2], c[1], 4, 4], c[2] * 4, s, rng));
        params.add("dec2.bias", Tensor::zeros(&[c[1]]));
        params.add(
            "head.weight",
            nn::kaiming_normal(&[NUM_CLASSES, c[1], 1, 1], c[1], 1.0, rng),
        );
        params.add("head.bias", Tensor::zeros(&[NUM_CLASSES]));
        Ok(Backbone { spec, params })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// `[N, 3, H, W]` -> `[N, 19, H, W]` category scores.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).nchw()?;
        if c != 3 || h % Self::STRIDE != 0 || w % Self::STRIDE != 0 {
            return Err(DialError::invalid(format!(
                "backbone needs a 3-channel input with sides divisible by {}, got {:?}",
                Self::STRIDE,
                g.shape(x)
            )));
        }
        let slope: T = lit(self.spec.slope);
        let down = ConvGeom::symmetric(3, 2, 1);
        let up = ConvGeom::symmetric(4, 2, 1);
        let mut feats = Vec::with_capacity(4);
        let mut cur = x;
        for i in 0..4 {
            cur = nn::conv2d(g, cur, vars[2 * i], vars[2 * i + 1], down)?;
            cur = g.leaky_relu(cur, slope);
            feats.push(cur);
        }
        for (i, skip) in [(4, feats[2]), (5, feats[1])] {
            cur = nn::conv_transpose2d(g, cur, vars[2 * i], vars[2 * i + 1], up)?;
            if self.spec.skip {
                cur = g.add(cur, skip);
            }
            cur = g.leaky_relu(cur, slope);
        }
        let head = nn::conv2d(g, cur, vars[12], vars[13], ConvGeom::symmetric(1, 1, 0))?;
        nn::resize(g, head, h, w)
    }

    /// Evaluation-mode scores for a single image, shape `[1, 19, H, W]`.
    pub fn backbone_forward(&self, img: &Image<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let y = self.forward(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Scalar> Network<T> for Backbone<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}
