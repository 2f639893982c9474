//! Visual backbones mapping an image to a `1 x N` feature row.

use std::sync::Arc;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{trunc_normal, Bound, ParamStore};
use crate::registry::{Named, Registry};
use crate::rng::Rng;

pub trait VisualEncoder: Named + Send + Sync {
    fn init(&self, cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng);

    /// `input` is a `3 x H x W` planar tensor already centred.
    fn encode(&self, g: &mut Graph, p: &Bound, cfg: &ModelConfig, input: Var) -> Result<Var>;
}

/// Stride-2 3x3 convolutions with ReLU, channel widths doubling from the
/// base and ending at the feature width, then global average pooling.
pub struct ConvEncoder {
    name: String,
    stages: usize,
}

impl ConvEncoder {
    pub fn new(stages: usize) -> Self {
        Self {
            name: format!("conv{stages}"),
            stages,
        }
    }

    fn widths(&self, cfg: &ModelConfig) -> Vec<usize> {
        let mut w: Vec<usize> = (0..self.stages - 1).map(|i| cfg.encoder_base_channels << i).collect();
        w.push(cfg.visual_dim);
        w
    }
}

impl Named for ConvEncoder {
    fn name(&self) -> &str {
        &self.name
    }
}

impl VisualEncoder for ConvEncoder {
    fn init(&self, cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) {
        let mut c_in = 3;
        for (i, c_out) in self.widths(cfg).into_iter().enumerate() {
            let fan_in = c_in * 9;
            store.insert(
                format!("encoder.conv{i}.weight"),
                trunc_normal(&[c_out, c_in, 3, 3], (2.0 / fan_in as f64).sqrt(), rng),
            );
            store.insert(format!("encoder.conv{i}.bias"), Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
    }

    fn encode(&self, g: &mut Graph, p: &Bound, _cfg: &ModelConfig, input: Var) -> Result<Var> {
        let mut x = input;
        for i in 0..self.stages {
            let w = p.var(&format!("encoder.conv{i}.weight"))?;
            let b = p.var(&format!("encoder.conv{i}.bias"))?;
            x = g.conv2d(x, w, b, 2, 1)?;
            x = g.relu(x);
        }
        g.global_avg_pool(x)
    }
}

pub fn encoders() -> Registry<dyn VisualEncoder> {
    let mut r: Registry<dyn VisualEncoder> = Registry::new("visual encoder");
    r.register(Arc::new(ConvEncoder::new(4)));
    r.register(Arc::new(ConvEncoder::new(2)));
    r
}

/// Checks the channel count and centres pixel values around zero.
pub fn planar_input(channels: usize, height: usize, width: usize, planar: &[f64]) -> Result<Tensor> {
    if channels != 3 {
        return Err(Error::Shape(format!("visual encoder expects 3 channels, got {channels}")));
    }
    Tensor::new(
        vec![channels, height, width],
        planar.iter().map(|v| v - 0.5).collect(),
    )
}
