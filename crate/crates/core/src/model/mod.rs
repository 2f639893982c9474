//! The prompt-conditioned scoring network.
//!
//! Each prompt pair becomes a two-token sequence (visual feature, repeated
//! score), which a small transformer encodes into one prompt feature. The
//! prompt features are fused with each other, then with the query image's
//! feature placed as token 0; that token is regressed to a score.

pub mod checkpoint;
pub mod encoder;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::datasets::Ispp;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, BlockShape, Bound, ParamStore};
use crate::rng;

pub use checkpoint::Checkpoint;
pub use encoder::{encoders, VisualEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// N, width of visual features.
    #[serde(default = "d128")]
    pub visual_dim: usize,
    /// M, width of prompt features.
    #[serde(default = "d128")]
    pub prompt_dim: usize,
    #[serde(default = "d3")]
    pub prompt_encoder_depth: usize,
    #[serde(default = "d3")]
    pub ispp_fusion_depth: usize,
    #[serde(default = "d8")]
    pub image_prompt_fusion_depth: usize,
    #[serde(default = "d4")]
    pub attention_heads: usize,
    #[serde(default = "d64")]
    pub regression_hidden: usize,
    #[serde(default = "d10")]
    pub n_prompts_default: usize,
    #[serde(default = "d4")]
    pub mlp_ratio: usize,
    /// Images are resized to `input_size x input_size` before encoding.
    #[serde(default = "d32")]
    pub input_size: usize,
    #[serde(default = "default_encoder")]
    pub encoder: String,
    #[serde(default = "d8")]
    pub encoder_base_channels: usize,
    /// `false` drops the whole prompt pathway.
    #[serde(default = "yes")]
    pub use_prompt: bool,
}

fn d3() -> usize {
    3
}
fn d4() -> usize {
    4
}
fn d8() -> usize {
    8
}
fn d10() -> usize {
    10
}
fn d32() -> usize {
    32
}
fn d64() -> usize {
    64
}
fn d128() -> usize {
    128
}
fn yes() -> bool {
    true
}
fn default_encoder() -> String {
    "conv4".into()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual_dim: 128,
            prompt_dim: 128,
            prompt_encoder_depth: 3,
            ispp_fusion_depth: 3,
            image_prompt_fusion_depth: 8,
            attention_heads: 4,
            regression_hidden: 64,
            n_prompts_default: 10,
            mlp_ratio: 4,
            input_size: 32,
            encoder: default_encoder(),
            encoder_base_channels: 8,
            use_prompt: true,
        }
    }
}

impl ModelConfig {
    /// Small enough to train on one CPU core in minutes.
    pub fn tiny() -> Self {
        Self {
            visual_dim: 32,
            prompt_dim: 32,
            prompt_encoder_depth: 1,
            ispp_fusion_depth: 1,
            image_prompt_fusion_depth: 2,
            regression_hidden: 16,
            ..Self::default()
        }
    }

    /// Used for finite-difference gradient checks.
    pub fn miniature() -> Self {
        Self {
            visual_dim: 16,
            prompt_dim: 16,
            prompt_encoder_depth: 1,
            ispp_fusion_depth: 1,
            image_prompt_fusion_depth: 2,
            regression_hidden: 8,
            input_size: 16,
            encoder_base_channels: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("visual_dim", self.visual_dim),
            ("prompt_dim", self.prompt_dim),
            ("attention_heads", self.attention_heads),
            ("regression_hidden", self.regression_hidden),
            ("n_prompts_default", self.n_prompts_default),
            ("mlp_ratio", self.mlp_ratio),
            ("input_size", self.input_size),
            ("encoder_base_channels", self.encoder_base_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        for (name, d) in [("visual_dim", self.visual_dim), ("prompt_dim", self.prompt_dim)] {
            if d % self.attention_heads != 0 {
                return Err(Error::Config(format!(
                    "model.{name} ({d}) must be divisible by attention_heads ({})",
                    self.attention_heads
                )));
            }
        }
        encoders().get(&self.encoder)?;
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::config::content_hash(self)
    }

    fn block(&self, dim: usize) -> BlockShape {
        BlockShape {
            dim,
            heads: self.attention_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

/// Every intermediate of one forward pass for one query.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    /// One `2 x N` matrix per prompt pair.
    pub isp_features: Vec<Tensor>,
    /// `n x M`
    pub prompt_features: Tensor,
    /// `n x M`
    pub requirement_feature: Tensor,
    /// `(n + 1) x M`
    pub image_prompt_feature: Tensor,
    /// `1 x M`, the regression input.
    pub query_feature: Tensor,
    pub score: f64,
}

/// Graph handles of a batched forward pass.
pub struct Forward {
    pub scores: Vec<Var>,
    /// Leaves holding the prompt scores, for gradients with respect to them.
    pub prompt_scores: Vec<Var>,
}

#[derive(Clone)]
pub struct PromptIqa {
    config: ModelConfig,
    encoder: Arc<dyn VisualEncoder>,
    params: ParamStore,
}

impl std::fmt::Debug for PromptIqa {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromptIqa")
            .field("config", &self.config)
            .field("params", &self.params.numel())
            .finish()
    }
}

const INIT_STREAM: u64 = 0x1417;

impl PromptIqa {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = encoders().get(&config.encoder)?;
        let mut rng = rng::stream(seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let (n, m) = (config.visual_dim, config.prompt_dim);
        encoder.init(&config, &mut store, &mut rng);
        if config.use_prompt {
            store.insert("prompt.role", Tensor::zeros(&[2, n]));
            for i in 0..config.prompt_encoder_depth {
                nn::init_block(&mut store, &format!("prompt.block{i}"), config.block(n), &mut rng);
            }
            nn::init_linear(&mut store, "prompt.proj", n, m, &mut rng);
            for i in 0..config.ispp_fusion_depth {
                nn::init_block(&mut store, &format!("ispp.block{i}"), config.block(m), &mut rng);
            }
            store.insert("fusion.query_type", Tensor::zeros(&[1, m]));
            for i in 0..config.image_prompt_fusion_depth {
                nn::init_block(&mut store, &format!("fusion.block{i}"), config.block(m), &mut rng);
            }
            nn::init_layer_norm(&mut store, "fusion.norm", m);
        }
        nn::init_linear(&mut store, "query.proj", n, m, &mut rng);
        nn::init_linear(&mut store, "head.fc1", m, config.regression_hidden, &mut rng);
        nn::init_linear(&mut store, "head.fc2", config.regression_hidden, 1, &mut rng);
        Ok(Self {
            config,
            encoder,
            params: store,
        })
    }

    /// Rebuilds a model from stored parameters, which must have exactly the
    /// layout `config` produces.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::Config(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        Ok(Self { params, ..fresh })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn uses_prompt(&self) -> bool {
        self.config.use_prompt
    }

    fn input_tensor(&self, image: &Image) -> Result<Tensor> {
        let s = self.config.input_size;
        let resized;
        let img = if image.height() == s && image.width() == s {
            image
        } else {
            resized = image.resize(s, s)?;
            &resized
        };
        encoder::planar_input(3, s, s, &img.to_planar())
    }

    /// `1 x N` visual feature.
    pub fn encode_visual(&self, g: &mut Graph, p: &Bound, image: &Image) -> Result<Var> {
        let x = g.constant(self.input_tensor(image)?);
        self.encoder.encode(g, p, &self.config, x)
    }

    /// Encodes an already planar `C x H x W` array.
    pub fn encode_planar(&self, g: &mut Graph, p: &Bound, channels: usize, h: usize, w: usize, planar: &[f64]) -> Result<Var> {
        let x = g.constant(encoder::planar_input(channels, h, w, planar)?);
        self.encoder.encode(g, p, &self.config, x)
    }

    /// `encode_prompt` for one `2 x N` ISP feature.
    pub fn encode_prompt(&self, g: &mut Graph, p: &Bound, isp: Var) -> Result<Var> {
        let n = self.config.visual_dim;
        if g.shape(isp) != [2, n] {
            return Err(Error::Shape(format!("prompt encoder expects 2x{n}, got {:?}", g.shape(isp))));
        }
        let role = p.var("prompt.role")?;
        let mut x = g.add(isp, role)?;
        for i in 0..self.config.prompt_encoder_depth {
            x = nn::block(g, p, &format!("prompt.block{i}"), x, self.config.block(n))?;
        }
        let pooled = g.mean_rows(x)?;
        nn::linear(g, p, "prompt.proj", pooled)
    }

    /// Self-attention over the `n x M` prompt features.
    pub fn fuse_ispp(&self, g: &mut Graph, p: &Bound, prompt_features: Var) -> Result<Var> {
        let mut x = prompt_features;
        for i in 0..self.config.ispp_fusion_depth {
            x = nn::block(g, p, &format!("ispp.block{i}"), x, self.config.block(self.config.prompt_dim))?;
        }
        Ok(x)
    }

    /// Projects the `1 x N` query feature to width M, prepends it to the
    /// requirement feature and returns the fused `(n + 1) x M` matrix.
    pub fn fuse_image_prompt(&self, g: &mut Graph, p: &Bound, query: Var, requirement: Var) -> Result<Var> {
        let m = self.config.prompt_dim;
        if g.shape(requirement).get(1) != Some(&m) {
            return Err(Error::Shape(format!(
                "requirement feature must have width {m}, got {:?}",
                g.shape(requirement)
            )));
        }
        let q = nn::linear(g, p, "query.proj", query)?;
        let q = g.add(q, p.var("fusion.query_type")?)?;
        let mut x = g.concat_rows(&[q, requirement])?;
        for i in 0..self.config.image_prompt_fusion_depth {
            x = nn::block(g, p, &format!("fusion.block{i}"), x, self.config.block(m))?;
        }
        nn::layer_norm(g, p, "fusion.norm", x)
    }

    /// `1 x M` to a `1 x 1` score.
    pub fn regress(&self, g: &mut Graph, p: &Bound, query_feature: Var) -> Result<Var> {
        let h = nn::linear(g, p, "head.fc1", query_feature)?;
        let h = g.relu(h);
        nn::linear(g, p, "head.fc2", h)
    }

    /// Builds the requirement feature `F_AC` from prompt images and score
    /// leaves.
    fn requirement(&self, g: &mut Graph, p: &Bound, images: &[Arc<Image>], scores: &[Var]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let n = self.config.visual_dim;
        let mut feats = Vec::with_capacity(images.len());
        for (img, &s) in images.iter().zip(scores) {
            let v = self.encode_visual(g, p, img)?;
            let e = g.expand(s, n)?;
            let isp = build_isp_feature(g, v, e)?;
            feats.push(self.encode_prompt(g, p, isp)?);
        }
        let fp = g.concat_rows(&feats)?;
        self.fuse_ispp(g, p, fp)
    }

    /// Scores every query against the shared prompt. Prompt scores are
    /// `prompt_scores` when given (e.g. augmented), else the ISPP's own.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        ispp: Option<&Ispp>,
        prompt_scores: Option<&[f64]>,
        queries: &[Arc<Image>],
    ) -> Result<Forward> {
        let mut out = Forward {
            scores: Vec::with_capacity(queries.len()),
            prompt_scores: Vec::new(),
        };
        if !self.config.use_prompt {
            for q in queries {
                let v = self.encode_visual(g, p, q)?;
                let f = nn::linear(g, p, "query.proj", v)?;
                out.scores.push(self.regress(g, p, f)?);
            }
            return Ok(out);
        }
        let ispp = ispp.filter(|i| !i.is_empty()).ok_or(Error::EmptyPrompt)?;
        let own = ispp.scores();
        let values = prompt_scores.unwrap_or(&own);
        if values.len() != ispp.len() {
            return Err(Error::Shape(format!(
                "{} prompt scores for {} prompt pairs",
                values.len(),
                ispp.len()
            )));
        }
        if queries.is_empty() {
            return Ok(out);
        }
        out.prompt_scores = values.iter().map(|&s| g.variable(Tensor::scalar(s))).collect();
        let images: Vec<Arc<Image>> = ispp.pairs.iter().map(|q| q.image.clone()).collect();
        let fac = self.requirement(g, p, &images, &out.prompt_scores)?;
        for q in queries {
            let v = self.encode_visual(g, p, q)?;
            let ipf = self.fuse_image_prompt(g, p, v, fac)?;
            let fq = g.slice_rows(ipf, 0, 1)?;
            out.scores.push(self.regress(g, p, fq)?);
        }
        Ok(out)
    }

    /// Inference scores for a batch of query images.
    pub fn predict(&self, ispp: Option<&Ispp>, queries: &[Arc<Image>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let f = self.forward(&mut g, &p, ispp, None, queries)?;
        Ok(f.scores.iter().map(|&s| g.value(s).data()[0]).collect())
    }

    /// All intermediate features for one query.
    pub fn features(&self, ispp: &Ispp, query: &Image) -> Result<FeatureBundle> {
        if !self.config.use_prompt {
            return Err(Error::Config("model was built without the prompt pathway".into()));
        }
        if ispp.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let n = self.config.visual_dim;
        let mut isps = Vec::new();
        let mut fps = Vec::new();
        for pair in &ispp.pairs {
            let v = self.encode_visual(&mut g, &p, &pair.image)?;
            let s = g.constant(Tensor::scalar(pair.score));
            let e = g.expand(s, n)?;
            let isp = build_isp_feature(&mut g, v, e)?;
            isps.push(g.value(isp).clone());
            fps.push(self.encode_prompt(&mut g, &p, isp)?);
        }
        let fp = g.concat_rows(&fps)?;
        let fac = self.fuse_ispp(&mut g, &p, fp)?;
        let v = self.encode_visual(&mut g, &p, query)?;
        let ipf = self.fuse_image_prompt(&mut g, &p, v, fac)?;
        let fq = g.slice_rows(ipf, 0, 1)?;
        let score = self.regress(&mut g, &p, fq)?;
        Ok(FeatureBundle {
            isp_features: isps,
            prompt_features: g.value(fp).clone(),
            requirement_feature: g.value(fac).clone(),
            image_prompt_feature: g.value(ipf).clone(),
            query_feature: g.value(fq).clone(),
            score: g.value(score).data()[0],
        })
    }

    /// Inference visual feature of one image.
    pub fn visual_feature(&self, image: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let v = self.encode_visual(&mut g, &p, image)?;
        Ok(g.value(v).data().to_vec())
    }
}

/// `s` repeated `n` times as a `1 x n` row.
pub fn expand_score(s: f64, n: usize) -> Result<Vec<f64>> {
    if !s.is_finite() {
        return Err(Error::Config(format!("score {s} is not finite")));
    }
    Ok(vec![s; n])
}

/// Stacks the visual row over the score row.
pub fn build_isp_feature(g: &mut Graph, visual: Var, score: Var) -> Result<Var> {
    if g.shape(visual) != g.shape(score) || g.shape(visual).first() != Some(&1) {
        return Err(Error::Shape(format!(
            "ISP feature needs two 1xN rows, got {:?} and {:?}",
            g.shape(visual),
            g.shape(score)
        )));
    }
    g.concat_rows(&[visual, score])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(seed: u64, size: usize) -> Arc<Image> {
        use rand::Rng as _;
        let mut r = rng::stream(seed, 9);
        Arc::new(Image::from_fn(size, size, |_, _, _| r.random::<f64>()))
    }

    fn ispp(n: usize, size: usize) -> Ispp {
        Ispp {
            pairs: (0..n)
                .map(|i| crate::datasets::PromptPair {
                    id: format!("p{i}"),
                    image: noise_image(i as u64, size),
                    score: i as f64 / n as f64,
                })
                .collect(),
            source_dataset: "t".into(),
            strategy: "interval".into(),
        }
    }

    #[test]
    fn expand_examples() {
        assert_eq!(expand_score(0.5, 4).unwrap(), vec![0.5; 4]);
        assert_eq!(expand_score(0.0, 3).unwrap(), vec![0.0; 3]);
        assert!(expand_score(f64::NAN, 3).is_err());
    }

    #[test]
    fn isp_feature_stacks_visual_first() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::row(vec![1.0, 2.0]));
        let s = g.constant(Tensor::row(vec![3.0, 4.0]));
        let f = build_isp_feature(&mut g, v, s).unwrap();
        assert_eq!(g.value(f).shape(), &[2, 2]);
        assert_eq!(g.value(f).data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = g.constant(Tensor::row(vec![1.0]));
        assert!(build_isp_feature(&mut g, v, bad).is_err());
    }

    #[test]
    fn bundle_shapes_and_query_row() {
        let cfg = ModelConfig::miniature();
        let m = PromptIqa::new(cfg.clone(), 1).unwrap();
        let b = m.features(&ispp(3, 16), &noise_image(99, 16)).unwrap();
        assert_eq!(b.isp_features.len(), 3);
        assert_eq!(b.isp_features[0].shape(), &[2, 16]);
        assert_eq!(b.prompt_features.shape(), &[3, 16]);
        assert_eq!(b.requirement_feature.shape(), &[3, 16]);
        assert_eq!(b.image_prompt_feature.shape(), &[4, 16]);
        assert_eq!(b.query_feature.data(), b.image_prompt_feature.row_slice(0));
        let direct = m.predict(Some(&ispp(3, 16)), &[noise_image(99, 16)]).unwrap();
        assert_eq!(direct[0], b.score);
    }

    #[test]
    fn empty_prompt_errors_and_empty_batch_is_empty() {
        let m = PromptIqa::new(ModelConfig::miniature(), 1).unwrap();
        assert!(matches!(m.predict(None, &[noise_image(0, 16)]), Err(Error::EmptyPrompt)));
        assert!(m.predict(Some(&ispp(2, 16)), &[]).unwrap().is_empty());
    }

    #[test]
    fn zero_isp_maps_to_projection_bias() {
        let mut m = PromptIqa::new(ModelConfig::miniature(), 2).unwrap();
        let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        m.params_mut().get_mut("prompt.proj.bias").unwrap().data_mut().copy_from_slice(&bias);
        let mut g = Graph::new();
        let p = m.params().bind_frozen(&mut g);
        let zero = g.constant(Tensor::zeros(&[2, 16]));
        let out = m.encode_prompt(&mut g, &p, zero).unwrap();
        assert_eq!(g.value(out).data(), bias.as_slice());
    }

    #[test]
    fn regression_with_zero_weights_returns_bias() {
        let mut m = PromptIqa::new(ModelConfig::miniature(), 2).unwrap();
        for name in ["head.fc1.weight", "head.fc1.bias", "head.fc2.weight"] {
            m.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
        }
        m.params_mut().get_mut("head.fc2.bias").unwrap().data_mut()[0] = 0.37;
        let mut g = Graph::new();
        let p = m.params().bind_frozen(&mut g);
        let x = g.constant(Tensor::row((0..16).map(|i| i as f64 - 3.0).collect()));
        let y = m.regress(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.37]);
    }

    #[test]
    fn no_prompt_model_has_no_prompt_params() {
        let cfg = ModelConfig {
            use_prompt: false,
            ..ModelConfig::miniature()
        };
        let m = PromptIqa::new(cfg, 0).unwrap();
        assert!(m.params().names().all(|n| !n.starts_with("prompt.") && !n.starts_with("ispp.")));
        let q = [noise_image(5, 16)];
        assert_eq!(m.predict(None, &q).unwrap(), m.predict(Some(&ispp(4, 16)), &q).unwrap());
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            visual_dim: 30,
            ..ModelConfig::tiny()
        };
        assert!(bad.validate().is_err());
        let unknown = ModelConfig {
            encoder: "resnet".into(),
            ..ModelConfig::tiny()
        };
        assert!(matches!(unknown.validate(), Err(Error::UnknownEntry { .. })));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let m = PromptIqa::new(ModelConfig::miniature(), 0).unwrap();
        assert!(PromptIqa::from_params(ModelConfig::tiny(), m.params().clone()).is_err());
        assert!(PromptIqa::from_params(ModelConfig::miniature(), m.params().clone()).is_ok());
    }
}
