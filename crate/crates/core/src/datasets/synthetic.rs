//! Procedural benchmark datasets whose labels follow a chosen monotone
//! "requirement" of an underlying degradation level.
//!
//! Each reference group is a smooth random pattern; its members are copies
//! degraded by additive Gaussian noise (default) or Gaussian blur whose
//! strength is proportional to a level `d` in `[0, 1]`. The raw label is
//! `requirement(1 - d)` plus optional label noise, so increasing
//! requirements behave like MOS and decreasing ones like DMOS.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, DatasetSpec, LabelType, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::registry::{Named, Registry};
use crate::rng::{self, Rng};

/// A strictly monotone map of quality `q` in `[0, 1]` to a raw label.
pub trait RequirementTransform: Named + Send + Sync {
    fn apply(&self, q: f64) -> f64;
}

struct Power {
    name: String,
    exponent: f64,
    flipped: bool,
}

impl Named for Power {
    fn name(&self) -> &str {
        &self.name
    }
}

impl RequirementTransform for Power {
    fn apply(&self, q: f64) -> f64 {
        let v = q.powf(self.exponent);
        if self.flipped {
            1.0 - v
        } else {
            v
        }
    }
}

struct Logistic {
    name: String,
    steepness: f64,
}

impl Named for Logistic {
    fn name(&self) -> &str {
        &self.name
    }
}

impl RequirementTransform for Logistic {
    fn apply(&self, q: f64) -> f64 {
        let f = |x: f64| 1.0 / (1.0 + (-self.steepness * (x - 0.5)).exp());
        (f(q) - f(0.0)) / (f(1.0) - f(0.0))
    }
}

/// Piecewise-linear interpolation through equally spaced knots.
struct Table {
    name: String,
    knots: Vec<f64>,
}

impl Named for Table {
    fn name(&self) -> &str {
        &self.name
    }
}

impl RequirementTransform for Table {
    fn apply(&self, q: f64) -> f64 {
        let segs = (self.knots.len() - 1) as f64;
        let pos = (q.clamp(0.0, 1.0) * segs).min(segs);
        let i = (pos.floor() as usize).min(self.knots.len() - 2);
        let f = pos - i as f64;
        self.knots[i] * (1.0 - f) + self.knots[i + 1] * f
    }
}

fn power(name: &str, exponent: f64, flipped: bool) -> Arc<dyn RequirementTransform> {
    Arc::new(Power {
        name: name.to_string(),
        exponent,
        flipped,
    })
}

/// Built-in named requirements.
pub fn requirements() -> Registry<dyn RequirementTransform> {
    let mut r: Registry<dyn RequirementTransform> = Registry::new("requirement");
    r.register(power("identity", 1.0, false));
    r.register(power("square", 2.0, false));
    r.register(power("sqrt", 0.5, false));
    r.register(power("cube", 3.0, false));
    r.register(power("flip", 1.0, true));
    r.register(power("flip_square", 2.0, true));
    r.register(power("flip_sqrt", 0.5, true));
    r.register(Arc::new(Logistic {
        name: "logistic".into(),
        steepness: 8.0,
    }));
    r
}

/// Whether a validated requirement rises with quality.
pub struct Requirement {
    pub transform: Arc<dyn RequirementTransform>,
    pub increasing: bool,
}

/// Resolves a descriptor: a registry name, `power:<k>`, `flip_power:<k>`,
/// `logistic:<steepness>` or `table:<v0>,<v1>,...`. The result must be
/// strictly monotone on `[0, 1]`.
pub fn parse_requirement(descriptor: &str) -> Result<Requirement> {
    let bad = |msg: &str| Error::Config(format!("requirement `{descriptor}`: {msg}"));
    let transform: Arc<dyn RequirementTransform> = match descriptor.split_once(':') {
        None => requirements().get(descriptor)?,
        Some((kind, arg)) => {
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("expected a number"));
            match kind {
                "power" | "flip_power" => {
                    let k = num(arg)?;
                    if !(k > 0.0 && k.is_finite()) {
                        return Err(Error::NonMonotone(descriptor.to_string()));
                    }
                    power(descriptor, k, kind == "flip_power")
                }
                "logistic" => {
                    let k = num(arg)?;
                    if k == 0.0 || !k.is_finite() {
                        return Err(Error::NonMonotone(descriptor.to_string()));
                    }
                    Arc::new(Logistic {
                        name: descriptor.to_string(),
                        steepness: k,
                    })
                }
                "table" => {
                    let knots = arg.split(',').map(num).collect::<Result<Vec<_>>>()?;
                    if knots.len() < 2 {
                        return Err(bad("a table needs at least two knots"));
                    }
                    Arc::new(Table {
                        name: descriptor.to_string(),
                        knots,
                    })
                }
                _ => return Err(bad("unknown transform kind")),
            }
        }
    };
    let increasing = check_monotone(transform.as_ref())
        .ok_or_else(|| Error::NonMonotone(descriptor.to_string()))?;
    Ok(Requirement { transform, increasing })
}

/// `Some(true)` for strictly increasing, `Some(false)` for strictly
/// decreasing on a 1001-point grid, `None` otherwise.
fn check_monotone(t: &dyn RequirementTransform) -> Option<bool> {
    let values: Vec<f64> = (0..=1000).map(|i| t.apply(i as f64 / 1000.0)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if values.windows(2).all(|w| w[1] > w[0]) {
        Some(true)
    } else if values.windows(2).all(|w| w[1] < w[0]) {
        Some(false)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    #[default]
    Noise,
    Blur,
}

/// Pixel noise standard deviation at `d = 1`.
pub const NOISE_AMPLITUDE: f64 = 0.25;
/// Blur sigma (pixels) at `d = 1`.
pub const BLUR_SIGMA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    pub requirement: String,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub degradation: Degradation,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_levels")]
    pub levels_per_group: usize,
}

fn default_samples() -> usize {
    200
}
fn default_image_size() -> usize {
    32
}
fn default_levels() -> usize {
    5
}

impl SynthConfig {
    pub fn new(name: &str, requirement: &str, n_samples: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            requirement: requirement.to_string(),
            n_samples,
            noise_sigma,
            seed,
            degradation: Degradation::Noise,
            image_size: default_image_size(),
            levels_per_group: default_levels(),
        }
    }
}

pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Clean image of every reference group.
    pub references: BTreeMap<String, Arc<Image>>,
    /// Degradation level of each sample, parallel to `dataset.samples`.
    pub levels: Vec<f64>,
}

/// A smooth random pattern: a blend of two colours along a tilted
/// sinusoid, modulated by a soft blob.
pub fn reference_pattern(size: usize, rng: &mut Rng) -> Image {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let fx = rng.random_range(0.3..1.5);
    let fy = rng.random_range(0.3..1.5);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (bx, by) = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
    let s = size as f64;
    Image::from_fn(size, size, |y, x, c| {
        let (u, v) = (x as f64 / s, y as f64 / s);
        let t = 0.5 + 0.5 * (2.0 * PI * (fx * u + fy * v) + phase).sin();
        let blob = (-((u - bx).powi(2) + (v - by).powi(2)) / 0.08).exp();
        (c0[c] * (1.0 - t) + c1[c] * t + 0.15 * blob).clamp(0.0, 1.0)
    })
}

/// Degrades `reference` to level `d`.
pub fn degrade(reference: &Image, d: f64, kind: Degradation, rng: &mut Rng) -> Image {
    match kind {
        Degradation::Noise => {
            let sigma = NOISE_AMPLITUDE * d;
            if sigma <= 0.0 {
                return reference.clone();
            }
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            reference.map(|v| v + normal.sample(rng)).clamp01()
        }
        Degradation::Blur => reference.gaussian_blur(BLUR_SIGMA * d),
    }
}

/// Raw label for degradation level `d` before label noise.
pub fn clean_score(req: &Requirement, d: f64) -> f64 {
    req.transform.apply(1.0 - d)
}

const SYNTH_STREAM: u64 = 0x5e_0000;

/// Generates a grouped dataset following `cfg.requirement`.
pub fn synth_requirement_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    if cfg.n_samples < 20 {
        return Err(Error::Config(format!(
            "synthetic dataset `{}` needs at least 20 samples, got {}",
            cfg.name, cfg.n_samples
        )));
    }
    if cfg.levels_per_group == 0 || cfg.image_size < 8 {
        return Err(Error::Config("levels_per_group >= 1 and image_size >= 8 required".into()));
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Config("noise_sigma must be non-negative".into()));
    }
    let req = parse_requirement(&cfg.requirement)?;
    let mut rng = rng::stream(cfg.seed, SYNTH_STREAM);
    let label_noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("sigma"));

    let mut references = BTreeMap::new();
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut levels = Vec::with_capacity(cfg.n_samples);
    let groups = cfg.n_samples.div_ceil(cfg.levels_per_group);
    for g in 0..groups {
        let group = format!("{}-g{g:03}", cfg.name);
        let reference = Arc::new(reference_pattern(cfg.image_size, &mut rng));
        let members = cfg.levels_per_group.min(cfg.n_samples - samples.len());
        for j in 0..members {
            // stratified over the group so every reference spans all levels
            let d = ((j as f64 + rng.random::<f64>()) / cfg.levels_per_group as f64).clamp(0.0, 1.0);
            let img = degrade(&reference, d, cfg.degradation, &mut rng);
            let noise = label_noise.map_or(0.0, |n| n.sample(&mut rng));
            let raw = clean_score(&req, d) + noise;
            samples.push(Sample::new(format!("{group}-{j}"), Arc::new(img), raw).with_group(&group));
            levels.push(d);
        }
        references.insert(group, reference);
    }

    let ends = [clean_score(&req, 0.0), clean_score(&req, 1.0)];
    let pad = 6.0 * cfg.noise_sigma;
    let lo = ends[0].min(ends[1]) - pad;
    let hi = ends[0].max(ends[1]) + pad;
    for s in &mut samples {
        s.raw_score = s.raw_score.clamp(lo, hi);
    }
    let spec = DatasetSpec {
        name: cfg.name.clone(),
        label_type: if req.increasing { LabelType::Mos } else { LabelType::Dmos },
        score_lo: lo,
        score_hi: hi,
        has_reference_groups: true,
        shortest_side: None,
    };
    Ok(SyntheticDataset {
        dataset: Dataset::new(spec, samples)?,
        references,
        levels,
    })
}
