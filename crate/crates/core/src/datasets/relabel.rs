//! Full-reference relabelling: replaces each sample's label with a
//! full-reference metric computed against its group's clean reference,
//! simulating a new assessment requirement on the same images.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, DatasetSpec, LabelType, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::registry::{Named, Registry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    HigherBetter,
    LowerBetter,
}

impl Polarity {
    pub fn label_type(self) -> LabelType {
        match self {
            Polarity::HigherBetter => LabelType::Mos,
            Polarity::LowerBetter => LabelType::Dmos,
        }
    }
}

impl std::str::FromStr for Polarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher_better" => Ok(Polarity::HigherBetter),
            "lower_better" => Ok(Polarity::LowerBetter),
            _ => Err(Error::Config(format!(
                "polarity must be `higher_better` or `lower_better`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Polarity::HigherBetter => "higher_better",
            Polarity::LowerBetter => "lower_better",
        })
    }
}

/// A full-reference quality metric.
pub trait FrMetric: Named + Send + Sync {
    fn score(&self, image: &Image, reference: &Image) -> Result<f64>;
    /// The metric's natural direction.
    fn polarity(&self) -> Polarity;
}

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "image {}x{} vs reference {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean SSIM on luma with an 11-tap Gaussian window (sigma 1.5), valid
/// region only, unit data range. Smaller images shrink the window to fit.
#[derive(Debug, Default)]
pub struct Ssim;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

impl Ssim {
    pub fn compute(image: &Image, reference: &Image) -> Result<f64> {
        same_size(image, reference)?;
        let (h, w) = (image.height(), image.width());
        let k = SSIM_WINDOW.min(h).min(w);
        let taps = gaussian_taps(k, SSIM_SIGMA);
        let a = image.luma();
        let b = reference.luma();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let (mu_a, oh, ow) = filter_valid(&a, h, w, &taps);
        let (mu_b, ..) = filter_valid(&b, h, w, &taps);
        let (e_aa, ..) = filter_valid(&aa, h, w, &taps);
        let (e_bb, ..) = filter_valid(&bb, h, w, &taps);
        let (e_ab, ..) = filter_valid(&ab, h, w, &taps);
        let c1 = (SSIM_K1 * 1.0f64).powi(2);
        let c2 = (SSIM_K2 * 1.0f64).powi(2);
        let total: f64 = (0..oh * ow)
            .map(|i| {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
            })
            .sum();
        Ok(total / (oh * ow) as f64)
    }
}

impl Named for Ssim {
    fn name(&self) -> &str {
        "ssim"
    }
}

impl FrMetric for Ssim {
    fn score(&self, image: &Image, reference: &Image) -> Result<f64> {
        Ssim::compute(image, reference)
    }
    fn polarity(&self) -> Polarity {
        Polarity::HigherBetter
    }
}

/// Mean squared error over all channels.
#[derive(Debug, Default)]
pub struct Mse;

impl Named for Mse {
    fn name(&self) -> &str {
        "mse"
    }
}

impl FrMetric for Mse {
    fn score(&self, image: &Image, reference: &Image) -> Result<f64> {
        same_size(image, reference)?;
        let n = image.data().len() as f64;
        Ok(image
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n)
    }
    fn polarity(&self) -> Polarity {
        Polarity::LowerBetter
    }
}

/// Peak signal-to-noise ratio in dB, capped at 100 for identical images.
#[derive(Debug, Default)]
pub struct Psnr;

impl Named for Psnr {
    fn name(&self) -> &str {
        "psnr"
    }
}

impl FrMetric for Psnr {
    fn score(&self, image: &Image, reference: &Image) -> Result<f64> {
        let mse = Mse.score(image, reference)?;
        Ok(if mse <= 1e-10 { 100.0 } else { -10.0 * mse.log10() })
    }
    fn polarity(&self) -> Polarity {
        Polarity::HigherBetter
    }
}

type MetricFn = dyn Fn(&Image, &Image) -> Result<f64> + Send + Sync;

/// Adapter for metrics implemented elsewhere (learned perceptual metrics,
/// feature-similarity indices, external tools).
pub struct ExternalMetric {
    name: String,
    polarity: Polarity,
    f: Box<MetricFn>,
}

impl ExternalMetric {
    pub fn new(
        name: impl Into<String>,
        polarity: Polarity,
        f: impl Fn(&Image, &Image) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            polarity,
            f: Box::new(f),
        }
    }
}

impl Named for ExternalMetric {
    fn name(&self) -> &str {
        &self.name
    }
}

impl FrMetric for ExternalMetric {
    fn score(&self, image: &Image, reference: &Image) -> Result<f64> {
        (self.f)(image, reference)
    }
    fn polarity(&self) -> Polarity {
        self.polarity
    }
}

pub fn fr_metrics() -> Registry<dyn FrMetric> {
    let mut r: Registry<dyn FrMetric> = Registry::new("full-reference metric");
    r.register(Arc::new(Ssim));
    r.register(Arc::new(Mse));
    r.register(Arc::new(Psnr));
    r
}

/// Replaces every raw label with `metric(image, reference)`. The label type
/// follows `polarity`; the score range is reset to the observed one.
/// Normalization is left to the caller.
pub fn relabel_with_fr_metric(
    dataset: &Dataset,
    references: &BTreeMap<String, Arc<Image>>,
    metric: &dyn FrMetric,
    polarity: Polarity,
) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let group = s
            .group_id
            .as_deref()
            .ok_or_else(|| Error::MissingGroup(s.id.clone()))?;
        let reference = references
            .get(group)
            .ok_or_else(|| Error::MissingReference(group.to_string()))?;
        let image = if (s.image.height(), s.image.width()) == (reference.height(), reference.width()) {
            s.image.clone()
        } else {
            Arc::new(s.image.resize(reference.height(), reference.width())?)
        };
        let score = metric.score(&image, reference)?;
        samples.push(Sample {
            raw_score: score,
            norm_score: f64::NAN,
            ..s.clone()
        });
    }
    let lo = samples.iter().map(|s| s.raw_score).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.raw_score).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let spec = DatasetSpec {
        name: format!("{}@{}", dataset.spec.name, metric.name()),
        label_type: polarity.label_type(),
        score_lo: lo,
        score_hi: hi,
        has_reference_groups: true,
        shortest_side: dataset.spec.shortest_side,
    };
    Dataset::new(spec, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic::{synth_requirement_dataset, SynthConfig};
    use crate::evaluation::metrics::srocc;

    /// Direct transcription of mean SSIM: for every valid window position
    /// take Gaussian-weighted means, variances and covariance with an
    /// explicit 2-D weight table.
    fn ssim_oracle(x: &Image, y: &Image) -> f64 {
        let (h, w) = (x.height(), x.width());
        let k = 11.min(h).min(w);
        let c = (k as f64 - 1.0) / 2.0;
        let mut weights = vec![vec![0.0; k]; k];
        let mut total = 0.0;
        for (i, row) in weights.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let lx = x.luma();
        let ly = y.luma();
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut acc = 0.0;
        let mut count = 0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = weights[i][j] / total;
                        mx += wt * lx[(oy + i) * w + ox + j];
                        my += wt * ly[(oy + i) * w + ox + j];
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = weights[i][j] / total;
                        let dx = lx[(oy + i) * w + ox + j] - mx;
                        let dy = ly[(oy + i) * w + ox + j] - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cxy += wt * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    fn fixture() -> Image {
        Image::from_fn(32, 32, |y, x, c| {
            (0.5 + 0.3 * ((x as f64 * 0.4 + c as f64).sin() * (y as f64 * 0.3).cos())).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn identical_images_score_one() {
        let img = fixture();
        assert_eq!(Ssim.score(&img, &img).unwrap(), 1.0);
        assert_eq!(Mse.score(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn shifted_image_matches_oracle() {
        let r = fixture();
        let shifted = r.map(|v| (v + 0.1).min(1.0));
        let fast = Ssim.score(&shifted, &r).unwrap();
        let slow = ssim_oracle(&shifted, &r);
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        assert!(fast < 1.0 && fast > 0.5);

        let noisy = Image::from_fn(32, 32, |y, x, c| r.get(y, x, c) * (0.7 + 0.3 * (((x * 7 + y * 3 + c) % 5) as f64 / 4.0)));
        assert!((Ssim.score(&noisy, &r).unwrap() - ssim_oracle(&noisy, &r)).abs() < 1e-10);
    }

    #[test]
    fn small_images_shrink_the_window() {
        let a = Image::from_fn(6, 9, |y, x, _| (y * x) as f64 / 54.0);
        let b = a.map(|v| v * 0.9);
        assert!((Ssim.score(&b, &a).unwrap() - ssim_oracle(&b, &a)).abs() < 1e-10);
    }

    #[test]
    fn lower_better_metric_gives_dmos() {
        let s = synth_requirement_dataset(&SynthConfig::new("t", "identity", 40, 0.0, 2)).unwrap();
        let r = relabel_with_fr_metric(&s.dataset, &s.references, &Mse, Polarity::LowerBetter).unwrap();
        assert_eq!(r.spec.label_type, LabelType::Dmos);
        let original: Vec<f64> = s.dataset.samples.iter().map(|s| s.raw_score).collect();
        let relabeled: Vec<f64> = r.samples.iter().map(|s| s.raw_score).collect();
        assert!(srocc(&relabeled, &original) < 0.0);

        let r = relabel_with_fr_metric(&s.dataset, &s.references, &Ssim, Polarity::HigherBetter).unwrap();
        assert_eq!(r.spec.label_type, LabelType::Mos);
        let relabeled: Vec<f64> = r.samples.iter().map(|s| s.raw_score).collect();
        assert!(srocc(&relabeled, &original) > 0.5);
    }

    #[test]
    fn missing_reference_is_an_error() {
        let s = synth_requirement_dataset(&SynthConfig::new("t", "identity", 20, 0.0, 2)).unwrap();
        let mut refs = s.references.clone();
        refs.pop_first();
        assert!(matches!(
            relabel_with_fr_metric(&s.dataset, &refs, &Ssim, Polarity::HigherBetter),
            Err(Error::MissingReference(_))
        ));
    }

    #[test]
    fn external_metrics_plug_in() {
        let m = ExternalMetric::new("const", Polarity::LowerBetter, |_, _| Ok(0.25));
        let img = fixture();
        assert_eq!(m.score(&img, &img).unwrap(), 0.25);
        assert_eq!(m.polarity(), Polarity::LowerBetter);
    }
}
