//! Repeated-split evaluation, prompt-effect experiments, prompt-size sweeps
//! and the cross-requirement generalization grid.

pub mod metrics;
pub mod plot;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::sampling::samplers;
use crate::datasets::{prepare_split, Dataset, Ispp, PromptPair, Sample, SplitProtocol};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::PromptIqa;
use crate::registry::{Named, Registry};
use crate::rng::{self, Rng};
use crate::training::{finetune_on_isps, FinetuneConfig};

use metrics::{mean, median, plcc, srocc};

/// Anything that scores query samples, optionally against a prompt.
pub trait Scorer {
    fn uses_prompt(&self) -> bool;
    fn score(&self, ispp: Option<&Ispp>, queries: &[Sample]) -> Result<Vec<f64>>;
}

impl Scorer for PromptIqa {
    fn uses_prompt(&self) -> bool {
        PromptIqa::uses_prompt(self)
    }

    fn score(&self, ispp: Option<&Ispp>, queries: &[Sample]) -> Result<Vec<f64>> {
        let images: Vec<Arc<Image>> = queries.iter().map(|q| q.image.clone()).collect();
        self.predict(ispp, &images)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub protocol: SplitProtocol,
    pub sampler: String,
    pub n_prompts: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocol: SplitProtocol::default(),
            sampler: "interval".into(),
            n_prompts: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub mode: String,
    pub strategy: String,
    pub repeat: usize,
    pub srocc: f64,
    pub plcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub dataset: String,
    pub mode: String,
    pub strategy: String,
    pub repeats: usize,
    pub srocc: f64,
    pub plcc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    /// Medians per `(dataset, mode, strategy)`; a NaN in any repeat makes
    /// the median NaN.
    pub fn medians(&self) -> Vec<MedianRow> {
        let mut groups: BTreeMap<(&str, &str, &str), Vec<&EvalRow>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.dataset.as_str(), r.mode.as_str(), r.strategy.as_str()))
                .or_default()
                .push(r);
        }
        groups
            .into_iter()
            .map(|((d, m, s), rows)| MedianRow {
                dataset: d.into(),
                mode: m.into(),
                strategy: s.into(),
                repeats: rows.len(),
                srocc: median(&rows.iter().map(|r| r.srocc).collect::<Vec<_>>()),
                plcc: median(&rows.iter().map(|r| r.plcc).collect::<Vec<_>>()),
            })
            .collect()
    }

    pub fn srocc_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.srocc).collect()
    }

    pub fn median_srocc(&self) -> f64 {
        median(&self.srocc_values())
    }

    pub fn mean_srocc(&self) -> f64 {
        mean(&self.srocc_values())
    }

    /// `dataset,mode,strategy,repeat,srocc,plcc`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Medians as JSON; undefined correlations become `null`.
    pub fn write_json_summary(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.medians())? + "\n")?;
        Ok(())
    }
}

/// How a prompt is altered before scoring.
pub trait PromptEffect: Named + Send + Sync {
    fn perturb(&self, ispp: &Ispp, rng: &mut Rng) -> Ispp;
}

struct Standard;
struct RandomImages;
struct RandomScores;
struct RandomBoth;
struct InvertScores;

fn noise_like(img: &Image, rng: &mut Rng) -> Arc<Image> {
    Arc::new(Image::from_fn(img.height(), img.width(), |_, _, _| rng.random::<f64>()))
}

fn with_random_images(ispp: &Ispp, rng: &mut Rng) -> Ispp {
    let mut out = ispp.clone();
    for p in &mut out.pairs {
        p.image = noise_like(&p.image, rng);
    }
    out
}

fn with_random_scores(ispp: &Ispp, rng: &mut Rng) -> Ispp {
    let scores: Vec<f64> = (0..ispp.len()).map(|_| rng.random::<f64>()).collect();
    ispp.with_scores(&scores)
}

macro_rules! named {
    ($t:ty, $n:literal) => {
        impl Named for $t {
            fn name(&self) -> &str {
                $n
            }
        }
    };
}

named!(Standard, "standard");
named!(RandomImages, "random_images");
named!(RandomScores, "random_scores");
named!(RandomBoth, "random_both");
named!(InvertScores, "invert_scores");

impl PromptEffect for Standard {
    fn perturb(&self, ispp: &Ispp, _rng: &mut Rng) -> Ispp {
        ispp.clone()
    }
}

impl PromptEffect for RandomImages {
    fn perturb(&self, ispp: &Ispp, rng: &mut Rng) -> Ispp {
        with_random_images(ispp, rng)
    }
}

impl PromptEffect for RandomScores {
    fn perturb(&self, ispp: &Ispp, rng: &mut Rng) -> Ispp {
        with_random_scores(ispp, rng)
    }
}

impl PromptEffect for RandomBoth {
    fn perturb(&self, ispp: &Ispp, rng: &mut Rng) -> Ispp {
        with_random_scores(&with_random_images(ispp, rng), rng)
    }
}

impl PromptEffect for InvertScores {
    fn perturb(&self, ispp: &Ispp, _rng: &mut Rng) -> Ispp {
        ispp.with_scores(&ispp.scores().iter().map(|s| 1.0 - s).collect::<Vec<_>>())
    }
}

pub fn prompt_effects() -> Registry<dyn PromptEffect> {
    let mut r: Registry<dyn PromptEffect> = Registry::new("prompt-effect strategy");
    r.register(Arc::new(Standard));
    r.register(Arc::new(RandomImages));
    r.register(Arc::new(RandomScores));
    r.register(Arc::new(RandomBoth));
    r.register(Arc::new(InvertScores));
    r
}

/// Normalized train/test splits for one repeat; group-aware only when the
/// dataset has groups.
pub fn eval_split(ds: &Dataset, protocol: &SplitProtocol, repeat: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let protocol = SplitProtocol {
        group_aware: protocol.group_aware && ds.spec.has_reference_groups,
        ..protocol.clone()
    };
    prepare_split(&ds.samples, &protocol, repeat)
}

const EFFECT_STREAM: u64 = 0xef_0000;

fn correlations(model: &dyn Scorer, ispp: Option<&Ispp>, test: &[Sample]) -> Result<(f64, f64)> {
    let pred = model.score(ispp, test)?;
    let gt: Vec<f64> = test.iter().map(|s| s.norm_score).collect();
    Ok((srocc(&pred, &gt), plcc(&pred, &gt)))
}

fn prompt_for(train: &[Sample], ds: &str, opts: &EvalOptions, n: usize, repeat: usize) -> Result<Ispp> {
    samplers()
        .get(&opts.sampler)?
        .sample(train, n, opts.seed.wrapping_add(repeat as u64), ds)
}

/// For each repeat: prompt from the training split, altered by `effect`,
/// then correlations over the test split.
pub fn evaluate_with(
    model: &dyn Scorer,
    dataset: &Dataset,
    opts: &EvalOptions,
    effect: &dyn PromptEffect,
    mode: &str,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for repeat in 0..opts.protocol.repeats {
        let (train, test) = eval_split(dataset, &opts.protocol, repeat)?;
        let ispp = if model.uses_prompt() {
            let base = prompt_for(&train, dataset.name(), opts, opts.n_prompts, repeat)?;
            let mut r = rng::stream(opts.seed, EFFECT_STREAM + repeat as u64);
            Some(effect.perturb(&base, &mut r))
        } else {
            None
        };
        let (s, p) = correlations(model, ispp.as_ref(), &test)?;
        report.rows.push(EvalRow {
            dataset: dataset.name().to_string(),
            mode: mode.to_string(),
            strategy: effect.name().to_string(),
            repeat,
            srocc: s,
            plcc: p,
        });
    }
    Ok(report)
}

/// Like [`evaluate`] but every repeat uses the same given prompt.
pub fn evaluate_fixed(model: &dyn Scorer, dataset: &Dataset, protocol: &SplitProtocol, ispp: &Ispp) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for repeat in 0..protocol.repeats {
        let (_, test) = eval_split(dataset, protocol, repeat)?;
        let (s, p) = correlations(model, Some(ispp), &test)?;
        report.rows.push(EvalRow {
            dataset: dataset.name().to_string(),
            mode: "eval".into(),
            strategy: format!("fixed:{}", ispp.strategy),
            repeat,
            srocc: s,
            plcc: p,
        });
    }
    Ok(report)
}

pub fn evaluate(model: &dyn Scorer, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(model, dataset, opts, &Standard, "eval")
}

pub fn prompt_effect(model: &dyn Scorer, dataset: &Dataset, opts: &EvalOptions, strategy: &str) -> Result<EvalReport> {
    if !model.uses_prompt() {
        return Err(Error::Config("prompt-effect experiments need a model with prompts".into()));
    }
    let effect = prompt_effects().get(strategy)?;
    evaluate_with(model, dataset, opts, effect.as_ref(), "prompt_effect")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub srocc: f64,
    pub plcc: f64,
    pub mean_srocc: f64,
    pub mean_plcc: f64,
    /// `ok` or the error that stopped this size.
    pub status: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub detail: EvalReport,
}

impl SweepReport {
    pub fn point(&self, n: usize) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.n == n)
    }

    /// One row per size: `n,srocc,plcc,mean_srocc,mean_plcc,status`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn svg(&self, title: &str) -> String {
        let pts = |f: fn(&SweepPoint) -> f64| -> Vec<(f64, f64)> {
            self.points.iter().map(|p| (p.n as f64, f(p))).collect()
        };
        plot::line_chart(
            title,
            "number of prompt pairs",
            "median correlation",
            &[("SROCC", pts(|p| p.srocc)), ("PLCC", pts(|p| p.plcc))],
        )
    }
}

/// Evaluates at each prompt size with the same seeds. A size that cannot
/// be served is recorded with its error and the rest still run.
pub fn ispp_size_sweep(model: &dyn Scorer, dataset: &Dataset, sizes: &[usize], opts: &EvalOptions) -> Result<SweepReport> {
    if !model.uses_prompt() {
        return Err(Error::Config("prompt-size sweeps need a model with prompts".into()));
    }
    let mut out = SweepReport::default();
    for &n in sizes {
        let o = EvalOptions {
            n_prompts: n,
            ..opts.clone()
        };
        match evaluate_with(model, dataset, &o, &Standard, &format!("n={n}")) {
            Ok(rep) => {
                let s = rep.srocc_values();
                let p: Vec<f64> = rep.rows.iter().map(|r| r.plcc).collect();
                out.points.push(SweepPoint {
                    n,
                    srocc: median(&s),
                    plcc: median(&p),
                    mean_srocc: mean(&s),
                    mean_plcc: mean(&p),
                    status: "ok".into(),
                });
                out.detail.extend(rep);
            }
            Err(e @ (Error::NotEnoughSamples { .. } | Error::EmptyPrompt)) => out.points.push(SweepPoint {
                n,
                srocc: f64::NAN,
                plcc: f64::NAN,
                mean_srocc: f64::NAN,
                mean_plcc: f64::NAN,
                status: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrainingMode {
    #[serde(rename = "SDT")]
    Sdt,
    #[serde(rename = "MDT")]
    Mdt,
    #[serde(rename = "SDT&FT")]
    SdtFt,
    #[serde(rename = "MDT&FT")]
    MdtFt,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 4] = [TrainingMode::Sdt, TrainingMode::Mdt, TrainingMode::SdtFt, TrainingMode::MdtFt];

    /// The mode an FT mode fine-tunes from.
    pub fn base(self) -> Option<TrainingMode> {
        match self {
            TrainingMode::SdtFt => Some(TrainingMode::Sdt),
            TrainingMode::MdtFt => Some(TrainingMode::Mdt),
            _ => None,
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::Sdt => "SDT",
            TrainingMode::Mdt => "MDT",
            TrainingMode::SdtFt => "SDT&FT",
            TrainingMode::MdtFt => "MDT&FT",
        })
    }
}

impl FromStr for TrainingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::UnknownEntry {
                kind: "training mode",
                name: s.into(),
                known: "SDT, MDT, SDT&FT, MDT&FT".into(),
            })
    }
}

/// Models keyed by `(family, mode)`. Missing FT entries of a prompt-free
/// family are derived by fine-tuning its base-mode model on the prompt
/// pairs of each repeat.
#[derive(Default)]
pub struct ModelGrid<'a> {
    pub models: BTreeMap<(String, TrainingMode), &'a PromptIqa>,
}

impl<'a> ModelGrid<'a> {
    pub fn insert(&mut self, family: &str, mode: TrainingMode, model: &'a PromptIqa) {
        self.models.insert((family.to_string(), mode), model);
    }

    fn families(&self) -> Vec<String> {
        let mut f: Vec<String> = self.models.keys().map(|(f, _)| f.clone()).collect();
        f.dedup();
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRow {
    pub dataset: String,
    pub family: String,
    pub mode: String,
    pub srocc: f64,
    pub plcc: f64,
    /// `ok` or `absent`.
    pub status: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneralizationReport {
    pub rows: Vec<GeneralizationRow>,
    pub detail: EvalReport,
}

impl GeneralizationReport {
    pub fn get(&self, dataset: &str, family: &str, mode: TrainingMode) -> Option<&GeneralizationRow> {
        let mode = mode.to_string();
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.family == family && r.mode == mode)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// PLCC grid: one line per `(family, mode)`, one column per dataset.
    pub fn grid_csv(&self) -> String {
        let mut datasets: Vec<&str> = Vec::new();
        let mut lines: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
            if !lines.contains(&(r.family.as_str(), r.mode.as_str())) {
                lines.push((&r.family, &r.mode));
            }
        }
        let mut out = format!("model,mode,{}\n", datasets.join(","));
        for (fam, mode) in lines {
            let cells: Vec<String> = datasets
                .iter()
                .map(|d| {
                    self.rows
                        .iter()
                        .find(|r| r.dataset == *d && r.family == fam && r.mode == mode)
                        .map_or_else(String::new, |r| {
                            if r.status == "ok" {
                                format!("{:.4}", r.plcc)
                            } else {
                                r.status.clone()
                            }
                        })
                })
                .collect();
            out.push_str(&format!("{fam},{mode},{}\n", cells.join(",")));
        }
        out
    }
}

fn pairs_of(ispp: &Ispp) -> Vec<PromptPair> {
    ispp.pairs.clone()
}

/// Scores every `(family, mode)` on every dataset. Prompt models get the
/// dataset's own prompt; FT variants of prompt-free models are tuned on
/// that same prompt. Combinations without a model are marked absent.
pub fn generalization_suite(
    grid: &ModelGrid<'_>,
    datasets: &[Dataset],
    modes: &[TrainingMode],
    opts: &EvalOptions,
    finetune: &FinetuneConfig,
) -> Result<GeneralizationReport> {
    let mut out = GeneralizationReport::default();
    for ds in datasets {
        for family in grid.families() {
            for &mode in modes {
                let direct = grid.models.get(&(family.clone(), mode)).copied();
                let derived = mode
                    .base()
                    .and_then(|b| grid.models.get(&(family.clone(), b)).copied())
                    .filter(|m| !m.uses_prompt());
                let rep = match (direct, derived) {
                    (Some(m), _) => Some(evaluate_with(m, ds, opts, &Standard, &mode.to_string())?),
                    (None, Some(base)) => {
                        let mut rep = EvalReport::default();
                        for repeat in 0..opts.protocol.repeats {
                            let (train, test) = eval_split(ds, &opts.protocol, repeat)?;
                            let ispp = prompt_for(&train, ds.name(), opts, opts.n_prompts, repeat)?;
                            let (tuned, _) = finetune_on_isps(base, &pairs_of(&ispp), finetune)?;
                            let (s, p) = correlations(&tuned, None, &test)?;
                            rep.rows.push(EvalRow {
                                dataset: ds.name().to_string(),
                                mode: mode.to_string(),
                                strategy: "standard".into(),
                                repeat,
                                srocc: s,
                                plcc: p,
                            });
                        }
                        Some(rep)
                    }
                    (None, None) => None,
                };
                let row = match &rep {
                    Some(r) => GeneralizationRow {
                        dataset: ds.name().to_string(),
                        family: family.clone(),
                        mode: mode.to_string(),
                        srocc: r.median_srocc(),
                        plcc: median(&r.rows.iter().map(|x| x.plcc).collect::<Vec<_>>()),
                        status: "ok".into(),
                    },
                    None => GeneralizationRow {
                        dataset: ds.name().to_string(),
                        family: family.clone(),
                        mode: mode.to_string(),
                        srocc: f64::NAN,
                        plcc: f64::NAN,
                        status: "absent".into(),
                    },
                };
                out.rows.push(row);
                if let Some(r) = rep {
                    out.detail.extend(r);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic::{synth_requirement_dataset, SynthConfig};

    /// Returns each query's own normalized label.
    struct Oracle;
    impl Scorer for Oracle {
        fn uses_prompt(&self) -> bool {
            true
        }
        fn score(&self, ispp: Option<&Ispp>, q: &[Sample]) -> Result<Vec<f64>> {
            ispp.ok_or(Error::EmptyPrompt)?;
            Ok(q.iter().map(|s| s.norm_score).collect())
        }
    }

    struct Constant;
    impl Scorer for Constant {
        fn uses_prompt(&self) -> bool {
            false
        }
        fn score(&self, _: Option<&Ispp>, q: &[Sample]) -> Result<Vec<f64>> {
            Ok(vec![0.5; q.len()])
        }
    }

    /// Reads the prompt: correlation of prompt scores with the hidden
    /// level decides the output's direction.
    struct PromptReader;
    impl Scorer for PromptReader {
        fn uses_prompt(&self) -> bool {
            true
        }
        fn score(&self, ispp: Option<&Ispp>, q: &[Sample]) -> Result<Vec<f64>> {
            let ispp = ispp.ok_or(Error::EmptyPrompt)?;
            let bright: Vec<f64> = ispp.pairs.iter().map(|p| p.image.data()[0]).collect();
            let dir = srocc(&bright, &ispp.scores()).signum();
            Ok(q.iter().map(|s| dir * s.image.data()[0]).collect())
        }
    }

    fn dataset() -> Dataset {
        synth_requirement_dataset(&SynthConfig::new("d", "identity", 60, 0.0, 1))
            .unwrap()
            .dataset
    }

    fn opts() -> EvalOptions {
        EvalOptions {
            protocol: SplitProtocol {
                repeats: 3,
                ..Default::default()
            },
            n_prompts: 5,
            ..Default::default()
        }
    }

    #[test]
    fn oracle_model_scores_one() {
        let rep = evaluate(&Oracle, &dataset(), &opts()).unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert!(rep.rows.iter().all(|r| r.srocc == 1.0 && (r.plcc - 1.0).abs() < 1e-12));
        assert_eq!(rep.medians().len(), 1);
    }

    #[test]
    fn constant_model_records_nan() {
        let rep = evaluate(&Constant, &dataset(), &opts()).unwrap();
        assert!(rep.rows.iter().all(|r| r.srocc.is_nan() && r.plcc.is_nan()));
        assert!(rep.medians()[0].srocc.is_nan());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        rep.write_json_summary(&p).unwrap();
        assert!(std::fs::read_to_string(p).unwrap().contains("null"));
    }

    #[test]
    fn standard_effect_equals_evaluate() {
        let ds = dataset();
        let a = evaluate(&PromptReader, &ds, &opts()).unwrap();
        let b = prompt_effect(&PromptReader, &ds, &opts(), "standard").unwrap();
        assert_eq!(a.srocc_values(), b.srocc_values());
    }

    #[test]
    fn invert_scores_perturbation() {
        let ds = dataset();
        let (train, _) = eval_split(&ds, &opts().protocol, 0).unwrap();
        let ispp = prompt_for(&train, "d", &opts(), 5, 0).unwrap();
        let inv = prompt_effects()
            .get("invert_scores")
            .unwrap()
            .perturb(&ispp, &mut rng::stream(0, 0));
        for (a, b) in ispp.scores().iter().zip(inv.scores()) {
            assert_eq!(b, 1.0 - a);
        }
        let rand_imgs = prompt_effects()
            .get("random_images")
            .unwrap()
            .perturb(&ispp, &mut rng::stream(0, 0));
        assert_eq!(rand_imgs.scores(), ispp.scores());
        assert_ne!(rand_imgs.pairs[0].image.data(), ispp.pairs[0].image.data());
    }

    #[test]
    fn sweep_records_oversized_requests() {
        let rep = ispp_size_sweep(&Oracle, &dataset(), &[3, 5, 1000], &opts()).unwrap();
        assert_eq!(rep.points.len(), 3);
        assert_eq!(rep.point(3).unwrap().status, "ok");
        assert_ne!(rep.point(1000).unwrap().status, "ok");
        assert!(rep.svg("t").starts_with("<svg"));
    }

    #[test]
    fn modes_parse_and_print() {
        for m in TrainingMode::ALL {
            assert_eq!(m.to_string().parse::<TrainingMode>().unwrap(), m);
        }
        assert!("FT".parse::<TrainingMode>().is_err());
    }
}
