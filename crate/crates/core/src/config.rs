//! Experiment configuration files (TOML) and content hashing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::AugmentConfig;
use crate::datasets::manifest::{load_dataset, load_references};
use crate::datasets::relabel::{fr_metrics, relabel_with_fr_metric, Polarity};
use crate::datasets::synthetic::{synth_requirement_dataset, Degradation, SynthConfig};
use crate::datasets::{Dataset, DatasetSpec, LabelType, SplitProtocol};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ModelConfig;
use crate::training::{FinetuneConfig, TrainConfig};

/// Hex sha256 of the compact JSON form of `value`.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(&json))
}

/// Whether a dataset feeds training or is held out for evaluation only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
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

/// Labels recomputed from another entry with a full-reference metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelabelSource {
    pub source: String,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
}

/// One `[[datasets]]` entry. Exactly one of `manifest`, `synthetic` or
/// `relabel` supplies the samples; manifest entries also need the label
/// metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    #[serde(default)]
    pub role: DatasetRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_type: Option<LabelType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_aware: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortest_side: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relabel: Option<RelabelSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_sampler")]
    pub sampler: String,
    #[serde(default = "default_n")]
    pub n_prompts: usize,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

fn default_sampler() -> String {
    "interval".into()
}
fn default_n() -> usize {
    10
}
fn default_strategies() -> Vec<String> {
    vec!["standard".into()]
}
fn default_sizes() -> Vec<usize> {
    vec![3, 5, 7, 8, 10]
}
fn default_modes() -> Vec<String> {
    ["SDT", "MDT", "SDT&FT", "MDT&FT"].map(String::from).to_vec()
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            sampler: default_sampler(),
            n_prompts: default_n(),
            strategies: default_strategies(),
            sizes: default_sizes(),
            modes: default_modes(),
            seed: 0,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_output")]
    pub output_dir: String,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub split: SplitProtocol,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub datasets: Vec<DatasetEntry>,
}

fn default_output() -> String {
    "runs".into()
}

/// A dataset ready for use plus its clean references when known.
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub references: Option<BTreeMap<String, Arc<Image>>>,
    pub role: DatasetRole,
    /// Entry name it was relabelled from, if any.
    pub relabelled_from: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }

    /// First 12 hex digits of [`ExperimentConfig::hash`], used in file names.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    /// The model configuration training actually builds.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            use_prompt: !self.train.ablation.no_prompt,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.split.validate()?;
        crate::datasets::sampling::samplers().get(&self.eval.sampler)?;
        if self.datasets.is_empty() {
            return Err(Error::Config("datasets: at least one entry is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.name.as_str()) {
                return Err(Error::Config(format!("datasets: duplicate name `{}`", d.name)));
            }
            let sources = [d.manifest.is_some(), d.synthetic.is_some(), d.relabel.is_some()];
            if sources.iter().filter(|&&b| b).count() != 1 {
                return Err(Error::Config(format!(
                    "datasets.{}: exactly one of manifest, synthetic, relabel is required",
                    d.name
                )));
            }
            if d.manifest.is_some() && (d.label_type.is_none() || d.score_lo.is_none() || d.score_hi.is_none()) {
                return Err(Error::Config(format!(
                    "datasets.{}: manifest entries need label_type, score_lo and score_hi",
                    d.name
                )));
            }
            if let Some(r) = &d.relabel {
                if !self.datasets.iter().any(|o| o.name == r.source) {
                    return Err(Error::Config(format!(
                        "datasets.{}: relabel source `{}` is not a dataset",
                        d.name, r.source
                    )));
                }
                fr_metrics().get(&r.metric)?;
            }
        }
        Ok(())
    }

    /// Builds every dataset. Relative manifest paths resolve against
    /// `base_dir`.
    pub fn load_datasets(&self, base_dir: &Path) -> Result<Vec<LoadedDataset>> {
        let mut out: Vec<LoadedDataset> = Vec::new();
        let plain = self.datasets.iter().filter(|d| d.relabel.is_none());
        let derived = self.datasets.iter().filter(|d| d.relabel.is_some());
        for d in plain.chain(derived) {
            out.push(self.load_entry(d, base_dir, &out)?);
        }
        // keep the config's order
        let order: BTreeMap<&str, usize> = self.datasets.iter().enumerate().map(|(i, d)| (d.name.as_str(), i)).collect();
        out.sort_by_key(|l| order[configured_name(l)]);
        Ok(out)
    }

    fn load_entry(&self, d: &DatasetEntry, base: &Path, loaded: &[LoadedDataset]) -> Result<LoadedDataset> {
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        if let Some(s) = &d.synthetic {
            let synth = synth_requirement_dataset(&SynthConfig {
                name: d.name.clone(),
                requirement: s.requirement.clone(),
                n_samples: s.n_samples,
                noise_sigma: s.noise_sigma,
                seed: s.seed,
                degradation: s.degradation,
                image_size: s.image_size,
                levels_per_group: s.levels_per_group,
            })?;
            return Ok(LoadedDataset {
                dataset: synth.dataset,
                references: Some(synth.references),
                role: d.role,
                relabelled_from: None,
            });
        }
        if let Some(m) = &d.manifest {
            let spec = DatasetSpec {
                name: d.name.clone(),
                label_type: d.label_type.expect("validated"),
                score_lo: d.score_lo.expect("validated"),
                score_hi: d.score_hi.expect("validated"),
                has_reference_groups: d.group_aware.unwrap_or(false),
                shortest_side: d.shortest_side,
            };
            let dataset = load_dataset(&spec, &resolve(m))?;
            let references = d.references.as_deref().map(|r| load_references(&resolve(r))).transpose()?;
            return Ok(LoadedDataset {
                dataset,
                references,
                role: d.role,
                relabelled_from: None,
            });
        }
        let r = d.relabel.as_ref().expect("validated");
        let src = loaded
            .iter()
            .find(|l| configured_name(l) == r.source)
            .ok_or_else(|| Error::Config(format!("datasets.{}: relabel source `{}` must not itself be relabelled", d.name, r.source)))?;
        let refs = src.references.as_ref().ok_or_else(|| {
            Error::Config(format!("datasets.{}: source `{}` has no reference images", d.name, r.source))
        })?;
        let metric = fr_metrics().get(&r.metric)?;
        let polarity = r.polarity.unwrap_or_else(|| metric.polarity());
        let mut dataset = relabel_with_fr_metric(&src.dataset, refs, metric.as_ref(), polarity)?;
        dataset.spec.name = d.name.clone();
        Ok(LoadedDataset {
            dataset,
            references: Some(refs.clone()),
            role: d.role,
            relabelled_from: Some(r.source.clone()),
        })
    }
}

fn configured_name(l: &LoadedDataset) -> &str {
    &l.dataset.spec.name
}
