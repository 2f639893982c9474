//! Labelled image collections: ingestion, label normalization, splitting,
//! prompt sampling, full-reference relabelling and synthetic benchmarks.

pub mod manifest;
pub mod relabel;
pub mod sampling;
pub mod synthetic;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

pub use sampling::{Ispp, PromptPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelType {
    /// Higher is better.
    #[serde(rename = "MOS")]
    Mos,
    /// Higher is worse.
    #[serde(rename = "DMOS")]
    Dmos,
}

impl std::fmt::Display for LabelType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelType::Mos => "MOS",
            LabelType::Dmos => "DMOS",
        })
    }
}

/// Dataset metadata, also the `[[datasets]]` block of an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub label_type: LabelType,
    pub score_lo: f64,
    pub score_hi: f64,
    #[serde(rename = "group_aware", default)]
    pub has_reference_groups: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortest_side: Option<usize>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_lo < self.score_hi) {
            return Err(Error::Config(format!(
                "dataset `{}`: score_lo ({}) must be below score_hi ({})",
                self.name, self.score_lo, self.score_hi
            )));
        }
        if self.shortest_side == Some(0) {
            return Err(Error::Config(format!("dataset `{}`: shortest_side must be >= 1", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Arc<Image>,
    pub raw_score: f64,
    /// `NaN` until [`normalize_labels`] has run over the sample's split.
    pub norm_score: f64,
    pub group_id: Option<String>,
    /// Where the image came from, when it was loaded from disk.
    pub image_path: Option<String>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Arc<Image>, raw_score: f64) -> Self {
        Self {
            id: id.into(),
            image,
            raw_score,
            norm_score: f64::NAN,
            group_id: None,
            image_path: None,
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group_id = Some(group.into());
        self
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(spec: DatasetSpec, samples: Vec<Sample>) -> Result<Self> {
        spec.validate()?;
        if spec.has_reference_groups {
            if let Some(s) = samples
                .iter()
                .find(|s| s.group_id.as_deref().is_none_or(str::is_empty))
            {
                return Err(Error::MissingGroup(s.id.clone()));
            }
        }
        Ok(Self { spec, samples })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Min-max scaling of a score list onto `[0, 1]`.
pub fn min_max(values: &[f64]) -> Result<Vec<f64>> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(hi > lo) {
        return Err(Error::DegenerateLabels {
            count: values.len(),
            value: if values.is_empty() { f64::NAN } else { lo },
        });
    }
    let span = hi - lo;
    Ok(values.iter().map(|v| (v - lo) / span).collect())
}

/// Sets `norm_score` by min-max scaling `raw_score` over exactly the given
/// samples. Label polarity is left alone, DMOS stays DMOS.
pub fn normalize_labels(samples: &[Sample]) -> Result<Vec<Sample>> {
    let raw: Vec<f64> = samples.iter().map(|s| s.raw_score).collect();
    let norm = min_max(&raw)?;
    Ok(samples
        .iter()
        .zip(norm)
        .map(|(s, n)| Sample {
            norm_score: n,
            ..s.clone()
        })
        .collect())
}

/// Normalizes `samples` with the min/max taken from `reference` instead of
/// the samples themselves; values are not clamped.
pub fn normalize_with_reference(samples: &[Sample], reference: &[Sample]) -> Result<Vec<Sample>> {
    let raw: Vec<f64> = reference.iter().map(|s| s.raw_score).collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateLabels {
            count: raw.len(),
            value: lo,
        });
    }
    Ok(samples
        .iter()
        .map(|s| Sample {
            norm_score: (s.raw_score - lo) / (hi - lo),
            ..s.clone()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitProtocol {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub group_aware: bool,
    /// Normalize the test split with training-split statistics instead of
    /// its own. Off by default.
    #[serde(default)]
    pub normalize_test_with_train: bool,
}

fn default_train_fraction() -> f64 {
    0.8
}
fn default_repeats() -> usize {
    10
}
fn default_true() -> bool {
    true
}

impl Default for SplitProtocol {
    fn default() -> Self {
        Self {
            train_fraction: default_train_fraction(),
            repeats: default_repeats(),
            seed: 0,
            group_aware: true,
            normalize_test_with_train: false,
        }
    }
}

impl SplitProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

const SPLIT_STREAM: u64 = 0x5_0000;

/// Train/test partition for one repeat. Group-aware splits keep every
/// reference group on one side; both sides keep the input order.
pub fn split(
    samples: &[Sample],
    protocol: &SplitProtocol,
    repeat_index: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    protocol.validate()?;
    if repeat_index >= protocol.repeats {
        return Err(Error::Config(format!(
            "repeat index {repeat_index} outside 0..{}",
            protocol.repeats
        )));
    }
    let mut rng = rng::stream(protocol.seed, SPLIT_STREAM + repeat_index as u64);
    let in_train: Vec<bool> = if protocol.group_aware {
        let mut groups = BTreeSet::new();
        for s in samples {
            match s.group_id.as_deref() {
                Some(g) if !g.is_empty() => {
                    groups.insert(g);
                }
                _ => return Err(Error::MissingGroup(s.id.clone())),
            }
        }
        let mut order: Vec<&str> = groups.into_iter().collect();
        order.shuffle(&mut rng);
        let k = train_count(order.len(), protocol.train_fraction);
        let train_groups: BTreeSet<&str> = order[..k].iter().copied().collect();
        samples
            .iter()
            .map(|s| train_groups.contains(s.group_id.as_deref().unwrap_or_default()))
            .collect()
    } else {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        let k = train_count(samples.len(), protocol.train_fraction);
        let mut flags = vec![false; samples.len()];
        for &i in &idx[..k] {
            flags[i] = true;
        }
        flags
    };
    let (train, test): (Vec<_>, Vec<_>) = samples.iter().cloned().zip(in_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(s, _)| s).collect(),
        test.into_iter().map(|(s, _)| s).collect(),
    ))
}

/// Rounded training share, keeping at least one unit on each side when
/// there are two or more units.
fn train_count(units: usize, fraction: f64) -> usize {
    let k = (units as f64 * fraction).round() as usize;
    if units >= 2 {
        k.clamp(1, units - 1)
    } else {
        k.min(units)
    }
}

/// Splits and normalizes one repeat. Each side is normalized over itself
/// unless the protocol asks for training statistics on the test side.
pub fn prepare_split(
    samples: &[Sample],
    protocol: &SplitProtocol,
    repeat_index: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (train, test) = split(samples, protocol, repeat_index)?;
    let train_n = normalize_labels(&train)?;
    let test_n = if protocol.normalize_test_with_train {
        normalize_with_reference(&test, &train)?
    } else {
        normalize_labels(&test)?
    };
    Ok((train_n, test_n))
}
