//! Prompt files: a sampled ISPP saved as JSON so that `eval` and `predict`
//! can reuse the exact same pairs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use promptiqa_core::datasets::{Ispp, PromptPair};
use promptiqa_core::image::Image;
use serde::{Deserialize, Serialize};

pub const SCHEMA: &str = "promptiqa.ispp/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptEntry {
    pub id: String,
    pub image_path: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptFile {
    pub schema: String,
    pub strategy: String,
    pub seed: u64,
    pub n: usize,
    pub source_manifest: String,
    pub entries: Vec<PromptEntry>,
}

impl PromptFile {
    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let f: Self = serde_json::from_str(&text).with_context(|| format!("{}: not a prompt file", path.display()))?;
        if f.schema != SCHEMA {
            bail!("{}: schema `{}`, expected `{SCHEMA}`", path.display(), f.schema);
        }
        if f.entries.is_empty() || f.entries.len() != f.n {
            bail!("{}: `n` is {} but there are {} entries", path.display(), f.n, f.entries.len());
        }
        if let Some(e) = f.entries.iter().find(|e| !(0.0..=1.0).contains(&e.score)) {
            bail!("{}: entry `{}` has score {} outside [0, 1]", path.display(), e.id, e.score);
        }
        Ok(f)
    }

    /// Loads the images; relative paths resolve against `base`.
    pub fn to_ispp(&self, base: &Path) -> anyhow::Result<Ispp> {
        let pairs = self
            .entries
            .iter()
            .map(|e| {
                let path = resolve(base, &e.image_path);
                let img = Image::load(&path).with_context(|| format!("prompt image {}", path.display()))?;
                Ok(PromptPair {
                    id: e.id.clone(),
                    image: Arc::new(img),
                    score: e.score,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        Ok(Ispp {
            pairs,
            source_dataset: self.source_manifest.clone(),
            strategy: self.strategy.clone(),
        })
    }
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
