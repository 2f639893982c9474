//! On-disk dataset manifests.
//!
//! A manifest is a CSV with header `id,image_path,raw_score,group_id`;
//! `group_id` may be empty for datasets without reference images. Image
//! paths are resolved relative to the manifest's directory. A references
//! manifest maps groups to clean images with header `group_id,image_path`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::relabel::Polarity;
use crate::datasets::{Dataset, DatasetSpec, LabelType, Sample};
use crate::error::{Error, Result};
use crate::image::{resize_shortest_side, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub image_path: String,
    pub raw_score: f64,
    #[serde(default)]
    pub group_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub group_id: String,
    pub image_path: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    if !path.exists() {
        return Err(Error::file(path, "manifest not found"));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["id", "image_path", "raw_score", "group_id"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::file(
            path,
            format!("manifest header must be `{}`", expected.join(",")),
        ));
    }
    rdr.deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()
        .map_err(|e| Error::file(path, e))
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_references(path: &Path) -> Result<Vec<ReferenceRow>> {
    if !path.exists() {
        return Err(Error::file(path, "references manifest not found"));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<ReferenceRow>, _>>()
        .map_err(|e| Error::file(path, e))
}

pub fn write_references(path: &Path, rows: &[ReferenceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Resolves `image_path` against the directory holding `manifest`.
pub fn resolve(manifest: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads an image and applies the dataset's shortest-side rule.
pub fn load_image(path: &Path, spec: &DatasetSpec) -> Result<Image> {
    let img = Image::load(path)?;
    match spec.shortest_side {
        Some(t) => resize_shortest_side(&img, t),
        None => Ok(img),
    }
}

/// Reads a manifest and all of its images.
pub fn load_dataset(spec: &DatasetSpec, manifest: &Path) -> Result<Dataset> {
    let rows = read_manifest(manifest)?;
    let mut samples = Vec::with_capacity(rows.len());
    for r in rows {
        let img = load_image(&resolve(manifest, &r.image_path), spec)?;
        let mut s = Sample::new(r.id, Arc::new(img), r.raw_score);
        if !r.group_id.is_empty() {
            s.group_id = Some(r.group_id);
        }
        s.image_path = Some(r.image_path);
        samples.push(s);
    }
    Dataset::new(spec.clone(), samples)
}

/// Loads the clean reference image of every group.
pub fn load_references(path: &Path) -> Result<BTreeMap<String, Arc<Image>>> {
    read_references(path)?
        .into_iter()
        .map(|r| Ok((r.group_id, Arc::new(Image::load(resolve(path, &r.image_path))?))))
        .collect()
}

/// Writes every sample image as a PNG under `dir/images` plus a manifest
/// at `dir/manifest.csv`; references (when given) go to
/// `dir/references.csv`.
pub fn export_dataset(
    dataset: &Dataset,
    references: Option<&BTreeMap<String, Arc<Image>>>,
    dir: &Path,
) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut rows = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let rel = format!("images/{}.png", s.id);
        s.image.save_png(dir.join(&rel))?;
        rows.push(ManifestRow {
            id: s.id.clone(),
            image_path: rel,
            raw_score: s.raw_score,
            group_id: s.group_id.clone().unwrap_or_default(),
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    if let Some(refs) = references {
        let mut ref_rows = Vec::new();
        for (g, img) in refs {
            let rel = format!("images/ref-{g}.png");
            img.save_png(dir.join(&rel))?;
            ref_rows.push(ReferenceRow {
                group_id: g.clone(),
                image_path: rel,
            });
        }
        write_references(&dir.join("references.csv"), &ref_rows)?;
    }
    Ok(manifest)
}

/// Sidecar written next to a relabelled manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub metric: String,
    pub polarity: Polarity,
    pub label_type: LabelType,
    pub source_manifest: String,
    pub references_manifest: String,
}

pub fn write_provenance(path: &Path, p: &Provenance) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(p)? + "\n")?;
    Ok(())
}
