//! Synthetic exemplar dataset on disk: one TNSR file per exemplar plus a
//! JSON manifest describing the splits.
//!
//! Exemplar seeds are consecutive: unit i (counting across splits,
//! categories and indices in a fixed order) renders with seed
//! `config.seed + i`, so the splits occupy disjoint seed ranges and any
//! file can be regenerated from its manifest entry alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gazedec_core::stimuli::{render_exemplar_with, Category, ALL_CATEGORIES};
use gazedec_core::Tensor;

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::tnsr;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub category: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub split: String,
    /// Per-category exemplar count.
    pub count_per_category: usize,
    /// Seed range [start, end) covered by this split.
    pub seed_range: [u64; 2],
    pub files: Vec<ManifestFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub exemplar_px: usize,
    pub params: crate::config::RenderConfig,
    pub splits: Vec<ManifestSplit>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> CliResult<&ManifestSplit> {
        self.splits
            .iter()
            .find(|s| s.split == name)
            .ok_or_else(|| CliError::data(format!("dataset manifest has no split {name:?}")))
    }
}

fn category_dir(c: Category) -> String {
    c.name().to_ascii_lowercase().replace('-', "_")
}

/// Generate the dataset under `dir`, returning the manifest (also written
/// to `dir/manifest.json`) and the list of files created.
pub fn gen_dataset(cfg: &Config, dir: &Path) -> CliResult<(DatasetManifest, Vec<PathBuf>)> {
    let counts = [
        cfg.data.train_per_category,
        cfg.data.val_per_category,
        cfg.data.test_per_category,
    ];
    if counts.iter().any(|&c| c < 1) {
        return Err(CliError::config("data: per-category counts must be >= 1"));
    }
    let render = cfg.render.to_core(cfg.data.exemplar_px);
    let mut files_out = Vec::new();
    let mut splits = Vec::new();
    let mut unit: u64 = 0;
    for (split, &count) in SPLITS.iter().zip(&counts) {
        let seed_start = cfg.seed.wrapping_add(unit);
        let mut files = Vec::with_capacity(count * ALL_CATEGORIES.len());
        for &category in &ALL_CATEGORIES {
            for index in 0..count {
                let seed = cfg.seed.wrapping_add(unit);
                unit += 1;
                let exemplar = render_exemplar_with(category, seed, &render);
                let rel = format!("{split}/{}/ex_{index:06}.tnsr", category_dir(category));
                let path = dir.join(&rel);
                tnsr::write_tensor(&path, &exemplar.pixels)?;
                files_out.push(path);
                files.push(ManifestFile {
                    path: rel,
                    category: category.name().to_string(),
                    seed,
                });
            }
        }
        splits.push(ManifestSplit {
            split: split.to_string(),
            count_per_category: count,
            seed_range: [seed_start, cfg.seed.wrapping_add(unit)],
            files,
        });
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        exemplar_px: cfg.data.exemplar_px,
        params: cfg.render.clone(),
        splits,
    };
    let manifest_path = dir.join(MANIFEST_NAME);
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::data(format!("serialize manifest: {e}")))?;
    text.push('\n');
    fs::write(&manifest_path, text)?;
    files_out.push(manifest_path);
    Ok((manifest, files_out))
}

pub fn load_manifest(dataset_dir: &Path) -> CliResult<DatasetManifest> {
    let path = dataset_dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Load one split as (image, category) pairs, in manifest order.
pub fn load_split(dataset_dir: &Path, name: &str) -> CliResult<Vec<(Tensor, Category)>> {
    let manifest = load_manifest(dataset_dir)?;
    let split = manifest.split(name)?;
    let mut out = Vec::with_capacity(split.files.len());
    for file in &split.files {
        let category = Category::from_name(&file.category).ok_or_else(|| {
            CliError::data(format!("manifest lists unknown category {:?}", file.category))
        })?;
        let image = tnsr::read_tensor(&dataset_dir.join(&file.path))?;
        out.push((image, category));
    }
    Ok(out)
}
