use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_bag, save_bag, DataError, PlantedConfig, SlideBag};
use crate::seed::rng_for;

/// Default test share: 129 of 345 slides.
pub const DEFAULT_TEST_FRACTION: f64 = 129.0 / 345.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train or test)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Bag file, relative to the manifest's directory.
    pub path: PathBuf,
    pub slide_id: String,
    pub split: Split,
    pub slide_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDims {
    pub tile_dim: usize,
    pub classes: usize,
    pub tiles_per_slide: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dims: DatasetDims,
    pub entries: Vec<ManifestEntry>,
    /// Generator settings echoed for planted datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedConfig>,
}

impl DatasetManifest {
    /// Manifest over in-memory bags, everything in the train split, with
    /// bag files named `bags/<slide_id>.kbag`.
    pub fn for_bags(bags: &[SlideBag], classes: usize) -> Result<Self, DataError> {
        let first = bags
            .first()
            .ok_or_else(|| DataError::InvalidConfig("no slides".into()))?;
        let tile_dim = first.dim();
        if let Some(b) = bags.iter().find(|b| b.dim() != tile_dim) {
            return Err(DataError::DimensionMismatch(format!(
                "slide {} has dimension {} but {} expected",
                b.slide_id,
                b.dim(),
                tile_dim
            )));
        }
        let uniform = bags.iter().all(|b| b.tile_count() == first.tile_count());
        let manifest = Self {
            dims: DatasetDims {
                tile_dim,
                classes,
                tiles_per_slide: uniform.then(|| first.tile_count()),
            },
            entries: bags
                .iter()
                .map(|b| ManifestEntry {
                    path: PathBuf::from("bags").join(format!("{}.kbag", b.slide_id)),
                    slide_id: b.slide_id.clone(),
                    split: Split::Train,
                    slide_label: b.slide_label(),
                })
                .collect(),
            planted: None,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.slide_id.as_str()) {
                return Err(DataError::InvalidConfig(format!(
                    "duplicate slide id {}",
                    e.slide_id
                )));
            }
        }
        Ok(())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let manifest: Self = serde_json::from_slice(&fs::read(path)?)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Loads the bags of one split in manifest order. `base` is the
    /// directory the entry paths are relative to.
    pub fn load_split(&self, base: &Path, split: Split) -> Result<Vec<SlideBag>, DataError> {
        let entries: Vec<&ManifestEntry> = self.entries_in(split).collect();
        entries
            .par_iter()
            .map(|e| {
                let mut bag = load_bag(&base.join(&e.path))?;
                bag.slide_id = e.slide_id.clone();
                if bag.dim() != self.dims.tile_dim {
                    return Err(DataError::DimensionMismatch(format!(
                        "{}: tile dimension {} but manifest says {}",
                        e.slide_id,
                        bag.dim(),
                        self.dims.tile_dim
                    )));
                }
                Ok(bag)
            })
            .collect()
    }
}

/// Writes `manifest.json` and every bag under `dir`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, bags: &[SlideBag]) -> Result<(), DataError> {
    let by_id: BTreeMap<&str, &SlideBag> = bags.iter().map(|b| (b.slide_id.as_str(), b)).collect();
    for entry in &manifest.entries {
        let bag = by_id.get(entry.slide_id.as_str()).ok_or_else(|| {
            DataError::InvalidConfig(format!("no bag for manifest entry {}", entry.slide_id))
        })?;
        let path = dir.join(&entry.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        save_bag(bag, &path)?;
    }
    manifest.save(&dir.join("manifest.json"))
}

/// Stratified train/test assignment.
///
/// The test total is `round(fraction · n)`, apportioned over classes by
/// largest remainder (ties to the lower class index). Within a class,
/// slides are shuffled with a seeded stream and the first ones go to test.
pub fn split_train_test(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    let n = manifest.entries.len();
    if n < 2 {
        return Err(DataError::Split("need at least two slides".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "test fraction {test_fraction} leaves a split empty"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let label = e.slide_label.ok_or_else(|| {
            DataError::Split(format!("slide {} has no label to stratify on", e.slide_id))
        })?;
        by_class.entry(label).or_default().push(i);
    }

    let total = (test_fraction * n as f64).round() as usize;
    let quotas: Vec<f64> = by_class
        .values()
        .map(|members| test_fraction * members.len() as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(counts.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        counts[c] += 1;
        remaining -= 1;
    }

    let mut rng = rng_for(seed, "split");
    let mut out = manifest.clone();
    for ((label, members), &n_test) in by_class.iter().zip(&counts) {
        if n_test == 0 || n_test >= members.len() {
            return Err(DataError::Split(format!(
                "class {label} ({} slides) cannot appear in both splits at fraction {test_fraction}",
                members.len()
            )));
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for (rank, &i) in shuffled.iter().enumerate() {
            out.entries[i].split = if rank < n_test { Split::Test } else { Split::Train };
        }
    }
    Ok(out)
}
