//! Phantom datasets on disk: a TOML manifest listing every volume with
//! its seed and split, plus loading into normalized in-memory samples.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{self, PhantomParams};
use crate::volume::{percentile_clip_normalize, read_volume, write_volume, Volume};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Unlabeled,
    Labeled,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub name: String,
    pub seed: u64,
    pub split: Split,
    /// Relative to the manifest directory.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub dims: [usize; 3],
    pub params: PhantomParams,
    pub volumes: Vec<VolumeEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest =
            toml::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        m.check()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest is always serializable")
    }

    fn check(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Format(format!(
                "manifest dims {:?} contain zero",
                self.dims
            )));
        }
        for v in &self.volumes {
            let needs_label = v.split != Split::Unlabeled;
            if needs_label != v.label.is_some() {
                return Err(Error::Format(format!(
                    "volume {} in split {:?} {} a label",
                    v.name,
                    v.split,
                    if needs_label { "lacks" } else { "has" }
                )));
            }
            for p in std::iter::once(&v.image).chain(&v.label) {
                if p.is_absolute()
                    || p.components()
                        .any(|c| matches!(c, std::path::Component::ParentDir))
                {
                    return Err(Error::Format(format!(
                        "path {} escapes the dataset",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &VolumeEntry> {
        self.volumes.iter().filter(move |v| v.split == split)
    }
}

/// Per-volume seeds drawn from one master stream, in manifest order.
fn volume_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetCounts {
    pub unlabeled: usize,
    pub labeled: usize,
    pub test: usize,
}

/// Builds the manifest without touching the filesystem.
pub fn plan_dataset(
    seed: u64,
    counts: DatasetCounts,
    dims: [usize; 3],
    params: PhantomParams,
) -> Manifest {
    let total = counts.unlabeled + counts.labeled + counts.test;
    let seeds = volume_seeds(seed, total);
    let splits = std::iter::repeat_n(Split::Unlabeled, counts.unlabeled)
        .chain(std::iter::repeat_n(Split::Labeled, counts.labeled))
        .chain(std::iter::repeat_n(Split::Test, counts.test));
    let volumes = splits
        .zip(seeds)
        .enumerate()
        .map(|(i, (split, seed))| {
            let name = format!("{}_{i:04}", split_name(split));
            let label =
                (split != Split::Unlabeled).then(|| PathBuf::from(format!("labels/{name}.vpbv")));
            VolumeEntry {
                image: PathBuf::from(format!("images/{name}.vpbv")),
                label,
                name,
                seed,
                split,
            }
        })
        .collect();
    Manifest {
        seed,
        dims,
        params,
        volumes,
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Unlabeled => "unlabeled",
        Split::Labeled => "labeled",
        Split::Test => "test",
    }
}

/// Generates every volume of `manifest` under `dir` and writes the
/// manifest itself. A non-empty `dir` is refused unless `force`.
pub fn write_dataset(manifest: &Manifest, dir: impl AsRef<Path>, force: bool) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if let Ok(mut it) = fs::read_dir(dir) {
        if it.next().is_some() && !force {
            return Err(Error::Validation(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for v in &manifest.volumes {
        let ph = phantom::generate(v.seed, manifest.dims, &manifest.params)?;
        write_volume(&ph.image, dir.join(&v.image))?;
        if let Some(l) = &v.label {
            write_volume(&ph.label, dir.join(l))?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn make_dataset(
    seed: u64,
    counts: DatasetCounts,
    dims: [usize; 3],
    params: PhantomParams,
    dir: impl AsRef<Path>,
    force: bool,
) -> Result<Manifest> {
    let m = plan_dataset(seed, counts, dims, params);
    write_dataset(&m, dir, force)?;
    Ok(m)
}

/// A preprocessed sample: normalized image and, when available, its mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: Volume,
    pub label: Option<Volume>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub unlabeled: Vec<Sample>,
    pub labeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Reads every volume listed by the manifest and clips/normalizes the
    /// images at the given percentile.
    pub fn load(manifest_path: impl AsRef<Path>, clip_percentile: f64) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let mut ds = Dataset {
            root: root.clone(),
            manifest: manifest.clone(),
            unlabeled: Vec::new(),
            labeled: Vec::new(),
            test: Vec::new(),
        };
        for v in &manifest.volumes {
            let raw = read_volume(root.join(&v.image))?;
            if raw.dims != manifest.dims {
                return Err(Error::Validation(format!(
                    "{} has dims {:?}, manifest says {:?}",
                    v.name, raw.dims, manifest.dims
                )));
            }
            let image = percentile_clip_normalize(&raw, clip_percentile)?;
            let label = v
                .label
                .as_ref()
                .map(|p| read_volume(root.join(p)))
                .transpose()?;
            if let Some(l) = &label {
                if l.as_labels().is_none() || l.dims != raw.dims {
                    return Err(Error::Validation(format!(
                        "{}: label does not match image",
                        v.name
                    )));
                }
            }
            let s = Sample {
                name: v.name.clone(),
                image,
                label,
            };
            match v.split {
                Split::Unlabeled => ds.unlabeled.push(s),
                Split::Labeled => ds.labeled.push(s),
                Split::Test => ds.test.push(s),
            }
        }
        Ok(ds)
    }
}

/// Builds the same samples as [`Dataset::load`] straight from a manifest,
/// without any files.
pub fn generate_in_memory(manifest: &Manifest, clip_percentile: f64) -> Result<Dataset> {
    let mut ds = Dataset {
        root: PathBuf::new(),
        manifest: manifest.clone(),
        unlabeled: Vec::new(),
        labeled: Vec::new(),
        test: Vec::new(),
    };
    for v in &manifest.volumes {
        let ph = phantom::generate(v.seed, manifest.dims, &manifest.params)?;
        let s = Sample {
            name: v.name.clone(),
            image: percentile_clip_normalize(&ph.image, clip_percentile)?,
            label: v.label.as_ref().map(|_| ph.label),
        };
        match v.split {
            Split::Unlabeled => ds.unlabeled.push(s),
            Split::Labeled => ds.labeled.push(s),
            Split::Test => ds.test.push(s),
        }
    }
    Ok(ds)
}
