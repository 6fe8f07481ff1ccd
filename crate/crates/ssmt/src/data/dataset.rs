//! On-disk dataset layout, deterministic splits, and the JSONL manifest.
//!
//! A dataset root holds `image/` plus optional `mask_nodule/` and
//! `mask_gland/` directories; files pair up by stem. Samples with at least
//! one mask are labeled and split 80/20 train/test by a stem hash; samples
//! without any mask form the unlabeled pool.

use crate::data::augment::resize_sample;
use crate::data::pgm::read_gray_image;
use crate::data::{compute_size_label, UltrasoundSample};
use crate::error::{Result, SsmtError};
use crate::rng::fnv1a_str;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub stem: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_nodule: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_gland: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn labeled(&self) -> Vec<&SampleRecord> {
        self.records
            .iter()
            .filter(|r| r.split != Split::Unlabeled)
            .collect()
    }
}

const IMAGE_EXTS: [&str; 2] = ["pgm", "png"];

fn stems_in(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| SsmtError::io(dir, e))? {
        let path = entry.map_err(|e| SsmtError::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| SsmtError::Dataset(format!("unreadable file name in {}", dir.display())))?
            .to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(SsmtError::Dataset(format!(
                "stem '{stem}' appears twice: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Split a labeled stem 80/20 by hash; label-free samples are unlabeled.
fn split_for(stem: &str, has_mask: bool) -> Split {
    if !has_mask {
        Split::Unlabeled
    } else if fnv1a_str(stem) % 10 < 8 {
        Split::Train
    } else {
        Split::Test
    }
}

/// Scan `root/image`, `root/mask_nodule`, `root/mask_gland` and build the
/// manifest, sorted lexicographically by stem. A mask whose stem has no
/// image is a manifest error.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    let image_dir = root.join("image");
    if !image_dir.is_dir() {
        return Err(SsmtError::Dataset(format!(
            "dataset root {} has no image/ directory",
            root.display()
        )));
    }
    let images = stems_in(&image_dir)?;
    let nodules = stems_in(&root.join("mask_nodule"))?;
    let glands = stems_in(&root.join("mask_gland"))?;
    for (kind, masks) in [("mask_nodule", &nodules), ("mask_gland", &glands)] {
        for stem in masks.keys() {
            if !images.contains_key(stem) {
                return Err(SsmtError::Dataset(format!(
                    "{kind}/{stem} has no matching image"
                )));
            }
        }
    }
    let records = images
        .into_iter()
        .map(|(stem, image)| {
            let mask_nodule = nodules.get(&stem).cloned();
            let mask_gland = glands.get(&stem).cloned();
            let split = split_for(&stem, mask_nodule.is_some() || mask_gland.is_some());
            SampleRecord {
                stem,
                image,
                mask_nodule,
                mask_gland,
                split,
            }
        })
        .collect();
    Ok(DatasetManifest { records })
}

/// Write the manifest as JSON Lines, one record per line.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| SsmtError::io(path, e))?;
    for record in &manifest.records {
        let line = serde_json::to_string(record)
            .map_err(|e| SsmtError::format(path, format!("serialize record: {e}")))?;
        writeln!(file, "{line}").map_err(|e| SsmtError::io(path, e))?;
    }
    Ok(())
}

/// Read a JSONL manifest; blank lines are skipped, image paths must exist.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| SsmtError::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SsmtError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| SsmtError::format(path, format!("line {}: {e}", idx + 1)))?;
        if !record.image.is_file() {
            return Err(SsmtError::Dataset(format!(
                "manifest references missing image {}",
                record.image.display()
            )));
        }
        records.push(record);
    }
    Ok(DatasetManifest { records })
}

fn read_mask(path: &Path, th: usize, tw: usize) -> Result<Vec<f32>> {
    let (mut data, h, w) = read_gray_image(path)?;
    for v in data.iter_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    if (h, w) != (th, tw) {
        let mut out = crate::data::augment::resize(&data, h, w, th, tw, crate::data::augment::Interp::Nearest)?;
        for v in out.iter_mut() {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
        return Ok(out);
    }
    Ok(data)
}

/// Load one record into a model-ready sample at the target grid size.
pub fn load_sample(record: &SampleRecord, th: usize, tw: usize) -> Result<UltrasoundSample> {
    let (image, h, w) = read_gray_image(&record.image)?;
    let raw = UltrasoundSample {
        image,
        h,
        w,
        nodule_mask: None,
        gland_mask: None,
        size_label: None,
    };
    let mut sample = resize_sample(&raw, th, tw)?;
    if let Some(p) = &record.mask_nodule {
        let m = read_mask(p, th, tw)?;
        sample.size_label = Some(compute_size_label(&m)?);
        sample.nodule_mask = Some(m);
    }
    if let Some(p) = &record.mask_gland {
        sample.gland_mask = Some(read_mask(p, th, tw)?);
    }
    sample.validate()?;
    Ok(sample)
}

/// Generate a phantom dataset tree under `root`: `labeled` samples with
/// image + both masks, `unlabeled` samples as bare images. Deterministic
/// per seed. Returns the manifest of the written tree.
pub fn write_phantom_dataset(
    root: &Path,
    labeled: usize,
    unlabeled: usize,
    cfg: &crate::data::phantom::PhantomConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    use crate::data::pgm::write_pgm;
    use crate::data::phantom::generate_phantom;
    use crate::rng::rng_for;
    cfg.validate()?;
    let image_dir = root.join("image");
    let nodule_dir = root.join("mask_nodule");
    let gland_dir = root.join("mask_gland");
    for dir in [&image_dir, &nodule_dir, &gland_dir] {
        std::fs::create_dir_all(dir).map_err(|e| SsmtError::io(dir, e))?;
    }
    for i in 0..labeled {
        let mut rng = rng_for(seed, "phantom.labeled", &[i as u64]);
        let s = generate_phantom(cfg, &mut rng)?;
        let stem = format!("ph_{i:04}");
        write_pgm(&image_dir.join(format!("{stem}.pgm")), &s.image, s.h, s.w)?;
        let nodule = s.nodule_mask.as_ref().expect("phantoms carry masks");
        write_pgm(&nodule_dir.join(format!("{stem}.pgm")), nodule, s.h, s.w)?;
        let gland = s.gland_mask.as_ref().expect("phantoms carry masks");
        write_pgm(&gland_dir.join(format!("{stem}.pgm")), gland, s.h, s.w)?;
    }
    for i in 0..unlabeled {
        let mut rng = rng_for(seed, "phantom.unlabeled", &[i as u64]);
        let s = generate_phantom(cfg, &mut rng)?;
        let stem = format!("un_{i:04}");
        write_pgm(&image_dir.join(format!("{stem}.pgm")), &s.image, s.h, s.w)?;
    }
    load_dataset(root)
}
