//! On-disk datasets: PGM files plus a `manifest.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pgm::{dequantize, quantize, read_pgm, write_pgm_bytes};
use super::{draw_factors, generate_record, GeneratorConfig, Label, SampleRecord, IMAGE_SIDE};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: String,
    pub mask_path: Option<String>,
    pub label: Label,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<ManifestRecord>,
    pub test_normal: Vec<ManifestRecord>,
    pub test_abnormal: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub generator_config: GeneratorConfig,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.splits.train.len() + self.splits.test_normal.len() + self.splits.test_abnormal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Records of a loaded dataset, split as in the manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SampleRecord>,
    pub test_normal: Vec<SampleRecord>,
    pub test_abnormal: Vec<SampleRecord>,
}

impl Dataset {
    /// Test records, normal ones first.
    pub fn test(&self) -> Vec<&SampleRecord> {
        self.test_normal.iter().chain(&self.test_abnormal).collect()
    }
}

fn split_plan(n_train: usize, n_normal: usize, n_abnormal: usize) -> Vec<(&'static str, Label, usize)> {
    vec![
        ("train", Label::Normal, n_train),
        ("test_normal", Label::Normal, n_normal),
        ("test_abnormal", Label::Abnormal, n_abnormal),
    ]
}

/// Writes every record and `manifest.json` under `out_dir`. Record `i`
/// (counted across train, test_normal, test_abnormal in that order) uses seed
/// `cfg.seed + i`.
pub fn build_dataset(
    cfg: &GeneratorConfig,
    n_train: usize,
    n_test_normal: usize,
    n_test_abnormal: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut splits = Splits::default();
    let mut index = 0u64;
    for (name, label, count) in split_plan(n_train, n_test_normal, n_test_abnormal) {
        let list = match name {
            "train" => &mut splits.train,
            "test_normal" => &mut splits.test_normal,
            _ => &mut splits.test_abnormal,
        };
        for i in 0..count {
            let seed = cfg.seed.wrapping_add(index);
            index += 1;
            let rec = generate_record(seed, label, cfg)?;
            let image_path = format!("images/{name}_{i:05}.pgm");
            write_pgm_bytes(&out_dir.join(&image_path), &quantize(&rec.image), IMAGE_SIDE)?;
            let mask_path = if label == Label::Abnormal {
                let p = format!("masks/{name}_{i:05}.pgm");
                let bytes: Vec<u8> = rec.mask.iter().map(|&m| m * 255).collect();
                write_pgm_bytes(&out_dir.join(&p), &bytes, IMAGE_SIDE)?;
                Some(p)
            } else {
                None
            };
            list.push(ManifestRecord {
                image_path,
                mask_path,
                label,
                seed,
            });
        }
    }
    let manifest = DatasetManifest {
        generator_config: cfg.clone(),
        splits,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        field: "manifest",
        detail: e.to_string(),
    })
}

fn load_record(root: &Path, entry: &ManifestRecord, expect: Label, cfg: &GeneratorConfig) -> Result<SampleRecord> {
    if entry.label != expect {
        if expect == Label::Normal {
            return Err(Error::Contamination {
                record: entry.image_path.clone(),
            });
        }
        return Err(Error::Dataset {
            record: entry.image_path.clone(),
            detail: format!("label {:?} in the abnormal test split", entry.label),
        });
    }
    let image = dequantize(&read_pgm(&root.join(&entry.image_path), IMAGE_SIDE)?);
    let mask = match &entry.mask_path {
        Some(p) => read_pgm(&root.join(p), IMAGE_SIDE)?
            .into_iter()
            .map(|v| u8::from(v > 127))
            .collect(),
        None => vec![0; IMAGE_SIDE * IMAGE_SIDE],
    };
    let rec = SampleRecord {
        id: entry.image_path.clone(),
        image,
        label: entry.label,
        mask,
        factors: draw_factors(entry.seed, cfg),
        seed: entry.seed,
    };
    rec.check()?;
    Ok(rec)
}

/// Reads and invariant-checks every record listed in the manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    manifest.generator_config.validate()?;
    let root: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let cfg = &manifest.generator_config;
    let load = |list: &[ManifestRecord], label| -> Result<Vec<SampleRecord>> {
        list.iter().map(|e| load_record(&root, e, label, cfg)).collect()
    };
    let train = load(&manifest.splits.train, Label::Normal)?;
    let test_normal = load(&manifest.splits.test_normal, Label::Normal)?;
    let test_abnormal = load(&manifest.splits.test_abnormal, Label::Abnormal)?;
    Ok(Dataset {
        manifest,
        train,
        test_normal,
        test_abnormal,
    })
}
