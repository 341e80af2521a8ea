//! Dataset archive: the output of `ingest`.
//!
//! A directory holding `manifest.json` and `arrays.bin`. The binary file is a
//! concatenation of little-endian `f64` arrays; the manifest lists each
//! array's name, shape and byte offset, plus the preprocessing config, the
//! normalization statistics, per-unit lengths and a SHA-256 of the arrays.
//!
//! Arrays (version 1):
//!
//! | name             | shape                   | content                          |
//! |------------------|-------------------------|----------------------------------|
//! | `train_features` | `[train_rows, F]`       | normalized training histories    |
//! | `train_targets`  | `[train_rows]`          | capped RUL target per row        |
//! | `test_features`  | `[test_rows, F]`        | test histories, training stats   |
//!
//! Rows of consecutive units are stacked in unit order.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rulens_core::cmapss::{
    load_true_rul, parse_cmapss, prepare_split, DatasetSplit, FeatureLayout, NormStats, PreprocessConfig,
    TrainingWindows, UnitFeatures, UnitSeries,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::util::{bytes_to_f64s, f64s_to_bytes, read_json, read_text, sha256_hex, write_atomic, write_json, UserError};

pub const FORMAT: &str = "rulens-dataset";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const ARRAYS: &str = "arrays.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEntry {
    pub unit_id: u32,
    pub cycles: usize,
    pub true_final_rul: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl ArrayEntry {
    fn byte_len(&self) -> u64 {
        8 * self.shape.iter().product::<usize>() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format: String,
    pub version: u32,
    pub preprocess: PreprocessConfig,
    pub feature_names: Vec<String>,
    pub norm_stats: NormStats,
    pub norm_fingerprint: String,
    pub sources: Vec<SourceFile>,
    pub train_units: Vec<UnitEntry>,
    pub test_units: Vec<UnitEntry>,
    pub skipped_train_units: Vec<u32>,
    pub train_windows: usize,
    pub arrays: Vec<ArrayEntry>,
    pub arrays_sha256: String,
    /// Hash of everything above except `sources`, so the same data read from
    /// another path has the same fingerprint.
    pub fingerprint: String,
    /// Resolved run config of the `ingest` call; not part of the fingerprint.
    #[serde(default)]
    pub config: Option<RunConfig>,
}

/// Hash of the feature names and the exact bits of the statistics.
pub fn norm_fingerprint(stats: &NormStats) -> String {
    let mut bytes = Vec::new();
    for name in &stats.names {
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
    }
    bytes.extend(f64s_to_bytes(&stats.mean));
    bytes.extend(f64s_to_bytes(&stats.std));
    sha256_hex(&bytes)
}

impl ArchiveManifest {
    fn compute_fingerprint(&self) -> String {
        let body = serde_json::json!({
            "format": self.format,
            "version": self.version,
            "preprocess": self.preprocess,
            "feature_names": self.feature_names,
            "norm_fingerprint": self.norm_fingerprint,
            "train_units": self.train_units,
            "test_units": self.test_units,
            "skipped_train_units": self.skipped_train_units,
            "train_windows": self.train_windows,
            "arrays": self.arrays,
            "arrays_sha256": self.arrays_sha256,
        });
        sha256_hex(body.to_string().as_bytes())
    }
}

/// Parsed, normalized and windowed dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: ArchiveManifest,
    pub split: DatasetSplit,
}

/// Reads a CMAPSS text file; parse errors carry the path.
pub fn read_cmapss(path: &Path) -> Result<(Vec<UnitSeries>, String)> {
    let text = read_text(path)?;
    let units = parse_cmapss(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok((units, sha256_hex(text.as_bytes())))
}

pub fn read_test_with_rul(test: &Path, rul: Option<&Path>) -> Result<(Vec<UnitSeries>, Vec<SourceFile>)> {
    let (mut units, sha) = read_cmapss(test)?;
    let mut sources = vec![SourceFile {
        role: "test".to_string(),
        path: test.to_path_buf(),
        sha256: sha,
    }];
    if let Some(rul) = rul {
        let text = read_text(rul)?;
        load_true_rul(&text, &mut units).with_context(|| format!("reading {}", rul.display()))?;
        sources.push(SourceFile {
            role: "rul".to_string(),
            path: rul.to_path_buf(),
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    Ok((units, sources))
}

fn entries(units: &[UnitFeatures]) -> Vec<UnitEntry> {
    units
        .iter()
        .map(|u| UnitEntry {
            unit_id: u.unit_id,
            cycles: u.len(),
            true_final_rul: u.true_final_rul,
        })
        .collect()
}

fn stack(units: &[UnitFeatures]) -> Vec<f64> {
    units.iter().flat_map(|u| u.values.iter().copied()).collect()
}

impl Dataset {
    /// Loads the raw files and runs the preprocessing pipeline.
    pub fn ingest(train: &Path, test: Option<&Path>, rul: Option<&Path>, preprocess: &PreprocessConfig) -> Result<Self> {
        if rul.is_some() && test.is_none() {
            bail!(UserError::new("a RUL file needs a test file"));
        }
        let (train_units, train_sha) = read_cmapss(train)?;
        let mut sources = vec![SourceFile {
            role: "train".to_string(),
            path: train.to_path_buf(),
            sha256: train_sha,
        }];
        let test_units = match test {
            Some(t) => {
                let (units, s) = read_test_with_rul(t, rul)?;
                sources.extend(s);
                units
            }
            None => Vec::new(),
        };
        let split = prepare_split(&train_units, &test_units, preprocess)?;
        if split.train.spans.is_empty() {
            bail!(UserError::new(format!(
                "no training unit has at least {} cycles",
                preprocess.window_length
            )));
        }
        Ok(Self::from_split(split, sources))
    }

    pub fn from_split(split: DatasetSplit, sources: Vec<SourceFile>) -> Self {
        let f = split.layout.len();
        let train_rows: usize = split.train.units.iter().map(UnitFeatures::len).sum();
        let test_rows: usize = split.test_units.iter().map(UnitFeatures::len).sum();
        let arrays = [
            ("train_features", vec![train_rows, f]),
            ("train_targets", vec![train_rows]),
            ("test_features", vec![test_rows, f]),
        ];
        let mut offset = 0;
        let arrays: Vec<ArrayEntry> = arrays
            .into_iter()
            .map(|(name, shape)| {
                let e = ArrayEntry {
                    name: name.to_string(),
                    dtype: "f64le".to_string(),
                    shape,
                    offset,
                };
                offset += e.byte_len();
                e
            })
            .collect();
        let mut manifest = ArchiveManifest {
            format: FORMAT.to_string(),
            version: VERSION,
            preprocess: split.config.clone(),
            feature_names: split.layout.names.clone(),
            norm_fingerprint: norm_fingerprint(&split.norm_stats),
            norm_stats: split.norm_stats.clone(),
            sources,
            train_units: entries(&split.train.units),
            test_units: entries(&split.test_units),
            skipped_train_units: split.skipped_train_units.clone(),
            train_windows: split.train.spans.len(),
            arrays,
            arrays_sha256: String::new(),
            fingerprint: String::new(),
            config: None,
        };
        manifest.arrays_sha256 = sha256_hex(&Self::array_bytes(&split));
        manifest.fingerprint = manifest.compute_fingerprint();
        Self { manifest, split }
    }

    fn array_bytes(split: &DatasetSplit) -> Vec<u8> {
        let mut bytes = f64s_to_bytes(&stack(&split.train.units));
        bytes.extend(f64s_to_bytes(&split.train.targets.concat()));
        bytes.extend(f64s_to_bytes(&stack(&split.test_units)));
        bytes
    }

    pub fn fingerprint(&self) -> &str {
        &self.manifest.fingerprint
    }

    /// Writes the arrays first and the manifest last.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(ARRAYS), &Self::array_bytes(&self.split))?;
        write_json(&dir.join(MANIFEST), &self.manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.is_file() {
            bail!(UserError::new(format!("{} is not a dataset archive (no {MANIFEST})", dir.display())));
        }
        let manifest: ArchiveManifest = read_json(&manifest_path)?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            bail!(UserError::new(format!(
                "{}: unsupported archive format {} v{}",
                dir.display(),
                manifest.format,
                manifest.version
            )));
        }
        let bytes = std::fs::read(dir.join(ARRAYS)).with_context(|| format!("reading {}", dir.join(ARRAYS).display()))?;
        if sha256_hex(&bytes) != manifest.arrays_sha256 {
            bail!(UserError::new(format!("{}: array checksum mismatch, archive is corrupt", dir.display())));
        }
        if manifest.compute_fingerprint() != manifest.fingerprint {
            bail!(UserError::new(format!("{}: manifest fingerprint mismatch", dir.display())));
        }
        let array = |name: &str| -> Result<Vec<f64>> {
            let e = manifest
                .arrays
                .iter()
                .find(|a| a.name == name)
                .with_context(|| format!("archive has no `{name}` array"))?;
            let (start, end) = (e.offset as usize, (e.offset + e.byte_len()) as usize);
            if e.dtype != "f64le" || end > bytes.len() {
                bail!(UserError::new(format!("archive array `{name}` is malformed")));
            }
            bytes_to_f64s(&bytes[start..end])
        };
        let f = manifest.feature_names.len();
        let train_units = unstack(&array("train_features")?, &manifest.train_units, f)?;
        let test_units = unstack(&array("test_features")?, &manifest.test_units, f)?;
        let flat_targets = array("train_targets")?;
        let mut targets = Vec::with_capacity(train_units.len());
        let mut at = 0;
        for u in &manifest.train_units {
            targets.push(flat_targets[at..at + u.cycles].to_vec());
            at += u.cycles;
        }
        let (train, skipped) = TrainingWindows::new(
            train_units,
            targets,
            manifest.preprocess.window_length,
            manifest.preprocess.stride,
        )?;
        if skipped != manifest.skipped_train_units || train.spans.len() != manifest.train_windows {
            bail!(UserError::new(format!("{}: window layout does not match the manifest", dir.display())));
        }
        let layout = manifest.preprocess.selection().layout()?;
        if layout.names != manifest.feature_names {
            bail!(UserError::new(format!("{}: feature names do not match the preprocessing config", dir.display())));
        }
        let split = DatasetSplit {
            config: manifest.preprocess.clone(),
            layout,
            norm_stats: manifest.norm_stats.clone(),
            train,
            test_units,
            skipped_train_units: skipped,
        };
        Ok(Self { manifest, split })
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.split.layout
    }
}

fn unstack(values: &[f64], units: &[UnitEntry], f: usize) -> Result<Vec<UnitFeatures>> {
    let total: usize = units.iter().map(|u| u.cycles).sum();
    if total * f != values.len() {
        bail!(UserError::new("archive unit lengths do not match the arrays"));
    }
    let mut at = 0;
    Ok(units
        .iter()
        .map(|u| {
            let n = u.cycles * f;
            let unit = UnitFeatures {
                unit_id: u.unit_id,
                n_features: f,
                values: values[at..at + n].to_vec(),
                true_final_rul: u.true_final_rul,
            };
            at += n;
            unit
        })
        .collect())
}
