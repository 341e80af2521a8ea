//! Ensemble checkpoint directory.
//!
//! ```text
//! checkpoint/
//!   ensemble.json          written last; its presence marks a complete run
//!   member_000/
//!     manifest.json        seed, architecture, training config, history
//!     params.bin           parameters as little-endian f64, layer order
//!   member_001/
//!   ...
//! ```
//!
//! Every `params.bin` is covered by a SHA-256 in its member manifest and in
//! the ensemble manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rulens_core::cmapss::{NormStats, PreprocessConfig};
use rulens_core::ensemble::EnsembleModel;
use rulens_core::nn::{Architecture, PnnParams, StopReason, TrainConfig, TrainHistory};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::util::{bytes_to_f64s, f64s_to_bytes, read_json, sha256_hex, write_atomic, write_json, UserError};

pub const ENSEMBLE_FORMAT: &str = "rulens-ensemble";
pub const MEMBER_FORMAT: &str = "rulens-member";
pub const VERSION: u32 = 1;
pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberManifest {
    pub format: String,
    pub version: u32,
    pub index: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub training: TrainConfig,
    pub data_fingerprint: String,
    pub param_count: usize,
    pub params_sha256: String,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub index: usize,
    pub seed: u64,
    pub dir: String,
    pub params_sha256: String,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format: String,
    pub version: u32,
    pub members: usize,
    pub base_seed: u64,
    pub member_seeds: Vec<u64>,
    pub architecture: Architecture,
    pub training: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub feature_names: Vec<String>,
    pub norm_stats: NormStats,
    pub norm_fingerprint: String,
    pub data_fingerprint: String,
    pub member_entries: Vec<MemberEntry>,
    /// Hash of the architecture, normalization and every member's parameters.
    pub fingerprint: String,
    pub config: RunConfig,
}

pub fn member_dir_name(index: usize) -> String {
    format!("member_{index:03}")
}

/// What a member was trained from; a stored member is reused on `--resume`
/// only when all of it matches.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberSpec {
    pub index: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub training: TrainConfig,
    pub data_fingerprint: String,
}

pub fn write_member(dir: &Path, spec: &MemberSpec, params: &PnnParams, history: &TrainHistory) -> Result<()> {
    let final_dir = dir.join(member_dir_name(spec.index));
    let tmp = dir.join(format!(".{}.tmp{}", member_dir_name(spec.index), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    let bytes = f64s_to_bytes(&params.values);
    let manifest = MemberManifest {
        format: MEMBER_FORMAT.to_string(),
        version: VERSION,
        index: spec.index,
        seed: spec.seed,
        architecture: spec.architecture.clone(),
        training: spec.training.clone(),
        data_fingerprint: spec.data_fingerprint.clone(),
        param_count: params.len(),
        params_sha256: sha256_hex(&bytes),
        history: history.clone(),
    };
    write_atomic(&tmp.join("params.bin"), &bytes)?;
    write_json(&tmp.join("manifest.json"), &manifest)?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    fs::rename(&tmp, &final_dir).with_context(|| format!("moving {} into place", final_dir.display()))
}

pub fn read_member(dir: &Path, index: usize) -> Result<(MemberManifest, PnnParams)> {
    let mdir = dir.join(member_dir_name(index));
    let manifest: MemberManifest = read_json(&mdir.join("manifest.json"))?;
    if manifest.format != MEMBER_FORMAT || manifest.version != VERSION || manifest.index != index {
        bail!(UserError::new(format!("{}: not a member {index} manifest", mdir.display())));
    }
    let bytes = fs::read(mdir.join("params.bin")).with_context(|| format!("reading {}", mdir.display()))?;
    if sha256_hex(&bytes) != manifest.params_sha256 {
        bail!(UserError::new(format!("{}: parameter checksum mismatch", mdir.display())));
    }
    let values = bytes_to_f64s(&bytes)?;
    let params = PnnParams::from_values(manifest.architecture.clone(), manifest.seed, values)?;
    Ok((manifest, params))
}

/// A stored member usable for `spec`, if any.
pub fn reusable_member(dir: &Path, spec: &MemberSpec) -> Option<(PnnParams, TrainHistory)> {
    let (m, params) = read_member(dir, spec.index).ok()?;
    let matches = m.seed == spec.seed
        && m.architecture == spec.architecture
        && m.training == spec.training
        && m.data_fingerprint == spec.data_fingerprint;
    matches.then_some((params, m.history))
}

fn ensemble_fingerprint(architecture: &Architecture, norm_fingerprint: &str, entries: &[MemberEntry]) -> String {
    let mut text = serde_json::to_string(architecture).expect("architecture serializes");
    text.push('\n');
    text.push_str(norm_fingerprint);
    for e in entries {
        text.push_str(&format!("\n{} {} {}", e.index, e.seed, e.params_sha256));
    }
    sha256_hex(text.as_bytes())
}

/// Loaded, verified checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: EnsembleManifest,
    pub model: EnsembleModel,
    pub histories: Vec<TrainHistory>,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> &str {
        &self.manifest.fingerprint
    }

    #[allow(clippy::too_many_arguments)]
    pub fn write(
        dir: &Path,
        config: &RunConfig,
        architecture: &Architecture,
        norm_stats: &NormStats,
        norm_fingerprint: &str,
        data_fingerprint: &str,
        members: Vec<(PnnParams, TrainHistory)>,
    ) -> Result<Self> {
        let base_seed = config.ensemble.base_seed;
        let mut entries = Vec::with_capacity(members.len());
        for (index, (params, history)) in members.iter().enumerate() {
            entries.push(MemberEntry {
                index,
                seed: params.seed,
                dir: member_dir_name(index),
                params_sha256: sha256_hex(&f64s_to_bytes(&params.values)),
                best_epoch: history.best_epoch,
                best_loss: history.best_loss(),
                stop_epoch: history.stop_epoch,
                stop_reason: history.stop_reason,
            });
        }
        let seeds: Vec<u64> = members.iter().map(|(p, _)| p.seed).collect();
        let manifest = EnsembleManifest {
            format: ENSEMBLE_FORMAT.to_string(),
            version: VERSION,
            members: members.len(),
            base_seed,
            member_seeds: seeds.clone(),
            architecture: architecture.clone(),
            training: config.training.clone(),
            preprocess: config.preprocess.clone(),
            feature_names: norm_stats.names.clone(),
            norm_stats: norm_stats.clone(),
            norm_fingerprint: norm_fingerprint.to_string(),
            data_fingerprint: data_fingerprint.to_string(),
            fingerprint: ensemble_fingerprint(architecture, norm_fingerprint, &entries),
            member_entries: entries,
            config: config.clone(),
        };
        write_json(&dir.join(ENSEMBLE_MANIFEST), &manifest)?;
        let (params, histories): (Vec<_>, Vec<_>) = members.into_iter().unzip();
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            model: EnsembleModel::new(params, seeds)?,
            histories,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(ENSEMBLE_MANIFEST);
        if !path.is_file() {
            bail!(UserError::new(format!(
                "{} is not a complete checkpoint (no {ENSEMBLE_MANIFEST}); finish it with `train --resume`",
                dir.display()
            )));
        }
        let manifest: EnsembleManifest = read_json(&path)?;
        if manifest.format != ENSEMBLE_FORMAT || manifest.version != VERSION {
            bail!(UserError::new(format!("{}: unsupported checkpoint format", dir.display())));
        }
        let mut params = Vec::with_capacity(manifest.members);
        let mut histories = Vec::with_capacity(manifest.members);
        for entry in &manifest.member_entries {
            let (m, p) = read_member(dir, entry.index)?;
            if m.params_sha256 != entry.params_sha256 || m.seed != entry.seed || p.architecture != manifest.architecture {
                bail!(UserError::new(format!("{}: member {} does not match the ensemble manifest", dir.display(), entry.index)));
            }
            params.push(p);
            histories.push(m.history);
        }
        if params.len() != manifest.members
            || ensemble_fingerprint(&manifest.architecture, &manifest.norm_fingerprint, &manifest.member_entries)
                != manifest.fingerprint
        {
            bail!(UserError::new(format!("{}: checkpoint fingerprint mismatch", dir.display())));
        }
        let model = EnsembleModel::new(params, manifest.member_seeds.clone())?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            model,
            histories,
        })
    }
}
