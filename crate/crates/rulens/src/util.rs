use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

/// Bad input or invocation; maps to exit code 2.
#[derive(Debug)]
pub struct UserError(pub String);

impl UserError {
    pub fn new(message: impl Into<String>) -> Self {
        Self(message.into())
    }
}

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

/// 2 for user and input errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UserError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<rulens_core::Error>() {
            return if e.is_input_error() { 2 } else { 1 };
        }
        if let Some(e) = cause.downcast_ref::<io::Error>() {
            if matches!(e.kind(), io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied) {
                return 2;
            }
        }
    }
    1
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| UserError::new(format!("cannot read {}: {e}", path.display())).into())
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().context("output path has no file name")?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        bail!("array of {} bytes is not a whole number of f64 values", bytes.len());
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Provenance lines that open every text artifact.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub command: &'static str,
    pub fingerprints: Vec<(&'static str, String)>,
    pub config_toml: String,
}

impl Provenance {
    pub fn comment_block(&self) -> String {
        let mut s = format!("# rulens {} {}\n", env!("CARGO_PKG_VERSION"), self.command);
        for (k, v) in &self.fingerprints {
            s.push_str(&format!("# {k}: {v}\n"));
        }
        s.push_str("# config:\n");
        for line in self.config_toml.lines() {
            if line.is_empty() {
                s.push_str("#\n");
            } else {
                s.push_str(&format!("#   {line}\n"));
            }
        }
        s
    }
}

/// Tab-separated table with a provenance header, fixed columns and a header
/// row.
pub struct Tsv {
    text: String,
    columns: usize,
}

impl Tsv {
    pub fn new(provenance: &Provenance, columns: &[&str]) -> Self {
        let mut text = provenance.comment_block();
        text.push_str(&columns.join("\t"));
        text.push('\n');
        Self {
            text,
            columns: columns.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.columns, "row width");
        self.text.push_str(&cells.join("\t"));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| UserError::new(format!("{}: {e}", path.display())).into())
}

/// Compact listing such as `1-5, 8, 10-12`.
pub fn id_ranges(ids: &[u32]) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        let mut j = i;
        while j + 1 < ids.len() && ids[j + 1] == ids[j] + 1 {
            j += 1;
        }
        out.push(if i == j { ids[i].to_string() } else { format!("{}-{}", ids[i], ids[j]) });
        i = j + 1;
    }
    out.join(", ")
}
