//! On-disk model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json`, `vocab.json` and
//! `params.safetensors`. Writes go to a sibling temporary directory that is
//! renamed into place, so readers never observe a half-written checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::retriever::Scorer;
use crate::tokenizer::{Tokenizer, Vocab};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Retriever,
    Reranker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ModelKind,
    pub format_version: u32,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<Scorer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poly_codes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Full model configuration.
    pub config: serde_json::Value,
    /// Question ids the model was trained on.
    #[serde(default)]
    pub trained_questions: Vec<String>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn vocab_path(dir: &Path) -> PathBuf {
    dir.join("vocab.json")
}

pub fn params_path(dir: &Path) -> PathBuf {
    dir.join("params.safetensors")
}

pub fn write(dir: &Path, manifest: &Manifest, vocab: &Vocab, params: &ParamStore) -> Result<()> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(manifest_path(&staging), text + "\n").map_err(|e| Error::io(&staging, e))?;
    vocab.save(vocab_path(&staging))?;
    params.save(params_path(&staging))?;

    if dir.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads and cross-checks the manifest and vocabulary of a checkpoint.
pub fn read(dir: &Path, kind: ModelKind) -> Result<(Manifest, Vocab)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} model, expected {:?}",
            dir.display(),
            manifest.kind,
            kind
        )));
    }
    let vocab = Vocab::load(vocab_path(dir))?;
    if vocab.fingerprint() != manifest.vocab_hash {
        return Err(Error::Checkpoint("vocabulary does not match the manifest hash".into()));
    }
    Ok((manifest, vocab))
}
