//! Run directory layout: `<output_dir>/<UTC timestamp>-<config hash>/` with
//! `d_aug/`, `checkpoints/`, `prefs/` and `reports/` below it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

/// Provenance written next to artifacts that cannot embed it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArtifactMeta<'a> {
    pub config_hash: &'a str,
    pub seed: u64,
    pub stage: &'a str,
}

fn timestamp() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string().replace(['-', ':'], "")
}

impl RunLayout {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// A fresh directory name under `output_dir`; a numeric suffix avoids
    /// collisions within the same second.
    pub fn fresh(output_dir: &Path, config_hash: &str) -> Self {
        let base = format!("{}-{config_hash}", timestamp());
        let mut root = output_dir.join(&base);
        let mut n = 1;
        while root.exists() {
            root = output_dir.join(format!("{base}-{n}"));
            n += 1;
        }
        Self { root }
    }

    /// Most recent run under `output_dir` made with this config hash.
    pub fn latest(output_dir: &Path, config_hash: &str) -> Option<Self> {
        let tag = format!("-{config_hash}");
        let mut names: Vec<String> = fs::read_dir(output_dir)
            .ok()?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(&tag) || n.rsplit_once('-').is_some_and(|(head, _)| head.ends_with(&tag)))
            .collect();
        names.sort();
        names.pop().map(|n| Self { root: output_dir.join(n) })
    }

    /// `explicit` if given, otherwise the latest matching run, otherwise a
    /// fresh one. Nothing is created on disk until an artifact is written.
    pub fn resolve(explicit: Option<&Path>, output_dir: &Path, config_hash: &str) -> Self {
        match explicit {
            Some(p) => Self::at(p),
            None => Self::latest(output_dir, config_hash).unwrap_or_else(|| Self::fresh(output_dir, config_hash)),
        }
    }

    pub fn d_aug(&self) -> PathBuf {
        self.root.join("d_aug").join("d_aug.jsonl")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn prefs(&self, round: usize) -> PathBuf {
        self.root.join("prefs").join(format!("round{round}.jsonl"))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("reports").join(file)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::data_at(dir, format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| CliError::data_at(path, format!("cannot write {}: {e}", path.display())))
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub fn write_meta(path: &Path, meta: &ArtifactMeta<'_>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(meta).expect("meta serializes");
    text.push('\n');
    write_file(&meta_path(path), text)
}
