//! Artifact headers and the per-run-directory manifest.
//!
//! JSONL artifacts start with one `{"header": {...}}` line carrying the
//! config hash; JSON artifacts carry the same object under `"header"`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lgdiff_core::config::RunConfig;
use lgdiff_core::molgraph::{AtomVocab, MolecularGraph, MoleculeRecord};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config_hash: String,
    pub config: RunConfig,
}

impl Header {
    pub fn new(kind: &str, config: &RunConfig) -> Self {
        Self { kind: kind.into(), config_hash: config.hash(), config: config.clone() }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: String,
    pub config_hash: String,
    pub command: Vec<String>,
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    fs::create_dir_all(parent_dir(path)).with_context(|| format!("creating directory for {}", path.display()))
}

/// Adds or replaces the entry for `path` in its directory's manifest.
pub fn record(path: &Path, kind: &str, config_hash: &str) -> Result<()> {
    let manifest_path = parent_dir(path).join(MANIFEST);
    let mut m: Manifest = match fs::read_to_string(&manifest_path) {
        Ok(s) => serde_json::from_str(&s).with_context(|| format!("reading {}", manifest_path.display()))?,
        Err(_) => Manifest::default(),
    };
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    m.artifacts.retain(|e| e.file != file);
    m.artifacts.push(ManifestEntry {
        file,
        kind: kind.into(),
        config_hash: config_hash.into(),
        command: std::env::args().collect(),
    });
    fs::write(&manifest_path, serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

pub fn write_header<W: Write>(mut w: W, header: &Header) -> Result<()> {
    serde_json::to_writer(&mut w, &HeaderLine { header: header.clone() })?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Splits a JSONL file into its header (if any) and the remaining lines.
pub fn read_jsonl_with_header(path: &Path) -> Result<(Option<Header>, Vec<String>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let mut header = None;
    if let Some(first) = lines.peek() {
        if let Ok(h) = serde_json::from_str::<HeaderLine>(first) {
            header = Some(h.header);
            lines.next();
        }
    }
    Ok((header, lines.map(str::to_string).collect()))
}

pub fn read_molecules(path: &Path, vocab: &AtomVocab) -> Result<(Option<Header>, Vec<MolecularGraph>)> {
    let (header, lines) = read_jsonl_with_header(path)?;
    let graphs = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let rec: MoleculeRecord = serde_json::from_str(l).with_context(|| format!("{} record {}", path.display(), i + 1))?;
            Ok(rec.to_graph(vocab)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, graphs))
}

/// Refuses to combine artifacts produced under different configurations.
pub fn check_hash(what: &str, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        bail!(lgdiff_core::Error::ConfigMismatch { expected: expected.into(), found: format!("{found} ({what})") });
    }
    Ok(())
}
