//! Run directories: streamed metrics, side files and the manifest.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use jmt_core::codec::sha256_hex;
use jmt_core::metrics::{read_jsonl, write_csv, write_jsonl, MetricsRecord};
use jmt_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub dataset_hash: Option<String>,
    /// `ok`, `interrupted` or `diverged`.
    pub status: String,
    pub elapsed_seconds: f64,
    pub summary: serde_json::Value,
    pub files: Vec<FileEntry>,
}

/// Identity of the run recorded in its manifest.
#[derive(Default)]
pub struct RunInfo {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub dataset_hash: Option<String>,
}

pub struct RunDir {
    path: PathBuf,
    command: String,
    started: Instant,
}

impl RunDir {
    pub fn create(path: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(path)?;
        Ok(RunDir {
            path: path.to_path_buf(),
            command: command.to_string(),
            started: Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.file(name), text)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Opens `metrics.jsonl` for streaming. With `keep_before = Some(e)`, lines
    /// from earlier epochs of an interrupted run are kept and the rest dropped.
    pub fn metrics_log(&self, keep_before: Option<usize>) -> Result<MetricsLog> {
        let path = self.file(METRICS_JSONL);
        let kept = match keep_before {
            Some(epoch) if path.exists() => read_jsonl(&fs::read_to_string(&path)?)?
                .into_iter()
                .filter(|r| r.epoch < epoch && r.split != "test")
                .collect(),
            _ => Vec::new(),
        };
        let mut file = BufWriter::new(OpenOptions::new().create(true).write(true).truncate(true).open(&path)?);
        write_jsonl(&mut file, &kept)?;
        file.flush()?;
        Ok(MetricsLog { file })
    }

    /// Rewrites `metrics.csv` from the JSONL log, then hashes every file in
    /// the directory into the manifest.
    pub fn finish(&self, info: RunInfo, status: &str, summary: serde_json::Value) -> Result<Manifest> {
        let jsonl = self.file(METRICS_JSONL);
        if jsonl.exists() {
            let records = read_jsonl(&fs::read_to_string(&jsonl)?)?;
            write_csv(BufWriter::new(File::create(self.file(METRICS_CSV))?), &records)?;
        }
        let mut files = Vec::new();
        let mut names: Vec<String> = fs::read_dir(&self.path)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST && !n.ends_with(".tmp"))
            .collect();
        names.sort();
        for name in names {
            let bytes = fs::read(self.file(&name))?;
            files.push(FileEntry {
                path: name,
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = Manifest {
            tool: "jmt".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            argv: std::env::args().collect(),
            preset: info.preset,
            seed: info.seed,
            config_hash: info.config_hash,
            dataset_hash: info.dataset_hash,
            status: status.into(),
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
            summary,
            files,
        };
        self.write_json(MANIFEST, &manifest)?;
        Ok(manifest)
    }
}

pub struct MetricsLog {
    file: BufWriter<File>,
}

impl MetricsLog {
    /// Appends and flushes, so the log is complete up to the last epoch even
    /// if the process dies.
    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        write_jsonl(&mut self.file, std::slice::from_ref(record))?;
        self.file.flush()?;
        Ok(())
    }
}

/// Recomputes every hash listed in a run directory's manifest.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    for entry in &manifest.files {
        let file = dir.join(&entry.path);
        let bytes = fs::read(&file).map_err(|e| Error::Input(format!("{}: {e}", file.display())))?;
        if bytes.len() as u64 != entry.bytes || sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Corrupt {
                offset: 0,
                detail: format!("{} does not match its manifest entry", file.display()),
            });
        }
    }
    Ok(manifest)
}
