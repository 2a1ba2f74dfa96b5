//! Run reports and the hashed artifact manifest.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use edg_core::diagnostics::ConservationReport;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Mode, ScenarioConfig};

/// One emitted file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Summary of one scenario. Everything except `wall_clock_seconds` is a
/// pure function of the configuration and seed.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub mode: Mode,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub outcome: String,
    pub collapse_time: Option<f64>,
    pub conservation: Option<ConservationReport>,
    pub manifest: Vec<ManifestEntry>,
    pub wall_clock_seconds: f64,
}

pub const REPORT_FILE: &str = "report.json";

impl RunReport {
    /// Process exit status: 3 for a non-finite right-hand side, 4 for a
    /// collapse where none was expected, else 0.
    pub fn exit_code(&self) -> i32 {
        match self.outcome.as_str() {
            "non-finite" => 3,
            "step-collapse" | "step-limit" if self.mode != Mode::Blowup => 4,
            _ => 0,
        }
    }

    pub fn write(&self, dir: &Path) -> io::Result<PathBuf> {
        let path = dir.join(REPORT_FILE);
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Writes artifacts into one directory and records their digests.
pub struct Artifacts {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    /// Renders a file in memory, then writes and hashes it.
    pub fn emit<F>(&mut self, name: &str, render: F) -> io::Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> io::Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf)?;
        fs::write(self.dir.join(name), &buf)?;
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            bytes: buf.len() as u64,
            sha256: hex::encode(Sha256::digest(&buf)),
        });
        Ok(())
    }

    pub fn emit_json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        self.emit(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")
        })
    }

    pub fn into_manifest(self) -> Vec<ManifestEntry> {
        self.entries
    }
}
