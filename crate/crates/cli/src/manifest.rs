//! Run manifests: every emitted file with its SHA-256 digest and size,
//! plus the resolved configuration echo and wall-clock timings.

use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone)]
pub struct FileRecord {
    pub path: String,
    pub digest: String,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_echo: String,
    pub overrides: Vec<String>,
    pub files: Vec<FileRecord>,
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn new(command: &str, config_echo: &str) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_echo: config_echo.to_string(),
            overrides: Vec::new(),
            files: Vec::new(),
            timings: Vec::new(),
        }
    }

    /// Hash and record an emitted file (path relative to the run directory).
    pub fn record_file(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let bytes = fs::read(dir.join(name))?;
        self.files.push(FileRecord {
            path: name.to_string(),
            digest: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn add_timing(&mut self, name: &str, seconds: f64) {
        self.timings.push((name.to_string(), seconds));
    }

    /// Write `manifest.txt` into the run directory.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("manifest.txt");
        let mut f = fs::File::create(&path)?;
        writeln!(f, "# qflux run manifest")?;
        writeln!(f, "# command: {}", self.command)?;
        writeln!(f, "# version: {}", self.version)?;
        writeln!(f, "# config")?;
        for line in self.config_echo.lines() {
            writeln!(f, "#   {line}")?;
        }
        for o in &self.overrides {
            writeln!(f, "#   {o}")?;
        }
        writeln!(f, "# files (path digest bytes)")?;
        for file in &self.files {
            writeln!(f, "{} {} {}", file.path, file.digest, file.bytes)?;
        }
        writeln!(f, "# timings (name seconds)")?;
        for (name, secs) in &self.timings {
            writeln!(f, "# {name} {secs:.6}")?;
        }
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .fold(String::with_capacity(64), |mut acc, b| {
            use std::fmt::Write as _;
            let _ = write!(acc, "{b:02x}");
            acc
        })
}
