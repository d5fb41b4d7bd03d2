use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
    /// Holds wall-clock measurements, so its bytes vary between runs.
    pub timing: bool,
}

/// Everything needed to re-run a command, plus what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Resolved flag set, defaults included.
    pub command: Command,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub corpus_fingerprints: BTreeMap<String, String>,
    pub input_files: BTreeMap<String, String>,
    pub outputs: Vec<OutputFile>,
    /// Per-component parameter hashes of the written model.
    pub checkpoint_fingerprints: BTreeMap<String, String>,
    pub updated_params: Vec<String>,
    /// Digest of the primary report with timing fields removed.
    pub report_digest: Option<String>,
    pub replayed_from: Option<PathBuf>,
    pub started_at: f64,
    pub finished_at: f64,
    pub status: String,
    pub error: Option<String>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(command: Command, argv: Vec<String>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: command.seed(),
            command,
            argv,
            corpus_fingerprints: BTreeMap::new(),
            input_files: BTreeMap::new(),
            outputs: Vec::new(),
            checkpoint_fingerprints: BTreeMap::new(),
            updated_params: Vec::new(),
            report_digest: None,
            replayed_from: None,
            started_at: now(),
            finished_at: 0.0,
            status: "running".into(),
            error: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = file_sha256(path)?;
        self.input_files.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path, timing: bool) -> Result<()> {
        let sha256 = file_sha256(path)?;
        self.outputs.push(OutputFile {
            path: path.to_path_buf(),
            sha256,
            timing,
        });
        Ok(())
    }

    /// Default location: next to the primary output, else the working directory.
    pub fn default_path(command: &Command) -> PathBuf {
        match command.out() {
            Some(out) => {
                let mut s = out.as_os_str().to_owned();
                s.push(".manifest.json");
                s.into()
            }
            None => PathBuf::from(format!("autodial-{}.manifest.json", command.name())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        autodial::checkpoint::write_atomic(path, &bytes).with_context(|| format!("writing manifest {}", path.display()))
    }
}
