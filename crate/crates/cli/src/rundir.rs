//! Run directory layout, locking and the manifest.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use layersep::arrays::write_atomic;
use layersep::corpus::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
const LOCK: &str = ".lock";
const MANIFEST_FORMAT: u32 = 1;

/// Per-stage record: the config it ran under and the hashes of its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub format_version: u32,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub struct RunDir {
    pub root: PathBuf,
    _lock: LockGuard,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl RunDir {
    /// Opens (creating when needed) and locks a run directory.
    pub fn open(root: &Path) -> CliResult<Self> {
        for sub in ["", "data", "checkpoints", "logs", "outputs", "reports"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        }
        let lock = root.join(LOCK);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::io(&lock, "run directory is in use by another process (remove the lock file if that process is gone)")
            } else {
                CliError::io(&lock, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { root: root.to_path_buf(), _lock: LockGuard(lock) })
    }

    pub fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(split)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn outputs(&self) -> PathBuf {
        self.root.join("outputs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG)
    }

    /// Path relative to the run root, with `/` separators.
    pub fn relative(&self, p: &Path) -> String {
        let rel = p.strip_prefix(&self.root).unwrap_or(p);
        rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }

    pub fn read_manifest(&self) -> CliResult<Option<RunManifest>> {
        let p = self.root.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| CliError::io(&p, e))
    }

    /// Records `stage` with its output files; `persist` also stores `config`
    /// as the run's configuration for later commands.
    pub fn record(&self, config: &RunConfig, stage: &str, outputs: &[PathBuf], persist: bool) -> CliResult<()> {
        if persist {
            write_atomic(&self.config_path(), config.to_toml().as_bytes())?;
        }
        let mut manifest = self.read_manifest()?.unwrap_or_else(|| RunManifest {
            tool: "layersep".into(),
            tool_version: layersep::VERSION.into(),
            format_version: MANIFEST_FORMAT,
            config_hash: String::new(),
            stages: BTreeMap::new(),
        });
        manifest.tool_version = layersep::VERSION.into();
        manifest.config_hash = config.hash();
        let mut hashes = BTreeMap::new();
        for p in outputs {
            let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
            hashes.insert(self.relative(p), sha256_hex(&bytes));
        }
        manifest.stages.insert(stage.to_string(), StageRecord { config_hash: config.hash(), outputs: hashes });
        write_json(&self.root.join(MANIFEST), &manifest)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// JSON-lines training log that can be truncated to a resume point.
pub struct JsonLog {
    file: File,
    path: PathBuf,
}

impl JsonLog {
    /// Keeps only records with `step < keep_below`, then appends.
    pub fn open(path: &Path, keep_below: u64) -> CliResult<Self> {
        let mut kept = String::new();
        if keep_below > 0 {
            if let Ok(text) = fs::read_to_string(path) {
                for line in text.lines() {
                    let step = serde_json::from_str::<serde_json::Value>(line).ok().and_then(|v| v["step"].as_u64());
                    if step.is_some_and(|s| s < keep_below) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        fs::write(path, kept).map_err(|e| CliError::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn push(&mut self, record: &impl Serialize) -> CliResult<()> {
        let line = serde_json::to_string(record).map_err(|e| CliError::io(&self.path, e))?;
        writeln!(self.file, "{line}").map_err(|e| CliError::io(&self.path, e))
    }
}
