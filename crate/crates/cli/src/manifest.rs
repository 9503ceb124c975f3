//! Per-run record of inputs, configuration, artifacts and metrics, appended
//! as one JSON line to `<out>/manifest.jsonl`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Input label to `{path, sha256}`.
    pub inputs: BTreeMap<String, InputFile>,
    pub checkpoints: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub metrics: Value,
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn seeds_of(cfg: &RunConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("split".to_string(), cfg.split_seed),
        ("synth".to_string(), cfg.synth.seed),
        ("pretrain".to_string(), cfg.pretrain.seed),
        ("model".to_string(), cfg.model.seed),
        ("encoder".to_string(), cfg.model.encoder.seed),
        ("baseline".to_string(), cfg.baseline.seed),
    ])
}

/// An output directory plus the manifest being built for it.
pub struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn start(command: &str, cfg: &RunConfig, out: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config: cfg.clone(),
                seeds: seeds_of(cfg),
                inputs: BTreeMap::new(),
                checkpoints: Vec::new(),
                artifacts: Vec::new(),
                metrics: Value::Null,
                started_at: unix_now(),
                finished_at: 0,
            },
        })
    }

    /// Replaces the recorded configuration, e.g. after a checkpoint fixed
    /// the encoder settings.
    pub fn record_config(&mut self, cfg: &RunConfig) {
        self.manifest.config = cfg.clone();
        self.manifest.seeds = seeds_of(cfg);
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn input(&mut self, label: &str, path: &Path) -> anyhow::Result<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.insert(
            label.to_string(),
            InputFile {
                path: path.to_path_buf(),
                sha256,
            },
        );
        Ok(())
    }

    /// Path for a new file in the output directory, recorded as an artifact.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        let path = self.out.join(name);
        self.manifest.artifacts.push(path.clone());
        path
    }

    pub fn checkpoint(&mut self, name: &str) -> PathBuf {
        let path = self.artifact(name);
        self.manifest.checkpoints.push(path.clone());
        path
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let path = self.artifact(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn finish(mut self, metrics: Value) -> anyhow::Result<RunManifest> {
        self.manifest.metrics = metrics;
        self.manifest.finished_at = unix_now();
        let path = self.out.join(MANIFEST_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{}", serde_json::to_string(&self.manifest)?)?;
        Ok(self.manifest)
    }
}

pub fn read_manifests(out: &Path) -> anyhow::Result<Vec<RunManifest>> {
    let text = fs::read_to_string(out.join(MANIFEST_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
