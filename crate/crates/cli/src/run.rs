//! Exit-code classification, output directories and the run manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::{SecondsFormat, Utc};
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or input symbols: exit 1.
    Usage(String),
    /// Anything that went wrong while running: exit 2.
    Runtime(String),
    /// A check ran and did not pass: exit 3.
    Check(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

impl From<nartts::Error> for Failure {
    fn from(e: nartts::Error) -> Self {
        use nartts::Error as E;
        match e {
            E::Config(_) | E::UnknownSymbol(_) | E::TokenOutOfRange { .. } | E::SpeakerOutOfRange { .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Reads a file, naming it in the error.
pub fn read_text(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn open(path: &Path) -> CmdResult<fs::File> {
    fs::File::open(path).map_err(|e| Failure::Usage(format!("cannot open {}: {e}", path.display())))
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CmdResult {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Failure::Usage(format!(
                "output directory {} is not empty (use --force to write into it)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// `git describe` of the working directory, or "unknown" outside a repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

/// `key = value` lines as a map.
pub fn config_map(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub tool_version: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub git_describe: String,
    pub started_at: String,
    pub finished_at: String,
    /// Non-finite values serialize as null.
    pub metrics: BTreeMap<String, f64>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str, config_text: &str, seed: u64) -> Self {
        RunManifest {
            format_version: MANIFEST_VERSION,
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config_map(config_text),
            seed,
            git_describe: git_describe(),
            started_at: now(),
            finished_at: String::new(),
            metrics: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    /// Stamps the end time and writes `manifest.json` into `dir`, replacing
    /// any earlier one.
    pub fn finish(mut self, dir: &Path) -> CmdResult<PathBuf> {
        self.finished_at = now();
        self.files.sort();
        self.files.dedup();
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self).map_err(|e| Failure::Runtime(e.to_string()))?;
        fs::write(&path, json + "\n")?;
        Ok(path)
    }
}
