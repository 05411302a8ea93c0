//! Run manifests: everything needed to rerun a command and check its outputs.
//!
//! ```text
//! # nsrenorm run manifest
//! schema = manifest/1
//! version = 0.1.0
//! command = certify
//! config_hash = <sha256 of config text and schema list>
//! started_unix = 1760000000
//! finished_unix = 1760000004
//! flag.uncertified = false
//! seed.estimate = 123
//! config.grid_n = 16
//! file.certificate.csv = <sha256>
//! ```
//! Timestamps are informational; replay compares only file hashes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::certificate::parse_key_values;
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "manifest/1";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Schema versions of every emitted table; part of the config hash.
pub const SCHEMAS: &[&str] = &[
    "certificate/1",
    "audits/1",
    "trajectory/1",
    "verdicts/1",
    "sweep_nu/1",
    "m_scaling/1",
    "ou/1",
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn config_hash(config: &RunConfig) -> String {
    let mut text = config.to_text();
    for s in SCHEMAS {
        let _ = writeln!(text, "schema {s}");
    }
    sha256_hex(text.as_bytes())
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub flags: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Output path relative to the run directory, and its sha256.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            config_hash: config_hash(config),
            flags: BTreeMap::new(),
            seeds: BTreeMap::new(),
            started_unix: unix_now(),
            finished_unix: 0,
            files: BTreeMap::new(),
        }
    }

    /// Hashes `dir/rel` and lists it.
    pub fn record_file(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let h = sha256_file(&dir.join(rel))?;
        self.files.insert(rel.to_string(), h);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# nsrenorm run manifest\n");
        let _ = writeln!(s, "schema = {MANIFEST_SCHEMA}");
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "started_unix = {}", self.started_unix);
        let _ = writeln!(s, "finished_unix = {}", self.finished_unix);
        for (k, v) in &self.flags {
            let _ = writeln!(s, "flag.{k} = {v}");
        }
        for (k, v) in &self.seeds {
            let _ = writeln!(s, "seed.{k} = {v}");
        }
        for (k, v) in self.config.to_map() {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        for (k, v) in &self.files {
            let _ = writeln!(s, "file.{k} = {v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        let need = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::parse("manifest", format!("missing `{k}`")))
        };
        if need("schema")? != MANIFEST_SCHEMA {
            return Err(Error::parse(
                "manifest",
                format!("unsupported schema `{}`", need("schema")?),
            ));
        }
        let mut config = RunConfig::default();
        let mut m = RunManifest {
            command: need("command")?,
            version: need("version")?,
            config: RunConfig::default(),
            config_hash: need("config_hash")?,
            flags: BTreeMap::new(),
            seeds: BTreeMap::new(),
            started_unix: need("started_unix")?
                .parse()
                .map_err(|e| Error::parse("manifest", format!("{e}")))?,
            finished_unix: need("finished_unix")?
                .parse()
                .map_err(|e| Error::parse("manifest", format!("{e}")))?,
            files: BTreeMap::new(),
        };
        for (k, v) in &map {
            if let Some(key) = k.strip_prefix("config.") {
                config.set(key, v)?;
            } else if let Some(key) = k.strip_prefix("flag.") {
                m.flags.insert(key.to_string(), v.clone());
            } else if let Some(key) = k.strip_prefix("seed.") {
                let s = v
                    .parse()
                    .map_err(|e| Error::parse("manifest", format!("seed.{key}: {e}")))?;
                m.seeds.insert(key.to_string(), s);
            } else if let Some(key) = k.strip_prefix("file.") {
                m.files.insert(key.to_string(), v.clone());
            }
        }
        if config_hash(&config) != m.config_hash {
            return Err(Error::parse(
                "manifest",
                "config_hash does not match the embedded config",
            ));
        }
        m.config = config;
        Ok(m)
    }

    pub fn write(&mut self, dir: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
