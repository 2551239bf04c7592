//! Run directory: config snapshot, artifacts, reports and an append-only
//! log, owned by one process at a time through a lock file.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{config_err, PaeError, Result};
use crate::harness::config::RunConfig;

pub const LOCK_FILE: &str = "LOCK";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Takes the lock and writes the config snapshot. An existing snapshot
    /// must match `cfg`.
    pub fn open(root: impl Into<PathBuf>, cfg: &RunConfig) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&lock).unwrap_or_default();
                return Err(config_err(format!(
                    "run directory {} is locked by process {}",
                    root.display(),
                    owner.trim()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        let dir = Self { root };
        if let Err(e) = dir.snapshot(cfg) {
            drop(dir);
            return Err(e);
        }
        for sub in ["checkpoints", "priors", "latents", "reports", "samples"] {
            fs::create_dir_all(dir.root.join(sub))?;
        }
        Ok(dir)
    }

    fn snapshot(&self, cfg: &RunConfig) -> Result<()> {
        let path = self.root.join(CONFIG_FILE);
        let text = cfg.to_toml()?;
        if path.exists() {
            let existing = RunConfig::from_toml(&fs::read_to_string(&path)?)?;
            if existing.hash()? != cfg.hash()? {
                return Err(config_err(format!(
                    "{} holds a different config; use a fresh run directory",
                    path.display()
                )));
            }
            return Ok(());
        }
        fs::write(path, text)?;
        Ok(())
    }

    /// The config snapshot of an existing run, read without taking the lock.
    pub fn read_config(root: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(&fs::read_to_string(root.join(CONFIG_FILE))?)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn priors(&self) -> PathBuf {
        self.root.join("priors")
    }

    pub fn latents(&self, name: &str) -> PathBuf {
        self.root.join("latents").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    /// Appends one JSON line to the run log.
    pub fn log<T: Serialize>(&self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| PaeError::Format(e.to_string()))?;
        let mut f = OpenOptions::new().create(true).append(true).open(self.root.join(LOG_FILE))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn write_report<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.report(name);
        write_json(&path, value)?;
        Ok(path)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| PaeError::Format(e.to_string()))?;
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| PaeError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::toy();
        let a = RunDir::open(tmp.path(), &cfg).unwrap();
        assert!(RunDir::open(tmp.path(), &cfg).is_err());
        a.log(&serde_json::json!({"stage": "x"})).unwrap();
        a.log(&serde_json::json!({"stage": "y"})).unwrap();
        drop(a);
        let lines = fs::read_to_string(tmp.path().join(LOG_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 2);
        let _b = RunDir::open(tmp.path(), &cfg).unwrap();
    }

    #[test]
    fn config_mismatch_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::toy();
        drop(RunDir::open(tmp.path(), &cfg).unwrap());
        let mut other = cfg.clone();
        other.seed = 9;
        assert!(RunDir::open(tmp.path(), &other).is_err());
        assert!(!tmp.path().join(LOCK_FILE).exists());
        assert_eq!(RunDir::read_config(tmp.path()).unwrap(), cfg);
    }
}
