//! Run manifest + output-directory lock. Every artifact-producing command
//! writes exactly one `manifest.json` into its output directory; the lock
//! file keeps concurrent runs out of the same directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".ssad-lock";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the resolved (post-override) configuration.
    pub config_sha256: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn begin(
        command: &str,
        config_path: Option<&Path>,
        config_sha256: String,
        seed: u64,
        out_dir: &Path,
    ) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config_sha256,
            seed,
            out_dir: out_dir.to_path_buf(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: String::new(),
        }
    }

    /// Stamp the end time and write the manifest into the run directory.
    pub fn finish(mut self) -> anyhow::Result<()> {
        self.finished_at = chrono::Utc::now().to_rfc3339();
        let path = self.out_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Exclusive claim on an output directory for the duration of a command.
/// A leftover lock (crashed run or concurrent writer) is an error unless
/// `force` is set.
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(out_dir: &Path, force: bool) -> anyhow::Result<Self> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        let path = out_dir.join(LOCK_FILE);
        if force {
            let _ = std::fs::remove_file(&path);
        }
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => anyhow::bail!(
                "output directory {} is locked by another run (or a crashed one); \
                 pass --force to take it over",
                out_dir.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
