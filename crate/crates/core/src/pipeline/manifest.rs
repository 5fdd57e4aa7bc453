//! Stage manifests and the working-directory lock.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_DIR: &str = "manifests";
pub const LOCK_FILE: &str = ".elecmap.lock";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of a value's canonical JSON form.
pub fn sha256_json(value: &impl Serialize) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(sha256_bytes(serde_json::to_string(&v)?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the working directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// Hash of the whole effective configuration (location excluded).
    pub config_hash: String,
    /// Hash of the configuration sections this stage reads.
    pub stage_key: String,
    pub seed: u64,
    /// Upstream manifest name -> sha256 of that manifest file.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
    pub summary: serde_json::Value,
    pub warnings: Vec<String>,
}

pub fn manifest_path(workdir: &Path, name: &str) -> PathBuf {
    workdir.join(MANIFEST_DIR).join(format!("{name}.json"))
}

fn rel_string(workdir: &Path, path: &Path) -> Result<String> {
    let rel = path.strip_prefix(workdir).map_err(|_| {
        Error::Input(format!("{} is outside the working directory", path.display()))
    })?;
    Ok(rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/"))
}

pub fn artifact(workdir: &Path, path: &Path) -> Result<Artifact> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    Ok(Artifact {
        path: rel_string(workdir, path)?,
        sha256: sha256_file(path)?,
        bytes: meta.len(),
    })
}

impl Manifest {
    pub fn write(&self, workdir: &Path, name: &str) -> Result<PathBuf> {
        let path = manifest_path(workdir, name);
        let dir = path.parent().expect("manifest dir");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(workdir: &Path, name: &str) -> Result<Option<(Manifest, String)>> {
        let path = manifest_path(workdir, name);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_slice(&bytes)?;
        Ok(Some((m, sha256_bytes(&bytes))))
    }

    /// True when every artifact still exists with the recorded hash.
    pub fn artifacts_intact(&self, workdir: &Path) -> bool {
        self.artifacts.iter().all(|a| {
            let p = workdir.join(&a.path);
            std::fs::metadata(&p).is_ok_and(|m| m.len() == a.bytes)
                && sha256_file(&p).is_ok_and(|h| h == a.sha256)
        })
    }
}

/// Exclusive lock on a working directory, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = std::fs::read_to_string(&path).unwrap_or_default();
                Err(Error::Precondition {
                    stage: "lock".into(),
                    reason: format!(
                        "{} is locked by process {}",
                        workdir.display(),
                        holder.trim()
                    ),
                    hint: format!("wait for it to finish or delete {} if stale", path.display()),
                })
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = WorkdirLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            WorkdirLock::acquire(dir.path()),
            Err(Error::Precondition { .. })
        ));
        drop(a);
        WorkdirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifest_round_trip_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("sub").join("a.txt");
        std::fs::create_dir_all(f.parent().unwrap()).unwrap();
        std::fs::write(&f, "hello").unwrap();
        let m = Manifest {
            stage: "x".into(),
            config_hash: "c".into(),
            stage_key: "k".into(),
            seed: 1,
            inputs: BTreeMap::new(),
            artifacts: vec![artifact(dir.path(), &f).unwrap()],
            summary: serde_json::json!({"n": 1}),
            warnings: vec![],
        };
        assert_eq!(m.artifacts[0].path, "sub/a.txt");
        m.write(dir.path(), "x").unwrap();
        let (back, _) = Manifest::read(dir.path(), "x").unwrap().unwrap();
        assert_eq!(back, m);
        assert!(back.artifacts_intact(dir.path()));
        std::fs::write(&f, "jello").unwrap();
        assert!(!back.artifacts_intact(dir.path()));
    }
}
