//! Atomic JSON persistence for prior stores and policy checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Writes `value` as pretty JSON via a sibling temp file and a rename, so
/// readers never see a half-written document.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp)?;
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    f.write_all(&body)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("{}", path.display())),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// An artifact stamped with the config hash it was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pinned<T> {
    pub config_hash: String,
    pub body: T,
}

impl<T> Pinned<T> {
    pub fn new(config_hash: impl Into<String>, body: T) -> Self {
        Pinned {
            config_hash: config_hash.into(),
            body,
        }
    }
}

pub fn save_pinned<T: Serialize>(path: &Path, config_hash: &str, body: &T) -> Result<()> {
    write_json_atomic(
        path,
        &Pinned {
            config_hash: config_hash.to_string(),
            body,
        },
    )
}

/// Loads a pinned artifact, refusing it when the hash differs.
pub fn load_pinned<T: DeserializeOwned>(path: &Path, expected_hash: &str) -> Result<T> {
    let pinned: Pinned<T> = read_json(path)?;
    if pinned.config_hash != expected_hash {
        return Err(Error::Mismatch(format!(
            "{} was produced under config {} but the current config hashes to {}",
            path.display(),
            pinned.config_hash,
            expected_hash
        )));
    }
    Ok(pinned.body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.json");
        save_pinned(&path, "abc", &vec![1, 2, 3]).unwrap();
        let v: Vec<i32> = load_pinned(&path, "abc").unwrap();
        assert_eq!(v, vec![1, 2, 3]);
        assert!(matches!(load_pinned::<Vec<i32>>(&path, "def"), Err(Error::Mismatch(_))));
        assert!(!dir.path().join("sub/x.json.tmp").exists());
        assert!(matches!(
            read_json::<Vec<i32>>(&dir.path().join("missing.json")),
            Err(Error::NotFound(_))
        ));
    }
}
