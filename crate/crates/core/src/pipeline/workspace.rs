//! Workspace directory: one artifact file per stage, each stamped with the
//! hash of the configuration that produced it.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub stage: String,
    pub config_hash: String,
    pub data: T,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Workspace {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn ensure(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn write_artifact<T: Serialize>(&self, name: &str, stage: &str, hash: &str, data: &T) -> Result<()> {
        let env = Envelope {
            stage: stage.to_string(),
            config_hash: hash.to_string(),
            data,
        };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Reads an artifact without checking its hash.
    pub fn read_envelope<T: DeserializeOwned>(&self, name: &str) -> Result<Envelope<T>> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Container(format!("{}: {e}", path.display())))
    }

    /// Reads an artifact and checks that it was produced under `expected`.
    pub fn read_artifact<T: DeserializeOwned>(&self, name: &str, expected: &str) -> Result<T> {
        let env: Envelope<T> = self.read_envelope(name)?;
        if env.config_hash != expected {
            return Err(Error::ConfigMismatch {
                path: self.path(name),
                found: env.config_hash,
                expected: expected.to_string(),
            });
        }
        Ok(env.data)
    }

    /// The recorded hash of an artifact.
    pub fn recorded_hash(&self, name: &str) -> Result<String> {
        #[derive(Deserialize)]
        struct Head {
            config_hash: String,
        }
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let head: Head =
            serde_json::from_str(&text).map_err(|e| Error::Container(format!("{}: {e}", path.display())))?;
        Ok(head.config_hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_mismatch_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        ws.write_artifact("a.json", "a", "h1", &vec![1, 2]).unwrap();
        assert_eq!(ws.read_artifact::<Vec<i32>>("a.json", "h1").unwrap(), vec![1, 2]);
        assert!(matches!(
            ws.read_artifact::<Vec<i32>>("a.json", "h2"),
            Err(Error::ConfigMismatch { .. })
        ));
        assert!(matches!(
            ws.read_artifact::<Vec<i32>>("b.json", "h1"),
            Err(Error::MissingArtifact(_))
        ));
        assert_eq!(ws.recorded_hash("a.json").unwrap(), "h1");
    }
}
