//! File-backed persistence: one JSON document per user.
//!
//! Writes go to a temp file in the same directory and are renamed into
//! place, so a crash leaves either the old or the new document, never a
//! torn one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ConsumedToken, UserRecord};
use crate::biometric::FaceEmbedding;
use crate::crypto::SecretKey;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt user document {path}: {source}")]
    Corrupt {
        path: PathBuf,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserDocument {
    pub record: UserRecord,
    pub reg_embedding: FaceEmbedding,
    #[serde(default)]
    pub login_embedding: Option<FaceEmbedding>,
    #[serde(default)]
    pub aid_next: Option<SecretKey>,
    #[serde(default)]
    pub consumed_tokens: Vec<ConsumedToken>,
}

#[derive(Debug, Clone)]
pub struct FileStore {
    dir: PathBuf,
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, em: &str) -> PathBuf {
        self.dir
            .join(format!("user-{}.json", hex::encode(em.as_bytes())))
    }

    pub fn save(&self, doc: &UserDocument) -> Result<(), StoreError> {
        let path = self.path_for(&doc.record.em);
        let tmp = path.with_extension("json.tmp");
        let io = |source| StoreError::Io {
            path: tmp.clone(),
            source,
        };
        let bytes = serde_json::to_vec_pretty(doc).expect("user documents always serialize");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, &path).map_err(|source| StoreError::Io {
            path: path.clone(),
            source,
        })
    }

    pub fn remove(&self, em: &str) -> Result<(), StoreError> {
        let path = self.path_for(em);
        match fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => {
                Err(StoreError::Io { path, source: e })
            }
            _ => Ok(()),
        }
    }

    pub fn load(&self, em: &str) -> Result<Option<UserDocument>, StoreError> {
        let path = self.path_for(em);
        match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b)
                .map(Some)
                .map_err(|source| StoreError::Corrupt { path, source }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(StoreError::Io { path, source }),
        }
    }

    /// Every committed document, in file-name order. Stray temp files from an
    /// interrupted write are ignored.
    pub fn load_all(&self) -> Result<Vec<UserDocument>, StoreError> {
        let rd = fs::read_dir(&self.dir).map_err(|source| StoreError::Io {
            path: self.dir.clone(),
            source,
        })?;
        let mut paths: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "json")
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("user-"))
            })
            .collect();
        paths.sort();
        paths
            .into_iter()
            .map(|path| {
                let b = fs::read(&path).map_err(|source| StoreError::Io {
                    path: path.clone(),
                    source,
                })?;
                serde_json::from_slice(&b).map_err(|source| StoreError::Corrupt { path, source })
            })
            .collect()
    }
}
