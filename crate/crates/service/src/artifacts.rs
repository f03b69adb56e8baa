//! Content-addressed PNG store: every artifact lives at
//! `<root>/<sha256 hex>.png` and is verified on read.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{storage, Result, ServiceError};

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn valid_hash(hash: &str) -> bool {
    hash.len() == 64 && hash.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(storage)?;
        Ok(ArtifactStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, hash: &str) -> PathBuf {
        self.root.join(format!("{hash}.png"))
    }

    /// Store `bytes`, returning their hash. Existing content is left as is.
    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let hash = content_hash(bytes);
        let path = self.path(&hash);
        if !path.exists() {
            atelier_core::checkpoint::write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>> {
        if !valid_hash(hash) {
            return Err(ServiceError::invalid(format!("malformed artifact hash {hash:?}")));
        }
        let bytes = fs::read(self.path(hash)).map_err(|_| ServiceError::NotFound(format!("artifact {hash}")))?;
        if content_hash(&bytes) != hash {
            return Err(ServiceError::Storage(format!("artifact {hash} is corrupt")));
        }
        Ok(bytes)
    }
}
