//! Directory-backed store of uploaded designs, content-addressed assets, and result records.
//!
//! Everything is write-once: designs and records are staged in `tmp/` and renamed into place,
//! so readers never observe a partial entry and stored bundles are never mutated.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use recolor_core::design::{encode_png_rgb, BundleError, DesignBundle};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("design '{0}' not found")]
    DesignNotFound(String),
    #[error("'{0}' is not a valid design id")]
    InvalidId(String),
    #[error("design '{0}' already exists with different content")]
    Conflict(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("store io failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Metadata written next to each stored bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignRecord {
    pub id: String,
    pub content_hash: String,
    pub design_ref: String,
    pub photo_ref: String,
}

/// Where a result raster came from, so it can seed a further instruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub design_id: String,
    pub photo_ref: String,
}

const RECORD_FILE: &str = "record.json";

pub struct Store {
    root: PathBuf,
    staging: AtomicU64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Ids are 1 to 64 characters of `[a-z0-9_-]`, so they are safe as directory names.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
}

/// Asset refs are SHA-256 hex digests.
pub fn valid_ref(r: &str) -> bool {
    r.len() == 64 && r.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Hash of the canonical encoding, independent of how the uploaded PNGs were compressed.
pub fn bundle_hash(b: &DesignBundle) -> String {
    let mut h = Sha256::new();
    for part in [encode_png_rgb(&b.design), encode_png_rgb(&b.photo), b.annotations_json().into_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(&part);
    }
    hex::encode(h.finalize())
}

impl Store {
    pub fn open(root: &Path) -> Result<Store, StoreError> {
        for sub in ["designs", "assets", "results", "tmp"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Store {
            root: root.to_path_buf(),
            staging: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn stage_path(&self) -> PathBuf {
        let n = self.staging.fetch_add(1, Ordering::Relaxed);
        self.root.join("tmp").join(format!("{}-{n}", std::process::id()))
    }

    fn design_dir(&self, id: &str) -> PathBuf {
        self.root.join("designs").join(id)
    }

    /// Stores `b` under `id` (default: a prefix of its content hash). Storing identical content
    /// again is a no-op; different content under an existing id is a conflict.
    /// Returns the record and whether it was newly created.
    pub fn put_design(&self, id: Option<&str>, b: &DesignBundle) -> Result<(DesignRecord, bool), StoreError> {
        let content_hash = bundle_hash(b);
        let id = match id {
            Some(id) if !valid_id(id) => return Err(StoreError::InvalidId(id.to_string())),
            Some(id) => id.to_string(),
            None => content_hash[..16].to_string(),
        };
        let dir = self.design_dir(&id);
        if dir.exists() {
            return self.existing(&id, &content_hash).map(|r| (r, false));
        }
        let record = DesignRecord {
            id: id.clone(),
            content_hash: content_hash.clone(),
            design_ref: self.put_asset(&encode_png_rgb(&b.design))?,
            photo_ref: self.put_asset(&encode_png_rgb(&b.photo))?,
        };
        let stage = self.stage_path();
        b.save(&stage)?;
        let rp = stage.join(RECORD_FILE);
        fs::write(&rp, serde_json::to_vec_pretty(&record).expect("serializable")).map_err(io_err(&rp))?;
        match fs::rename(&stage, &dir) {
            Ok(()) => Ok((record, true)),
            Err(e) => {
                let _ = fs::remove_dir_all(&stage);
                if dir.exists() {
                    // Lost a race with a concurrent upload of the same id.
                    self.existing(&id, &content_hash).map(|r| (r, false))
                } else {
                    Err(io_err(&dir)(e))
                }
            }
        }
    }

    fn existing(&self, id: &str, content_hash: &str) -> Result<DesignRecord, StoreError> {
        let r = self.design_record(id)?;
        if r.content_hash == content_hash {
            Ok(r)
        } else {
            Err(StoreError::Conflict(id.to_string()))
        }
    }

    pub fn design_record(&self, id: &str) -> Result<DesignRecord, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::DesignNotFound(id.to_string()));
        }
        let p = self.design_dir(id).join(RECORD_FILE);
        let bytes = match fs::read(&p) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::DesignNotFound(id.to_string())),
            Err(e) => return Err(io_err(&p)(e)),
        };
        serde_json::from_slice(&bytes).map_err(|e| io_err(&p)(io::Error::new(io::ErrorKind::InvalidData, e)))
    }

    pub fn load_design(&self, id: &str) -> Result<DesignBundle, StoreError> {
        self.design_record(id)?;
        Ok(DesignBundle::load(&self.design_dir(id))?)
    }

    /// Stores bytes under their SHA-256 and returns the ref.
    pub fn put_asset(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let r = sha256_hex(bytes);
        let p = self.root.join("assets").join(format!("{r}.png"));
        if !p.exists() {
            let stage = self.stage_path();
            fs::write(&stage, bytes).map_err(io_err(&stage))?;
            fs::rename(&stage, &p).map_err(io_err(&p))?;
        }
        Ok(r)
    }

    pub fn asset(&self, r: &str) -> Result<Option<Vec<u8>>, StoreError> {
        if !valid_ref(r) {
            return Ok(None);
        }
        let p = self.root.join("assets").join(format!("{r}.png"));
        match fs::read(&p) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&p)(e)),
        }
    }

    pub fn put_result(&self, image_ref: &str, rec: &ResultRecord) -> Result<(), StoreError> {
        let p = self.root.join("results").join(format!("{image_ref}.json"));
        if p.exists() {
            return Ok(());
        }
        let stage = self.stage_path();
        fs::write(&stage, serde_json::to_vec_pretty(rec).expect("serializable")).map_err(io_err(&stage))?;
        fs::rename(&stage, &p).map_err(io_err(&p))
    }

    pub fn result(&self, image_ref: &str) -> Result<Option<ResultRecord>, StoreError> {
        if !valid_ref(image_ref) {
            return Ok(None);
        }
        let p = self.root.join("results").join(format!("{image_ref}.json"));
        match fs::read(&p) {
            Ok(b) => Ok(serde_json::from_slice(&b).ok()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&p)(e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_and_ref_validation() {
        assert!(valid_id("case-00001"));
        assert!(!valid_id("../etc"));
        assert!(!valid_id(""));
        assert!(!valid_id("Upper"));
        assert!(valid_ref(&sha256_hex(b"x")));
        assert!(!valid_ref("abc"));
        assert!(!valid_ref(&"g".repeat(64)));
    }

    #[test]
    fn assets_are_content_addressed_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        let a = s.put_asset(b"pixels").unwrap();
        assert_eq!(s.put_asset(b"pixels").unwrap(), a);
        assert_eq!(s.asset(&a).unwrap().unwrap(), b"pixels");
        assert_eq!(s.asset(&sha256_hex(b"other")).unwrap(), None);
    }
}
