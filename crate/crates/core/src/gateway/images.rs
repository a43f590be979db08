use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use super::ImageRef;
use crate::data::{DatasetManifest, ImageRecord};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

const TAG_IMAGE_MAGIC: &str = "TAGIMG/1";

/// Byte encoding of a synthetic image described by tags.
pub fn tag_image_bytes<S: AsRef<str>>(tags: &[S]) -> Vec<u8> {
    let set: BTreeSet<&str> = tags.iter().map(AsRef::as_ref).collect();
    let mut out = String::from(TAG_IMAGE_MAGIC);
    out.push('\n');
    for t in set {
        out.push_str(t);
        out.push('\n');
    }
    out.into_bytes()
}

/// Tags of a synthetic image, or `None` for other content.
pub fn parse_tag_image(bytes: &[u8]) -> Option<BTreeSet<String>> {
    let text = std::str::from_utf8(bytes).ok()?;
    let mut lines = text.lines();
    if lines.next()? != TAG_IMAGE_MAGIC {
        return None;
    }
    Some(lines.filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// Content-addressed image bytes, in memory and optionally mirrored to disk.
#[derive(Default)]
pub struct ImageStore {
    mem: RwLock<HashMap<ImageRef, Arc<Vec<u8>>>>,
    dir: Option<PathBuf>,
}

impl ImageStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Derived images are persisted to `dir/<digest>`.
    pub fn with_dir(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(ImageStore {
            mem: RwLock::new(HashMap::new()),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn insert_bytes(&self, bytes: Vec<u8>) -> Result<ImageRef> {
        let r = ImageRef(sha256_hex(&bytes));
        if let Some(dir) = &self.dir {
            let p = dir.join(&r.0);
            if !p.exists() {
                std::fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
            }
        }
        self.mem
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .entry(r.clone())
            .or_insert_with(|| Arc::new(bytes));
        Ok(r)
    }

    /// Register a file on disk; the reference depends only on its bytes.
    pub fn insert_file(&self, path: &Path) -> Result<ImageRef> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let r = ImageRef(sha256_hex(&bytes));
        self.mem
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .entry(r.clone())
            .or_insert_with(|| Arc::new(bytes));
        Ok(r)
    }

    pub fn get(&self, r: &ImageRef) -> Option<Arc<Vec<u8>>> {
        if let Some(b) = self.mem.read().unwrap_or_else(|e| e.into_inner()).get(r) {
            return Some(b.clone());
        }
        let dir = self.dir.as_ref()?;
        let bytes = std::fs::read(dir.join(&r.0)).ok()?;
        let arc = Arc::new(bytes);
        self.mem
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(r.clone(), arc.clone());
        Some(arc)
    }

    pub fn tags(&self, r: &ImageRef) -> Option<BTreeSet<String>> {
        self.get(r).and_then(|b| parse_tag_image(&b))
    }

    /// Image file if the record names one, else a synthetic tag image.
    pub fn register_record(&self, manifest: &DatasetManifest, rec: &ImageRecord) -> Result<ImageRef> {
        if let Some(img) = &rec.image {
            return self.insert_file(&manifest.resolve_image_path(img));
        }
        let mut tags = vec![format!("id:{}", rec.id)];
        if let Some(t) = &rec.tags {
            tags.extend(t.iter().cloned());
        }
        self.insert_bytes(tag_image_bytes(&tags))
    }

    pub fn register_manifest(&self, manifest: &DatasetManifest) -> Result<Vec<ImageRef>> {
        manifest
            .records
            .iter()
            .map(|r| self.register_record(manifest, r))
            .collect()
    }
}
