use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::{read_image, write_image, ImageError, PixelImage};
use crate::Label;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub label: Label,
    pub image: PixelImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub source: String,
    pub size: usize,
    pub grayscale: bool,
}

/// Labeled square images sharing one side length.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCorpus {
    pub meta: CorpusMeta,
    pub entries: Vec<CorpusEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkippedFile {
    pub id: String,
    pub file: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct LoadedCorpus {
    pub corpus: ImageCorpus,
    pub skipped: Vec<SkippedFile>,
    pub manifest_len: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("reading manifest {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("writing {id}: {source}")]
    Write { id: String, source: ImageError },
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, serde_json::Error> {
    serde_json::from_str(text)
}

impl ImageCorpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn images(&self, label: Label) -> Vec<PixelImage> {
        self.entries.iter().filter(|e| e.label == label).map(|e| e.image.clone()).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Concatenates corpora of the same side length.
    pub fn merge(mut self, other: ImageCorpus) -> ImageCorpus {
        assert_eq!(self.meta.size, other.meta.size, "merging corpora of different sizes");
        self.meta.source = format!("{}+{}", self.meta.source, other.meta.source);
        self.meta.grayscale &= other.meta.grayscale;
        self.entries.extend(other.entries);
        self
    }

    /// SHA-256 over ids, labels, dimensions and pixels, in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.id.as_bytes());
            h.update([0, matches!(e.label, Label::Natural) as u8]);
            h.update((e.image.width() as u64).to_le_bytes());
            h.update((e.image.height() as u64).to_le_bytes());
            h.update(e.image.rgb());
        }
        hex::encode(h.finalize())
    }

    /// Writes `<id>.<ext>` per entry plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>, ext: &str) -> Result<Vec<ManifestEntry>, CorpusError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io { path: dir.to_path_buf(), source })?;
        let mut manifest = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let file = format!("{}.{ext}", e.id);
            write_image(dir.join(&file), &e.image).map_err(|source| CorpusError::Write { id: e.id.clone(), source })?;
            manifest.push(ManifestEntry { id: e.id.clone(), label: e.label, file });
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|source| CorpusError::Io { path, source })?;
        Ok(manifest)
    }
}

/// Reads `dir/manifest.json` and every listed file, resizing to `size`.
/// Unreadable files are skipped with a warning and reported.
pub fn load_corpus(dir: impl AsRef<Path>, size: usize) -> Result<LoadedCorpus, CorpusError> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| CorpusError::Io { path, source })?;
    let manifest = parse_manifest(&text)?;
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for m in &manifest {
        match read_image(dir.join(&m.file)) {
            Ok(im) => entries.push(CorpusEntry { id: m.id.clone(), label: m.label, image: im.resize(size, size) }),
            Err(e) => {
                log::warn!("skipping {}: {e}", m.file);
                skipped.push(SkippedFile { id: m.id.clone(), file: m.file.clone(), reason: e.to_string() });
            }
        }
    }
    let grayscale = entries.iter().all(|e| e.image.is_grayscale());
    let source = dir.display().to_string();
    Ok(LoadedCorpus {
        corpus: ImageCorpus { meta: CorpusMeta { source, size, grayscale }, entries },
        skipped,
        manifest_len: manifest.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{synth_corpus, SynthProfile};

    #[test]
    fn save_load_round_trip_with_skips() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_corpus(&SynthProfile::dataset(1), Label::Cg, 3, 16, 1);
        c.save(dir.path(), "ppm").unwrap();
        std::fs::write(dir.path().join("cg00001.ppm"), b"P6 garbage").unwrap();
        let loaded = load_corpus(dir.path(), 16).unwrap();
        assert_eq!(loaded.manifest_len, loaded.corpus.len() + loaded.skipped.len());
        assert_eq!(loaded.skipped.len(), 1);
        assert_eq!(loaded.corpus.entries[0], c.entries[0]);
        assert_eq!(loaded.corpus.entries[1], c.entries[2]);
    }

    #[test]
    fn manifest_shape() {
        let m = parse_manifest(r#"[{"id":"a","label":"cg","file":"a.png"}]"#).unwrap();
        assert_eq!(m[0].label, Label::Cg);
        assert!(parse_manifest(r#"[{"id":"a","label":"fake","file":"a.png"}]"#).is_err());
    }
}
