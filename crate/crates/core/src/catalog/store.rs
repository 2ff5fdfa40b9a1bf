use super::{load_image, save_image, CatalogError, CatalogImage, ImageState, Result};
use image::RgbaImage;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// One line of `catalog/index.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub id: String,
    pub category: String,
    pub state: ImageState,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone)]
struct Entry {
    category: String,
    state: ImageState,
    pixels: Arc<RgbaImage>,
}

/// Catalog of product images keyed by id.
///
/// Layout on disk: `<root>/<image_id>.png` plus `<root>/index.jsonl`.
/// Reads are concurrent; state changes are compare-and-set under the write lock.
#[derive(Debug, Default)]
pub struct CatalogStore {
    root: Option<PathBuf>,
    entries: RwLock<BTreeMap<String, Entry>>,
}

pub const INDEX_FILE: &str = "index.jsonl";

impl CatalogStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens the catalog at `root`, creating an empty one when the directory has no index.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|source| CatalogError::Io {
            path: root.display().to_string(),
            source,
        })?;
        let index_path = root.join(INDEX_FILE);
        let mut entries = BTreeMap::new();
        if index_path.exists() {
            let file = std::fs::File::open(&index_path).map_err(|source| CatalogError::Io {
                path: index_path.display().to_string(),
                source,
            })?;
            for (lineno, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| CatalogError::Io {
                    path: index_path.display().to_string(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: IndexRecord = serde_json::from_str(&line)
                    .map_err(|e| CatalogError::Index(format!("line {}: {e}", lineno + 1)))?;
                let pixels = load_image(&root.join(format!("{}.png", rec.id)))?;
                if (pixels.width(), pixels.height()) != (rec.width, rec.height) {
                    return Err(CatalogError::Index(format!(
                        "{}: index says {}x{}, file is {}x{}",
                        rec.id,
                        rec.width,
                        rec.height,
                        pixels.width(),
                        pixels.height()
                    )));
                }
                if entries
                    .insert(
                        rec.id.clone(),
                        Entry {
                            category: rec.category,
                            state: rec.state,
                            pixels: Arc::new(pixels),
                        },
                    )
                    .is_some()
                {
                    return Err(CatalogError::DuplicateId(rec.id));
                }
            }
        }
        Ok(Self {
            root: Some(root),
            entries: RwLock::new(entries),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn image_path(&self, image_id: &str) -> Option<PathBuf> {
        self.root
            .as_ref()
            .map(|r| r.join(format!("{image_id}.png")))
    }

    pub fn insert(&self, image: CatalogImage) -> Result<()> {
        self.insert_many(std::iter::once(image))
    }

    /// Inserts images and persists their PNGs, then rewrites the index once.
    pub fn insert_many(&self, images: impl IntoIterator<Item = CatalogImage>) -> Result<()> {
        let images: Vec<_> = images.into_iter().collect();
        {
            let entries = self.entries.read();
            for img in &images {
                img.validate()?;
                if entries.contains_key(&img.image_id) {
                    return Err(CatalogError::DuplicateId(img.image_id.clone()));
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for img in &images {
            if !seen.insert(img.image_id.as_str()) {
                return Err(CatalogError::DuplicateId(img.image_id.clone()));
            }
            if let Some(path) = self.image_path(&img.image_id) {
                save_image(&img.pixels, &path)?;
            }
        }
        {
            let mut entries = self.entries.write();
            for img in images {
                if entries.contains_key(&img.image_id) {
                    return Err(CatalogError::DuplicateId(img.image_id));
                }
                entries.insert(
                    img.image_id,
                    Entry {
                        category: img.category,
                        state: img.state,
                        pixels: Arc::new(img.pixels),
                    },
                );
            }
        }
        self.flush_index()
    }

    /// Rewrites `index.jsonl` from memory (atomic rename).
    pub fn flush_index(&self) -> Result<()> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let tmp = root.join(format!("{INDEX_FILE}.tmp"));
        let io_err = |source| CatalogError::Io {
            path: tmp.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io_err)?);
        for rec in self.records() {
            let line = serde_json::to_string(&rec).expect("index record serializes");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
        drop(out);
        std::fs::rename(&tmp, root.join(INDEX_FILE)).map_err(|source| CatalogError::Io {
            path: root.display().to_string(),
            source,
        })
    }

    pub fn records(&self) -> Vec<IndexRecord> {
        self.entries
            .read()
            .iter()
            .map(|(id, e)| IndexRecord {
                id: id.clone(),
                category: e.category.clone(),
                state: e.state,
                width: e.pixels.width(),
                height: e.pixels.height(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.read().is_empty()
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.entries.read().contains_key(image_id)
    }

    pub fn get(&self, image_id: &str) -> Option<CatalogImage> {
        self.entries.read().get(image_id).map(|e| CatalogImage {
            image_id: image_id.to_string(),
            pixels: (*e.pixels).clone(),
            category: e.category.clone(),
            state: e.state,
        })
    }

    pub fn pixels(&self, image_id: &str) -> Option<Arc<RgbaImage>> {
        self.entries
            .read()
            .get(image_id)
            .map(|e| Arc::clone(&e.pixels))
    }

    pub fn state(&self, image_id: &str) -> Option<ImageState> {
        self.entries.read().get(image_id).map(|e| e.state)
    }

    pub fn category(&self, image_id: &str) -> Option<String> {
        self.entries
            .read()
            .get(image_id)
            .map(|e| e.category.clone())
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.read().keys().cloned().collect()
    }

    pub fn ids_in_state(&self, state: ImageState) -> Vec<String> {
        self.entries
            .read()
            .iter()
            .filter(|(_, e)| e.state == state)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Compare-and-set state transition. Fails when the current state is not
    /// `expected` or when the edge is not a legal lifecycle transition.
    pub fn transition(&self, image_id: &str, expected: ImageState, next: ImageState) -> Result<()> {
        if !expected.can_transition_to(next) {
            return Err(CatalogError::IllegalTransition {
                image_id: image_id.to_string(),
                from: expected,
                to: next,
            });
        }
        let mut entries = self.entries.write();
        let entry = entries
            .get_mut(image_id)
            .ok_or_else(|| CatalogError::NotFound(image_id.to_string()))?;
        if entry.state != expected {
            return Err(CatalogError::StateConflict {
                image_id: image_id.to_string(),
                expected,
                actual: entry.state,
            });
        }
        entry.state = next;
        Ok(())
    }

    /// Overwrites a state without edge checks. Used to bring the store in line with
    /// a replayed event log, which is the authority on image state.
    pub fn restore_state(&self, image_id: &str, state: ImageState) -> Result<()> {
        let mut entries = self.entries.write();
        let entry = entries
            .get_mut(image_id)
            .ok_or_else(|| CatalogError::NotFound(image_id.to_string()))?;
        entry.state = state;
        Ok(())
    }
}
