use super::{
    binarize, check_dim, hamming, BinarizationModel, BinarySignature, Result, Signature,
    SignatureError, SignatureExtractor,
};
use crate::catalog::AnnotatedSample;
use image::RgbaImage;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

pub const INDEX_FILE: &str = "index.bin";
pub const BINARIZATION_FILE: &str = "binarization.json";
const MAGIC: &[u8; 4] = b"MGIX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub image_id: String,
    pub distance: u32,
}

/// Exact linear-scan index over binary codes.
///
/// Mutation needs `&mut self`; wrap in a lock to share between readers and a writer.
#[derive(Debug, Clone)]
pub struct SimilarityIndex {
    binarization: BinarizationModel,
    entries: BTreeMap<String, BinarySignature>,
}

impl SimilarityIndex {
    pub fn new(binarization: BinarizationModel) -> Result<Self> {
        let dim = binarization.dim();
        if dim == 0 || dim % 8 != 0 {
            return Err(SignatureError::UnsupportedDimension(dim));
        }
        Ok(Self {
            binarization,
            entries: BTreeMap::new(),
        })
    }

    /// Fits the binarization on `items` and indexes all of them.
    pub fn build(items: Vec<(String, Signature)>) -> Result<Self> {
        let refs: Vec<Signature> = items.iter().map(|(_, s)| s.clone()).collect();
        let mut index = Self::new(super::fit_binarization(&refs)?)?;
        for (id, sig) in items {
            index.insert(id, &sig)?;
        }
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.binarization.dim()
    }

    pub fn binarization(&self) -> &BinarizationModel {
        &self.binarization
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&BinarySignature> {
        self.entries.get(image_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BinarySignature)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, image_id: String, sig: &Signature) -> Result<()> {
        let code = binarize(sig, &self.binarization)?;
        self.entries.insert(image_id, code);
        Ok(())
    }

    pub fn insert_code(&mut self, image_id: String, code: BinarySignature) -> Result<()> {
        check_dim(self.dim(), code.dim())?;
        self.entries.insert(image_id, code);
        Ok(())
    }

    /// `min(k, len)` nearest entries by ascending Hamming distance, ties by id.
    pub fn query(&self, probe: &BinarySignature, k: usize) -> Result<Vec<Neighbor>> {
        if self.entries.is_empty() {
            return Err(SignatureError::EmptyIndex);
        }
        if k == 0 {
            return Err(SignatureError::InvalidK);
        }
        check_dim(self.dim(), probe.dim())?;
        // Max-heap on (distance, id) keeps the k smallest.
        let mut heap: BinaryHeap<(u32, &str)> = BinaryHeap::with_capacity(k + 1);
        for (id, code) in &self.entries {
            let d = hamming(probe, code)?;
            if heap.len() < k {
                heap.push((d, id));
            } else if let Some(&top) = heap.peek() {
                if (d, id.as_str()) < top {
                    heap.pop();
                    heap.push((d, id));
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|(distance, id)| Neighbor {
                image_id: id.to_string(),
                distance,
            })
            .collect())
    }

    pub fn query_signature(&self, probe: &Signature, k: usize) -> Result<Vec<Neighbor>> {
        let code = binarize(probe, &self.binarization)?;
        self.query(&code, k)
    }

    pub fn query_image(
        &self,
        extractor: &dyn SignatureExtractor,
        probe: &RgbaImage,
        k: usize,
    ) -> Result<Vec<Neighbor>> {
        self.query_signature(&extractor.extract(probe), k)
    }

    /// Writes `index.bin` and `binarization.json` into `dir`.
    ///
    /// `index.bin` layout, little-endian: magic `MGIX`, u32 version, u32 dimension,
    /// u64 count, then per record a u32 id length, the id bytes and `dim / 8` code bytes.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
        let mut buf = Vec::with_capacity(20 + self.entries.len() * (8 + self.dim() / 8));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, code) in &self.entries {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            buf.extend_from_slice(&code.to_bytes());
        }
        let path = dir.join(INDEX_FILE);
        std::fs::write(&path, buf).map_err(|source| io_err(&path, source))?;
        let path = dir.join(BINARIZATION_FILE);
        let json = serde_json::to_vec_pretty(&self.binarization).expect("thresholds serialize");
        std::fs::write(&path, json).map_err(|source| io_err(&path, source))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BINARIZATION_FILE);
        let json = std::fs::read(&path).map_err(|source| io_err(&path, source))?;
        let binarization: BinarizationModel =
            serde_json::from_slice(&json).map_err(|e| SignatureError::Corrupt(e.to_string()))?;
        let path = dir.join(INDEX_FILE);
        let bytes = std::fs::read(&path).map_err(|source| io_err(&path, source))?;
        let mut rd = Reader {
            bytes: &bytes,
            pos: 0,
        };
        if rd.take(4)? != MAGIC {
            return Err(SignatureError::Corrupt("bad magic".into()));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(SignatureError::Corrupt(format!(
                "unsupported version {version}"
            )));
        }
        let dim = rd.u32()? as usize;
        check_dim(binarization.dim(), dim)?;
        let count = rd.u64()?;
        let mut index = Self::new(binarization)?;
        for _ in 0..count {
            let len = rd.u32()? as usize;
            let id = std::str::from_utf8(rd.take(len)?)
                .map_err(|e| SignatureError::Corrupt(e.to_string()))?
                .to_string();
            let code = BinarySignature::from_bytes(rd.take(dim / 8)?, dim)?;
            index.entries.insert(id, code);
        }
        if rd.pos != bytes.len() {
            return Err(SignatureError::Corrupt("trailing bytes".into()));
        }
        Ok(index)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SignatureError::Corrupt("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SignatureError {
    SignatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Candidate ids for human labeling: the union of each seed's k nearest neighbours
/// within `max_distance`, without duplicates or seed ids, ordered by best distance then id.
///
/// Candidates are never labeled automatically.
pub fn expand_training_set(
    index: &SimilarityIndex,
    extractor: &dyn SignatureExtractor,
    seeds: &[AnnotatedSample],
    k: usize,
    max_distance: i64,
) -> Result<Vec<String>> {
    if index.is_empty() {
        return Err(SignatureError::EmptyIndex);
    }
    let seed_ids: BTreeSet<&str> = seeds.iter().map(|s| s.image.image_id.as_str()).collect();
    let mut best: BTreeMap<String, u32> = BTreeMap::new();
    for seed in seeds {
        for n in index.query_image(extractor, &seed.image.pixels, k)? {
            if (n.distance as i64) > max_distance || seed_ids.contains(n.image_id.as_str()) {
                continue;
            }
            best.entry(n.image_id)
                .and_modify(|d| *d = (*d).min(n.distance))
                .or_insert(n.distance);
        }
    }
    let mut out: Vec<(u32, String)> = best.into_iter().map(|(id, d)| (d, id)).collect();
    out.sort();
    Ok(out.into_iter().map(|(_, id)| id).collect())
}
