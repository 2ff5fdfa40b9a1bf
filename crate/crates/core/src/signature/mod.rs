//! Image signatures, median binarization and exact Hamming k-NN search.
//!
//! The descriptor is a 128-D concatenation of three L1-normalised blocks:
//!
//! | offset | len | content                                                    |
//! |--------|-----|------------------------------------------------------------|
//! | 0      | 64  | grayscale intensity histogram (integer Rec. 601 luma / 4)   |
//! | 64     | 48  | per-channel RGB mass over a 4x4 spatial grid, `(cell*3)+ch` |
//! | 112    | 16  | magnitude-weighted gradient orientation histogram           |
//!
//! Gradient bins are 22.5 degrees wide and centred on multiples of 22.5 degrees,
//! so bin `b` covers `[b*22.5 - 11.25, b*22.5 + 11.25)`.

mod index;

use crate::catalog::CatalogImage;
use crate::raster::luma_u8;
use image::RgbaImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{expand_training_set, Neighbor, SimilarityIndex, BINARIZATION_FILE, INDEX_FILE};

pub const GRAY_BINS: usize = 64;
pub const GRID: usize = 4;
pub const COLOR_LEN: usize = GRID * GRID * 3;
pub const GRADIENT_BINS: usize = 16;
pub const SIGNATURE_DIM: usize = GRAY_BINS + COLOR_LEN + GRADIENT_BINS;

pub const GRAY_OFFSET: usize = 0;
pub const COLOR_OFFSET: usize = GRAY_BINS;
pub const GRADIENT_OFFSET: usize = GRAY_BINS + COLOR_LEN;

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("binarization needs at least 2 reference signatures, got {0}")]
    InsufficientReference(usize),
    #[error("similarity index is empty")]
    EmptyIndex,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("index dimension {0} is not a positive multiple of 8")]
    UnsupportedDimension(usize),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = SignatureError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub values: Vec<f64>,
}

impl Signature {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn euclidean_sq(&self, other: &Signature) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// Produces fixed-length signatures from images. Swappable for a learned embedding.
pub trait SignatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, pixels: &RgbaImage) -> Signature;
}

/// The hand-built 128-D colour/texture descriptor.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassicDescriptor;

impl SignatureExtractor for ClassicDescriptor {
    fn dim(&self) -> usize {
        SIGNATURE_DIM
    }

    fn extract(&self, pixels: &RgbaImage) -> Signature {
        describe(pixels)
    }
}

pub fn compute_signature(image: &CatalogImage) -> Signature {
    describe(&image.pixels)
}

fn describe(img: &RgbaImage) -> Signature {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut values = vec![0.0f64; SIGNATURE_DIM];
    let luma: Vec<u8> = img.pixels().map(luma_u8).collect();

    for &l in &luma {
        values[GRAY_OFFSET + (l as usize >> 2)] += 1.0;
    }

    for (x, y, p) in img.enumerate_pixels() {
        let cell = (y as usize * GRID / h) * GRID + (x as usize * GRID / w);
        for c in 0..3 {
            values[COLOR_OFFSET + cell * 3 + c] += p[c] as f64;
        }
    }

    let at = |x: usize, y: usize| luma[y * w + x] as f64;
    let sector = std::f64::consts::TAU / GRADIENT_BINS as f64;
    for y in 0..h {
        for x in 0..w {
            let gx = at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y);
            let gy = at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1));
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::TAU;
            }
            let bin = ((theta + sector / 2.0) / sector).floor() as usize % GRADIENT_BINS;
            values[GRADIENT_OFFSET + bin] += gx.hypot(gy);
        }
    }

    normalize_block(&mut values[GRAY_OFFSET..COLOR_OFFSET]);
    normalize_block(&mut values[COLOR_OFFSET..GRADIENT_OFFSET]);
    normalize_block(&mut values[GRADIENT_OFFSET..]);
    Signature { values }
}

fn normalize_block(block: &mut [f64]) {
    let total: f64 = block.iter().sum();
    if total > 0.0 {
        block.iter_mut().for_each(|v| *v /= total);
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(SignatureError::Dimension { expected, actual })
    }
}

/// Per-dimension thresholds: the lower median of a reference sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizationModel {
    thresholds: Vec<f64>,
}

impl BinarizationModel {
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn dim(&self) -> usize {
        self.thresholds.len()
    }

    pub fn from_thresholds(thresholds: Vec<f64>) -> Self {
        Self { thresholds }
    }
}

pub fn fit_binarization(reference: &[Signature]) -> Result<BinarizationModel> {
    if reference.len() < 2 {
        return Err(SignatureError::InsufficientReference(reference.len()));
    }
    let dim = reference[0].dim();
    for s in reference {
        check_dim(dim, s.dim())?;
    }
    let mid = (reference.len() - 1) / 2;
    let mut column = vec![0.0f64; reference.len()];
    let thresholds = (0..dim)
        .map(|d| {
            for (slot, s) in column.iter_mut().zip(reference) {
                *slot = s.values[d];
            }
            *column.select_nth_unstable_by(mid, f64::total_cmp).1
        })
        .collect();
    Ok(BinarizationModel { thresholds })
}

/// Packed bit string; bit `d` lives in word `d / 64`, position `d % 64`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinarySignature {
    words: Vec<u64>,
    dim: usize,
}

impl BinarySignature {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (d, &b) in bits.iter().enumerate() {
            if b {
                words[d / 64] |= 1 << (d % 64);
            }
        }
        Self {
            words,
            dim: bits.len(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bit(&self, d: usize) -> bool {
        self.words[d / 64] >> (d % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Little-endian packed bytes, `ceil(dim / 8)` long.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.dim.div_ceil(8));
        out
    }

    pub fn from_bytes(bytes: &[u8], dim: usize) -> Result<Self> {
        if bytes.len() != dim.div_ceil(8) {
            return Err(SignatureError::Corrupt(format!(
                "expected {} signature bytes, got {}",
                dim.div_ceil(8),
                bytes.len()
            )));
        }
        let mut words = vec![0u64; dim.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        Ok(Self { words, dim })
    }
}

/// Bit `d` is set iff `sig[d] > thresholds[d]`; ties give 0.
pub fn binarize(sig: &Signature, model: &BinarizationModel) -> Result<BinarySignature> {
    check_dim(model.dim(), sig.dim())?;
    let bits: Vec<bool> = sig
        .values
        .iter()
        .zip(&model.thresholds)
        .map(|(v, t)| v > t)
        .collect();
    Ok(BinarySignature::from_bits(&bits))
}

pub fn hamming(a: &BinarySignature, b: &BinarySignature) -> Result<u32> {
    check_dim(a.dim, b.dim)?;
    Ok(a.words
        .iter()
        .zip(&b.words)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum())
}
