//! Product image data model, deterministic corpus generation and the on-disk catalog store.

mod corpus;
mod store;

use image::RgbaImage;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

pub use corpus::{generate_corpus, CorpusSpec, BASE_TONE_MAX, BASE_TONE_MIN};
pub use store::{CatalogStore, IndexRecord};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("unsupported image format: {0}")]
    Format(String),
    #[error("failed to decode image {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("illegal state transition for {image_id}: {from} -> {to}")]
    IllegalTransition {
        image_id: String,
        from: ImageState,
        to: ImageState,
    },
    #[error("state of {image_id} is {actual}, expected {expected}")]
    StateConflict {
        image_id: String,
        expected: ImageState,
        actual: ImageState,
    },
    #[error("duplicate image id {0}")]
    DuplicateId(String),
    #[error("unknown image id {0}")]
    NotFound(String),
    #[error("invalid image {image_id}: {reason}")]
    InvalidImage { image_id: String, reason: String },
    #[error("malformed catalog index: {0}")]
    Index(String),
}

pub type Result<T, E = CatalogError> = std::result::Result<T, E>;

/// Lifecycle state of a catalog image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ImageState {
    Pending,
    Published,
    AutoBlocked,
    UnderReview,
    ReviewRejected,
    ReviewAccepted,
}

impl ImageState {
    pub const ALL: [ImageState; 6] = [
        ImageState::Pending,
        ImageState::Published,
        ImageState::AutoBlocked,
        ImageState::UnderReview,
        ImageState::ReviewRejected,
        ImageState::ReviewAccepted,
    ];

    /// The only legal edges are `Pending -> {Published, AutoBlocked, UnderReview}`
    /// and `UnderReview -> {ReviewAccepted, ReviewRejected}`.
    pub fn can_transition_to(self, next: ImageState) -> bool {
        use ImageState::*;
        matches!(
            (self, next),
            (Pending, Published)
                | (Pending, AutoBlocked)
                | (Pending, UnderReview)
                | (UnderReview, ReviewAccepted)
                | (UnderReview, ReviewRejected)
        )
    }

    /// States a completed pipeline run may leave a non-rejected image in.
    pub fn is_terminal(self) -> bool {
        !matches!(self, ImageState::Pending)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ImageState::Pending => "Pending",
            ImageState::Published => "Published",
            ImageState::AutoBlocked => "AutoBlocked",
            ImageState::UnderReview => "UnderReview",
            ImageState::ReviewRejected => "ReviewRejected",
            ImageState::ReviewAccepted => "ReviewAccepted",
        }
    }
}

impl fmt::Display for ImageState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A product image with its category metadata and lifecycle state.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogImage {
    pub image_id: String,
    pub pixels: RgbaImage,
    pub category: String,
    pub state: ImageState,
}

impl CatalogImage {
    pub fn new(
        image_id: impl Into<String>,
        pixels: RgbaImage,
        category: impl Into<String>,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            pixels,
            category: category.into(),
            state: ImageState::Pending,
        }
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.width() == 0 || self.pixels.height() == 0 {
            return Err(CatalogError::InvalidImage {
                image_id: self.image_id.clone(),
                reason: "zero-sized raster".into(),
            });
        }
        if self.image_id.is_empty() {
            return Err(CatalogError::InvalidImage {
                image_id: String::new(),
                reason: "empty image id".into(),
            });
        }
        Ok(())
    }
}

/// Axis-aligned pixel box, half-open on the max edges.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    pub class_label: String,
}

impl BoundingBox {
    pub fn new(
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
        class_label: impl Into<String>,
    ) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_label: class_label.into(),
        }
    }

    pub fn width(&self) -> u32 {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> u32 {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    /// Checks `0 <= x_min < x_max <= width` and the same for y.
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x_min < self.x_max
            && self.x_max <= width
            && self.y_min < self.y_max
            && self.y_max <= height
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let x0 = self.x_min.max(other.x_min);
        let y0 = self.y_min.max(other.y_min);
        let x1 = self.x_max.min(other.x_max);
        let y1 = self.y_max.min(other.y_max);
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Compliant,
    NonCompliant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic,
    CrowdVerified,
    Seed,
}

/// An image with its class label and ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub image: CatalogImage,
    pub label: Label,
    pub boxes: Vec<BoundingBox>,
    pub provenance: Provenance,
}

impl AnnotatedSample {
    /// Box-bearing samples must be NonCompliant, Compliant samples carry no boxes,
    /// and every box lies inside the image.
    pub fn validate(&self, box_bearing: bool) -> Result<()> {
        let (w, h) = (self.image.width(), self.image.height());
        if let Some(b) = self.boxes.iter().find(|b| !b.fits(w, h)) {
            return Err(CatalogError::InvalidImage {
                image_id: self.image.image_id.clone(),
                reason: format!("box {:?} outside {w}x{h}", b.coords()),
            });
        }
        let consistent = match self.label {
            Label::Compliant => self.boxes.is_empty(),
            Label::NonCompliant => !box_bearing || !self.boxes.is_empty(),
        };
        if !consistent {
            return Err(CatalogError::InvalidImage {
                image_id: self.image.image_id.clone(),
                reason: format!(
                    "label {:?} inconsistent with {} boxes",
                    self.label,
                    self.boxes.len()
                ),
            });
        }
        Ok(())
    }
}

/// Saves `image` as lossless PNG. Only the `.png` extension is supported.
pub fn save_image(pixels: &RgbaImage, path: &Path) -> Result<()> {
    check_png_extension(path)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| CatalogError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }
    let mut bytes = Vec::new();
    encode_png(pixels, &mut bytes)?;
    std::fs::write(path, bytes).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a PNG raster and converts it to RGBA8.
pub fn load_image(path: &Path) -> Result<RgbaImage> {
    check_png_extension(path)?;
    let bytes = std::fs::read(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_png(&bytes).map_err(|reason| CatalogError::Decode {
        path: path.display().to_string(),
        reason,
    })
}

pub fn encode_png(pixels: &RgbaImage, out: &mut Vec<u8>) -> Result<()> {
    use image::ImageEncoder;
    image::codecs::png::PngEncoder::new(out)
        .write_image(
            pixels.as_raw(),
            pixels.width(),
            pixels.height(),
            image::ExtendedColorType::Rgba8,
        )
        .map_err(|e| CatalogError::Format(e.to_string()))
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<RgbaImage, String> {
    if bytes.is_empty() {
        return Err("empty file".into());
    }
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map(|img| img.to_rgba8())
        .map_err(|e| e.to_string())
}

fn check_png_extension(path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => Ok(()),
        other => Err(CatalogError::Format(format!(
            "{} (extension {:?}); only lossless PNG is supported",
            path.display(),
            other.unwrap_or("")
        ))),
    }
}
