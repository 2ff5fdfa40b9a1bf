//! Synthetic training data by logo superimposition.
//!
//! Logos are tightly cropped, transformed (scale, rotation, flip, shear), alpha
//! composited onto compliant base images, and the footprint of the transformed
//! logo becomes the ground-truth box. Also hosts anchor-box k-means.

mod anchors;
mod dataset;
mod logos;

use crate::catalog::{AnnotatedSample, BoundingBox, CatalogImage, Label, Provenance};
use crate::raster::{alpha_bbox, composite_over, footprint, warp, Linear2, Resample};
use image::RgbaImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use anchors::{anchor_kmeans, iou_wh, AnchorFit, AnchorSet};
pub use dataset::{
    generate_dataset, read_annotations, recover_box, write_dataset, AnnotationRecord, DatasetSpec,
    SampleKind, SyntheticSample, TransformRecord, ANNOTATIONS_FILE,
};
pub use logos::{generate_logos, load_logos, save_logos, LogoSpec, LOGO_INDEX_FILE};

/// Default footprint threshold `alpha_0 = 8/255`, stored as the u8 alpha value.
pub const DEFAULT_ALPHA_THRESHOLD: u8 = 8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("logo has no pixel with alpha > 0")]
    EmptyLogo,
    #[error("logo {logo} ({lw}x{lh} at scale {scale}) cannot fit in a {bw}x{bh} base")]
    LogoTooLarge {
        logo: String,
        lw: u32,
        lh: u32,
        scale: f64,
        bw: u32,
        bh: u32,
    },
    #[error("transformed logo footprint exceeds base bounds")]
    OutOfBounds,
    #[error("no Train-split non-compliant logo for class {0}")]
    SplitExhausted(String),
    #[error("k-means needs at least k boxes (k = {k}, boxes = {n})")]
    TooFewBoxes { k: usize, n: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("catalog: {0}")]
    Catalog(#[from] crate::catalog::CatalogError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record: {0}")]
    Parse(String),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Compliance {
    NonCompliant,
    CompliantLookalike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogoAsset {
    logo_id: String,
    pixels: RgbaImage,
    class_label: String,
    compliance: Compliance,
    split: Split,
}

impl LogoAsset {
    pub fn new(
        logo_id: impl Into<String>,
        pixels: RgbaImage,
        class_label: impl Into<String>,
        compliance: Compliance,
        split: Split,
    ) -> Result<Self> {
        if !pixels.pixels().any(|p| p[3] > 0) {
            return Err(SynthError::EmptyLogo);
        }
        Ok(Self {
            logo_id: logo_id.into(),
            pixels,
            class_label: class_label.into(),
            compliance,
            split,
        })
    }

    pub fn logo_id(&self) -> &str {
        &self.logo_id
    }

    pub fn pixels(&self) -> &RgbaImage {
        &self.pixels
    }

    pub fn class_label(&self) -> &str {
        &self.class_label
    }

    pub fn compliance(&self) -> Compliance {
        self.compliance
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Same asset with its raster tightly cropped.
    pub fn cropped(&self) -> Result<Self> {
        Ok(Self {
            pixels: tight_crop(&self.pixels)?,
            ..self.clone()
        })
    }
}

/// Minimal sub-raster containing every pixel with alpha > 0.
pub fn tight_crop(logo: &RgbaImage) -> Result<RgbaImage> {
    let (x0, y0, x1, y1) = alpha_bbox(logo, 0).ok_or(SynthError::EmptyLogo)?;
    Ok(image::imageops::crop_imm(logo, x0, y0, x1 - x0, y1 - y0).to_image())
}

/// Sampling ranges for logo transforms.
///
/// `scale` multiplies the logo's pixel dimensions. When `scale_choices` is
/// non-empty the scale is drawn uniformly from it instead of `[scale_min, scale_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub scale_choices: Vec<f64>,
    pub rotation_max_deg: f64,
    pub shear_max: f64,
    pub flip_probability: f64,
    pub resample: Resample,
    pub alpha_threshold: u8,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.5,
            scale_max: 1.0,
            scale_choices: Vec::new(),
            rotation_max_deg: 20.0,
            shear_max: 0.1,
            flip_probability: 0.5,
            resample: Resample::Bilinear,
            alpha_threshold: DEFAULT_ALPHA_THRESHOLD,
        }
    }
}

impl TransformConfig {
    /// Exact-match configuration: no rotation, shear or flip, nearest resampling, fixed scales.
    pub fn rigid(scales: Vec<f64>) -> Self {
        Self {
            scale_min: scales.iter().cloned().fold(f64::INFINITY, f64::min),
            scale_max: scales.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            scale_choices: scales,
            rotation_max_deg: 0.0,
            shear_max: 0.0,
            flip_probability: 0.0,
            resample: Resample::Nearest,
            alpha_threshold: DEFAULT_ALPHA_THRESHOLD,
        }
    }

    /// Every violation, not only the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.scale_min > 0.0 && self.scale_min.is_finite()) {
            v.push(format!("scale_min must be > 0 (got {})", self.scale_min));
        }
        if !(self.scale_max >= self.scale_min) {
            v.push(format!(
                "scale_max ({}) must be >= scale_min ({})",
                self.scale_max, self.scale_min
            ));
        }
        if self
            .scale_choices
            .iter()
            .any(|s| !(*s > 0.0 && s.is_finite()))
        {
            v.push("scale_choices must all be > 0".into());
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg < 90.0) {
            v.push(format!(
                "rotation_max_deg must be in [0, 90) (got {})",
                self.rotation_max_deg
            ));
        }
        if !(self.shear_max >= 0.0 && self.shear_max < 1.0) {
            v.push(format!(
                "shear_max must be in [0, 1) (got {})",
                self.shear_max
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            v.push(format!(
                "flip_probability must be in [0, 1] (got {})",
                self.flip_probability
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SynthError::InvalidConfig(v.join("; ")))
        }
    }

    fn min_scale(&self) -> f64 {
        if self.scale_choices.is_empty() {
            self.scale_min
        } else {
            self.scale_choices
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub scale: f64,
    pub rotation_deg: f64,
    pub flip_h: bool,
    /// Top-left of the transformed logo raster in base-image pixels.
    pub translate: (u32, u32),
    pub shear: f64,
}

impl TransformParams {
    pub fn identity_at(x: u32, y: u32) -> Self {
        Self {
            scale: 1.0,
            rotation_deg: 0.0,
            flip_h: false,
            translate: (x, y),
            shear: 0.0,
        }
    }

    /// Linear map applied about the logo center: flip, then scale, then shear, then rotate.
    pub fn linear(&self) -> Linear2 {
        let mut m = Linear2::scale(self.scale);
        if self.flip_h {
            m = m.then_after(Linear2::flip_h());
        }
        Linear2::rotation_deg(self.rotation_deg)
            .then_after(Linear2::shear_x(self.shear))
            .then_after(m)
    }

    /// Pixel dimensions of the transformed logo raster.
    pub fn footprint_dims(&self, logo_w: u32, logo_h: u32) -> (u32, u32) {
        let (_, _, w, h) = footprint(&self.linear(), logo_w, logo_h);
        (w, h)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws transform parameters whose footprint fits inside the base.
///
/// Draw order is fixed (scale, rotation, flip, shear, then placement) so the result is
/// a deterministic function of the RNG state. Draws whose rotated footprint does not fit
/// are rejected and redrawn, at most 64 times.
pub fn sample_transform<R: Rng + ?Sized>(
    rng: &mut R,
    config: &TransformConfig,
    logo_dims: (u32, u32),
    base_dims: (u32, u32),
) -> Result<TransformParams> {
    config.validate()?;
    let (lw, lh) = logo_dims;
    let (bw, bh) = base_dims;
    let s_min = config.min_scale();
    let (mw, mh) = TransformParams {
        scale: s_min,
        ..TransformParams::identity_at(0, 0)
    }
    .footprint_dims(lw, lh);
    let too_large = || SynthError::LogoTooLarge {
        logo: format!("{lw}x{lh}"),
        lw,
        lh,
        scale: s_min,
        bw,
        bh,
    };
    if mw > bw || mh > bh {
        return Err(too_large());
    }
    for _ in 0..64 {
        let scale = if config.scale_choices.is_empty() {
            uniform(rng, config.scale_min, config.scale_max)
        } else {
            config.scale_choices[rng.random_range(0..config.scale_choices.len())]
        };
        let rotation_deg = uniform(rng, -config.rotation_max_deg, config.rotation_max_deg);
        let flip_h = config.flip_probability > 0.0 && rng.random_bool(config.flip_probability);
        let shear = uniform(rng, -config.shear_max, config.shear_max);
        let mut t = TransformParams {
            scale,
            rotation_deg,
            flip_h,
            translate: (0, 0),
            shear,
        };
        let (fw, fh) = t.footprint_dims(lw, lh);
        if fw > bw || fh > bh {
            continue;
        }
        t.translate = (rng.random_range(0..=bw - fw), rng.random_range(0..=bh - fh));
        return Ok(t);
    }
    Err(too_large())
}

/// Renders the transformed logo and composites it onto a copy of `base`.
///
/// Returns the composited raster and the transformed logo raster. Transformed
/// pixels with alpha at or below `alpha_threshold` leave the base untouched.
pub fn composite(
    base: &RgbaImage,
    logo: &RgbaImage,
    t: &TransformParams,
    resample: Resample,
    alpha_threshold: u8,
) -> Result<(RgbaImage, RgbaImage)> {
    let warped = warp(logo, &t.linear(), resample);
    let (tx, ty) = t.translate;
    if tx as u64 + warped.width() as u64 > base.width() as u64
        || ty as u64 + warped.height() as u64 > base.height() as u64
    {
        return Err(SynthError::OutOfBounds);
    }
    let mut out = base.clone();
    composite_over(&mut out, &warped, tx, ty, alpha_threshold);
    Ok((out, warped))
}

/// A superimposition result: the annotated sample plus the footprint box.
///
/// `footprint` is reported for lookalikes too, even though their sample carries no box.
#[derive(Debug, Clone, PartialEq)]
pub struct Superimposed {
    pub sample: AnnotatedSample,
    pub footprint: BoundingBox,
}

/// Superimposes `logo` on `base` under `t`.
///
/// Non-compliant logos yield a NonCompliant sample whose single box is the axis-aligned
/// bounding box of transformed pixels with alpha above `alpha_threshold`. Lookalikes yield
/// a Compliant sample without boxes.
pub fn superimpose(
    base: &CatalogImage,
    logo: &LogoAsset,
    t: &TransformParams,
    resample: Resample,
    alpha_threshold: u8,
) -> Result<Superimposed> {
    let (pixels, warped) = composite(&base.pixels, &logo.pixels, t, resample, alpha_threshold)?;
    let (x0, y0, x1, y1) = alpha_bbox(&warped, alpha_threshold).ok_or(SynthError::EmptyLogo)?;
    let (tx, ty) = t.translate;
    let footprint = BoundingBox::new(tx + x0, ty + y0, tx + x1, ty + y1, logo.class_label.clone());
    let (label, boxes) = match logo.compliance {
        Compliance::NonCompliant => (Label::NonCompliant, vec![footprint.clone()]),
        Compliance::CompliantLookalike => (Label::Compliant, Vec::new()),
    };
    let mut image = CatalogImage::new(
        format!("{}+{}", base.image_id, logo.logo_id),
        pixels,
        base.category.clone(),
    );
    image.state = base.state;
    Ok(Superimposed {
        sample: AnnotatedSample {
            image,
            label,
            boxes,
            provenance: Provenance::Synthetic,
        },
        footprint,
    })
}
