//! Second-stage detectors behind one interface.

mod registry;
mod shallow;
mod skin;
mod template;

pub use registry::{
    build_registry, DetectorKind, DetectorRegistry, DetectorSpec, ShallowParams, TemplateParams,
};
pub use shallow::{
    logistic_gradient, logistic_loss, shallow_detect, shallow_fit, LogisticHyper, ShallowDetector,
    ShallowFit, ShallowModel,
};
pub use skin::{
    is_skin, skin_confidence, skin_ratio, skin_ratio_detect, SkinDetector, SKIN_LOGISTIC_A,
    SKIN_LOGISTIC_B,
};
pub use template::{
    logo_detector_from_templates, template_match, template_match_plane, LogoDetector, LumaPlane,
    MatchResult, PreparedTemplate,
};

use crate::catalog::BoundingBox;
use image::RgbaImage;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("template has zero pixel variance")]
    DegenerateTemplate,
    #[error("template is larger than the image at every scale")]
    TemplateTooLarge,
    #[error("training data holds a single class")]
    DegenerateTraining,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Synth(#[from] crate::synthgen::SynthError),
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub confidence: f64,
    pub boxes: Vec<ScoredBox>,
    pub detector_id: String,
}

impl DetectorOutput {
    pub fn without_boxes(detector_id: impl Into<String>, confidence: f64) -> Self {
        Self {
            confidence,
            boxes: Vec::new(),
            detector_id: detector_id.into(),
        }
    }
}

/// A second-stage model. Implementations are immutable once built, and `detect`
/// must return the same output for the same pixels.
pub trait Detector: Send + Sync {
    fn detector_id(&self) -> &str;
    fn classes(&self) -> &[String];
    fn detect(&self, image: &RgbaImage) -> Result<DetectorOutput>;
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
