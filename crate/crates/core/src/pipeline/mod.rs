//! The moderation loop: pre-validation, routing, detector fan-out over durable
//! queues, threshold decisions and image state transitions.

mod events;
mod queue;
mod runner;

pub use events::{Event, EventLog, EventRecord, LogState, EVENTS_FILE};
pub use queue::{Delivery, DurableQueue, QUEUE_DIR};
pub use runner::{
    aggregate_decision, apply_review_decision, run_pipeline, DecisionCounts, FaultPlan,
    PipelineContext, ReviewAction, ReviewOutcome, RunReport, WorkMessage,
};

use crate::catalog::{BoundingBox, CatalogError, CatalogImage};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid threshold policy: {}", .0.join("; "))]
    Policy(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Router(#[from] crate::router::RouterError),
    #[error("detector {detector_id} failed on {image_id}: {source}")]
    Detector {
        detector_id: String,
        image_id: String,
        #[source]
        source: crate::detectors::DetectorError,
    },
    #[error("injected crash after {0} verdict writes")]
    InjectedCrash(usize),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Reads a JSONL log. A torn final line (a crash mid-append) is cut off the file
/// so that later appends start on a fresh line.
pub(crate) fn read_log_lines(path: &std::path::Path) -> Result<Vec<String>> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bytes = std::fs::read(path).map_err(io)?;
    let complete = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(i) => i + 1,
        None => 0,
    };
    if complete < bytes.len() {
        let f = std::fs::OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io)?;
        f.set_len(complete as u64).map_err(io)?;
    }
    let text = String::from_utf8_lossy(&bytes[..complete]);
    Ok(text.lines().map(str::to_string).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Decision {
    Pass,
    ManualReview,
    AutoBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub t_block: f64,
    pub t_review: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            t_block: 0.90,
            t_review: 0.50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_block: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_review: Option<f64>,
}

impl ThresholdOverride {
    fn apply(&self, base: Thresholds) -> Thresholds {
        Thresholds {
            t_block: self.t_block.unwrap_or(base.t_block),
            t_review: self.t_review.unwrap_or(base.t_review),
        }
    }
}

/// Global thresholds with per-detector and per-(detector, category) overrides.
/// The most specific override wins, field by field.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdPolicy {
    #[serde(default)]
    pub global: Thresholds,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detectors: BTreeMap<String, ThresholdOverride>,
    /// detector id -> category -> override
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub categories: BTreeMap<String, BTreeMap<String, ThresholdOverride>>,
}

impl ThresholdPolicy {
    pub fn effective(&self, detector_id: &str, category: &str) -> Thresholds {
        let mut t = self.global;
        if let Some(o) = self.detectors.get(detector_id) {
            t = o.apply(t);
        }
        if let Some(o) = self
            .categories
            .get(detector_id)
            .and_then(|m| m.get(category))
        {
            t = o.apply(t);
        }
        t
    }

    /// Every effective pair that can arise, with a label for error messages.
    fn effective_pairs(&self) -> Vec<(String, Thresholds)> {
        let mut out = vec![("global".to_string(), self.global)];
        for id in self.detectors.keys() {
            out.push((format!("detector {id}"), self.effective(id, "")));
        }
        for (id, cats) in &self.categories {
            for cat in cats.keys() {
                out.push((
                    format!("detector {id} / category {cat}"),
                    self.effective(id, cat),
                ));
            }
        }
        out
    }

    /// Lists every violation instead of stopping at the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (label, t) in self.effective_pairs() {
            for (name, x) in [("t_block", t.t_block), ("t_review", t.t_review)] {
                if !(0.0..=1.0).contains(&x) {
                    v.push(format!("{label}: {name} = {x} is outside [0, 1]"));
                }
            }
            if t.t_review > t.t_block {
                v.push(format!(
                    "{label}: t_review {} exceeds t_block {}",
                    t.t_review, t.t_block
                ));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Policy(v))
        }
    }
}

pub fn decide(
    confidence: f64,
    policy: &ThresholdPolicy,
    detector_id: &str,
    category: &str,
) -> Decision {
    let t = policy.effective(detector_id, category);
    if confidence >= t.t_block {
        Decision::AutoBlock
    } else if confidence >= t.t_review {
        Decision::ManualReview
    } else {
        Decision::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub min_dim: u32,
    pub max_dim: u32,
    pub allowed_formats: Vec<String>,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            min_dim: 32,
            max_dim: 4096,
            allowed_formats: vec!["png".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooSmall,
    TooLarge,
    FormatNotAllowed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub reason: RejectReason,
    pub detail: String,
}

/// Size and format gate. `format` is the stored encoding, e.g. `"png"`.
pub fn prevalidate(image: &CatalogImage, format: &str, limits: &Limits) -> Result<(), Rejection> {
    let (w, h) = (image.width(), image.height());
    if w < limits.min_dim || h < limits.min_dim {
        return Err(Rejection {
            reason: RejectReason::TooSmall,
            detail: format!("{w}x{h} below min_dim {}", limits.min_dim),
        });
    }
    if w > limits.max_dim || h > limits.max_dim {
        return Err(Rejection {
            reason: RejectReason::TooLarge,
            detail: format!("{w}x{h} above max_dim {}", limits.max_dim),
        });
    }
    if !limits
        .allowed_formats
        .iter()
        .any(|f| f.eq_ignore_ascii_case(format))
    {
        return Err(Rejection {
            reason: RejectReason::FormatNotAllowed,
            detail: format!("format {format} not in {:?}", limits.allowed_formats),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub image_id: String,
    pub detector_id: String,
    /// Category the image was routed under.
    pub category: String,
    pub confidence: f64,
    pub boxes: Vec<(BoundingBox, f64)>,
    pub decision: Decision,
    /// Unix milliseconds at write time.
    pub timestamp: u64,
}

impl DetectionVerdict {
    pub fn key(&self) -> (String, String) {
        (self.image_id.clone(), self.detector_id.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbaImage;

    fn policy() -> ThresholdPolicy {
        ThresholdPolicy {
            global: Thresholds::default(),
            detectors: BTreeMap::from([(
                "logo".to_string(),
                ThresholdOverride {
                    t_block: Some(0.9),
                    t_review: None,
                },
            )]),
            categories: BTreeMap::from([(
                "logo".to_string(),
                BTreeMap::from([(
                    "poster".to_string(),
                    ThresholdOverride {
                        t_block: Some(0.99),
                        t_review: None,
                    },
                )]),
            )]),
        }
    }

    #[test]
    fn decisions() {
        let p = ThresholdPolicy::default();
        assert_eq!(decide(0.95, &p, "d", "c"), Decision::AutoBlock);
        assert_eq!(decide(0.90, &p, "d", "c"), Decision::AutoBlock);
        assert_eq!(decide(0.60, &p, "d", "c"), Decision::ManualReview);
        assert_eq!(decide(0.50, &p, "d", "c"), Decision::ManualReview);
        assert_eq!(decide(0.30, &p, "d", "c"), Decision::Pass);
    }

    #[test]
    fn category_override_wins() {
        let p = policy();
        assert_eq!(decide(0.95, &p, "logo", "poster"), Decision::ManualReview);
        assert_eq!(decide(0.95, &p, "logo", "toy"), Decision::AutoBlock);
        assert_eq!(decide(0.95, &p, "other", "poster"), Decision::AutoBlock);
    }

    #[test]
    fn malformed_policy_lists_every_violation() {
        let mut p = policy();
        p.global.t_review = 0.95;
        p.detectors.insert(
            "skin".into(),
            ThresholdOverride {
                t_block: Some(1.5),
                t_review: None,
            },
        );
        let v = p.violations();
        // global and "logo" end up with t_review 0.95 > t_block 0.9, and skin's t_block is
        // out of range. logo/poster raises t_block to 0.99 and stays valid.
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(matches!(p.validate(), Err(PipelineError::Policy(_))));
        assert!(policy().validate().is_ok());
    }

    #[test]
    fn policy_toml_shape() {
        let p: ThresholdPolicy = serde_json::from_str(
            r#"{"global": {"t_block": 0.8, "t_review": 0.4},
                "categories": {"logo": {"poster": {"t_block": 0.99}}}}"#,
        )
        .unwrap();
        assert_eq!(p.effective("logo", "poster").t_block, 0.99);
        assert_eq!(p.effective("logo", "poster").t_review, 0.4);
    }

    #[test]
    fn prevalidation() {
        let limits = Limits::default();
        let tiny = CatalogImage::new("a", RgbaImage::new(1, 1), "c");
        assert_eq!(
            prevalidate(&tiny, "png", &limits).unwrap_err().reason,
            RejectReason::TooSmall
        );
        let ok = CatalogImage::new("b", RgbaImage::new(64, 64), "c");
        assert!(prevalidate(&ok, "png", &limits).is_ok());
        assert_eq!(
            prevalidate(&ok, "gif", &limits).unwrap_err().reason,
            RejectReason::FormatNotAllowed
        );
        let big = CatalogImage::new("c", RgbaImage::new(4097, 40), "c");
        assert_eq!(
            prevalidate(&big, "png", &limits).unwrap_err().reason,
            RejectReason::TooLarge
        );
    }
}
