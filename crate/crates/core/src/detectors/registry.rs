use super::{
    logo_detector_from_templates, Detector, DetectorError, Result, ShallowDetector, ShallowModel,
    SkinDetector,
};
use crate::synthgen::{load_logos, Compliance, Split};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Template,
    Skin,
    Shallow,
}

/// One registry entry. `params` depend on `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    pub class: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateParams {
    /// Directory written by `save_logos`.
    pub logos_dir: PathBuf,
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShallowParams {
    /// JSON model file.
    pub model: PathBuf,
}

pub type DetectorRegistry = BTreeMap<String, Arc<dyn Detector>>;

fn params<T: serde::de::DeserializeOwned>(id: &str, value: &serde_json::Value) -> Result<T> {
    serde_json::from_value(value.clone())
        .map_err(|e| DetectorError::InvalidConfig(format!("detector {id}: bad params: {e}")))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Builds every configured detector. Relative paths resolve against `base_dir`.
pub fn build_registry(
    specs: &BTreeMap<String, DetectorSpec>,
    base_dir: &Path,
) -> Result<DetectorRegistry> {
    let mut out = DetectorRegistry::new();
    for (id, spec) in specs {
        if spec.class.is_empty() {
            return Err(DetectorError::InvalidConfig(format!(
                "detector {id}: empty class"
            )));
        }
        let det: Arc<dyn Detector> = match spec.kind {
            DetectorKind::Skin => Arc::new(SkinDetector::new(id.clone(), spec.class.clone())),
            DetectorKind::Shallow => {
                let p: ShallowParams = params(id, &spec.params)?;
                let model = ShallowModel::load(&resolve(base_dir, &p.model))?;
                Arc::new(ShallowDetector::new(id.clone(), spec.class.clone(), model)?)
            }
            DetectorKind::Template => {
                let p: TemplateParams = params(id, &spec.params)?;
                let logos: Vec<_> = load_logos(&resolve(base_dir, &p.logos_dir))?
                    .into_iter()
                    .filter(|l| {
                        l.class_label() == spec.class
                            && l.split() == Split::Train
                            && l.compliance() == Compliance::NonCompliant
                    })
                    .collect();
                if logos.is_empty() {
                    return Err(DetectorError::InvalidConfig(format!(
                        "detector {id}: no Train-split templates for class {}",
                        spec.class
                    )));
                }
                Arc::new(logo_detector_from_templates(&logos, &p.scales)?.with_id(id.clone()))
            }
        };
        out.insert(id.clone(), det);
    }
    Ok(out)
}
