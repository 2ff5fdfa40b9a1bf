use super::{sigmoid, Detector, DetectorError, DetectorOutput, Result};
use crate::signature::{ClassicDescriptor, Signature, SignatureExtractor};
use image::RgbaImage;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for LogisticHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 500,
            l2: 1e-4,
        }
    }
}

/// Logistic regression over signatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub dimension: usize,
}

impl ShallowModel {
    pub fn zeros(dimension: usize) -> Self {
        Self {
            weights: vec![0.0; dimension],
            bias: 0.0,
            dimension,
        }
    }

    pub fn predict(&self, sig: &Signature) -> Result<f64> {
        if sig.dim() != self.dimension {
            return Err(DetectorError::Dimension {
                expected: self.dimension,
                actual: sig.dim(),
            });
        }
        Ok(sigmoid(dot(&self.weights, &sig.values) + self.bias))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("model serializes");
        std::fs::write(path, json).map_err(|source| DetectorError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DetectorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let model: Self = serde_json::from_str(&text).map_err(|e| DetectorError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if model.weights.len() != model.dimension {
            return Err(DetectorError::Dimension {
                expected: model.dimension,
                actual: model.weights.len(),
            });
        }
        Ok(model)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean log-loss plus `l2 / 2 * |w|^2` (the bias is not penalised).
pub fn logistic_loss(model: &ShallowModel, samples: &[(Signature, bool)], l2: f64) -> f64 {
    let n = samples.len() as f64;
    let mut total = 0.0;
    for (sig, y) in samples {
        let z = dot(&model.weights, &sig.values) + model.bias;
        // log(1 + e^z) - y z, computed stably.
        let softplus = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        total += softplus - if *y { z } else { 0.0 };
    }
    total / n + 0.5 * l2 * dot(&model.weights, &model.weights)
}

/// Analytic gradient of [`loss`] as `(dL/dw, dL/db)`.
pub fn logistic_gradient(
    model: &ShallowModel,
    samples: &[(Signature, bool)],
    l2: f64,
) -> (Vec<f64>, f64) {
    let n = samples.len() as f64;
    let mut gw: Vec<f64> = model.weights.iter().map(|w| l2 * w).collect();
    let mut gb = 0.0;
    for (sig, y) in samples {
        let p = sigmoid(dot(&model.weights, &sig.values) + model.bias);
        let r = (p - if *y { 1.0 } else { 0.0 }) / n;
        for (g, x) in gw.iter_mut().zip(&sig.values) {
            *g += r * x;
        }
        gb += r;
    }
    (gw, gb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShallowFit {
    pub model: ShallowModel,
    /// Training loss before the first step and after every epoch.
    pub loss_history: Vec<f64>,
}

/// Full-batch gradient descent from zero weights. `true` labels are positives.
pub fn shallow_fit(samples: &[(Signature, bool)], hyper: &LogisticHyper) -> Result<ShallowFit> {
    if !(hyper.learning_rate > 0.0 && hyper.learning_rate.is_finite()) || !(hyper.l2 >= 0.0) {
        return Err(DetectorError::InvalidConfig(
            "learning_rate must be > 0 and l2 >= 0".into(),
        ));
    }
    let Some((first, _)) = samples.first() else {
        return Err(DetectorError::DegenerateTraining);
    };
    let dim = first.dim();
    if let Some((s, _)) = samples.iter().find(|(s, _)| s.dim() != dim) {
        return Err(DetectorError::Dimension {
            expected: dim,
            actual: s.dim(),
        });
    }
    let positives = samples.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == samples.len() {
        return Err(DetectorError::DegenerateTraining);
    }
    let mut model = ShallowModel::zeros(dim);
    let mut history = vec![logistic_loss(&model, samples, hyper.l2)];
    for _ in 0..hyper.epochs {
        let (gw, gb) = logistic_gradient(&model, samples, hyper.l2);
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= hyper.learning_rate * g;
        }
        model.bias -= hyper.learning_rate * gb;
        history.push(logistic_loss(&model, samples, hyper.l2));
    }
    Ok(ShallowFit {
        model,
        loss_history: history,
    })
}

pub fn shallow_detect(model: &ShallowModel, image: &RgbaImage) -> Result<DetectorOutput> {
    let sig = ClassicDescriptor.extract(image);
    Ok(DetectorOutput::without_boxes(
        "shallow",
        model.predict(&sig)?,
    ))
}

pub struct ShallowDetector {
    id: String,
    classes: Vec<String>,
    model: ShallowModel,
}

impl ShallowDetector {
    pub fn new(
        id: impl Into<String>,
        class: impl Into<String>,
        model: ShallowModel,
    ) -> Result<Self> {
        if model.dimension != ClassicDescriptor.dim() || model.weights.len() != model.dimension {
            return Err(DetectorError::Dimension {
                expected: ClassicDescriptor.dim(),
                actual: model.weights.len(),
            });
        }
        Ok(Self {
            id: id.into(),
            classes: vec![class.into()],
            model,
        })
    }

    pub fn model(&self) -> &ShallowModel {
        &self.model
    }
}

impl Detector for ShallowDetector {
    fn detector_id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn detect(&self, image: &RgbaImage) -> Result<DetectorOutput> {
        let sig = ClassicDescriptor.extract(image);
        Ok(DetectorOutput::without_boxes(
            &self.id,
            self.model.predict(&sig)?,
        ))
    }
}
