use super::{Result, SynthError};
use crate::catalog::BoundingBox;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// `(width, height)` pairs in pixels.
    pub anchors: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFit {
    pub anchors: AnchorSet,
    pub assignments: Vec<usize>,
    /// Mean IoU to the assigned anchor after each accepted Lloyd iteration.
    pub mean_iou_history: Vec<f64>,
    pub iterations: usize,
}

impl AnchorFit {
    pub fn mean_iou(&self) -> f64 {
        *self
            .mean_iou_history
            .last()
            .expect("history is never empty")
    }
}

/// IoU of two boxes sharing a center, from widths and heights only.
pub fn iou_wh(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn assign(dims: &[(f64, f64)], anchors: &[(f64, f64)]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let assignments = dims
        .iter()
        .map(|&d| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, &a) in anchors.iter().enumerate() {
                let iou = iou_wh(d, a);
                if iou > best.1 {
                    best = (j, iou);
                }
            }
            total += best.1;
            best.0
        })
        .collect();
    (assignments, total / dims.len() as f64)
}

/// Lloyd's k-means on box `(width, height)` with distance `1 - IoU` and
/// k-means++ seeding from `rng`.
///
/// Centroids are per-cluster means of width and height (empty clusters keep their
/// previous anchor). The mean is not the IoU-optimal centroid, so after the first
/// iteration an update that would lower mean IoU is rejected and iteration stops.
pub fn anchor_kmeans<R: Rng + ?Sized>(
    boxes: &[BoundingBox],
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> Result<AnchorFit> {
    if k == 0 || max_iter == 0 {
        return Err(SynthError::InvalidConfig(
            "k and max_iter must be >= 1".into(),
        ));
    }
    if boxes.len() < k {
        return Err(SynthError::TooFewBoxes { k, n: boxes.len() });
    }
    let dims: Vec<(f64, f64)> = boxes
        .iter()
        .map(|b| (b.width() as f64, b.height() as f64))
        .collect();
    if dims.iter().any(|&(w, h)| w <= 0.0 || h <= 0.0) {
        return Err(SynthError::InvalidConfig(
            "boxes must have positive size".into(),
        ));
    }

    let mut anchors = vec![dims[rng.random_range(0..dims.len())]];
    while anchors.len() < k {
        let weights: Vec<f64> = dims
            .iter()
            .map(|&d| {
                let nearest = anchors
                    .iter()
                    .map(|&a| 1.0 - iou_wh(d, a))
                    .fold(f64::INFINITY, f64::min);
                nearest * nearest
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = weights.len() - 1;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            while weights[chosen] == 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..dims.len())
        };
        anchors.push(dims[pick]);
    }

    let (mut assignments, mut objective) = assign(&dims, &anchors);
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&d, &c) in dims.iter().zip(&assignments) {
            sums[c].0 += d.0;
            sums[c].1 += d.1;
            sums[c].2 += 1;
        }
        let updated: Vec<(f64, f64)> = sums
            .iter()
            .zip(&anchors)
            .map(|(&(w, h, n), &prev)| {
                if n == 0 {
                    prev
                } else {
                    (w / n as f64, h / n as f64)
                }
            })
            .collect();
        let (next_assign, next_obj) = assign(&dims, &updated);
        if iterations > 1 && next_obj < objective {
            break;
        }
        let converged = next_assign == assignments && updated == anchors;
        anchors = updated;
        assignments = next_assign;
        objective = next_obj;
        history.push(objective);
        if converged {
            break;
        }
    }
    Ok(AnchorFit {
        anchors: AnchorSet { anchors },
        assignments,
        mean_iou_history: history,
        iterations,
    })
}
