//! Evaluation: confusion counts, P/R/F1, ROC and F1 sweeps, box matching,
//! per-category false-positive rates and threshold tuning.

use crate::catalog::BoundingBox;
use crate::pipeline::{ThresholdOverride, ThresholdPolicy, Thresholds};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const REPORT_FILE: &str = "report.json";
pub const ROC_FILE: &str = "roc.csv";
pub const F1_CURVE_FILE: &str = "f1_curve.csv";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ROC needs both classes present")]
    DegenerateRoc,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(default)]
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// Counts for `score >= threshold` predictions.
    pub fn at_threshold(scores: &[(f64, bool)], threshold: f64) -> Self {
        let mut c = Self::default();
        for &(s, truth) in scores {
            match (s >= threshold, truth) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

/// Precision, recall and F1, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall, in the same unit as the inputs. `0/0` is 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn prf1(c: &ConfusionCounts) -> Prf1 {
    let precision = 100.0 * ratio(c.tp, c.tp + c.fp);
    let recall = 100.0 * ratio(c.tp, c.tp + c.fn_);
    Prf1 {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Predictions are `score >= threshold`. The first point uses +inf.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Area under the curve by the trapezoid rule.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

/// Counts at each sweep threshold, computed in one pass over the sorted scores.
fn sweep_counts(scores: &[(f64, bool)]) -> Vec<(f64, ConfusionCounts)> {
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = scores.iter().filter(|s| s.1).count() as u64;
    let neg = scores.len() as u64 - pos;
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: neg,
        fn_: pos,
    };
    let mut out = vec![(f64::INFINITY, c)];
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                c.tp += 1;
                c.fn_ -= 1;
            } else {
                c.fp += 1;
                c.tn -= 1;
            }
            i += 1;
        }
        out.push((t, c));
    }
    out
}

pub fn roc(scores: &[(f64, bool)]) -> Result<RocCurve> {
    let pos = scores.iter().filter(|s| s.1).count();
    if pos == 0 || pos == scores.len() {
        return Err(EvalError::DegenerateRoc);
    }
    let points = sweep_counts(scores)
        .into_iter()
        .map(|(threshold, c)| RocPoint {
            fpr: ratio(c.fp, c.fp + c.tn),
            tpr: ratio(c.tp, c.tp + c.fn_),
            threshold,
        })
        .collect();
    Ok(RocCurve { points })
}

/// F1 as a fraction in `[0, 1]` at the same sweep points as [`roc`].
pub fn f1_curve(scores: &[(f64, bool)]) -> Vec<(f64, f64)> {
    sweep_counts(scores)
        .into_iter()
        .map(|(t, c)| (t, prf1(&c).f1 / 100.0))
        .collect()
}

/// Probability that a random positive outscores a random negative (ties count half).
pub fn auc_mann_whitney(scores: &[(f64, bool)]) -> Result<f64> {
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos = sorted.iter().filter(|s| s.1).count();
    let neg = sorted.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateRoc);
    }
    // Sum of positive ranks with ties averaged.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Greedy matching by descending score. A prediction is a true positive when its best
/// unmatched truth box of the same class has IoU at least `iou_min`.
/// Returned counts have `tn = 0`.
pub fn match_boxes(
    predicted: &[(BoundingBox, f64)],
    truth: &[BoundingBox],
    iou_min: f64,
) -> Result<ConfusionCounts> {
    if !(iou_min > 0.0 && iou_min <= 1.0) {
        return Err(EvalError::InvalidConfig(format!(
            "iou_min {iou_min} outside (0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|&a, &b| predicted[b].1.total_cmp(&predicted[a].1));
    let mut used = vec![false; truth.len()];
    let mut c = ConfusionCounts::default();
    for i in order {
        let p = &predicted[i].0;
        let best = truth
            .iter()
            .enumerate()
            .filter(|(j, t)| !used[*j] && t.class_label == p.class_label)
            .map(|(j, t)| (j, p.iou(t)))
            .fold(None::<(usize, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        match best {
            Some((j, iou)) if iou >= iou_min => {
                used[j] = true;
                c.tp += 1;
            }
            _ => c.fp += 1,
        }
    }
    c.fn_ = used.iter().filter(|u| !**u).count() as u64;
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryFpr {
    pub fp: u64,
    pub tn: u64,
    /// `None` when the category has no negatives.
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FprReport {
    pub per_category: BTreeMap<String, CategoryFpr>,
    pub overall: Option<f64>,
}

/// False-positive rate per category from `(category, predicted_positive, truth)` triples.
pub fn per_category_fpr<'a>(
    observations: impl IntoIterator<Item = (&'a str, bool, bool)>,
) -> FprReport {
    let mut per_category: BTreeMap<String, CategoryFpr> = BTreeMap::new();
    for (cat, predicted, truth) in observations {
        let e = per_category.entry(cat.to_string()).or_default();
        if !truth {
            if predicted {
                e.fp += 1;
            } else {
                e.tn += 1;
            }
        }
    }
    let (mut fp, mut neg) = (0, 0);
    for e in per_category.values_mut() {
        e.fpr = (e.fp + e.tn > 0).then(|| ratio(e.fp, e.fp + e.tn));
        fp += e.fp;
        neg += e.fp + e.tn;
    }
    FprReport {
        per_category,
        overall: (neg > 0).then(|| ratio(fp, neg)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Objective {
    MaxF1,
    /// Highest recall among thresholds whose precision (a fraction) is at least this.
    RecallAtPrecision(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chosen {
    pub t_block: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Best sweep threshold for `objective`; equal objective values prefer the higher threshold.
/// `None` when no threshold satisfies a precision constraint or there are no positives.
pub fn best_threshold(scores: &[(f64, bool)], objective: Objective) -> Option<Chosen> {
    if !scores.iter().any(|s| s.1) {
        return None;
    }
    let mut best: Option<(f64, Chosen)> = None;
    // Sweep runs from high to low thresholds, so only a strictly better value replaces.
    for (t, c) in sweep_counts(scores).into_iter().skip(1) {
        let m = prf1(&c);
        let chosen = Chosen {
            t_block: t,
            precision: m.precision / 100.0,
            recall: m.recall / 100.0,
            f1: m.f1 / 100.0,
        };
        let value = match objective {
            Objective::MaxF1 => chosen.f1,
            Objective::RecallAtPrecision(p) => {
                if chosen.precision + 1e-12 < p {
                    continue;
                }
                chosen.recall
            }
        };
        if best.is_none_or(|(b, _)| value > b) {
            best = Some((value, chosen));
        }
    }
    best.map(|(_, c)| c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub policy: ThresholdPolicy,
    /// Chosen operating point per `detector/category`.
    pub chosen: BTreeMap<String, Chosen>,
    /// `detector/category` pairs that kept the detector-level threshold.
    pub fallbacks: Vec<String>,
}

/// Picks per-(detector, category) `t_block` values, with detector-level and global
/// values tuned on pooled scores. Pairs with fewer than `min_positives` positives, or
/// where the objective cannot be met, fall back to the detector threshold and are
/// listed in `fallbacks`. Every `t_review` is `min(review_floor, t_block)`.
pub fn tune_thresholds(
    scores: &BTreeMap<(String, String), Vec<(f64, bool)>>,
    objective: Objective,
    review_floor: f64,
    min_positives: usize,
) -> Result<TuneResult> {
    if !(0.0..=1.0).contains(&review_floor) {
        return Err(EvalError::InvalidConfig(format!(
            "review floor {review_floor} outside [0, 1]"
        )));
    }
    if let Objective::RecallAtPrecision(p) = objective {
        if !(0.0..=1.0).contains(&p) {
            return Err(EvalError::InvalidConfig(format!(
                "precision target {p} outside [0, 1]"
            )));
        }
    }
    let pair = |t_block: f64| Thresholds {
        t_block,
        t_review: review_floor.min(t_block),
    };
    let over = |t: Thresholds| ThresholdOverride {
        t_block: Some(t.t_block),
        t_review: Some(t.t_review),
    };
    let clamp = |t: f64| t.clamp(0.0, 1.0);

    let all: Vec<(f64, bool)> = scores.values().flatten().copied().collect();
    let global = best_threshold(&all, objective)
        .map(|c| pair(clamp(c.t_block)))
        .unwrap_or_else(|| pair(Thresholds::default().t_block));
    let mut policy = ThresholdPolicy {
        global,
        ..ThresholdPolicy::default()
    };
    let mut chosen = BTreeMap::new();
    let mut fallbacks = Vec::new();

    let mut by_detector: BTreeMap<&str, Vec<(f64, bool)>> = BTreeMap::new();
    for ((d, _), s) in scores {
        by_detector.entry(d).or_default().extend(s);
    }
    for (d, s) in &by_detector {
        if let Some(c) = best_threshold(s, objective) {
            policy
                .detectors
                .insert(d.to_string(), over(pair(clamp(c.t_block))));
        }
    }
    for ((d, cat), s) in scores {
        let key = format!("{d}/{cat}");
        let positives = s.iter().filter(|x| x.1).count();
        match best_threshold(s, objective) {
            Some(c) if positives >= min_positives.max(1) => {
                policy
                    .categories
                    .entry(d.clone())
                    .or_default()
                    .insert(cat.clone(), over(pair(clamp(c.t_block))));
                chosen.insert(key, c);
            }
            _ => fallbacks.push(key),
        }
    }
    debug_assert!(policy.violations().is_empty());
    Ok(TuneResult {
        policy,
        chosen,
        fallbacks,
    })
}

/// Everything `eval` writes to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<ConfusionCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Prf1>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr: Option<FprReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_counts: Option<ConfusionCounts>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<NamedMetrics>,
    #[serde(skip)]
    pub roc: Option<RocCurve>,
    #[serde(skip)]
    pub f1_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMetrics {
    pub name: String,
    pub counts: ConfusionCounts,
    pub metrics: Prf1,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    writeln!(f, "{header}").map_err(io_err(path))?;
    for r in rows {
        writeln!(f, "{r}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

/// Writes `report.json`, and `roc.csv` / `f1_curve.csv` when curves are present.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&path, json + "\n").map_err(io_err(&path))?;
    if let Some(roc) = &report.roc {
        write_csv(
            &dir.join(ROC_FILE),
            "threshold,fpr,tpr",
            roc.points
                .iter()
                .map(|p| format!("{},{},{}", p.threshold, p.fpr, p.tpr)),
        )?;
    }
    if !report.f1_curve.is_empty() {
        write_csv(
            &dir.join(F1_CURVE_FILE),
            "threshold,f1",
            report.f1_curve.iter().map(|(t, f)| format!("{t},{f}")),
        )?;
    }
    Ok(())
}
