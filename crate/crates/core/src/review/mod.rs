//! Budgeted human review: choosing which flags reviewers see, recording their
//! decisions, and keeping the resulting labels.

use crate::catalog::{BoundingBox, CatalogError, CatalogStore, ImageState, Label, Provenance};
use crate::pipeline::{
    apply_review_decision, read_log_lines, Decision, DetectionVerdict, EventLog, PipelineError,
    ReviewAction, ReviewOutcome,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TASKS_FILE: &str = "tasks.jsonl";
pub const LABELED_FILE: &str = "labeled.jsonl";

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown task {0}")]
    NotFound(String),
    #[error("task {task_id} was already decided")]
    DuplicateDecision {
        task_id: String,
        existing: ReviewDecision,
    },
    #[error("undefined: no decided tasks")]
    Undefined,
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
    Pipeline(#[from] PipelineError),
}

pub type Result<T, E = ReviewError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Decided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReviewVerdict {
    ConfirmNonCompliant,
    RejectFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub image_id: String,
    pub detector_id: String,
    pub category: String,
    pub confidence: f64,
    pub boxes: Vec<(BoundingBox, f64)>,
    pub status: TaskStatus,
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<ReviewDecision>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub task_id: String,
    pub verdict: ReviewVerdict,
    pub reviewer_id: String,
    pub decided_at: u64,
}

fn task_id(seq: u64) -> String {
    format!("t{seq:06}")
}

/// Picks ManualReview verdicts with confidence at or above `floor`, highest first
/// (ties by image id, then detector id), skipping `(image_id, detector_id)` pairs in
/// `exclude` and repeated pairs, and keeps at most `budget`.
///
/// Tasks are numbered from `first_seq` in selection order.
pub fn select_for_review(
    verdicts: &[DetectionVerdict],
    budget: usize,
    floor: f64,
    exclude: &HashSet<(String, String)>,
    first_seq: u64,
    now: u64,
) -> Vec<ReviewTask> {
    let mut eligible: Vec<&DetectionVerdict> = verdicts
        .iter()
        .filter(|v| v.decision == Decision::ManualReview && v.confidence >= floor)
        .filter(|v| !exclude.contains(&(v.image_id.clone(), v.detector_id.clone())))
        .collect();
    eligible.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| a.detector_id.cmp(&b.detector_id))
    });
    let mut seen = HashSet::new();
    eligible
        .into_iter()
        .filter(|v| seen.insert((v.image_id.as_str(), v.detector_id.as_str())))
        .take(budget)
        .enumerate()
        .map(|(i, v)| ReviewTask {
            task_id: task_id(first_seq + i as u64),
            image_id: v.image_id.clone(),
            detector_id: v.detector_id.clone(),
            category: v.category.clone(),
            confidence: v.confidence,
            boxes: v.boxes.clone(),
            status: TaskStatus::Open,
            created_at: now,
            decision: None,
        })
        .collect()
}

/// Fraction of decided tasks whose verdict confirmed the flag.
pub fn labeling_roi<'a>(tasks: impl IntoIterator<Item = &'a ReviewTask>) -> Result<f64> {
    let (mut decided, mut confirmed) = (0usize, 0usize);
    for t in tasks {
        if let Some(d) = &t.decision {
            decided += 1;
            if d.verdict == ReviewVerdict::ConfirmNonCompliant {
                confirmed += 1;
            }
        }
    }
    if decided == 0 {
        Err(ReviewError::Undefined)
    } else {
        Ok(confirmed as f64 / decided as f64)
    }
}

/// Where a crowd label came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub task_id: String,
    pub detector_id: String,
    pub verdict_confidence: f64,
    pub reviewer_id: String,
    pub review_verdict: ReviewVerdict,
}

/// A reviewer-verified label for a catalog image. Pixels stay in the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample_id: String,
    pub image_id: String,
    pub category: String,
    pub label: Label,
    pub boxes: Vec<BoundingBox>,
    pub provenance: Provenance,
    pub lineage: Lineage,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum TaskRecord {
    Created { task: ReviewTask },
    Decided { decision: ReviewDecision },
}

struct Inner {
    tasks: BTreeMap<String, ReviewTask>,
    pairs: HashSet<(String, String)>,
    next_seq: u64,
    labeled: Vec<LabeledSample>,
    tasks_file: Option<File>,
    labeled_file: Option<File>,
}

/// Review tasks and the labeled store, persisted under `<dir>/tasks.jsonl` and
/// `<dir>/labeled.jsonl`. Both files are append-only.
pub struct ReviewQueue {
    dir: Option<PathBuf>,
    inner: Mutex<Inner>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub task: ReviewTask,
    pub image_state: ImageState,
    pub sample: LabeledSample,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub open: usize,
    pub decided: usize,
    pub confirmed: usize,
    pub rejected: usize,
    /// Share of decided flags that were confirmed; absent with no decisions.
    pub roi: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub open: usize,
    pub decided: usize,
    pub confirmed: usize,
    pub rejected: usize,
    pub roi: Option<f64>,
    pub labeled: usize,
    pub per_category: BTreeMap<String, CategoryStats>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_log_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReviewError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn append_line<T: Serialize>(
    file: &mut Option<File>,
    path: Option<PathBuf>,
    value: &T,
) -> Result<()> {
    if let Some(f) = file.as_mut() {
        let mut line = serde_json::to_vec(value).expect("record serializes");
        line.push(b'\n');
        f.write_all(&line).map_err(|source| ReviewError::Io {
            path: path.unwrap_or_default(),
            source,
        })?;
    }
    Ok(())
}

impl ReviewQueue {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            inner: Mutex::new(Inner {
                tasks: BTreeMap::new(),
                pairs: HashSet::new(),
                next_seq: 0,
                labeled: Vec::new(),
                tasks_file: None,
                labeled_file: None,
            }),
        }
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ReviewError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let tasks_path = dir.join(TASKS_FILE);
        let labeled_path = dir.join(LABELED_FILE);
        let mut tasks = BTreeMap::new();
        let mut next_seq = 0;
        for rec in read_jsonl::<TaskRecord>(&tasks_path)? {
            match rec {
                TaskRecord::Created { task } => {
                    if let Some(seq) = task
                        .task_id
                        .strip_prefix('t')
                        .and_then(|s| s.parse::<u64>().ok())
                    {
                        next_seq = next_seq.max(seq + 1);
                    }
                    tasks.insert(task.task_id.clone(), task);
                }
                TaskRecord::Decided { decision } => {
                    if let Some(t) = tasks.get_mut(&decision.task_id) {
                        t.status = TaskStatus::Decided;
                        t.decision = Some(decision);
                    }
                }
            }
        }
        let pairs = tasks
            .values()
            .map(|t: &ReviewTask| (t.image_id.clone(), t.detector_id.clone()))
            .collect();
        let labeled = read_jsonl(&labeled_path)?;
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(io(p))
        };
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            inner: Mutex::new(Inner {
                tasks,
                pairs,
                next_seq,
                labeled,
                tasks_file: Some(open(&tasks_path)?),
                labeled_file: Some(open(&labeled_path)?),
            }),
        })
    }

    fn path(&self, file: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(file))
    }

    /// Creates tasks for the best eligible verdicts. Pairs that already have a task,
    /// open or decided, are never selected again, and only images still under review
    /// are considered.
    pub fn select(
        &self,
        verdicts: &[DetectionVerdict],
        catalog: &CatalogStore,
        budget: usize,
        floor: f64,
    ) -> Result<Vec<ReviewTask>> {
        let mut inner = self.inner.lock();
        let under_review: Vec<DetectionVerdict> = verdicts
            .iter()
            .filter(|v| catalog.state(&v.image_id) == Some(ImageState::UnderReview))
            .cloned()
            .collect();
        let tasks = select_for_review(
            &under_review,
            budget,
            floor,
            &inner.pairs,
            inner.next_seq,
            now_ms(),
        );
        let path = self.path(TASKS_FILE);
        for task in &tasks {
            append_line(
                &mut inner.tasks_file,
                path.clone(),
                &TaskRecord::Created { task: task.clone() },
            )?;
            inner.next_seq += 1;
            inner
                .pairs
                .insert((task.image_id.clone(), task.detector_id.clone()));
            inner.tasks.insert(task.task_id.clone(), task.clone());
        }
        Ok(tasks)
    }

    pub fn get(&self, task_id: &str) -> Option<ReviewTask> {
        self.inner.lock().tasks.get(task_id).cloned()
    }

    pub fn tasks(&self, status: Option<TaskStatus>) -> Vec<ReviewTask> {
        self.inner
            .lock()
            .tasks
            .values()
            .filter(|t| status.is_none_or(|s| t.status == s))
            .cloned()
            .collect()
    }

    pub fn labeled(&self) -> Vec<LabeledSample> {
        self.inner.lock().labeled.clone()
    }

    pub fn labeled_len(&self) -> usize {
        self.inner.lock().labeled.len()
    }

    /// Records a reviewer's verdict on an open task.
    ///
    /// A confirmation becomes a NonCompliant label and rejects the image; a rejected
    /// flag becomes a Compliant label and accepts it. When another task already
    /// settled the image, the label is still kept and the image state is left alone.
    pub fn submit_decision(
        &self,
        task_id: &str,
        verdict: ReviewVerdict,
        reviewer_id: &str,
        catalog: &CatalogStore,
        events: &EventLog,
    ) -> Result<SubmitOutcome> {
        let mut inner = self.inner.lock();
        let task = inner
            .tasks
            .get(task_id)
            .cloned()
            .ok_or_else(|| ReviewError::NotFound(task_id.to_string()))?;
        if let Some(existing) = task.decision.clone() {
            return Err(ReviewError::DuplicateDecision {
                task_id: task_id.to_string(),
                existing,
            });
        }
        let action = match verdict {
            ReviewVerdict::ConfirmNonCompliant => ReviewAction::Reject,
            ReviewVerdict::RejectFlag => ReviewAction::Accept,
        };
        let image_state =
            match apply_review_decision(catalog, events, &task.image_id, action, Some(task_id)) {
                Ok(ReviewOutcome::Applied(s)) | Ok(ReviewOutcome::Duplicate(s)) => s,
                Err(PipelineError::Catalog(CatalogError::IllegalTransition { from, .. }))
                    if matches!(
                        from,
                        ImageState::ReviewAccepted | ImageState::ReviewRejected
                    ) =>
                {
                    from
                }
                Err(e) => return Err(e.into()),
            };
        let decision = ReviewDecision {
            task_id: task_id.to_string(),
            verdict,
            reviewer_id: reviewer_id.to_string(),
            decided_at: now_ms(),
        };
        let (label, boxes) = match verdict {
            ReviewVerdict::ConfirmNonCompliant => (
                Label::NonCompliant,
                task.boxes.iter().map(|(b, _)| b.clone()).collect(),
            ),
            ReviewVerdict::RejectFlag => (Label::Compliant, Vec::new()),
        };
        let sample = LabeledSample {
            sample_id: format!("lbl-{task_id}"),
            image_id: task.image_id.clone(),
            category: task.category.clone(),
            label,
            boxes,
            provenance: Provenance::CrowdVerified,
            lineage: Lineage {
                task_id: task_id.to_string(),
                detector_id: task.detector_id.clone(),
                verdict_confidence: task.confidence,
                reviewer_id: reviewer_id.to_string(),
                review_verdict: verdict,
            },
        };
        // Label first, then the decision record: a crash in between leaves the task
        // open, and the retry finds the label already stored.
        if !inner.labeled.iter().any(|s| s.lineage.task_id == task_id) {
            append_line(&mut inner.labeled_file, self.path(LABELED_FILE), &sample)?;
            inner.labeled.push(sample.clone());
        }
        append_line(
            &mut inner.tasks_file,
            self.path(TASKS_FILE),
            &TaskRecord::Decided {
                decision: decision.clone(),
            },
        )?;
        let t = inner.tasks.get_mut(task_id).expect("present");
        t.status = TaskStatus::Decided;
        t.decision = Some(decision);
        Ok(SubmitOutcome {
            task: t.clone(),
            image_state,
            sample,
        })
    }

    pub fn stats(&self) -> ReviewStats {
        let inner = self.inner.lock();
        let mut s = ReviewStats {
            labeled: inner.labeled.len(),
            ..ReviewStats::default()
        };
        for t in inner.tasks.values() {
            let c = s.per_category.entry(t.category.clone()).or_default();
            match &t.decision {
                None => {
                    s.open += 1;
                    c.open += 1;
                }
                Some(d) => {
                    s.decided += 1;
                    c.decided += 1;
                    if d.verdict == ReviewVerdict::ConfirmNonCompliant {
                        s.confirmed += 1;
                        c.confirmed += 1;
                    } else {
                        s.rejected += 1;
                        c.rejected += 1;
                    }
                }
            }
        }
        let roi = |confirmed: usize, decided: usize| {
            (decided > 0).then(|| confirmed as f64 / decided as f64)
        };
        s.roi = roi(s.confirmed, s.decided);
        for c in s.per_category.values_mut() {
            c.roi = roi(c.confirmed, c.decided);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::CatalogImage;
    use crate::pipeline::Event;
    use image::RgbaImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(image: &str, det: &str, c: f64, d: Decision) -> DetectionVerdict {
        DetectionVerdict {
            image_id: image.into(),
            detector_id: det.into(),
            category: "toy".into(),
            confidence: c,
            boxes: vec![],
            decision: d,
            timestamp: 0,
        }
    }

    fn three() -> Vec<DetectionVerdict> {
        vec![
            v("a", "d", 0.9, Decision::ManualReview),
            v("b", "d", 0.8, Decision::ManualReview),
            v("c", "d", 0.7, Decision::ManualReview),
        ]
    }

    #[test]
    fn selection_examples() {
        let none = HashSet::new();
        let got = select_for_review(&three(), 5, 0.75, &none, 0, 0);
        assert_eq!(
            got.iter().map(|t| t.confidence).collect::<Vec<_>>(),
            [0.9, 0.8]
        );
        let got = select_for_review(&three(), 1, 0.75, &none, 0, 0);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].image_id, "a");
        assert!(select_for_review(&three(), 0, 0.0, &none, 0, 0).is_empty());
    }

    #[test]
    fn selection_skips_existing_and_other_decisions() {
        let mut verdicts = three();
        verdicts.push(v("z", "d", 0.99, Decision::AutoBlock));
        verdicts.push(v("y", "d", 0.3, Decision::Pass));
        let exclude = HashSet::from([("a".to_string(), "d".to_string())]);
        let got = select_for_review(&verdicts, 10, 0.0, &exclude, 7, 0);
        assert_eq!(
            got.iter().map(|t| t.image_id.as_str()).collect::<Vec<_>>(),
            ["b", "c"]
        );
        assert_eq!(got[0].task_id, "t000007");
    }

    #[test]
    fn ties_break_on_image_id() {
        let verdicts = vec![
            v("m", "d", 0.6, Decision::ManualReview),
            v("b", "d", 0.6, Decision::ManualReview),
        ];
        let got = select_for_review(&verdicts, 1, 0.0, &HashSet::new(), 0, 0);
        assert_eq!(got[0].image_id, "b");
    }

    #[test]
    fn fuzzed_selection_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(0..40);
            let verdicts: Vec<_> = (0..n)
                .map(|i| {
                    let d = [Decision::Pass, Decision::ManualReview, Decision::AutoBlock]
                        [rng.random_range(0..3)];
                    v(
                        &format!("i{}", rng.random_range(0..1000)),
                        &format!("d{i}"),
                        (rng.random_range(0..10) as f64) / 10.0,
                        d,
                    )
                })
                .collect();
            let budget = rng.random_range(0..8);
            let floor = rng.random_range(0.0..1.0);
            let got = select_for_review(&verdicts, budget, floor, &HashSet::new(), 0, 0);
            let mut oracle: Vec<_> = verdicts
                .iter()
                .filter(|x| x.decision == Decision::ManualReview && x.confidence >= floor)
                .collect();
            oracle.sort_by(|a, b| {
                b.confidence
                    .partial_cmp(&a.confidence)
                    .unwrap()
                    .then(a.image_id.cmp(&b.image_id))
                    .then(a.detector_id.cmp(&b.detector_id))
            });
            oracle.truncate(budget);
            assert!(got.len() <= budget);
            let got: Vec<_> = got.iter().map(|t| (&t.image_id, &t.detector_id)).collect();
            let want: Vec<_> = oracle
                .iter()
                .map(|t| (&t.image_id, &t.detector_id))
                .collect();
            assert_eq!(got, want);
        }
    }

    fn task(verdict: Option<ReviewVerdict>) -> ReviewTask {
        ReviewTask {
            task_id: "t".into(),
            image_id: "i".into(),
            detector_id: "d".into(),
            category: "c".into(),
            confidence: 0.5,
            boxes: vec![],
            status: if verdict.is_some() {
                TaskStatus::Decided
            } else {
                TaskStatus::Open
            },
            created_at: 0,
            decision: verdict.map(|verdict| ReviewDecision {
                task_id: "t".into(),
                verdict,
                reviewer_id: "r".into(),
                decided_at: 0,
            }),
        }
    }

    #[test]
    fn roi_examples() {
        use ReviewVerdict::*;
        let ts: Vec<_> = [
            ConfirmNonCompliant,
            ConfirmNonCompliant,
            ConfirmNonCompliant,
            RejectFlag,
        ]
        .into_iter()
        .map(|x| task(Some(x)))
        .collect();
        assert_eq!(labeling_roi(&ts).unwrap(), 0.75);
        let rejects = vec![task(Some(RejectFlag)); 3];
        assert_eq!(labeling_roi(&rejects).unwrap(), 0.0);
        assert!(matches!(
            labeling_roi(&[task(None)]),
            Err(ReviewError::Undefined)
        ));
        assert!(matches!(labeling_roi(&[]), Err(ReviewError::Undefined)));
    }

    #[test]
    fn roi_rises_with_floor_when_confidence_tracks_truth() {
        // Truth is positive iff confidence > 0.5, plus a few noisy low-confidence positives.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let verdicts: Vec<_> = (0..300)
            .map(|i| {
                v(
                    &format!("i{i:03}"),
                    "d",
                    rng.random_range(0.0..1.0),
                    Decision::ManualReview,
                )
            })
            .collect();
        let truth = |c: f64, id: &str| c > 0.5 || id.ends_with('7');
        let roi_at = |floor: f64| {
            let tasks: Vec<_> =
                select_for_review(&verdicts, usize::MAX, floor, &HashSet::new(), 0, 0)
                    .into_iter()
                    .map(|mut t| {
                        let verdict = if truth(t.confidence, &t.image_id) {
                            ReviewVerdict::ConfirmNonCompliant
                        } else {
                            ReviewVerdict::RejectFlag
                        };
                        t.decision = Some(ReviewDecision {
                            task_id: t.task_id.clone(),
                            verdict,
                            reviewer_id: "r".into(),
                            decided_at: 0,
                        });
                        t
                    })
                    .collect();
            labeling_roi(&tasks).unwrap()
        };
        let floors = [0.0, 0.2, 0.4, 0.6, 0.8];
        for w in floors.windows(2) {
            assert!(roi_at(w[1]) >= roi_at(w[0]));
        }
    }

    fn under_review(catalog: &CatalogStore, events: &EventLog, ids: &[&str]) {
        for id in ids {
            catalog
                .insert(CatalogImage::new(*id, RgbaImage::new(40, 40), "toy"))
                .unwrap();
            catalog
                .transition(id, ImageState::Pending, ImageState::UnderReview)
                .unwrap();
            events
                .append(Event::Ingested {
                    image_id: id.to_string(),
                    category: "toy".into(),
                })
                .unwrap();
        }
    }

    #[test]
    fn submit_flow_and_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = CatalogStore::in_memory();
        let events = EventLog::in_memory();
        under_review(&catalog, &events, &["a", "b", "c"]);
        {
            let q = ReviewQueue::open(dir.path()).unwrap();
            let tasks = q.select(&three(), &catalog, 10, 0.0).unwrap();
            assert_eq!(tasks.len(), 3);
            // Reselection creates nothing new.
            assert!(q.select(&three(), &catalog, 10, 0.0).unwrap().is_empty());

            let out = q
                .submit_decision(
                    "t000000",
                    ReviewVerdict::ConfirmNonCompliant,
                    "rev1",
                    &catalog,
                    &events,
                )
                .unwrap();
            assert_eq!(out.image_state, ImageState::ReviewRejected);
            assert_eq!(out.sample.label, Label::NonCompliant);
            assert_eq!(q.labeled_len(), 1);

            let dup = q.submit_decision(
                "t000000",
                ReviewVerdict::ConfirmNonCompliant,
                "rev1",
                &catalog,
                &events,
            );
            assert!(matches!(dup, Err(ReviewError::DuplicateDecision { .. })));
            assert_eq!(q.labeled_len(), 1);

            let out = q
                .submit_decision(
                    "t000001",
                    ReviewVerdict::RejectFlag,
                    "rev2",
                    &catalog,
                    &events,
                )
                .unwrap();
            assert_eq!(out.image_state, ImageState::ReviewAccepted);
            assert_eq!(out.sample.label, Label::Compliant);
            assert!(matches!(
                q.submit_decision("nope", ReviewVerdict::RejectFlag, "r", &catalog, &events),
                Err(ReviewError::NotFound(_))
            ));
        }
        let q = ReviewQueue::open(dir.path()).unwrap();
        let s = q.stats();
        assert_eq!(
            (s.open, s.decided, s.confirmed, s.rejected, s.labeled),
            (1, 2, 1, 1, 2)
        );
        assert_eq!(s.roi, Some(0.5));
        assert_eq!(s.per_category["toy"].open, 1);
        // Numbering continues after reopen.
        catalog
            .insert(CatalogImage::new("d", RgbaImage::new(40, 40), "toy"))
            .unwrap();
        catalog
            .transition("d", ImageState::Pending, ImageState::UnderReview)
            .unwrap();
        let t = q
            .select(
                &[v("d", "d", 0.6, Decision::ManualReview)],
                &catalog,
                1,
                0.0,
            )
            .unwrap();
        assert_eq!(t[0].task_id, "t000003");
    }

    #[test]
    fn second_task_on_settled_image_keeps_label() {
        let catalog = CatalogStore::in_memory();
        let events = EventLog::in_memory();
        under_review(&catalog, &events, &["a"]);
        let q = ReviewQueue::in_memory();
        let verdicts = vec![
            v("a", "d1", 0.7, Decision::ManualReview),
            v("a", "d2", 0.6, Decision::ManualReview),
        ];
        q.select(&verdicts, &catalog, 5, 0.0).unwrap();
        q.submit_decision(
            "t000000",
            ReviewVerdict::ConfirmNonCompliant,
            "r",
            &catalog,
            &events,
        )
        .unwrap();
        let out = q
            .submit_decision("t000001", ReviewVerdict::RejectFlag, "r", &catalog, &events)
            .unwrap();
        assert_eq!(out.image_state, ImageState::ReviewRejected);
        assert_eq!(q.labeled_len(), 2);
    }
}
