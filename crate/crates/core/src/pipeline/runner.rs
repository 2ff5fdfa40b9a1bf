use super::{
    decide, prevalidate, Decision, DetectionVerdict, DurableQueue, Event, EventLog, Limits,
    LogState, PipelineError, RejectReason, Result, ThresholdPolicy, QUEUE_DIR,
};
use crate::catalog::{CatalogError, CatalogStore, ImageState};
use crate::detectors::DetectorRegistry;
use crate::router::{l1_classify, L1Classifier, RoutingTable, REST};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// One unit of detector work, published to the detector's own queue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkMessage {
    pub image_id: String,
    pub detector_id: String,
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReviewAction {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReviewOutcome {
    Applied(ImageState),
    /// The same decision was already applied; nothing changed.
    Duplicate(ImageState),
}

/// Test hooks that simulate failures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultPlan {
    /// Stop every worker right after this many new verdict writes, before the
    /// triggering message is acknowledged, and fail the run.
    pub crash_after_verdicts: Option<usize>,
    /// Nack every n-th delivery on its first attempt so it is redelivered later.
    pub redeliver_every: Option<usize>,
}

/// Everything a run needs.
pub struct PipelineContext {
    pub catalog: Arc<CatalogStore>,
    pub table: RoutingTable,
    pub l1: L1Classifier,
    pub detectors: DetectorRegistry,
    pub policy: ThresholdPolicy,
    pub limits: Limits,
    pub events: Arc<EventLog>,
    /// Where queue logs live; `None` keeps queues in memory.
    pub queue_dir: Option<PathBuf>,
}

impl PipelineContext {
    /// Startup checks, done before any message flows.
    pub fn validate(&self) -> Result<()> {
        let missing: Vec<_> = self
            .table
            .all_detectors()
            .into_iter()
            .filter(|d| !self.detectors.contains_key(*d))
            .map(str::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(PipelineError::Config(format!(
                "routing table references unregistered detectors: {}",
                missing.join(", ")
            )));
        }
        self.policy.validate()
    }

    /// Aligns catalog states with the event log for every image the log knows.
    pub fn reconcile(&self) -> Result<()> {
        let states: Vec<(String, ImageState)> = self.events.read(|s| {
            s.ingested
                .keys()
                .map(|id| (id.clone(), s.state_of(id).unwrap_or(ImageState::Pending)))
                .collect()
        });
        for (id, state) in states {
            if self.catalog.state(&id).is_some_and(|cur| cur != state) {
                self.catalog.restore_state(&id, state)?;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> RunReport {
        self.events
            .read(|s| RunReport::from_log(s, self.detectors.len()))
    }
}

/// Combines per-detector decisions: AutoBlock beats ManualReview beats Pass.
pub fn aggregate_decision(decisions: impl IntoIterator<Item = Decision>) -> Decision {
    decisions.into_iter().max().unwrap_or(Decision::Pass)
}

fn terminal_for(decision: Decision) -> ImageState {
    match decision {
        Decision::AutoBlock => ImageState::AutoBlocked,
        Decision::ManualReview => ImageState::UnderReview,
        Decision::Pass => ImageState::Published,
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct Run<'a> {
    ctx: &'a PipelineContext,
    queues: BTreeMap<String, DurableQueue<WorkMessage>>,
    fault: FaultPlan,
    producing: AtomicBool,
    stop: AtomicBool,
    verdict_writes: AtomicUsize,
    deliveries: AtomicUsize,
    error: Mutex<Option<PipelineError>>,
}

impl Run<'_> {
    fn fail(&self, e: PipelineError) {
        let mut slot = self.error.lock();
        if slot.is_none() {
            *slot = Some(e);
        }
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Moves a Pending image to its terminal state once every routed detector has a verdict.
    fn finalize(&self, image_id: &str) -> Result<()> {
        let decision = self.ctx.events.read(|s| {
            let routing = s.routed.get(image_id)?;
            let mut ds = Vec::with_capacity(routing.detectors.len());
            for d in &routing.detectors {
                ds.push(s.verdicts.get(&(image_id.to_string(), d.clone()))?.decision);
            }
            Some(aggregate_decision(ds))
        });
        let Some(decision) = decision else {
            return Ok(());
        };
        let target = terminal_for(decision);
        match self
            .ctx
            .catalog
            .transition(image_id, ImageState::Pending, target)
        {
            Ok(()) => {
                self.ctx.events.commit(
                    Event::StateChanged {
                        image_id: image_id.to_string(),
                        from: ImageState::Pending,
                        to: target,
                    },
                    |s| s.states.contains_key(image_id),
                )?;
                Ok(())
            }
            Err(CatalogError::StateConflict { .. }) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn ingest(&self) -> Result<()> {
        let ctx = self.ctx;
        for image_id in ctx.catalog.ids_in_state(ImageState::Pending) {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            if ctx.events.read(|s| s.rejected.contains_key(&image_id)) {
                continue;
            }
            let Some(image) = ctx.catalog.get(&image_id) else {
                continue;
            };
            ctx.events.commit(
                Event::Ingested {
                    image_id: image_id.clone(),
                    category: image.category.clone(),
                },
                |s| s.ingested.contains_key(&image_id),
            )?;
            if let Err(rejection) = prevalidate(&image, "png", &ctx.limits) {
                ctx.events.commit(
                    Event::Rejected {
                        image_id: image_id.clone(),
                        rejection,
                    },
                    |s| s.rejected.contains_key(&image_id),
                )?;
                continue;
            }
            let routing = match ctx.events.read(|s| s.routed.get(&image_id).cloned()) {
                Some(r) => r,
                None => {
                    let d = l1_classify(&ctx.l1, &ctx.table, &image)?;
                    let detectors: Vec<String> =
                        ctx.table.route(&d.category).iter().cloned().collect();
                    ctx.events.commit(
                        Event::Routed {
                            image_id: image_id.clone(),
                            category: d.category,
                            predicted: d.predicted,
                            detectors,
                        },
                        |s| s.routed.contains_key(&image_id),
                    )?;
                    ctx.events.read(|s| s.routed[&image_id].clone())
                }
            };
            for detector_id in &routing.detectors {
                if ctx.events.has_verdict(&image_id, detector_id) {
                    continue;
                }
                let queue = self.queues.get(detector_id).ok_or_else(|| {
                    PipelineError::Config(format!("no queue for detector {detector_id}"))
                })?;
                queue.publish_once(
                    &image_id,
                    WorkMessage {
                        image_id: image_id.clone(),
                        detector_id: detector_id.clone(),
                        category: routing.category.clone(),
                    },
                )?;
            }
            self.finalize(&image_id)?;
        }
        Ok(())
    }

    /// Returns `Ok(false)` when the injected crash fired.
    fn process(&self, msg: &WorkMessage) -> Result<bool> {
        let ctx = self.ctx;
        if !ctx.events.has_verdict(&msg.image_id, &msg.detector_id) {
            let detector = &ctx.detectors[&msg.detector_id];
            let pixels = ctx
                .catalog
                .pixels(&msg.image_id)
                .ok_or_else(|| CatalogError::NotFound(msg.image_id.clone()))?;
            let out = detector
                .detect(&pixels)
                .map_err(|source| PipelineError::Detector {
                    detector_id: msg.detector_id.clone(),
                    image_id: msg.image_id.clone(),
                    source,
                })?;
            let verdict = DetectionVerdict {
                image_id: msg.image_id.clone(),
                detector_id: msg.detector_id.clone(),
                category: msg.category.clone(),
                confidence: out.confidence,
                boxes: out.boxes.into_iter().map(|b| (b.bbox, b.score)).collect(),
                decision: decide(out.confidence, &ctx.policy, &msg.detector_id, &msg.category),
                timestamp: now_ms(),
            };
            if ctx.events.record_verdict(verdict)? {
                let n = self.verdict_writes.fetch_add(1, Ordering::SeqCst) + 1;
                if self.fault.crash_after_verdicts == Some(n) {
                    self.fail(PipelineError::InjectedCrash(n));
                    return Ok(false);
                }
            }
        }
        if self.stop.load(Ordering::SeqCst) {
            return Ok(false);
        }
        self.finalize(&msg.image_id)?;
        Ok(true)
    }

    fn idle(&self) -> bool {
        self.queues
            .values()
            .all(|q| q.ready_len() == 0 && q.in_flight_len() == 0)
    }

    fn work(&self, worker: usize) {
        let queues: Vec<_> = self.queues.values().collect();
        let n = queues.len();
        loop {
            if self.stop.load(Ordering::SeqCst) {
                return;
            }
            let next = (0..n).find_map(|j| {
                let q = queues[(worker + j) % n];
                q.poll().map(|d| (q, d))
            });
            let Some((queue, delivery)) = next else {
                if !self.producing.load(Ordering::SeqCst) && self.idle() {
                    return;
                }
                std::thread::sleep(Duration::from_micros(200));
                continue;
            };
            if let Some(k) = self.fault.redeliver_every {
                let i = self.deliveries.fetch_add(1, Ordering::SeqCst);
                if delivery.attempt == 0 && k > 0 && i % k == k - 1 {
                    queue.nack(delivery.offset);
                    continue;
                }
            }
            match self.process(&delivery.payload) {
                Ok(true) => {
                    if self.stop.load(Ordering::SeqCst) {
                        return;
                    }
                    if let Err(e) = queue.ack(delivery.offset) {
                        self.fail(e);
                        return;
                    }
                }
                Ok(false) => return,
                Err(e) => {
                    self.fail(e);
                    return;
                }
            }
        }
    }
}

/// Processes every Pending image in the catalog and returns the report for the
/// whole event log.
///
/// Resumable: rerunning after a crash picks up from the event log and the queue logs,
/// and idempotent verdict writes keep redelivered work from being counted twice.
pub fn run_pipeline(ctx: &PipelineContext, workers: usize, fault: FaultPlan) -> Result<RunReport> {
    ctx.validate()?;
    ctx.reconcile()?;
    let mut queues = BTreeMap::new();
    for d in ctx.table.all_detectors() {
        let q = match &ctx.queue_dir {
            Some(dir) => DurableQueue::open(&dir.join(QUEUE_DIR), d)?,
            None => DurableQueue::in_memory(d),
        };
        queues.insert(d.to_string(), q);
    }
    let run = Run {
        ctx,
        queues,
        fault,
        producing: AtomicBool::new(true),
        stop: AtomicBool::new(false),
        verdict_writes: AtomicUsize::new(0),
        deliveries: AtomicUsize::new(0),
        error: Mutex::new(None),
    };
    std::thread::scope(|scope| {
        for w in 0..workers.max(1) {
            let run = &run;
            scope.spawn(move || run.work(w));
        }
        if let Err(e) = run.ingest() {
            run.fail(e);
        }
        run.producing.store(false, Ordering::SeqCst);
    });
    if let Some(e) = run.error.lock().take() {
        return Err(e);
    }
    ctx.catalog.flush_index()?;
    Ok(ctx.report())
}

/// Applies a reviewer's decision to an image under review.
pub fn apply_review_decision(
    catalog: &CatalogStore,
    events: &EventLog,
    image_id: &str,
    action: ReviewAction,
    task_id: Option<&str>,
) -> Result<ReviewOutcome> {
    let target = match action {
        ReviewAction::Accept => ImageState::ReviewAccepted,
        ReviewAction::Reject => ImageState::ReviewRejected,
    };
    let current = catalog
        .state(image_id)
        .ok_or_else(|| CatalogError::NotFound(image_id.to_string()))?;
    let review_event = || Event::ReviewApplied {
        image_id: image_id.to_string(),
        action,
        task_id: task_id.map(str::to_string),
    };
    if current == target {
        events.commit(review_event(), |s| s.reviews.contains_key(image_id))?;
        return Ok(ReviewOutcome::Duplicate(target));
    }
    catalog
        .transition(image_id, ImageState::UnderReview, target)
        .map_err(|e| match e {
            CatalogError::StateConflict { actual, .. } => CatalogError::IllegalTransition {
                image_id: image_id.to_string(),
                from: actual,
                to: target,
            },
            e => e,
        })?;
    events.append(Event::StateChanged {
        image_id: image_id.to_string(),
        from: ImageState::UnderReview,
        to: target,
    })?;
    events.append(review_event())?;
    catalog.flush_index()?;
    Ok(ReviewOutcome::Applied(target))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub auto_block: usize,
    pub manual_review: usize,
    pub pass: usize,
}

impl DecisionCounts {
    pub fn total(&self) -> usize {
        self.auto_block + self.manual_review + self.pass
    }
}

/// Totals derived from the event log alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub images_in: usize,
    pub rejected: usize,
    pub rejected_by_reason: BTreeMap<RejectReason, usize>,
    /// Ingested, not rejected and not yet terminal. Zero after a completed run.
    pub pending: usize,
    /// Count per terminal state name; every terminal state is listed.
    pub terminal: BTreeMap<String, usize>,
    pub verdicts_by_detector: BTreeMap<String, DecisionCounts>,
    /// Persisted verdicts, one per (image, detector).
    pub l2_invocations: usize,
    /// Sum over routed images of the number of detectors the router chose.
    pub l2_routed: usize,
    /// What running every registered detector on every routed image would cost.
    pub l2_baseline: usize,
    pub l2_saved: usize,
    pub routed_rest: usize,
    pub unknown_category_fallbacks: usize,
    pub reviews_applied: usize,
}

impl RunReport {
    pub fn from_log(s: &LogState, registered_detectors: usize) -> Self {
        let mut terminal: BTreeMap<String, usize> = ImageState::ALL
            .iter()
            .filter(|st| st.is_terminal())
            .map(|st| (st.as_str().to_string(), 0))
            .collect();
        let mut pending = 0;
        for id in s.ingested.keys() {
            if s.rejected.contains_key(id) {
                continue;
            }
            match s.state_of(id) {
                Some(st) if st.is_terminal() => {
                    *terminal.get_mut(st.as_str()).expect("listed") += 1
                }
                _ => pending += 1,
            }
        }
        let mut rejected_by_reason = BTreeMap::new();
        for r in s.rejected.values() {
            *rejected_by_reason.entry(r.reason).or_insert(0) += 1;
        }
        let mut verdicts_by_detector: BTreeMap<String, DecisionCounts> = BTreeMap::new();
        for v in s.verdicts.values() {
            let c = verdicts_by_detector
                .entry(v.detector_id.clone())
                .or_default();
            match v.decision {
                Decision::AutoBlock => c.auto_block += 1,
                Decision::ManualReview => c.manual_review += 1,
                Decision::Pass => c.pass += 1,
            }
        }
        let l2_routed = s.routed.values().map(|r| r.detectors.len()).sum();
        let l2_baseline = s.routed.len() * registered_detectors;
        Self {
            images_in: s.ingested.len(),
            rejected: s.rejected.len(),
            rejected_by_reason,
            pending,
            terminal,
            verdicts_by_detector,
            l2_invocations: s.verdicts.len(),
            l2_routed,
            l2_baseline,
            l2_saved: l2_baseline.saturating_sub(l2_routed),
            routed_rest: s.routed.values().filter(|r| r.category == REST).count(),
            unknown_category_fallbacks: s
                .routed
                .values()
                .filter(|r| r.category != r.predicted)
                .count(),
            reviews_applied: s.reviews.len(),
        }
    }

    pub fn terminal_total(&self) -> usize {
        self.terminal.values().sum()
    }

    /// `images_in = rejected + sum of terminal-state counts`.
    pub fn is_balanced(&self) -> bool {
        self.images_in == self.rejected + self.terminal_total()
    }

    pub fn terminal_count(&self, state: ImageState) -> usize {
        self.terminal.get(state.as_str()).copied().unwrap_or(0)
    }
}
