use super::{read_log_lines, DetectionVerdict, PipelineError, Rejection, Result, ReviewAction};
use crate::catalog::ImageState;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Ingested {
        image_id: String,
        category: String,
    },
    Rejected {
        image_id: String,
        rejection: Rejection,
    },
    Routed {
        image_id: String,
        category: String,
        predicted: String,
        detectors: Vec<String>,
    },
    Verdict {
        verdict: DetectionVerdict,
    },
    StateChanged {
        image_id: String,
        from: ImageState,
        to: ImageState,
    },
    ReviewApplied {
        image_id: String,
        action: ReviewAction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task_id: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Routing {
    pub category: String,
    pub predicted: String,
    pub detectors: Vec<String>,
}

/// Everything the log implies, folded in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogState {
    pub ingested: BTreeMap<String, String>,
    pub rejected: BTreeMap<String, Rejection>,
    pub routed: BTreeMap<String, Routing>,
    pub verdicts: BTreeMap<(String, String), DetectionVerdict>,
    pub states: BTreeMap<String, ImageState>,
    pub reviews: BTreeMap<String, ReviewAction>,
    pub next_seq: u64,
}

impl LogState {
    fn apply(&mut self, event: &Event) {
        match event {
            Event::Ingested { image_id, category } => {
                self.ingested
                    .entry(image_id.clone())
                    .or_insert_with(|| category.clone());
            }
            Event::Rejected {
                image_id,
                rejection,
            } => {
                self.rejected
                    .entry(image_id.clone())
                    .or_insert_with(|| rejection.clone());
            }
            Event::Routed {
                image_id,
                category,
                predicted,
                detectors,
            } => {
                self.routed
                    .entry(image_id.clone())
                    .or_insert_with(|| Routing {
                        category: category.clone(),
                        predicted: predicted.clone(),
                        detectors: detectors.clone(),
                    });
            }
            Event::Verdict { verdict } => {
                self.verdicts
                    .entry(verdict.key())
                    .or_insert_with(|| verdict.clone());
            }
            Event::StateChanged { image_id, to, .. } => {
                self.states.insert(image_id.clone(), *to);
            }
            Event::ReviewApplied {
                image_id, action, ..
            } => {
                self.reviews.insert(image_id.clone(), *action);
            }
        }
    }

    /// Current state as the log sees it. Ingested images without a state change are Pending.
    pub fn state_of(&self, image_id: &str) -> Option<ImageState> {
        self.states.get(image_id).copied().or_else(|| {
            self.ingested
                .contains_key(image_id)
                .then_some(ImageState::Pending)
        })
    }

    pub fn verdicts_for<'a>(
        &'a self,
        image_id: &'a str,
    ) -> impl Iterator<Item = &'a DetectionVerdict> + 'a {
        self.verdicts
            .range((image_id.to_string(), String::new())..)
            .take_while(move |((i, _), _)| i == image_id)
            .map(|(_, v)| v)
    }
}

struct Inner {
    file: Option<File>,
    state: LogState,
}

/// Append-only JSONL event log with an in-memory fold of its contents.
///
/// Each commit checks a predicate against the fold and appends under one lock, so
/// "write unless already present" is atomic. That is what makes verdicts idempotent
/// per `(image_id, detector_id)`.
pub struct EventLog {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(Inner {
                file: None,
                state: LogState::default(),
            }),
        }
    }

    /// Opens `<dir>/events.jsonl`, replaying whatever it already holds.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = dir.join(EVENTS_FILE);
        let mut state = LogState::default();
        if path.exists() {
            for (i, line) in read_log_lines(&path)?.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: EventRecord =
                    serde_json::from_str(line).map_err(|e| PipelineError::Corrupt {
                        path: path.clone(),
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                state.apply(&rec.event);
                state.next_seq = state.next_seq.max(rec.seq + 1);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| PipelineError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self {
            path: Some(path),
            inner: Mutex::new(Inner {
                file: Some(file),
                state,
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Appends `event` unless `exists` says the fold already covers it.
    /// Returns whether a record was written.
    pub fn commit(&self, event: Event, exists: impl FnOnce(&LogState) -> bool) -> Result<bool> {
        let mut inner = self.inner.lock();
        if exists(&inner.state) {
            return Ok(false);
        }
        let rec = EventRecord {
            seq: inner.state.next_seq,
            event,
        };
        if let Some(f) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(&rec).expect("event serializes");
            line.push(b'\n');
            f.write_all(&line).map_err(|source| PipelineError::Io {
                path: self.path.clone().unwrap_or_default(),
                source,
            })?;
        }
        inner.state.apply(&rec.event);
        inner.state.next_seq += 1;
        Ok(true)
    }

    pub fn append(&self, event: Event) -> Result<()> {
        self.commit(event, |_| false).map(|_| ())
    }

    /// Writes the verdict unless one exists for its key. Returns whether it was new.
    pub fn record_verdict(&self, verdict: DetectionVerdict) -> Result<bool> {
        let key = verdict.key();
        self.commit(Event::Verdict { verdict }, |s| {
            s.verdicts.contains_key(&key)
        })
    }

    pub fn has_verdict(&self, image_id: &str, detector_id: &str) -> bool {
        self.inner
            .lock()
            .state
            .verdicts
            .contains_key(&(image_id.to_string(), detector_id.to_string()))
    }

    /// Runs `f` against the current fold.
    pub fn read<R>(&self, f: impl FnOnce(&LogState) -> R) -> R {
        f(&self.inner.lock().state)
    }

    pub fn snapshot(&self) -> LogState {
        self.read(Clone::clone)
    }

    /// Every record in the file, in order. In-memory logs return nothing.
    pub fn records(&self) -> Result<Vec<EventRecord>> {
        let Some(path) = &self.path else {
            return Ok(Vec::new());
        };
        let _guard = self.inner.lock();
        read_log_lines(path)?
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| PipelineError::Corrupt {
                    path: path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect()
    }
}
