use super::{read_log_lines, PipelineError, Result};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const QUEUE_DIR: &str = "queues";

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Record<T> {
    Msg {
        offset: u64,
        key: String,
        payload: T,
    },
    Ack {
        offset: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery<T> {
    pub offset: u64,
    pub key: String,
    pub payload: T,
    /// Number of earlier deliveries of this message in this process.
    pub attempt: u32,
}

struct Inner<T> {
    file: Option<File>,
    messages: BTreeMap<u64, (String, T)>,
    keys: HashMap<String, u64>,
    acked: BTreeSet<u64>,
    ready: VecDeque<u64>,
    in_flight: BTreeSet<u64>,
    attempts: HashMap<u64, u32>,
    next_offset: u64,
}

/// Append-only, file-backed queue with at-least-once delivery.
///
/// The log at `<dir>/<name>.log` holds one JSON record per line: `msg` records carry
/// the payload and `ack` records retire an offset. On open, every message without an
/// ack is ready again, in offset order. Leases are process-local, so messages that
/// were in flight when a process died are redelivered by the next one.
pub struct DurableQueue<T> {
    name: String,
    path: Option<PathBuf>,
    inner: Mutex<Inner<T>>,
}

impl<T: Clone + Serialize + DeserializeOwned> DurableQueue<T> {
    pub fn in_memory(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            path: None,
            inner: Mutex::new(Inner::empty(None)),
        }
    }

    pub fn open(dir: &Path, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = dir.join(format!("{name}.log"));
        let io = |source| PipelineError::Io {
            path: path.clone(),
            source,
        };
        let mut inner = Inner::empty(None);
        if path.exists() {
            for (i, line) in read_log_lines(&path)?.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Record<T>>(line) {
                    Ok(Record::Msg {
                        offset,
                        key,
                        payload,
                    }) => {
                        inner.keys.insert(key.clone(), offset);
                        inner.messages.insert(offset, (key, payload));
                        inner.next_offset = inner.next_offset.max(offset + 1);
                    }
                    Ok(Record::Ack { offset }) => {
                        inner.acked.insert(offset);
                    }
                    Err(e) => {
                        return Err(PipelineError::Corrupt {
                            path: path.clone(),
                            line: i + 1,
                            reason: e.to_string(),
                        })
                    }
                }
            }
            inner.ready = inner
                .messages
                .keys()
                .filter(|o| !inner.acked.contains(o))
                .copied()
                .collect();
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        inner.file = Some(file);
        Ok(Self {
            name,
            path: Some(path),
            inner: Mutex::new(inner),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn append(&self, inner: &mut Inner<T>, rec: &Record<T>) -> Result<()> {
        if let Some(f) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(rec).expect("queue record serializes");
            line.push(b'\n');
            f.write_all(&line).map_err(|source| PipelineError::Io {
                path: self.path.clone().unwrap_or_default(),
                source,
            })?;
        }
        Ok(())
    }

    /// Appends a message unless one with `key` was ever published. Returns its offset.
    pub fn publish_once(&self, key: &str, payload: T) -> Result<u64> {
        let mut inner = self.inner.lock();
        if let Some(&offset) = inner.keys.get(key) {
            return Ok(offset);
        }
        let offset = inner.next_offset;
        let rec = Record::Msg {
            offset,
            key: key.to_string(),
            payload,
        };
        self.append(&mut inner, &rec)?;
        let Record::Msg { key, payload, .. } = rec else {
            unreachable!()
        };
        inner.next_offset += 1;
        inner.keys.insert(key.clone(), offset);
        inner.messages.insert(offset, (key, payload));
        inner.ready.push_back(offset);
        Ok(offset)
    }

    /// Leases the oldest ready message.
    pub fn poll(&self) -> Option<Delivery<T>> {
        let mut inner = self.inner.lock();
        let offset = inner.ready.pop_front()?;
        inner.in_flight.insert(offset);
        let attempt = {
            let a = inner.attempts.entry(offset).or_insert(0);
            *a += 1;
            *a - 1
        };
        let (key, payload) = inner.messages[&offset].clone();
        Some(Delivery {
            offset,
            key,
            payload,
            attempt,
        })
    }

    pub fn ack(&self, offset: u64) -> Result<()> {
        let mut inner = self.inner.lock();
        if !inner.in_flight.remove(&offset) || inner.acked.contains(&offset) {
            return Ok(());
        }
        self.append(&mut inner, &Record::Ack { offset })?;
        inner.acked.insert(offset);
        Ok(())
    }

    /// Returns a leased message to the back of the ready queue.
    pub fn nack(&self, offset: u64) {
        let mut inner = self.inner.lock();
        if inner.in_flight.remove(&offset) {
            inner.ready.push_back(offset);
        }
    }

    pub fn ready_len(&self) -> usize {
        self.inner.lock().ready.len()
    }

    pub fn in_flight_len(&self) -> usize {
        self.inner.lock().in_flight.len()
    }

    /// Messages not yet acknowledged, leased or not.
    pub fn unacked_len(&self) -> usize {
        let inner = self.inner.lock();
        inner.messages.len() - inner.acked.len()
    }

    pub fn published_len(&self) -> usize {
        self.inner.lock().messages.len()
    }
}

impl<T> Inner<T> {
    fn empty(file: Option<File>) -> Self {
        Self {
            file,
            messages: BTreeMap::new(),
            keys: HashMap::new(),
            acked: BTreeSet::new(),
            ready: VecDeque::new(),
            in_flight: BTreeSet::new(),
            attempts: HashMap::new(),
            next_offset: 0,
        }
    }
}
