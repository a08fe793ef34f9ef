//! Append-only rating log with one rating per (listener, sample, axis).

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use fac_core::evaluation::{
    aggregate_ratings, write_ratings_csv, Axis, MeanInterval, RatingRecord,
};

#[derive(Debug)]
pub enum StoreError {
    Duplicate,
    Invalid(String),
    Io(std::io::Error),
}

impl std::fmt::Display for StoreError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StoreError::Duplicate => {
                f.write_str("rating already recorded for this listener, sample and axis")
            }
            StoreError::Invalid(m) => write!(f, "invalid rating: {m}"),
            StoreError::Io(e) => write!(f, "rating log: {e}"),
        }
    }
}

impl std::error::Error for StoreError {}

type Key = (String, String, Axis);

#[derive(Default)]
struct Inner {
    records: Vec<RatingRecord>,
    keys: HashSet<Key>,
    log: Option<File>,
}

#[derive(Default)]
pub struct RatingStore {
    inner: Mutex<Inner>,
}

fn key(r: &RatingRecord) -> Key {
    (r.listener_id.clone(), r.sample_id.clone(), r.axis)
}

impl RatingStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a JSON-lines log and replays its records.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut inner = Inner::default();
        if path.exists() {
            let f = File::open(path).map_err(StoreError::Io)?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(StoreError::Io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: RatingRecord = serde_json::from_str(&line).map_err(|e| {
                    StoreError::Invalid(format!("{} line {}: {e}", path.display(), n + 1))
                })?;
                if !inner.keys.insert(key(&rec)) {
                    return Err(StoreError::Invalid(format!(
                        "{} line {} duplicates an earlier rating",
                        path.display(),
                        n + 1
                    )));
                }
                inner.records.push(rec);
            }
        }
        inner.log = Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(StoreError::Io)?,
        );
        Ok(Self {
            inner: Mutex::new(inner),
        })
    }

    /// Validates, checks for a duplicate and appends, all under one lock.
    pub fn append(&self, rec: RatingRecord) -> Result<(), StoreError> {
        rec.validate()
            .map_err(|e| StoreError::Invalid(e.to_string()))?;
        let mut inner = self.inner.lock().unwrap();
        let k = key(&rec);
        if inner.keys.contains(&k) {
            return Err(StoreError::Duplicate);
        }
        if let Some(log) = inner.log.as_mut() {
            let mut line =
                serde_json::to_vec(&rec).map_err(|e| StoreError::Invalid(e.to_string()))?;
            line.push(b'\n');
            log.write_all(&line)
                .and_then(|_| log.flush())
                .map_err(StoreError::Io)?;
        }
        inner.keys.insert(k);
        inner.records.push(rec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, listener_id: &str, sample_id: &str, axis: Axis) -> bool {
        self.inner.lock().unwrap().keys.contains(&(
            listener_id.to_string(),
            sample_id.to_string(),
            axis,
        ))
    }

    /// Records in export order: by timestamp, then listener id, ties in arrival order.
    pub fn records(&self) -> Vec<RatingRecord> {
        let mut recs = self.inner.lock().unwrap().records.clone();
        recs.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.listener_id.cmp(&b.listener_id))
        });
        recs
    }

    pub fn export_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_ratings_csv(&mut out, &self.records()).expect("writing CSV to memory");
        out
    }

    /// Aggregate of one system's ratings on one axis.
    pub fn aggregate(&self, system_id: &str, axis: Axis) -> fac_core::Result<MeanInterval> {
        let recs: Vec<RatingRecord> = self
            .records()
            .into_iter()
            .filter(|r| r.system_id == system_id)
            .collect();
        aggregate_ratings(&recs, axis)
    }
}
