//! Compensation enrollment kept apart from collected data.
//!
//! Participants submit contact data together with the enrollment token and
//! the number of completed days their app attested locally. The service
//! never talks to the backend; the only shared value is nothing at all.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Clock;

#[derive(Debug, Error)]
pub enum EnrollError {
    #[error("contact must not be empty")]
    EmptyContact,
    #[error("enrollment token must not be empty")]
    EmptyToken,
    #[error("storage: {0}")]
    Io(#[from] io::Error),
}

/// Contact-side record. Holds no device pseudonym and nothing derived from events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentRecord {
    pub contact: String,
    pub enrollment_token: String,
    pub attested_days: u32,
    /// Calendar date (UTC) only, so enrollment time cannot be matched
    /// against upload timestamps.
    pub enrolled_at: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Duplicate,
    Insufficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum EnrollDecision {
    Accepted,
    Rejected(RejectReason),
}

struct Inner {
    records: Vec<EnrollmentRecord>,
    tokens: BTreeSet<String>,
    log: Option<File>,
}

pub struct EnrollmentService {
    required_days: u32,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for EnrollmentService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnrollmentService")
            .field("required_days", &self.required_days)
            .field("records", &self.inner.lock().records.len())
            .finish()
    }
}

impl EnrollmentService {
    pub fn in_memory(required_days: u32, clock: Arc<dyn Clock>) -> Self {
        EnrollmentService {
            required_days,
            clock,
            inner: Mutex::new(Inner {
                records: Vec::new(),
                tokens: BTreeSet::new(),
                log: None,
            }),
            path: None,
        }
    }

    /// Service persisted as one JSON record per line at `path`.
    pub fn open(path: impl AsRef<Path>, required_days: u32, clock: Arc<dyn Clock>) -> Result<Self, EnrollError> {
        let path = path.as_ref().to_path_buf();
        let mut records = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let r: EnrollmentRecord = serde_json::from_str(&line)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                records.push(r);
            }
        }
        let tokens = records.iter().map(|r| r.enrollment_token.clone()).collect();
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(EnrollmentService {
            required_days,
            clock,
            inner: Mutex::new(Inner {
                records,
                tokens,
                log: Some(log),
            }),
            path: Some(path),
        })
    }

    pub fn required_days(&self) -> u32 {
        self.required_days
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Accepts iff the token is unseen and `attested_days >= required_days`.
    /// Only accepted enrollments are stored; a rejected token stays usable.
    pub fn enroll(
        &self,
        contact: &str,
        enrollment_token: &str,
        attested_days: u32,
    ) -> Result<EnrollDecision, EnrollError> {
        if contact.trim().is_empty() {
            return Err(EnrollError::EmptyContact);
        }
        if enrollment_token.is_empty() {
            return Err(EnrollError::EmptyToken);
        }
        let mut inner = self.inner.lock();
        if inner.tokens.contains(enrollment_token) {
            return Ok(EnrollDecision::Rejected(RejectReason::Duplicate));
        }
        if attested_days < self.required_days {
            return Ok(EnrollDecision::Rejected(RejectReason::Insufficient));
        }
        let record = EnrollmentRecord {
            contact: contact.to_string(),
            enrollment_token: enrollment_token.to_string(),
            attested_days,
            enrolled_at: self.clock.now().date_naive(),
        };
        if let Some(log) = &mut inner.log {
            let mut line = serde_json::to_string(&record).expect("record serializes");
            line.push('\n');
            log.write_all(line.as_bytes())?;
            log.flush()?;
        }
        inner.tokens.insert(record.enrollment_token.clone());
        inner.records.push(record);
        Ok(EnrollDecision::Accepted)
    }

    pub fn records(&self) -> Vec<EnrollmentRecord> {
        self.inner.lock().records.clone()
    }

    pub fn draw_raffle(&self, seed: u64, n: usize) -> Vec<EnrollmentRecord> {
        draw_raffle(&self.records(), seed, n)
    }

    /// One JSON record per line, in enrollment order.
    pub fn export_manifest(&self) -> String {
        let mut out = String::new();
        for r in &self.inner.lock().records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Uniform index in `0..bound` from one 64-bit draw (multiply-shift).
fn bounded(rng: &mut ChaCha20Rng, bound: usize) -> usize {
    ((rng.next_u64() as u128 * bound as u128) >> 64) as usize
}

/// Seeded Fisher-Yates shuffle of the records in canonical order
/// (`enrolled_at`, then token); the first `n` are the winners.
pub fn draw_raffle(records: &[EnrollmentRecord], seed: u64, n: usize) -> Vec<EnrollmentRecord> {
    let mut pool: Vec<EnrollmentRecord> = records.to_vec();
    pool.sort_by(|a, b| {
        (a.enrolled_at, &a.enrollment_token).cmp(&(b.enrolled_at, &b.enrollment_token))
    });
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..pool.len()).rev() {
        let j = bounded(&mut rng, i + 1);
        pool.swap(i, j);
    }
    pool.truncate(n);
    pool
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed export at line {line}: {reason}")]
pub struct MalformedExport {
    pub line: usize,
    pub reason: String,
}

fn parse_export(text: &str) -> Result<Vec<serde_json::Map<String, serde_json::Value>>, MalformedExport> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| MalformedExport {
            line: i + 1,
            reason: e.to_string(),
        })?;
        match v {
            serde_json::Value::Object(m) => out.push(m),
            _ => {
                return Err(MalformedExport {
                    line: i + 1,
                    reason: "not an object".into(),
                })
            }
        }
    }
    Ok(out)
}

fn flatten_text(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        serde_json::Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_text(&key, v, out);
            }
        }
        serde_json::Value::Array(a) => {
            for v in a {
                flatten_text(prefix, v, out);
            }
        }
        _ => {}
    }
}

const BACKEND_ID_FIELDS: [&str; 2] = ["device_pseudonym", "batch_id"];
const ENROLLMENT_ID_FIELDS: [&str; 2] = ["enrollment_token", "contact"];

/// True iff the identifier values of the two exports are disjoint and no
/// identifying enrollment value (token, contact) occurs anywhere in the
/// backend export bytes.
pub fn unlinkability_check(backend_export: &str, enrollment_export: &str) -> Result<bool, MalformedExport> {
    let backend = parse_export(backend_export)?;
    let enrollment = parse_export(enrollment_export)?;
    let ids = |records: &[serde_json::Map<String, serde_json::Value>], fields: &[&str]| {
        records
            .iter()
            .flat_map(|r| fields.iter().filter_map(|f| r.get(*f)?.as_str().map(str::to_string)))
            .collect::<BTreeSet<String>>()
    };
    let backend_ids = ids(&backend, &BACKEND_ID_FIELDS);
    let enrollment_ids = ids(&enrollment, &ENROLLMENT_ID_FIELDS);
    if !backend_ids.is_disjoint(&enrollment_ids) {
        return Ok(false);
    }
    Ok(!enrollment_ids
        .iter()
        .any(|v| !v.is_empty() && backend_export.contains(v.as_str())))
}

/// A match of the equi-join: backend field, enrollment field, shared value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JoinMatch {
    pub backend_field: String,
    pub enrollment_field: String,
    pub value: String,
}

/// Equi-join of the two exports over every pair of text-valued fields
/// (nested payload fields included). An empty result means no record of one
/// store can be linked to a record of the other by equal values.
pub fn equi_join(backend_export: &str, enrollment_export: &str) -> Result<Vec<JoinMatch>, MalformedExport> {
    let mut by_value: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in parse_export(backend_export)? {
        let mut fields = Vec::new();
        flatten_text("", &serde_json::Value::Object(r), &mut fields);
        for (f, v) in fields {
            if f != "record" {
                by_value.entry(v).or_default().insert(f);
            }
        }
    }
    let mut out = Vec::new();
    for r in parse_export(enrollment_export)? {
        let mut fields = Vec::new();
        flatten_text("", &serde_json::Value::Object(r), &mut fields);
        for (ef, v) in fields {
            if let Some(bfs) = by_value.get(&v) {
                for bf in bfs {
                    out.push(JoinMatch {
                        backend_field: bf.clone(),
                        enrollment_field: ef.clone(),
                        value: v.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}
