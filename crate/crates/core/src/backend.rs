//! Ingest service keyed solely by random device pseudonyms.
//!
//! Persistence is an index file plus one append-only log per device under a
//! root directory. Each log line is one accepted batch. Deleting a device
//! removes its log file and its index entry.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_model::{validate_event, ContextEvent, Violation, ViolationReason};
use crate::time::Clock;
use crate::transport::UploadBatch;

const INDEX_FILE: &str = "index.jsonl";
const DEVICES_DIR: &str = "devices";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unknown device")]
    UnknownDevice,
    #[error("raw data rejected: {0}")]
    RawDataRejected(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid device pseudonym")]
    InvalidPseudonym,
    #[error("storage: {0}")]
    Io(#[from] io::Error),
}

/// Everything the backend knows about one device. There is deliberately no
/// field that could hold contact information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_pseudonym: String,
    #[serde(with = "crate::time::rfc3339_millis")]
    pub registered_at: DateTime<Utc>,
    pub events: Vec<ContextEvent>,
    pub seen_batch_ids: BTreeSet<String>,
}

impl DeviceRecord {
    pub const FIELDS: [&'static str; 4] =
        ["device_pseudonym", "registered_at", "events", "seen_batch_ids"];
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    device_pseudonym: String,
    #[serde(with = "crate::time::rfc3339_millis")]
    registered_at: DateTime<Utc>,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    batch_id: String,
    events: Vec<ContextEvent>,
}

struct DeviceSlot {
    record: DeviceRecord,
    log: Option<File>,
    deleted: bool,
}

/// Pseudonyms double as file names, so only a conservative alphabet is allowed.
pub fn valid_pseudonym(p: &str) -> bool {
    (8..=64).contains(&p.len())
        && p
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

pub struct Backend {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    devices: RwLock<HashMap<String, Arc<Mutex<DeviceSlot>>>>,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("root", &self.root)
            .field("devices", &self.devices.read().len())
            .finish()
    }
}

impl Backend {
    /// Opens or creates a backend rooted at `root`, reloading existing devices.
    pub fn open(root: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, BackendError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join(DEVICES_DIR))?;
        let mut devices = HashMap::new();
        let index = root.join(INDEX_FILE);
        if index.exists() {
            for line in BufReader::new(File::open(&index)?).lines() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let entry: IndexEntry = serde_json::from_str(&line)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                let log_path = Self::log_path_in(&root, &entry.device_pseudonym);
                let mut record = DeviceRecord {
                    device_pseudonym: entry.device_pseudonym.clone(),
                    registered_at: entry.registered_at,
                    events: Vec::new(),
                    seen_batch_ids: BTreeSet::new(),
                };
                if log_path.exists() {
                    for line in BufReader::new(File::open(&log_path)?).lines() {
                        let line = line?;
                        if line.is_empty() {
                            continue;
                        }
                        let l: LogLine = serde_json::from_str(&line)
                            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                        record.seen_batch_ids.insert(l.batch_id);
                        record.events.extend(l.events);
                    }
                }
                let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
                devices.insert(
                    entry.device_pseudonym,
                    Arc::new(Mutex::new(DeviceSlot {
                        record,
                        log: Some(log),
                        deleted: false,
                    })),
                );
            }
        }
        Ok(Backend {
            root,
            clock,
            devices: RwLock::new(devices),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn log_path_in(root: &Path, pseudonym: &str) -> PathBuf {
        root.join(DEVICES_DIR).join(format!("{pseudonym}.jsonl"))
    }

    // Caller holds the device map write lock.
    fn write_index(&self, devices: &HashMap<String, Arc<Mutex<DeviceSlot>>>) -> io::Result<()> {
        let mut entries: Vec<(String, DateTime<Utc>)> = devices
            .iter()
            .map(|(k, v)| (k.clone(), v.lock().record.registered_at))
            .collect();
        entries.sort();
        let mut text = String::new();
        for (device_pseudonym, registered_at) in entries {
            let line = serde_json::to_string(&IndexEntry {
                device_pseudonym,
                registered_at,
            })
            .expect("index entry serializes");
            text.push_str(&line);
            text.push('\n');
        }
        let tmp = self.root.join(format!("{INDEX_FILE}.tmp"));
        fs::write(&tmp, text)?;
        fs::rename(tmp, self.root.join(INDEX_FILE))
    }

    /// Creates the device record if absent. Idempotent.
    pub fn handle_register(&self, device_pseudonym: &str) -> Result<(), BackendError> {
        if !valid_pseudonym(device_pseudonym) {
            return Err(BackendError::InvalidPseudonym);
        }
        if self.devices.read().contains_key(device_pseudonym) {
            return Ok(());
        }
        let mut devices = self.devices.write();
        if devices.contains_key(device_pseudonym) {
            return Ok(());
        }
        let log_path = Self::log_path_in(&self.root, device_pseudonym);
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        devices.insert(
            device_pseudonym.to_string(),
            Arc::new(Mutex::new(DeviceSlot {
                record: DeviceRecord {
                    device_pseudonym: device_pseudonym.to_string(),
                    registered_at: self.clock.now(),
                    events: Vec::new(),
                    seen_batch_ids: BTreeSet::new(),
                },
                log: Some(log),
                deleted: false,
            })),
        );
        self.write_index(&devices)?;
        Ok(())
    }

    fn slot(&self, device_pseudonym: &str) -> Result<Arc<Mutex<DeviceSlot>>, BackendError> {
        self.devices
            .read()
            .get(device_pseudonym)
            .cloned()
            .ok_or(BackendError::UnknownDevice)
    }

    fn check_batch(batch: &UploadBatch) -> Result<(), BackendError> {
        if batch.batch_id.is_empty() {
            return Err(BackendError::InvalidBatch("empty batch id".into()));
        }
        for ev in &batch.events {
            if !ev.anonymized {
                return Err(BackendError::RawDataRejected(format!(
                    "{} event is not anonymized",
                    ev.source_id
                )));
            }
            if ev.device_pseudonym != batch.device_pseudonym {
                return Err(BackendError::InvalidBatch(
                    "event belongs to another device".into(),
                ));
            }
            let violations: Vec<Violation> = validate_event(ev);
            if let Some(v) = violations.iter().find(|v| {
                matches!(
                    v.reason,
                    ViolationReason::DroppedFieldPresent | ViolationReason::NotDigestShaped
                )
            }) {
                return Err(BackendError::RawDataRejected(format!("{} {v}", ev.source_id)));
            }
            if let Some(v) = violations.first() {
                return Err(BackendError::InvalidBatch(format!("{} {v}", ev.source_id)));
            }
        }
        Ok(())
    }

    /// Stores a batch once; repeated `batch_id`s are acknowledged without effect.
    /// Returns `true` if the batch was newly stored.
    pub fn handle_batch(&self, batch: &UploadBatch) -> Result<bool, BackendError> {
        let slot = self.slot(&batch.device_pseudonym)?;
        let mut slot = slot.lock();
        if slot.deleted {
            return Err(BackendError::UnknownDevice);
        }
        if slot.record.seen_batch_ids.contains(&batch.batch_id) {
            return Ok(false);
        }
        Self::check_batch(batch)?;
        let mut line = serde_json::to_string(&LogLine {
            batch_id: batch.batch_id.clone(),
            events: batch.events.clone(),
        })
        .expect("log line serializes");
        line.push('\n');
        let log = slot.log.as_mut().ok_or(BackendError::UnknownDevice)?;
        log.write_all(line.as_bytes())?;
        log.flush()?;
        slot.record.seen_batch_ids.insert(batch.batch_id.clone());
        slot.record.events.extend(batch.events.iter().cloned());
        Ok(true)
    }

    pub fn handle_get_data(&self, device_pseudonym: &str) -> Result<Vec<ContextEvent>, BackendError> {
        let slot = self.slot(device_pseudonym)?;
        let slot = slot.lock();
        if slot.deleted {
            return Err(BackendError::UnknownDevice);
        }
        Ok(slot.record.events.clone())
    }

    /// Removes the device record, its log and its index entry. Idempotent.
    pub fn handle_delete(&self, device_pseudonym: &str) -> Result<(), BackendError> {
        let slot = {
            let mut devices = self.devices.write();
            let Some(slot) = devices.remove(device_pseudonym) else {
                return Ok(());
            };
            self.write_index(&devices)?;
            slot
        };
        let mut slot = slot.lock();
        slot.deleted = true;
        slot.log = None;
        slot.record.events.clear();
        slot.record.seen_batch_ids.clear();
        let path = Self::log_path_in(&self.root, device_pseudonym);
        match fs::remove_file(&path) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    pub fn device_count(&self) -> usize {
        self.devices.read().len()
    }

    pub fn record(&self, device_pseudonym: &str) -> Option<DeviceRecord> {
        let slot = self.slot(device_pseudonym).ok()?;
        let slot = slot.lock();
        (!slot.deleted).then(|| slot.record.clone())
    }

    /// Snapshot of every device record, ordered by pseudonym.
    pub fn records(&self) -> Vec<DeviceRecord> {
        let slots: BTreeMap<String, Arc<Mutex<DeviceSlot>>> = self
            .devices
            .read()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        slots
            .values()
            .filter_map(|s| {
                let s = s.lock();
                (!s.deleted).then(|| s.record.clone())
            })
            .collect()
    }

    /// Line-delimited export: a `device` record per device, a `batch` record
    /// per accepted batch id and an `event` record per stored event.
    pub fn export_manifest(&self) -> String {
        let mut out = String::new();
        let mut push = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        for r in self.records() {
            push(serde_json::json!({
                "record": "device",
                "device_pseudonym": r.device_pseudonym,
                "registered_at": crate::time::format_rfc3339(&r.registered_at),
            }));
            for b in &r.seen_batch_ids {
                push(serde_json::json!({
                    "record": "batch",
                    "device_pseudonym": r.device_pseudonym,
                    "batch_id": b,
                }));
            }
            for ev in &r.events {
                let mut v = serde_json::to_value(ev).expect("event serializes");
                v.as_object_mut()
                    .expect("event is an object")
                    .insert("record".into(), "event".into());
                push(v);
            }
        }
        out
    }

    /// Every persisted file under the root with its bytes.
    pub fn persisted_files(&self) -> io::Result<Vec<(PathBuf, Vec<u8>)>> {
        read_tree(&self.root)
    }
}

/// Every file under `root` with its bytes, ordered by path.
pub fn read_tree(root: &Path) -> io::Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path)?;
                out.push((path, bytes));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context_model::{payload, FieldValue};
    use crate::time::VirtualClock;
    use chrono::TimeZone;

    const DEV_A: &str = "aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa";
    const DEV_B: &str = "bbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbb";

    fn backend(dir: &Path) -> Backend {
        let clock = VirtualClock::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap());
        Backend::open(dir, Arc::new(clock)).unwrap()
    }

    fn batch(device: &str, id: &str, n: usize) -> UploadBatch {
        let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap();
        let events = (0..n)
            .map(|i| {
                let mut ev = ContextEvent::raw(
                    "steps",
                    t0 + chrono::Duration::minutes(i as i64),
                    payload([("count", 1000 + i as i64)]),
                );
                ev.device_pseudonym = device.to_string();
                ev.anonymized = true;
                ev
            })
            .collect();
        UploadBatch {
            batch_id: id.to_string(),
            device_pseudonym: device.to_string(),
            events,
            created_at: t0,
        }
    }

    #[test]
    fn register_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let b = backend(dir.path());
        b.handle_register(DEV_A).unwrap();
        b.handle_register(DEV_A).unwrap();
        assert_eq!(b.device_count(), 1);
        b.handle_register(DEV_B).unwrap();
        assert_eq!(b.device_count(), 2);
        assert!(matches!(
            b.handle_register("../../etc"),
            Err(BackendError::InvalidPseudonym)
        ));
    }

    #[test]
    fn batches_are_deduplicated_and_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let b = backend(dir.path());
        assert!(matches!(
            b.handle_batch(&batch(DEV_A, "b1", 5)),
            Err(BackendError::UnknownDevice)
        ));
        b.handle_register(DEV_A).unwrap();
        b.handle_register(DEV_B).unwrap();
        assert!(b.handle_batch(&batch(DEV_A, "b1", 5)).unwrap());
        assert!(!b.handle_batch(&batch(DEV_A, "b1", 5)).unwrap());
        assert_eq!(b.handle_get_data(DEV_A).unwrap().len(), 5);
        b.handle_batch(&batch(DEV_B, "b2", 2)).unwrap();
        assert!(b
            .handle_get_data(DEV_B)
            .unwrap()
            .iter()
            .all(|e| e.device_pseudonym == DEV_B));
        assert!(matches!(
            b.handle_get_data("cccccccccccccccccccccccccccccccc"),
            Err(BackendError::UnknownDevice)
        ));
    }

    #[test]
    fn raw_events_are_rejected_whole() {
        let dir = tempfile::tempdir().unwrap();
        let b = backend(dir.path());
        b.handle_register(DEV_A).unwrap();
        let mut bad = batch(DEV_A, "b1", 3);
        bad.events[2].anonymized = false;
        assert!(matches!(b.handle_batch(&bad), Err(BackendError::RawDataRejected(_))));
        assert!(b.handle_get_data(DEV_A).unwrap().is_empty());

        let mut forged = batch(DEV_A, "b2", 0);
        let mut ev = ContextEvent::raw(
            "wifi",
            Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap(),
            payload([
                ("ssid", FieldValue::from("HomeNet-5G")),
                ("connected", FieldValue::from(true)),
            ]),
        );
        ev.device_pseudonym = DEV_A.into();
        ev.anonymized = true;
        forged.events.push(ev);
        assert!(matches!(
            b.handle_batch(&forged),
            Err(BackendError::RawDataRejected(_))
        ));
    }

    #[test]
    fn delete_removes_everything_for_one_device() {
        let dir = tempfile::tempdir().unwrap();
        let b = backend(dir.path());
        b.handle_register(DEV_A).unwrap();
        b.handle_register(DEV_B).unwrap();
        b.handle_batch(&batch(DEV_A, "b1", 3)).unwrap();
        b.handle_batch(&batch(DEV_B, "b2", 3)).unwrap();
        b.handle_delete(DEV_A).unwrap();
        b.handle_delete(DEV_A).unwrap();
        assert!(matches!(b.handle_get_data(DEV_A), Err(BackendError::UnknownDevice)));
        assert!(matches!(
            b.handle_batch(&batch(DEV_A, "b3", 1)),
            Err(BackendError::UnknownDevice)
        ));
        assert_eq!(b.handle_get_data(DEV_B).unwrap().len(), 3);
        for (_, bytes) in b.persisted_files().unwrap() {
            assert!(!String::from_utf8_lossy(&bytes).contains(DEV_A));
        }
    }

    #[test]
    fn reopen_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        {
            let b = backend(dir.path());
            b.handle_register(DEV_A).unwrap();
            b.handle_batch(&batch(DEV_A, "b1", 4)).unwrap();
        }
        let b = backend(dir.path());
        assert_eq!(b.handle_get_data(DEV_A).unwrap().len(), 4);
        assert!(!b.handle_batch(&batch(DEV_A, "b1", 4)).unwrap());
    }

    #[test]
    fn device_record_schema_has_no_contact_fields() {
        let r = DeviceRecord {
            device_pseudonym: DEV_A.into(),
            registered_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            events: vec![],
            seen_batch_ids: BTreeSet::new(),
        };
        let v = serde_json::to_value(&r).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = DeviceRecord::FIELDS.to_vec();
        expected.sort();
        assert_eq!(keys, expected);
    }
}
