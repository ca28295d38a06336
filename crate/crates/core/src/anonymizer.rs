//! On-device anonymization: salted one-way pseudonyms for identifying fields,
//! removal of content fields, and a substring audit for plaintext leakage.

use std::collections::BTreeSet;
use std::fmt;

use aho_corasick::AhoCorasick;
use chrono::{DateTime, Utc};
use rand::{CryptoRng, RngCore};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context_model::{
    descriptor, validate_event, ContextEvent, FieldValue, ModelError, Sensitivity, Violation,
};

pub const SALT_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnonymizeError {
    #[error("cannot pseudonymize an empty value")]
    EmptyInput,
    #[error(transparent)]
    UnknownSource(#[from] ModelError),
    #[error("event fails validation: {0:?}")]
    InvalidEvent(Vec<Violation>),
}

/// Per-device secret mixed into every pseudonym. Stays on the device.
#[derive(Clone, PartialEq, Eq)]
pub struct DeviceSalt {
    bytes: [u8; SALT_LEN],
    created_at: DateTime<Utc>,
}

impl DeviceSalt {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, created_at: DateTime<Utc>) -> Self {
        let mut bytes = [0u8; SALT_LEN];
        rng.fill_bytes(&mut bytes);
        DeviceSalt { bytes, created_at }
    }

    pub fn from_bytes(bytes: [u8; SALT_LEN], created_at: DateTime<Utc>) -> Self {
        DeviceSalt { bytes, created_at }
    }

    pub fn as_bytes(&self) -> &[u8; SALT_LEN] {
        &self.bytes
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.bytes)
    }
}

impl fmt::Debug for DeviceSalt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceSalt")
            .field("bytes", &"[REDACTED]")
            .field("created_at", &self.created_at)
            .finish()
    }
}

fn salted_sha256(salt: &[u8], data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(salt);
    hasher.update(data);
    hex::encode(hasher.finalize())
}

/// Lowercase hex SHA-256 over `salt || raw`.
///
/// If the digest happens to contain `raw` (only possible for short hex-only
/// inputs), it is re-hashed with the salt until it does not.
pub fn pseudonymize_token(raw: &str, salt: &DeviceSalt) -> Result<String, AnonymizeError> {
    if raw.is_empty() {
        return Err(AnonymizeError::EmptyInput);
    }
    let needle = raw.to_ascii_lowercase();
    let mut digest = salted_sha256(&salt.bytes, raw.as_bytes());
    while digest.contains(&needle) {
        digest = salted_sha256(&salt.bytes, digest.as_bytes());
    }
    Ok(digest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldAction {
    PassThrough,
    Pseudonymize,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnonymizationPolicy {
    pub source_id: &'static str,
    pub actions: Vec<(&'static str, FieldAction)>,
}

impl AnonymizationPolicy {
    pub fn action(&self, field: &str) -> Option<FieldAction> {
        self.actions
            .iter()
            .find(|(f, _)| *f == field)
            .map(|(_, a)| *a)
    }

    pub fn fields_with(&self, action: FieldAction) -> BTreeSet<&'static str> {
        self.actions
            .iter()
            .filter(|(_, a)| *a == action)
            .map(|(f, _)| *f)
            .collect()
    }
}

pub fn policy_of(source_id: &str) -> Result<AnonymizationPolicy, AnonymizeError> {
    let desc = descriptor(source_id)?;
    let actions = desc
        .payload_schema
        .iter()
        .map(|f| {
            let action = match f.sensitivity {
                Sensitivity::Clear => FieldAction::PassThrough,
                Sensitivity::Pseudonymize => FieldAction::Pseudonymize,
                Sensitivity::Drop => FieldAction::Drop,
            };
            (f.name, action)
        })
        .collect();
    Ok(AnonymizationPolicy {
        source_id: desc.source_id,
        actions,
    })
}

/// Applies the source's policy. Already-anonymized events are returned unchanged.
pub fn anonymize(event: &ContextEvent, salt: &DeviceSalt) -> Result<ContextEvent, AnonymizeError> {
    let policy = policy_of(&event.source_id)?;
    let violations = validate_event(event);
    if !violations.is_empty() {
        return Err(AnonymizeError::InvalidEvent(violations));
    }
    if event.anonymized {
        return Ok(event.clone());
    }
    let mut out = event.clone();
    out.payload.clear();
    for (name, value) in &event.payload {
        match policy.action(name) {
            Some(FieldAction::PassThrough) => {
                out.payload.insert(name.clone(), value.clone());
            }
            Some(FieldAction::Pseudonymize) => {
                let raw = match value {
                    FieldValue::Text(s) => s.clone(),
                    other => serde_json::to_string(other).expect("scalar serializes"),
                };
                let digest = pseudonymize_token(&raw, salt)?;
                out.payload.insert(name.clone(), FieldValue::Text(digest));
            }
            Some(FieldAction::Drop) | None => {}
        }
    }
    out.anonymized = true;
    Ok(out)
}

/// Raw sensitive strings emitted during a simulation run. Append-only.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlaintextRegistry {
    entries: BTreeSet<String>,
}

impl PlaintextRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, raw: impl Into<String>) {
        let raw = raw.into();
        if !raw.is_empty() {
            self.entries.insert(raw);
        }
    }

    pub fn extend(&mut self, other: &PlaintextRegistry) {
        self.entries.extend(other.entries.iter().cloned());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }

    /// One entry per line.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Self {
        let mut reg = Self::new();
        for line in text.lines() {
            reg.record(line);
        }
        reg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakViolation {
    pub plaintext: String,
    /// Byte offset of the first occurrence.
    pub offset: usize,
}

/// Reports every registry string found as a byte substring of `serialized`,
/// either verbatim or in its JSON-escaped form.
pub fn audit_batch(serialized: &[u8], registry: &PlaintextRegistry) -> Vec<LeakViolation> {
    if registry.is_empty() || serialized.is_empty() {
        return Vec::new();
    }
    let mut needles: Vec<String> = Vec::with_capacity(registry.len() * 2);
    let mut owner: Vec<usize> = Vec::with_capacity(registry.len() * 2);
    let raws: Vec<&str> = registry.iter().collect();
    for (i, raw) in raws.iter().enumerate() {
        needles.push(raw.to_string());
        owner.push(i);
        let escaped = serde_json::to_string(raw).expect("string serializes");
        let escaped = &escaped[1..escaped.len() - 1];
        if escaped != *raw {
            needles.push(escaped.to_string());
            owner.push(i);
        }
    }
    let ac = AhoCorasick::new(&needles).expect("registry automaton builds");
    let mut first: Vec<Option<usize>> = vec![None; raws.len()];
    for m in ac.find_overlapping_iter(serialized) {
        let slot = &mut first[owner[m.pattern().as_usize()]];
        if slot.is_none_or(|o| m.start() < o) {
            *slot = Some(m.start());
        }
    }
    first
        .into_iter()
        .enumerate()
        .filter_map(|(i, off)| {
            off.map(|offset| LeakViolation {
                plaintext: raws[i].to_string(),
                offset,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context_model::{payload, Payload};
    use chrono::TimeZone;

    fn salt0() -> DeviceSalt {
        let mut bytes = [0u8; SALT_LEN];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = i as u8;
        }
        DeviceSalt::from_bytes(bytes, Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap())
    }

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 2, 9, 30, 0).unwrap()
    }

    // Reference digests computed with Python's hashlib:
    // sha256(bytes(range(32)) + raw).hexdigest()
    const DIGEST_PHONE: &str = "6747d4431ddd4839e8633cbd092be6514a114b9c21dc3374719b4e70fdbd12c4";
    const DIGEST_SSID: &str = "e785ed533ecc2fcac7c875b1a6b4625e9062462b571724b603ceb2580ff6da30";

    #[test]
    fn digest_matches_reference_hash() {
        assert_eq!(pseudonymize_token("+4930123", &salt0()).unwrap(), DIGEST_PHONE);
        assert_eq!(pseudonymize_token("HomeNet-5G", &salt0()).unwrap(), DIGEST_SSID);
    }

    #[test]
    fn digest_is_deterministic_and_rejects_empty() {
        let s = salt0();
        assert_eq!(
            pseudonymize_token("x", &s).unwrap(),
            pseudonymize_token("x", &s).unwrap()
        );
        assert_eq!(pseudonymize_token("", &s), Err(AnonymizeError::EmptyInput));
    }

    #[test]
    fn short_hex_inputs_never_appear_in_their_digest() {
        let s = salt0();
        for n in 0u32..4096 {
            let raw = format!("{n:x}");
            let d = pseudonymize_token(&raw, &s).unwrap();
            assert!(!d.contains(&raw), "{raw} in {d}");
            assert_eq!(d.len(), 64);
        }
    }

    #[test]
    fn notification_content_is_dropped() {
        let ev = ContextEvent::raw(
            "notifications_metadata",
            ts(),
            payload([
                ("app_package", FieldValue::from("chat.app")),
                ("content", FieldValue::from("hi")),
                ("posted", FieldValue::from(true)),
            ]),
        );
        let out = anonymize(&ev, &salt0()).unwrap();
        assert_eq!(
            out.payload,
            payload([
                ("app_package", FieldValue::from("chat.app")),
                ("posted", FieldValue::from(true)),
            ])
        );
        assert!(out.anonymized);
    }

    #[test]
    fn call_peer_is_pseudonymized() {
        let ev = ContextEvent::raw(
            "calls_metadata",
            ts(),
            payload([
                ("peer_number", FieldValue::from("+4930123")),
                ("direction", FieldValue::from("incoming")),
                ("duration_s", FieldValue::from(61i64)),
            ]),
        );
        let out = anonymize(&ev, &salt0()).unwrap();
        assert_eq!(out.payload["peer_number"], FieldValue::from(DIGEST_PHONE));
        assert_eq!(out.payload["duration_s"], FieldValue::Int(61));
        assert_eq!(out.timestamp, ev.timestamp);
        assert_eq!(out.source_id, ev.source_id);
        assert!(validate_event(&out).is_empty());
    }

    #[test]
    fn battery_passes_through() {
        let ev = ContextEvent::raw(
            "battery",
            ts(),
            payload([
                ("level_pct", FieldValue::from(80i64)),
                ("charging", FieldValue::from(false)),
            ]),
        );
        let out = anonymize(&ev, &salt0()).unwrap();
        assert_eq!(out.payload, ev.payload);
        assert!(out.anonymized);
    }

    #[test]
    fn anonymize_rejects_invalid_and_unknown() {
        let bad = ContextEvent::raw("steps", ts(), payload([("count", "many")]));
        assert!(matches!(
            anonymize(&bad, &salt0()),
            Err(AnonymizeError::InvalidEvent(_))
        ));
        let unknown = ContextEvent::raw("tea_leaves", ts(), Payload::new());
        assert!(matches!(
            anonymize(&unknown, &salt0()),
            Err(AnonymizeError::UnknownSource(_))
        ));
    }

    #[test]
    fn policies_follow_catalog() {
        let wifi = policy_of("wifi").unwrap();
        assert_eq!(
            wifi.fields_with(FieldAction::Pseudonymize),
            BTreeSet::from(["ssid", "bssid"])
        );
        let notif = policy_of("notifications_metadata").unwrap();
        assert_eq!(notif.fields_with(FieldAction::Drop), BTreeSet::from(["content"]));
        let steps = policy_of("steps").unwrap();
        assert!(steps
            .actions
            .iter()
            .all(|(_, a)| *a == FieldAction::PassThrough));
        for d in crate::context_model::source_catalog() {
            let p = policy_of(d.source_id).unwrap();
            assert_eq!(p.actions.len(), d.payload_schema.len());
        }
        assert!(policy_of("jetpack").is_err());
    }

    #[test]
    fn audit_finds_plain_and_escaped_leaks() {
        let mut reg = PlaintextRegistry::new();
        reg.record("HomeNet-5G");
        reg.record("say \"hi\"");
        let hits = audit_batch(br#"{"ssid":"HomeNet-5G"}"#, &reg);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].plaintext, "HomeNet-5G");
        let escaped = serde_json::to_vec(&serde_json::json!({"content": "say \"hi\""})).unwrap();
        assert_eq!(audit_batch(&escaped, &reg).len(), 1);
        assert!(audit_batch(b"anything", &PlaintextRegistry::new()).is_empty());
    }

    #[test]
    fn salt_debug_is_redacted() {
        let s = salt0();
        assert!(!format!("{s:?}").contains(&s.to_hex()));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn wifi_event() -> impl Strategy<Value = ContextEvent> {
            ("[A-Za-z0-9 _-]{1,24}", "[0-9A-F:]{1,17}", any::<bool>()).prop_map(
                |(ssid, bssid, connected)| {
                    ContextEvent::raw(
                        "wifi",
                        Utc.with_ymd_and_hms(2024, 1, 2, 9, 30, 0).unwrap(),
                        payload([
                            ("ssid", FieldValue::from(ssid)),
                            ("bssid", FieldValue::from(bssid)),
                            ("connected", FieldValue::from(connected)),
                        ]),
                    )
                },
            )
        }

        proptest! {
            #[test]
            fn anonymize_is_idempotent(ev in wifi_event(), salt in any::<[u8; 32]>()) {
                let salt = DeviceSalt::from_bytes(salt, ev.timestamp);
                let once = anonymize(&ev, &salt).unwrap();
                let twice = anonymize(&once, &salt).unwrap();
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn equal_raw_values_share_a_pseudonym(raw in "[ -~]{1,40}", salt in any::<[u8; 32]>()) {
                let salt = DeviceSalt::from_bytes(salt, Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap());
                let a = pseudonymize_token(&raw, &salt).unwrap();
                prop_assert_eq!(&a, &pseudonymize_token(&raw, &salt).unwrap());
                prop_assert!(crate::context_model::is_digest_shaped(&a));
                prop_assert!(!a.contains(&raw.to_ascii_lowercase()));
            }
        }
    }
}
