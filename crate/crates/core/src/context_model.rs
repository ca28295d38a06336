//! Context data model: the catalog of smartphone data sources, their
//! categories, permission requirements and payload schemas, plus the
//! [`ContextEvent`] envelope and its validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current envelope schema version. Events with any other version are rejected.
pub const SCHEMA_VERSION: u32 = 1;

/// Length of a pseudonymization digest in hex characters.
pub const DIGEST_HEX_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown source `{0}`")]
    UnknownSource(String),
}

/// Interaction-based grouping of a data source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// Physical conditions and activity.
    Physical,
    /// Device status and usage.
    Device,
    /// Core functions usage (calls, music, photos, notifications).
    CoreFunctions,
    /// App usage and traffic.
    Apps,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Physical,
        Category::Device,
        Category::CoreFunctions,
        Category::Apps,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Physical => "physical",
            Category::Device => "device",
            Category::CoreFunctions => "core_functions",
            Category::Apps => "apps",
        }
    }
}

/// Runtime permission that gates access to a source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermissionKind {
    Location,
    Microphone,
    Calls,
    Photos,
    Notifications,
    AppUsage,
}

impl PermissionKind {
    pub const ALL: [PermissionKind; 6] = [
        PermissionKind::Location,
        PermissionKind::Microphone,
        PermissionKind::Calls,
        PermissionKind::Photos,
        PermissionKind::Notifications,
        PermissionKind::AppUsage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PermissionKind::Location => "location",
            PermissionKind::Microphone => "microphone",
            PermissionKind::Calls => "calls",
            PermissionKind::Photos => "photos",
            PermissionKind::Notifications => "notifications",
            PermissionKind::AppUsage => "app_usage",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for PermissionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PermissionRequirement {
    NotRequired,
    Required {
        kind: PermissionKind,
    },
    /// Available only while another condition holds. `depends_on` names the
    /// catalog source whose requirement must be satisfied; `None` means the
    /// condition lives outside the app (e.g. a player that must be told to
    /// broadcast) and does not gate collection.
    Conditional {
        depends_on: Option<&'static str>,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Integer,
    Real,
    Text,
    Boolean,
    /// RFC 3339 instant carried as text.
    Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sensitivity {
    Clear,
    Pseudonymize,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FieldSpec {
    pub name: &'static str,
    pub kind: ValueKind,
    pub sensitivity: Sensitivity,
}

const fn field(name: &'static str, kind: ValueKind, sensitivity: Sensitivity) -> FieldSpec {
    FieldSpec {
        name,
        kind,
        sensitivity,
    }
}

/// One row of the context data model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataSourceDescriptor {
    pub source_id: &'static str,
    pub categories: &'static [Category],
    pub permission: PermissionRequirement,
    pub payload_schema: &'static [FieldSpec],
    pub description: &'static str,
}

impl DataSourceDescriptor {
    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.payload_schema.iter().find(|f| f.name == name)
    }

    pub fn category_set(&self) -> BTreeSet<Category> {
        self.categories.iter().copied().collect()
    }
}

use Category::*;
use Sensitivity::{Clear, Drop as DropField, Pseudonymize};
use ValueKind::{Boolean, Integer, Real, Text, Timestamp};

static CATALOG: [DataSourceDescriptor; 18] = [
    DataSourceDescriptor {
        source_id: "location",
        categories: &[Physical],
        permission: PermissionRequirement::Required {
            kind: PermissionKind::Location,
        },
        payload_schema: &[
            field("lat", Real, Clear),
            field("lon", Real, Clear),
            field("accuracy_m", Real, Clear),
        ],
        description: "Device position at full precision",
    },
    DataSourceDescriptor {
        source_id: "weather",
        categories: &[Physical],
        permission: PermissionRequirement::Conditional {
            depends_on: Some("location"),
            reason: "weather is looked up for the current location and is bound to the location permission",
        },
        payload_schema: &[
            field("temperature_c", Real, Clear),
            field("humidity_pct", Real, Clear),
            field("precipitation", Boolean, Clear),
        ],
        description: "Local weather conditions",
    },
    DataSourceDescriptor {
        source_id: "ambient_light",
        categories: &[Physical],
        permission: PermissionRequirement::NotRequired,
        payload_schema: &[field("lux", Real, Clear)],
        description: "Ambient light sensor level",
    },
    DataSourceDescriptor {
        source_id: "ambient_noise",
        categories: &[Physical],
        permission: PermissionRequirement::Required {
            kind: PermissionKind::Microphone,
        },
        payload_schema: &[field("level_db", Real, Clear)],
        description: "Ambient noise level (level only, no audio)",
    },
    DataSourceDescriptor {
        source_id: "accelerometer",
        categories: &[Physical],
        permission: PermissionRequirement::NotRequired,
        payload_schema: &[
            field("x", Real, Clear),
            field("y", Real, Clear),
            field("z", Real, Clear),
        ],
        description: "Linear acceleration sample",
    },
    DataSourceDescriptor {
        source_id: "activity",
        categories: &[Physical],
        permission: PermissionRequirement::NotRequired,
        payload_schema: &[
            field("activity", Text, Clear),
            field("confidence", Integer, Clear),
        ],
        description: "Recognized physical activity",
    },
    DataSourceDescriptor {
        source_id: "steps",
        categories: &[Physical],
        permission: PermissionRequirement::NotRequired,
        payload_schema: &[field("count", Integer, Clear)],
        description: "Step counter delta",
    },
    DataSourceDescriptor {
        source_id: "phone_lock",
        categories: &[Device],
        permission: PermissionRequirement::NotRequired,
        payload_schema: &[field("locked", Boolean, Clear)],
        description: "Screen lock and unlock",
    },
    DataSourceDescriptor {
        source_id: "headphone_plug",
        categories: &[Device],
        permission: PermissionRequirement::NotRequired,
        payload_schema: &[field("plugged", Boolean, Clear)],
        description: "Headphone plug and unplug",
    },
    DataSourceDescriptor {
        source_id: "battery",
        categories: &[Device],
        permission: PermissionRequirement::NotRequired,
        payload_schema: &[
            field("level_pct", Integer, Clear),
            field("charging", Boolean, Clear),
        ],
        description: "Battery level and charging state",
    },
    DataSourceDescriptor {
        source_id: "wifi",
        categories: &[Device],
        permission: PermissionRequirement::NotRequired,
        payload_schema: &[
            field("ssid", Text, Pseudonymize),
            field("bssid", Text, Pseudonymize),
            field("connected", Boolean, Clear),
        ],
        description: "Wifi connectivity",
    },
    DataSourceDescriptor {
        source_id: "bluetooth",
        categories: &[Device],
        permission: PermissionRequirement::NotRequired,
        payload_schema: &[
            field("peer_mac", Text, Pseudonymize),
            field("event", Text, Clear),
        ],
        description: "Bluetooth connectivity",
    },
    DataSourceDescriptor {
        source_id: "calls_metadata",
        categories: &[CoreFunctions],
        permission: PermissionRequirement::Required {
            kind: PermissionKind::Calls,
        },
        payload_schema: &[
            field("peer_number", Text, Pseudonymize),
            field("direction", Text, Clear),
            field("duration_s", Integer, Clear),
        ],
        description: "Call log metadata",
    },
    DataSourceDescriptor {
        source_id: "music_metadata",
        categories: &[CoreFunctions],
        permission: PermissionRequirement::Conditional {
            depends_on: None,
            reason: "players broadcast track metadata to any listener, some only after the user enables broadcasting",
        },
        payload_schema: &[
            field("title", Text, Clear),
            field("artist", Text, Clear),
            field("player_package", Text, Clear),
        ],
        description: "Currently playing track metadata",
    },
    DataSourceDescriptor {
        source_id: "photos_metadata",
        categories: &[CoreFunctions],
        permission: PermissionRequirement::Required {
            kind: PermissionKind::Photos,
        },
        payload_schema: &[
            field("width", Integer, Clear),
            field("height", Integer, Clear),
            field("flash", Boolean, Clear),
            field("taken_at", Timestamp, Clear),
        ],
        description: "Metadata of photos taken (no pixels)",
    },
    DataSourceDescriptor {
        source_id: "notifications_metadata",
        categories: &[CoreFunctions, Apps],
        permission: PermissionRequirement::Required {
            kind: PermissionKind::Notifications,
        },
        payload_schema: &[
            field("app_package", Text, Clear),
            field("content", Text, DropField),
            field("posted", Boolean, Clear),
        ],
        description: "Notification posted or removed, without content",
    },
    DataSourceDescriptor {
        source_id: "app_usage",
        categories: &[Apps],
        permission: PermissionRequirement::Required {
            kind: PermissionKind::AppUsage,
        },
        payload_schema: &[
            field("app_package", Text, Clear),
            field("foreground_ms", Integer, Clear),
        ],
        description: "Foreground time per app",
    },
    DataSourceDescriptor {
        source_id: "app_traffic",
        categories: &[Apps],
        permission: PermissionRequirement::Required {
            kind: PermissionKind::AppUsage,
        },
        payload_schema: &[
            field("app_package", Text, Clear),
            field("rx_bytes", Integer, Clear),
            field("tx_bytes", Integer, Clear),
        ],
        description: "Network bytes per app",
    },
];

/// The full catalog in table order.
pub fn source_catalog() -> &'static [DataSourceDescriptor] {
    &CATALOG
}

pub fn descriptor(source_id: &str) -> Result<&'static DataSourceDescriptor, ModelError> {
    CATALOG
        .iter()
        .find(|d| d.source_id == source_id)
        .ok_or_else(|| ModelError::UnknownSource(source_id.to_string()))
}

pub fn categories_of(source_id: &str) -> Result<BTreeSet<Category>, ModelError> {
    descriptor(source_id).map(DataSourceDescriptor::category_set)
}

pub fn permission_requirement(source_id: &str) -> Result<PermissionRequirement, ModelError> {
    descriptor(source_id).map(|d| d.permission)
}

/// Machine-readable catalog manifest, one JSON record per line in table order.
pub fn catalog_manifest() -> String {
    let mut out = String::new();
    for d in source_catalog() {
        let record = serde_json::json!({
            "source_id": d.source_id,
            "categories": d.categories.iter().map(|c| c.as_str()).collect::<Vec<_>>(),
            "permission": d.permission,
            "schema": d.payload_schema,
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}

/// A single payload value. Timestamp-kind fields are carried as RFC 3339 text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Bool(bool),
    Int(i64),
    Real(f64),
    Text(String),
}

impl FieldValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FieldValue::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            FieldValue::Int(i) => Some(*i as f64),
            FieldValue::Real(r) => Some(*r),
            FieldValue::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            FieldValue::Text(s) => Some(s),
            _ => None,
        }
    }

    fn matches(&self, kind: ValueKind) -> bool {
        match (kind, self) {
            (ValueKind::Integer, FieldValue::Int(_)) => true,
            (ValueKind::Real, FieldValue::Int(_) | FieldValue::Real(_)) => true,
            (ValueKind::Text, FieldValue::Text(_)) => true,
            (ValueKind::Boolean, FieldValue::Bool(_)) => true,
            (ValueKind::Timestamp, FieldValue::Text(s)) => DateTime::parse_from_rfc3339(s).is_ok(),
            _ => false,
        }
    }
}

impl From<i64> for FieldValue {
    fn from(v: i64) -> Self {
        FieldValue::Int(v)
    }
}

impl From<f64> for FieldValue {
    fn from(v: f64) -> Self {
        FieldValue::Real(v)
    }
}

impl From<bool> for FieldValue {
    fn from(v: bool) -> Self {
        FieldValue::Bool(v)
    }
}

impl From<&str> for FieldValue {
    fn from(v: &str) -> Self {
        FieldValue::Text(v.to_string())
    }
}

impl From<String> for FieldValue {
    fn from(v: String) -> Self {
        FieldValue::Text(v)
    }
}

pub type Payload = BTreeMap<String, FieldValue>;

/// Envelope for one observation. Serialized field order is fixed:
/// `device_pseudonym, source_id, timestamp, schema_version, anonymized, payload`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEvent {
    pub device_pseudonym: String,
    pub source_id: String,
    #[serde(with = "crate::time::rfc3339_millis")]
    pub timestamp: DateTime<Utc>,
    pub schema_version: u32,
    pub anonymized: bool,
    pub payload: Payload,
}

impl ContextEvent {
    /// A raw (not yet anonymized) event with no device pseudonym assigned.
    pub fn raw(source_id: impl Into<String>, timestamp: DateTime<Utc>, payload: Payload) -> Self {
        ContextEvent {
            device_pseudonym: String::new(),
            source_id: source_id.into(),
            timestamp: crate::time::truncate_millis(timestamp),
            schema_version: SCHEMA_VERSION,
            anonymized: false,
            payload,
        }
    }

    /// One line of the store format (no trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serialization is infallible")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Builds a payload from `(field, value)` pairs.
pub fn payload<I, K, V>(pairs: I) -> Payload
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<FieldValue>,
{
    pairs
        .into_iter()
        .map(|(k, v)| (k.into(), v.into()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending field, or `None` for envelope-level problems.
    pub field: Option<String>,
    pub reason: ViolationReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationReason {
    UnknownSource,
    UnsupportedSchemaVersion(u32),
    TimestampPrecision,
    UnknownField,
    KindMismatch { expected: String },
    DroppedFieldPresent,
    NotDigestShaped,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{field}: {:?}", self.reason),
            None => write!(f, "{:?}", self.reason),
        }
    }
}

fn violation(field: Option<&str>, reason: ViolationReason) -> Violation {
    Violation {
        field: field.map(str::to_string),
        reason,
    }
}

pub fn is_digest_shaped(s: &str) -> bool {
    s.len() == DIGEST_HEX_LEN && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Checks an event against the catalog. An empty result means the event is valid.
///
/// Anonymized events are additionally checked for the anonymization shape:
/// no `drop` field present and every `pseudonymize` field digest-shaped.
pub fn validate_event(event: &ContextEvent) -> Vec<Violation> {
    let mut out = Vec::new();
    let Ok(desc) = descriptor(&event.source_id) else {
        out.push(violation(None, ViolationReason::UnknownSource));
        return out;
    };
    if event.schema_version != SCHEMA_VERSION {
        out.push(violation(
            None,
            ViolationReason::UnsupportedSchemaVersion(event.schema_version),
        ));
    }
    if !event.timestamp.nanosecond().is_multiple_of(1_000_000) {
        out.push(violation(None, ViolationReason::TimestampPrecision));
    }
    for (name, value) in &event.payload {
        let Some(spec) = desc.field(name) else {
            out.push(violation(Some(name), ViolationReason::UnknownField));
            continue;
        };
        if !value.matches(spec.kind) {
            out.push(violation(
                Some(name),
                ViolationReason::KindMismatch {
                    expected: format!("{:?}", spec.kind).to_lowercase(),
                },
            ));
            continue;
        }
        if event.anonymized {
            match spec.sensitivity {
                Sensitivity::Drop => {
                    out.push(violation(Some(name), ViolationReason::DroppedFieldPresent))
                }
                Sensitivity::Pseudonymize
                    if !value.as_text().is_some_and(is_digest_shaped) =>
                {
                    out.push(violation(Some(name), ViolationReason::NotDigestShaped))
                }
                _ => {}
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 2, 10, 0, 0).unwrap()
    }

    #[test]
    fn catalog_has_eighteen_rows_starting_with_location() {
        let cat = source_catalog();
        assert_eq!(cat.len(), 18);
        assert_eq!(cat[0].source_id, "location");
        assert_eq!(
            cat[0].permission,
            PermissionRequirement::Required {
                kind: PermissionKind::Location
            }
        );
        assert_eq!(source_catalog(), source_catalog());
    }

    #[test]
    fn source_ids_and_field_names_are_unique() {
        let ids: BTreeSet<_> = source_catalog().iter().map(|d| d.source_id).collect();
        assert_eq!(ids.len(), 18);
        for d in source_catalog() {
            assert!(!d.categories.is_empty());
            let names: BTreeSet<_> = d.payload_schema.iter().map(|f| f.name).collect();
            assert_eq!(names.len(), d.payload_schema.len(), "{}", d.source_id);
        }
    }

    #[test]
    fn notifications_fit_two_categories() {
        assert_eq!(
            categories_of("notifications_metadata").unwrap(),
            BTreeSet::from([CoreFunctions, Apps])
        );
        assert_eq!(categories_of("steps").unwrap(), BTreeSet::from([Physical]));
        assert_eq!(
            categories_of("jetpack"),
            Err(ModelError::UnknownSource("jetpack".into()))
        );
    }

    #[test]
    fn permission_lookups() {
        assert!(matches!(
            permission_requirement("weather").unwrap(),
            PermissionRequirement::Conditional {
                depends_on: Some("location"),
                ..
            }
        ));
        assert_eq!(
            permission_requirement("accelerometer").unwrap(),
            PermissionRequirement::NotRequired
        );
        assert_eq!(
            permission_requirement("app_traffic").unwrap(),
            PermissionRequirement::Required {
                kind: PermissionKind::AppUsage
            }
        );
    }

    #[test]
    fn conditional_dependencies_name_catalog_sources_without_cycles() {
        for d in source_catalog() {
            let mut seen = BTreeSet::from([d.source_id]);
            let mut cur = d.permission;
            while let PermissionRequirement::Conditional {
                depends_on: Some(dep),
                ..
            } = cur
            {
                assert!(seen.insert(dep), "cycle through {dep}");
                cur = permission_requirement(dep).expect("dependency in catalog");
            }
        }
    }

    #[test]
    fn validate_steps_events() {
        let ok = ContextEvent::raw("steps", ts(), payload([("count", 4200i64)]));
        assert!(validate_event(&ok).is_empty());

        let bad = ContextEvent::raw("steps", ts(), payload([("count", "many")]));
        let v = validate_event(&bad);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field.as_deref(), Some("count"));
        assert!(matches!(v[0].reason, ViolationReason::KindMismatch { .. }));

        let unknown = ContextEvent::raw("tea_leaves", ts(), Payload::new());
        assert_eq!(
            validate_event(&unknown),
            vec![violation(None, ViolationReason::UnknownSource)]
        );
    }

    #[test]
    fn future_schema_version_is_rejected() {
        let mut ev = ContextEvent::raw("steps", ts(), payload([("count", 1i64)]));
        ev.schema_version = 2;
        assert_eq!(
            validate_event(&ev)[0].reason,
            ViolationReason::UnsupportedSchemaVersion(2)
        );
    }

    #[test]
    fn anonymized_events_must_have_anonymized_shape() {
        let mut ev = ContextEvent::raw(
            "wifi",
            ts(),
            payload([
                ("ssid", FieldValue::from("HomeNet-5G")),
                ("connected", FieldValue::from(true)),
            ]),
        );
        assert!(validate_event(&ev).is_empty());
        ev.anonymized = true;
        assert_eq!(
            validate_event(&ev)[0].reason,
            ViolationReason::NotDigestShaped
        );
    }

    #[test]
    fn timestamp_kind_requires_rfc3339() {
        let good = ContextEvent::raw(
            "photos_metadata",
            ts(),
            payload([("taken_at", "2024-01-02T10:00:00.000Z")]),
        );
        assert!(validate_event(&good).is_empty());
        let bad = ContextEvent::raw("photos_metadata", ts(), payload([("taken_at", "yesterday")]));
        assert_eq!(validate_event(&bad).len(), 1);
    }

    #[test]
    fn event_line_round_trip_keeps_field_order() {
        let ev = ContextEvent::raw(
            "location",
            ts(),
            payload([("lat", 52.5125), ("lon", 13.3269), ("accuracy_m", 5.0)]),
        );
        let line = ev.to_line();
        assert!(line.starts_with(
            r#"{"device_pseudonym":"","source_id":"location","timestamp":"2024-01-02T10:00:00.000Z","schema_version":1,"anonymized":false,"payload":"#
        ));
        assert_eq!(ContextEvent::from_line(&line).unwrap(), ev);
    }

    #[test]
    fn manifest_lists_every_source() {
        let m = catalog_manifest();
        assert_eq!(m.lines().count(), 18);
        assert!(m.lines().next().unwrap().contains(r#""source_id":"location""#));
    }
}
