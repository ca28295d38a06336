//! Deterministic behavior simulator.
//!
//! Produces raw event streams for all catalog sources from a seed, together
//! with every sensitive plaintext it generated and the gating outcome a
//! correct agent must report for each event.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Days, Duration, FixedOffset, NaiveDate, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::agent::OutcomeKind;
use crate::anonymizer::PlaintextRegistry;
use crate::config::{parse_value, ConfigError};
use crate::context_model::{
    descriptor, payload, source_catalog, ContextEvent, FieldValue, PermissionKind,
    PermissionRequirement,
};
use crate::time::{format_rfc3339, parse_zone};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PermissionChange {
    /// Zero-based study day; applied at local midnight.
    pub day: u32,
    pub kind: PermissionKind,
    pub granted: bool,
}

impl PermissionChange {
    /// `day:kind:grant` or `day:kind:revoke`.
    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.trim().split(':');
        let day = parts.next()?.parse().ok()?;
        let kind = PermissionKind::parse(parts.next()?)?;
        let granted = match parts.next()? {
            "grant" => true,
            "revoke" => false,
            _ => return None,
        };
        parts.next().is_none().then_some(PermissionChange { day, kind, granted })
    }

    pub fn render(&self) -> String {
        let verb = if self.granted { "grant" } else { "revoke" };
        format!("{}:{}:{verb}", self.day, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimProfile {
    pub seed: u64,
    pub days: u32,
    pub start_date: NaiveDate,
    pub timezone: FixedOffset,
    /// Expected events per day for each source.
    pub rates: BTreeMap<String, f64>,
    pub permission_script: Vec<PermissionChange>,
    /// Probability that the PDD questionnaire is completed on a given day.
    pub pdd_compliance: f64,
    /// Probability that a generated event is corrupted and must be rejected.
    pub malformed_rate: f64,
}

/// Illustrative default rates per day. Not calibrated against any real device.
const DEFAULT_RATES: [(&str, f64); 18] = [
    ("location", 48.0),
    ("weather", 24.0),
    ("ambient_light", 48.0),
    ("ambient_noise", 24.0),
    ("accelerometer", 48.0),
    ("activity", 24.0),
    ("steps", 48.0),
    ("phone_lock", 40.0),
    ("headphone_plug", 4.0),
    ("battery", 24.0),
    ("wifi", 12.0),
    ("bluetooth", 6.0),
    ("calls_metadata", 5.5),
    ("music_metadata", 10.0),
    ("photos_metadata", 3.5),
    ("notifications_metadata", 30.0),
    ("app_usage", 40.0),
    ("app_traffic", 20.0),
];

impl SimProfile {
    pub const KEYS: [&'static str; 7] = [
        "seed",
        "days",
        "start_date",
        "timezone",
        "permission_script",
        "pdd_compliance",
        "malformed_rate",
    ];

    pub fn new(seed: u64) -> Self {
        use PermissionKind::*;
        let change = |day, kind, granted| PermissionChange { day, kind, granted };
        SimProfile {
            seed,
            days: 10,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            timezone: FixedOffset::east_opt(0).expect("valid offset"),
            rates: DEFAULT_RATES
                .iter()
                .map(|(s, r)| (s.to_string(), *r))
                .collect(),
            permission_script: vec![
                change(0, Location, true),
                change(0, Microphone, true),
                change(0, Calls, true),
                change(0, Notifications, true),
                change(0, AppUsage, true),
                change(2, Photos, true),
                change(4, Location, false),
                change(6, Location, true),
                change(7, Microphone, false),
            ],
            pdd_compliance: 0.9,
            malformed_rate: 0.002,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidProfile(m));
        if self.days < 1 {
            return bad("days must be at least 1".into());
        }
        for (s, r) in &self.rates {
            if descriptor(s).is_err() {
                return bad(format!("rate for unknown source {s}"));
            }
            if !(r.is_finite() && *r >= 0.0) {
                return bad(format!("rate for {s} must be a nonnegative number"));
            }
        }
        for (name, p) in [
            ("pdd_compliance", self.pdd_compliance),
            ("malformed_rate", self.malformed_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Takes the profile keys (`seed`, `days`, `start_date`, `timezone`,
    /// `rate.<source>`, `permission_script`, `pdd_compliance`,
    /// `malformed_rate`) out of `map`, leaving the rest to the caller.
    pub fn take_from(map: &mut BTreeMap<String, String>) -> Result<Self, SimError> {
        let seed = match map.remove("seed") {
            Some(v) => parse_value("seed", &v)?,
            None => 1,
        };
        let mut p = SimProfile::new(seed);
        if let Some(v) = map.remove("days") {
            p.days = parse_value("days", &v)?;
        }
        if let Some(v) = map.remove("start_date") {
            p.start_date = parse_value("start_date", &v)?;
        }
        if let Some(v) = map.remove("timezone") {
            p.timezone = parse_zone(&v).ok_or(ConfigError::Invalid {
                key: "timezone".into(),
                value: v,
            })?;
        }
        if let Some(v) = map.remove("permission_script") {
            p.permission_script = v
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    PermissionChange::parse(s).ok_or_else(|| ConfigError::Invalid {
                        key: "permission_script".into(),
                        value: s.to_string(),
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = map.remove("pdd_compliance") {
            p.pdd_compliance = parse_value("pdd_compliance", &v)?;
        }
        if let Some(v) = map.remove("malformed_rate") {
            p.malformed_rate = parse_value("malformed_rate", &v)?;
        }
        let rate_keys: Vec<String> = map.keys().filter(|k| k.starts_with("rate.")).cloned().collect();
        for k in rate_keys {
            let v = map.remove(&k).expect("key listed");
            p.rates.insert(k["rate.".len()..].to_string(), parse_value(&k, &v)?);
        }
        p.validate()?;
        Ok(p)
    }

    /// UTC instant of local midnight starting study day `day`.
    pub fn day_start(&self, day: u32) -> DateTime<Utc> {
        let date = self.start_date + Days::new(day as u64);
        self.timezone
            .from_local_datetime(&date.and_hms_opt(0, 0, 0).expect("midnight"))
            .single()
            .expect("fixed offsets are unambiguous")
            .with_timezone(&Utc)
    }

    pub fn date_of_day(&self, day: u32) -> NaiveDate {
        self.start_date + Days::new(day as u64)
    }

    pub fn last_date(&self) -> NaiveDate {
        self.date_of_day(self.days - 1)
    }

    /// Grants in force on `day` after applying every script entry up to it.
    pub fn grants_on(&self, day: u32) -> BTreeSet<PermissionKind> {
        let mut granted = BTreeSet::new();
        for c in self.permission_script.iter().filter(|c| c.day <= day) {
            if c.granted {
                granted.insert(c.kind);
            } else {
                granted.remove(&c.kind);
            }
        }
        granted
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub profile: SimProfile,
    /// Raw events in timestamp order.
    pub events: Vec<ContextEvent>,
    /// Expected gating outcome per event, index-aligned with `events`, for an
    /// agent that recorded consent before the first event.
    pub expected: Vec<OutcomeKind>,
    pub registry: PlaintextRegistry,
    /// Local dates on which the PDD questionnaire is completed.
    pub pdd_days: Vec<NaiveDate>,
}

impl Simulation {
    /// Stream in the agent store line format.
    pub fn stream_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }

    pub fn ledger_lines(&self) -> String {
        let mut out = String::new();
        for (i, (e, k)) in self.events.iter().zip(&self.expected).enumerate() {
            let rec = serde_json::json!({
                "index": i,
                "source_id": e.source_id,
                "timestamp": format_rfc3339(&e.timestamp),
                "expected": k,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    pub fn day_of(&self, t: DateTime<Utc>) -> u32 {
        ((t - self.profile.day_start(0)).num_days()).max(0) as u32
    }
}

const APP_PACKAGES: [&str; 8] = [
    "com.whatsapp",
    "org.telegram.messenger",
    "com.spotify.music",
    "com.instagram.android",
    "com.google.android.gm",
    "de.db.navigator",
    "com.android.chrome",
    "org.mozilla.firefox",
];
const ACTIVITIES: [&str; 5] = ["still", "walking", "running", "in_vehicle", "on_bicycle"];
const TITLES: [&str; 6] = [
    "Blue Monday",
    "Hey Jude",
    "Clair de Lune",
    "Teardrop",
    "Dancing Queen",
    "Heroes",
];
const ARTISTS: [&str; 5] = ["New Order", "The Beatles", "Debussy", "Massive Attack", "Bowie"];
const PLAYERS: [&str; 2] = ["com.spotify.music", "com.google.android.music"];
const WORDS: [&str; 12] = [
    "running", "late", "dinner", "tonight", "call", "me", "back", "meeting", "moved", "see",
    "you", "soon",
];
const SSID_STEMS: [&str; 5] = ["HomeNet", "Fritz!Box", "Cafe Blau", "Loft WLAN", "Office"];

/// Per-device values that identify people or places.
struct Vocabulary {
    ssids: Vec<String>,
    bssids: Vec<String>,
    peer_macs: Vec<String>,
    numbers: Vec<String>,
}

fn mac(rng: &mut ChaCha20Rng) -> String {
    let b: [u8; 6] = rng.random();
    b.iter().map(|x| format!("{x:02x}")).collect::<Vec<_>>().join(":")
}

fn tag(rng: &mut ChaCha20Rng, len: usize) -> String {
    const ALPHABET: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ23456789";
    (0..len)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect()
}

impl Vocabulary {
    fn generate(rng: &mut ChaCha20Rng) -> Self {
        let ssids = SSID_STEMS
            .iter()
            .map(|s| format!("{s}-{}", tag(rng, 6)))
            .collect();
        let bssids = (0..5).map(|_| mac(rng)).collect();
        let peer_macs = (0..5).map(|_| mac(rng)).collect();
        let numbers = (0..25)
            .map(|_| format!("+491{:09}", rng.random_range(0..1_000_000_000u64)))
            .collect();
        Vocabulary {
            ssids,
            bssids,
            peer_macs,
            numbers,
        }
    }
}

fn round_to(v: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (v * f).round() / f
}

fn pick<'a>(rng: &mut ChaCha20Rng, items: &'a [&'a str]) -> &'a str {
    items.choose(rng).expect("nonempty vocabulary")
}

fn pick_owned(rng: &mut ChaCha20Rng, items: &[String]) -> String {
    items.choose(rng).expect("nonempty vocabulary").clone()
}

/// Event count for one day: the integer part of the rate plus one more with
/// probability equal to the fractional part.
fn daily_count(rng: &mut ChaCha20Rng, rate: f64) -> usize {
    let whole = rate.floor();
    let extra = rng.random_bool((rate - whole).clamp(0.0, 1.0));
    whole as usize + usize::from(extra)
}

struct Generator<'a> {
    vocab: &'a Vocabulary,
    registry: &'a mut PlaintextRegistry,
    message_counter: u64,
    device_tag: String,
}

impl Generator<'_> {
    fn payload_for(
        &mut self,
        source: &str,
        at: DateTime<Utc>,
        rng: &mut ChaCha20Rng,
    ) -> crate::context_model::Payload {
        fn f<T: Into<FieldValue>>(v: T) -> FieldValue {
            v.into()
        }
        match source {
            "location" => payload([
                ("lat", f(round_to(52.52 + rng.random_range(-0.05..0.05), 6))),
                ("lon", f(round_to(13.405 + rng.random_range(-0.08..0.08), 6))),
                ("accuracy_m", f(round_to(rng.random_range(3.0..50.0), 1))),
            ]),
            "weather" => payload([
                ("temperature_c", f(round_to(rng.random_range(-8.0..12.0), 1))),
                ("humidity_pct", f(round_to(rng.random_range(40.0..100.0), 1))),
                ("precipitation", f(rng.random_bool(0.3))),
            ]),
            "ambient_light" => payload([("lux", f(round_to(rng.random_range(0.0..20000.0), 1)))]),
            "ambient_noise" => payload([("level_db", f(round_to(rng.random_range(25.0..95.0), 1)))]),
            "accelerometer" => payload([
                ("x", f(round_to(rng.random_range(-2.0..2.0), 3))),
                ("y", f(round_to(rng.random_range(-2.0..2.0), 3))),
                ("z", f(round_to(rng.random_range(8.0..11.0), 3))),
            ]),
            "activity" => payload([
                ("activity", f(pick(rng, &ACTIVITIES))),
                ("confidence", f(rng.random_range(30..=100i64))),
            ]),
            "steps" => payload([("count", f(rng.random_range(0..=600i64)))]),
            "phone_lock" => payload([("locked", f(rng.random_bool(0.5)))]),
            "headphone_plug" => payload([("plugged", f(rng.random_bool(0.5)))]),
            "battery" => payload([
                ("level_pct", f(rng.random_range(1..=100i64))),
                ("charging", f(rng.random_bool(0.25))),
            ]),
            "wifi" => {
                let ssid = pick_owned(rng, &self.vocab.ssids);
                let bssid = pick_owned(rng, &self.vocab.bssids);
                self.registry.record(ssid.clone());
                self.registry.record(bssid.clone());
                payload([
                    ("ssid", f(ssid)),
                    ("bssid", f(bssid)),
                    ("connected", f(rng.random_bool(0.7))),
                ])
            }
            "bluetooth" => {
                let peer = pick_owned(rng, &self.vocab.peer_macs);
                self.registry.record(peer.clone());
                payload([
                    ("peer_mac", f(peer)),
                    ("event", f(pick(rng, &["connected", "disconnected"]))),
                ])
            }
            "calls_metadata" => {
                let number = pick_owned(rng, &self.vocab.numbers);
                self.registry.record(number.clone());
                payload([
                    ("peer_number", f(number)),
                    ("direction", f(pick(rng, &["incoming", "outgoing", "missed"]))),
                    ("duration_s", f(rng.random_range(0..=1800i64))),
                ])
            }
            "music_metadata" => payload([
                ("title", f(pick(rng, &TITLES))),
                ("artist", f(pick(rng, &ARTISTS))),
                ("player_package", f(pick(rng, &PLAYERS))),
            ]),
            "photos_metadata" => payload([
                ("width", f(*[4032i64, 3024, 1920].choose(rng).expect("nonempty"))),
                ("height", f(*[3024i64, 4032, 1080].choose(rng).expect("nonempty"))),
                ("flash", f(rng.random_bool(0.2))),
                ("taken_at", f(format_rfc3339(&at))),
            ]),
            "notifications_metadata" => {
                self.message_counter += 1;
                let words: Vec<&str> = (0..4).map(|_| pick(rng, &WORDS)).collect();
                let content = format!(
                    "Msg {} {} #{}",
                    self.device_tag,
                    words.join(" "),
                    self.message_counter
                );
                self.registry.record(content.clone());
                payload([
                    ("app_package", f(pick(rng, &APP_PACKAGES))),
                    ("content", f(content)),
                    ("posted", f(rng.random_bool(0.8))),
                ])
            }
            "app_usage" => payload([
                ("app_package", f(pick(rng, &APP_PACKAGES))),
                ("foreground_ms", f(rng.random_range(1_000..=1_800_000i64))),
            ]),
            "app_traffic" => payload([
                ("app_package", f(pick(rng, &APP_PACKAGES))),
                ("rx_bytes", f(rng.random_range(0..=50_000_000i64))),
                ("tx_bytes", f(rng.random_range(0..=5_000_000i64))),
            ]),
            other => unreachable!("catalog source without generator: {other}"),
        }
    }
}

fn stream(seed: u64, n: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

const VOCAB_STREAM: u64 = 0;
const PDD_STREAM: u64 = 100;
const FAULT_STREAM: u64 = 101;
const SOURCE_STREAM_BASE: u64 = 1;

fn requirement_holds(req: PermissionRequirement, grants: &BTreeSet<PermissionKind>) -> bool {
    match req {
        PermissionRequirement::NotRequired => true,
        PermissionRequirement::Required { kind } => grants.contains(&kind),
        PermissionRequirement::Conditional { depends_on: None, .. } => true,
        PermissionRequirement::Conditional {
            depends_on: Some(dep),
            ..
        } => descriptor(dep).is_ok_and(|d| requirement_holds(d.permission, grants)),
    }
}

/// Corrupts `event` so that validation must reject it.
fn corrupt(event: &mut ContextEvent, rng: &mut ChaCha20Rng) {
    if rng.random_bool(0.5) {
        event
            .payload
            .insert("debug_blob".into(), FieldValue::Text("unexpected".into()));
    } else {
        event.schema_version = 0;
    }
}

pub fn simulate(profile: &SimProfile) -> Result<Simulation, SimError> {
    profile.validate()?;
    let mut vocab_rng = stream(profile.seed, VOCAB_STREAM);
    let vocab = Vocabulary::generate(&mut vocab_rng);
    let device_tag = tag(&mut vocab_rng, 5);
    let mut registry = PlaintextRegistry::new();
    let mut generator = Generator {
        vocab: &vocab,
        registry: &mut registry,
        message_counter: 0,
        device_tag,
    };
    let mut fault_rng = stream(profile.seed, FAULT_STREAM);
    let day_ms = Duration::days(1).num_milliseconds();

    // (timestamp, catalog index, event, malformed)
    let mut generated: Vec<(DateTime<Utc>, usize, ContextEvent, bool)> = Vec::new();
    for (idx, desc) in source_catalog().iter().enumerate() {
        let source = desc.source_id;
        let rate = profile.rates.get(source).copied().unwrap_or(0.0);
        let mut rng = stream(profile.seed, SOURCE_STREAM_BASE + idx as u64);
        for day in 0..profile.days {
            let start = profile.day_start(day);
            let n = daily_count(&mut rng, rate);
            let mut stamps: Vec<DateTime<Utc>> = if source == "weather" {
                // Weather is looked up for a position, so it only occurs in
                // hours that already contain a location fix.
                let hours: Vec<i64> = generated
                    .iter()
                    .filter(|(t, i, _, _)| *i == 0 && *t >= start && *t < start + Duration::days(1))
                    .map(|(t, _, _, _)| (*t - start).num_hours())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                if hours.is_empty() {
                    Vec::new()
                } else {
                    (0..n)
                        .map(|_| {
                            let h = *hours.choose(&mut rng).expect("nonempty");
                            start + Duration::hours(h) + Duration::milliseconds(rng.random_range(0..3_600_000))
                        })
                        .collect()
                }
            } else {
                (0..n)
                    .map(|_| start + Duration::milliseconds(rng.random_range(0..day_ms)))
                    .collect()
            };
            stamps.sort();
            for at in stamps {
                let body = generator.payload_for(source, at, &mut rng);
                let mut ev = ContextEvent::raw(source, at, body);
                let malformed = fault_rng.random_bool(profile.malformed_rate);
                if malformed {
                    corrupt(&mut ev, &mut fault_rng);
                }
                generated.push((at, idx, ev, malformed));
            }
        }
    }
    generated.sort_by_key(|(t, idx, _, _)| (*t, *idx));

    let start0 = profile.day_start(0);
    let mut events = Vec::with_capacity(generated.len());
    let mut expected = Vec::with_capacity(generated.len());
    for (t, idx, ev, malformed) in generated {
        let day = (t - start0).num_days() as u32;
        let outcome = if malformed {
            OutcomeKind::Rejected
        } else if requirement_holds(source_catalog()[idx].permission, &profile.grants_on(day)) {
            OutcomeKind::Accepted
        } else {
            OutcomeKind::DroppedNoPermission
        };
        events.push(ev);
        expected.push(outcome);
    }

    let mut pdd_rng = stream(profile.seed, PDD_STREAM);
    let pdd_days = (0..profile.days)
        .filter(|_| pdd_rng.random_bool(profile.pdd_compliance))
        .map(|d| profile.date_of_day(d))
        .collect();

    Ok(Simulation {
        profile: profile.clone(),
        events,
        expected,
        registry,
        pdd_days,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context_model::validate_event;

    fn only(source: &str, rate: f64, days: u32) -> SimProfile {
        let mut p = SimProfile::new(42);
        p.days = days;
        p.malformed_rate = 0.0;
        p.rates = BTreeMap::from([(source.to_string(), rate)]);
        p
    }

    #[test]
    fn deterministic_per_seed() {
        let a = simulate(&SimProfile::new(5)).unwrap();
        let b = simulate(&SimProfile::new(5)).unwrap();
        assert_eq!(a.stream_lines(), b.stream_lines());
        assert_eq!(a.registry, b.registry);
        let c = simulate(&SimProfile::new(6)).unwrap();
        assert_ne!(a.stream_lines(), c.stream_lines());
    }

    #[test]
    fn integer_rate_is_exact() {
        // 24 per day over 2 days leaves no fractional draw.
        let sim = simulate(&only("steps", 24.0, 2)).unwrap();
        assert_eq!(sim.events.len(), 48);
        assert!(sim.events.iter().all(|e| e.source_id == "steps"));
    }

    #[test]
    fn no_location_means_no_weather() {
        let mut p = SimProfile::new(3);
        p.rates.insert("location".into(), 0.0);
        let sim = simulate(&p).unwrap();
        assert!(sim.events.iter().all(|e| e.source_id != "weather"));
    }

    #[test]
    fn weather_shares_an_hour_with_location() {
        let sim = simulate(&SimProfile::new(9)).unwrap();
        let hour = |t: DateTime<Utc>| t.timestamp().div_euclid(3600);
        let location_hours: BTreeSet<i64> = sim
            .events
            .iter()
            .filter(|e| e.source_id == "location")
            .map(|e| hour(e.timestamp))
            .collect();
        let weather: Vec<_> = sim.events.iter().filter(|e| e.source_id == "weather").collect();
        assert!(!weather.is_empty());
        assert!(weather.iter().all(|e| location_hours.contains(&hour(e.timestamp))));
    }

    #[test]
    fn app_vocabulary_is_shared() {
        let sim = simulate(&SimProfile::new(11)).unwrap();
        let apps = |src: &str| -> BTreeSet<String> {
            sim.events
                .iter()
                .filter(|e| e.source_id == src)
                .filter_map(|e| e.payload.get("app_package")?.as_text().map(str::to_string))
                .collect()
        };
        let usage = apps("app_usage");
        let notes = apps("notifications_metadata");
        assert!(usage.is_subset(&APP_PACKAGES.iter().map(|s| s.to_string()).collect()));
        assert!(!usage.is_disjoint(&notes));
    }

    #[test]
    fn registry_covers_sensitive_fields() {
        let sim = simulate(&SimProfile::new(13)).unwrap();
        let reg: BTreeSet<&str> = sim.registry.iter().collect();
        for e in &sim.events {
            for field in ["ssid", "bssid", "peer_mac", "peer_number", "content"] {
                if let Some(v) = e.payload.get(field).and_then(|v| v.as_text()) {
                    assert!(reg.contains(v), "{field} value not registered");
                }
            }
        }
        assert!(sim.registry.len() > 200);
    }

    #[test]
    fn ledger_follows_script_and_corruption() {
        let mut p = SimProfile::new(17);
        p.malformed_rate = 0.05;
        let sim = simulate(&p).unwrap();
        for (e, k) in sim.events.iter().zip(&sim.expected) {
            let valid = validate_event(e).is_empty();
            if !valid {
                assert_eq!(*k, OutcomeKind::Rejected);
                continue;
            }
            let day = sim.day_of(e.timestamp);
            let gated = match e.source_id.as_str() {
                "location" | "weather" => (4..6).contains(&day),
                "ambient_noise" => day >= 7,
                "photos_metadata" => day < 2,
                _ => false,
            };
            let want = if gated {
                OutcomeKind::DroppedNoPermission
            } else {
                OutcomeKind::Accepted
            };
            assert_eq!(*k, want, "{} on day {day}", e.source_id);
        }
        assert!(sim.expected.contains(&OutcomeKind::Rejected));
    }

    #[test]
    fn profile_keys_parse() {
        let mut map = crate::config::parse_kv(
            "seed=7\ndays=3\nrate.steps=2.5\npermission_script=0:location:grant,1:location:revoke\nother=x\n",
        )
        .unwrap();
        let p = SimProfile::take_from(&mut map).unwrap();
        assert_eq!((p.seed, p.days), (7, 3));
        assert_eq!(p.rates["steps"], 2.5);
        assert_eq!(p.permission_script.len(), 2);
        assert_eq!(p.permission_script[1].render(), "1:location:revoke");
        assert_eq!(map.len(), 1);
        let mut bad = crate::config::parse_kv("rate.teleport=1\n").unwrap();
        assert!(SimProfile::take_from(&mut bad).is_err());
        let mut bad = crate::config::parse_kv("pdd_compliance=1.5\n").unwrap();
        assert!(SimProfile::take_from(&mut bad).is_err());
    }
}
