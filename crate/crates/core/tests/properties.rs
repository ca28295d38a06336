use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use chrono::{DateTime, Duration, NaiveDate, Utc};
use proptest::prelude::*;
use sensorium_core::agent::{Agent, AgentConfig, Granularity, OutcomeKind};
use sensorium_core::api::{BackendApi, FaultChannel, FaultPlan, InProcessChannel};
use sensorium_core::backend::{read_tree, Backend};
use sensorium_core::context_model::{
    descriptor, source_catalog, validate_event, ContextEvent, PermissionKind, PermissionRequirement,
};
use sensorium_core::ids::Randomness;
use sensorium_core::sim::{simulate, SimProfile};
use sensorium_core::time::{Clock, VirtualClock};
use sensorium_core::transport::{
    register, run_upload_cycle, CycleOutcome, RetryPolicy, UploadBatch,
};

fn t0() -> DateTime<Utc> {
    "2024-01-01T00:00:00Z".parse().unwrap()
}

fn config() -> AgentConfig {
    AgentConfig::parse("backend_url=https://127.0.0.1/\npolicy_version=v1\nethics_approval_ref=EC-1\n").unwrap()
}

/// Raw events of every source, malformed ones included, in time order.
fn pool() -> &'static [ContextEvent] {
    static POOL: OnceLock<Vec<ContextEvent>> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut p = SimProfile::new(99);
        p.days = 3;
        p.malformed_rate = 0.02;
        simulate(&p).unwrap().events
    })
}

fn agent_at(seed: u64, clock: &VirtualClock) -> Agent {
    Agent::init(config(), Arc::new(clock.clone()), Randomness::seeded(seed)).unwrap()
}

fn consenting_agent(seed: u64, clock: &VirtualClock) -> Agent {
    let mut a = agent_at(seed, clock);
    a.record_consent("v1").unwrap();
    for k in PermissionKind::ALL {
        a.set_permission(k, true).unwrap();
    }
    a
}

/// Independent gate model: what a correct agent must answer.
#[derive(Default)]
struct GateModel {
    consented: bool,
    opted_out: bool,
    granted: BTreeSet<PermissionKind>,
}

impl GateModel {
    fn satisfied(&self, source: &str) -> bool {
        match descriptor(source).unwrap().permission {
            PermissionRequirement::NotRequired => true,
            PermissionRequirement::Required { kind } => self.granted.contains(&kind),
            PermissionRequirement::Conditional { depends_on: Some(dep), .. } => self.satisfied(dep),
            PermissionRequirement::Conditional { depends_on: None, .. } => true,
        }
    }

    fn expect(&self, ev: &ContextEvent) -> OutcomeKind {
        if self.opted_out {
            OutcomeKind::DroppedOptedOut
        } else if !self.consented {
            OutcomeKind::DroppedNoConsent
        } else if !validate_event(ev).is_empty() {
            OutcomeKind::Rejected
        } else if !self.satisfied(&ev.source_id) {
            OutcomeKind::DroppedNoPermission
        } else {
            OutcomeKind::Accepted
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Consent,
    Grant(usize, bool),
    Ingest(usize),
    OptOut,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        1 => Just(Op::Consent),
        4 => (0..PermissionKind::ALL.len(), any::<bool>()).prop_map(|(k, g)| Op::Grant(k, g)),
        12 => (1usize..40).prop_map(Op::Ingest),
        1 => Just(Op::OptOut),
    ]
}

fn multiset(events: &[ContextEvent]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for e in events {
        *m.entry(e.to_line()).or_insert(0) += 1;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gates_follow_the_model_for_any_op_sequence(ops in prop::collection::vec(op(), 1..120), seed in any::<u64>()) {
        let clock = VirtualClock::new(t0());
        let mut agent = agent_at(seed, &clock);
        let mut model = GateModel::default();
        let mut cursor = 0usize;
        let events = pool();
        for op in ops {
            match op {
                Op::Consent => {
                    if agent.record_consent("v1").is_ok() {
                        model.consented = true;
                    }
                }
                Op::Grant(k, g) => {
                    let kind = PermissionKind::ALL[k];
                    if agent.set_permission(kind, g).is_ok() {
                        if g { model.granted.insert(kind); } else { model.granted.remove(&kind); }
                    }
                }
                Op::OptOut => {
                    prop_assert!(agent.opt_out().is_ok());
                    model.opted_out = true;
                    prop_assert!(agent.events().is_empty());
                }
                Op::Ingest(step) => {
                    cursor = (cursor + step) % events.len();
                    let ev = &events[cursor];
                    clock.advance_to(ev.timestamp);
                    let got = agent.ingest(ev).unwrap().kind();
                    prop_assert_eq!(got, model.expect(ev));
                }
            }
            for e in agent.events() {
                prop_assert!(e.anonymized);
            }
        }
    }

    #[test]
    fn validation_is_pure(i in 0usize..10_000) {
        let ev = &pool()[i % pool().len()];
        prop_assert_eq!(validate_event(ev), validate_event(&ev.clone()));
    }

    #[test]
    fn summaries_equal_a_brute_force_fold(mask in prop::collection::vec(any::<bool>(), 64), src in 0usize..18, day in 0u32..3) {
        let clock = VirtualClock::new(t0());
        let mut agent = consenting_agent(7, &clock);
        for (i, ev) in pool().iter().enumerate() {
            if mask[i % mask.len()] {
                clock.advance_to(ev.timestamp);
                agent.ingest(ev).unwrap();
            }
        }
        let source = source_catalog()[src].source_id;
        let date = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + Duration::days(day as i64);
        for g in [Granularity::Day, Granularity::Week] {
            let s = agent.summarize(source, date, g).unwrap();
            let lo = if g == Granularity::Day { date } else { date - Duration::days(6) };
            let chosen: Vec<&ContextEvent> = agent
                .events()
                .iter()
                .filter(|e| e.source_id == source)
                .filter(|e| { let d = e.timestamp.date_naive(); d >= lo && d <= date })
                .collect();
            prop_assert_eq!(s.count(), chosen.len() as u64);
            for f in descriptor(source).unwrap().payload_schema {
                let vals: Vec<f64> = chosen.iter().filter_map(|e| e.payload.get(f.name).and_then(|v| v.as_number())).collect();
                if vals.is_empty() { continue; }
                let sum: f64 = vals.iter().sum();
                prop_assert!((s.sum(f.name) - sum).abs() <= 1e-9 * sum.abs().max(1.0));
                prop_assert_eq!(s.max(f.name), vals.iter().copied().reduce(f64::max));
                prop_assert_eq!(s.min(f.name), vals.iter().copied().reduce(f64::min));
            }
        }
    }

    #[test]
    fn pdd_count_is_monotone_and_bounded(steps in prop::collection::vec((0i64..3, -2i64..2), 1..40)) {
        let clock = VirtualClock::new(t0());
        let mut agent = consenting_agent(3, &clock);
        agent.set_pdd_enabled(true).unwrap();
        let first = agent.today();
        let mut last = 0;
        for (advance, offset) in steps {
            clock.advance_to(clock.now() + Duration::days(advance));
            let _ = agent.pdd_record(agent.today() + Duration::days(offset));
            let n = agent.pdd_completions().len();
            prop_assert!(n >= last);
            prop_assert!(n as i64 <= (agent.today() - first).num_days() + 1);
            last = n;
        }
    }

    #[test]
    fn uploads_are_exactly_once_under_faults(plan in 0usize..FaultPlan::ALL.len(), seed in any::<u64>(), mask in prop::collection::vec(any::<bool>(), 32)) {
        let dir = tempfile::tempdir().unwrap();
        let clock = VirtualClock::new(t0());
        let backend = Arc::new(Backend::open(dir.path(), Arc::new(clock.clone())).unwrap());
        let api = Arc::new(BackendApi::new(backend.clone()));
        let mut ch = FaultChannel::new(InProcessChannel::secure(api, "pin"), FaultPlan::ALL[plan], seed);
        let mut agent = consenting_agent(seed, &clock);
        register(&mut agent, &mut ch).unwrap();
        let policy = RetryPolicy::default();
        let mut last: Option<DateTime<Utc>> = None;
        for (i, ev) in pool().iter().enumerate() {
            if !mask[i % mask.len()] { continue; }
            clock.advance_to(ev.timestamp);
            if let CycleOutcome::Uploaded { .. } = run_upload_cycle(&mut agent, &mut ch, &policy).unwrap() {
                let started = agent.upload_state().last_upload_at.unwrap();
                if let Some(prev) = last { prop_assert!(started - prev >= Duration::hours(24)); }
                last = Some(started);
            }
            agent.ingest(ev).unwrap();
        }
        for _ in 0..5 {
            clock.advance_to(clock.now() + Duration::hours(24));
            run_upload_cycle(&mut agent, &mut ch, &policy).unwrap();
        }
        prop_assert!(agent.unacknowledged().is_empty());
        let stored = backend.handle_get_data(agent.device_pseudonym()).unwrap();
        prop_assert_eq!(multiset(&stored), multiset(agent.events()));
    }

    #[test]
    fn storage_is_isolated_and_deletion_complete(order in prop::collection::vec((0usize..3, 0usize..4), 1..40), victim in 0usize..3) {
        let dir = tempfile::tempdir().unwrap();
        let clock = VirtualClock::new(t0());
        let backend = Backend::open(dir.path(), Arc::new(clock.clone())).unwrap();
        // Three devices, each with four disjoint batches of its own events.
        let mut devices = Vec::new();
        for d in 0..3u64 {
            let mut agent = consenting_agent(100 + d, &clock);
            for ev in pool().iter().skip(d as usize * 200).take(200) {
                clock.advance_to(ev.timestamp);
                agent.ingest(ev).unwrap();
            }
            let p = agent.device_pseudonym().to_string();
            backend.handle_register(&p).unwrap();
            let batches: Vec<UploadBatch> = agent
                .events()
                .chunks(agent.events().len().div_ceil(4).max(1))
                .enumerate()
                .map(|(k, chunk)| UploadBatch {
                    batch_id: format!("{:032x}", d * 16 + k as u64 + 1),
                    device_pseudonym: p.clone(),
                    events: chunk.to_vec(),
                    created_at: clock.now(),
                })
                .collect();
            devices.push((p, batches));
        }
        let mut oracle: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); 3];
        let mut sent: BTreeSet<(usize, usize)> = BTreeSet::new();
        for (d, b) in order {
            let Some(batch) = devices[d].1.get(b) else { continue };
            let fresh = backend.handle_batch(batch).unwrap();
            prop_assert_eq!(fresh, sent.insert((d, b)));
            if fresh {
                for e in &batch.events { *oracle[d].entry(e.to_line()).or_insert(0) += 1; }
            }
        }
        for d in 0..3 {
            prop_assert_eq!(&multiset(&backend.handle_get_data(&devices[d].0).unwrap()), &oracle[d]);
        }
        let (vp, vb) = &devices[victim];
        backend.handle_delete(vp).unwrap();
        backend.handle_delete(vp).unwrap();
        let bytes: Vec<u8> = read_tree(dir.path()).unwrap().into_iter().flat_map(|(_, b)| b).collect();
        let text = String::from_utf8_lossy(&bytes);
        prop_assert!(!text.contains(vp.as_str()));
        for batch in vb {
            prop_assert!(!text.contains(&batch.batch_id));
            for e in &batch.events { prop_assert!(!text.contains(&e.to_line())); }
        }
        for d in (0..3).filter(|d| *d != victim) {
            prop_assert_eq!(&multiset(&backend.handle_get_data(&devices[d].0).unwrap()), &oracle[d]);
        }
    }
}

#[test]
fn pool_exercises_every_source_and_malformed_events() {
    let sources: BTreeSet<&str> = pool().iter().map(|e| e.source_id.as_str()).collect();
    assert_eq!(sources.len(), 18);
    assert!(pool().iter().any(|e| !validate_event(e).is_empty()));
}
