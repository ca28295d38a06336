use std::net::SocketAddr;
use std::sync::Arc;

use sensorium_core::api::{CountingHandler, Handler};
use sensorium_core::scenario::{run_scenario, ScenarioConfig, Status};
use sensorium_core::sim::SimProfile;
use sensorium_core::transport::{Channel, ChannelSecurity, Request, Response};
use sensorium_net::{fingerprint, spawn_loopback, HttpChannel, Server};

struct Echo;

impl Handler for Echo {
    fn handle(&self, request: &Request) -> Response {
        Response {
            status: 200,
            body: format!("{:?} {} {}", request.method, request.path, request.body.len()).into_bytes(),
        }
    }
}

fn local() -> SocketAddr {
    ([127, 0, 0, 1], 0).into()
}

#[test]
fn fingerprint_is_sha256_hex_of_der() {
    // sha256("abc")
    assert_eq!(
        fingerprint(b"abc"),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}

#[test]
fn pinned_client_talks_to_its_server() {
    let server = Server::spawn_tls(Arc::new(Echo), local()).unwrap();
    let fp = server.fingerprint().unwrap().to_string();
    assert_eq!(fp.len(), 64);
    let mut ch = HttpChannel::connect(&server.url(), Some(&fp)).unwrap();
    assert_eq!(ch.security(), ChannelSecurity::Secure { server_fingerprint: fp });
    let r = ch.send(&Request::post_json("/v1/x?y=1", &vec![1, 2, 3])).unwrap();
    assert_eq!(r.status, 200);
    assert_eq!(String::from_utf8(r.body).unwrap(), "Post /v1/x?y=1 7");
}

#[test]
fn wrong_fingerprint_never_reaches_the_handler() {
    let counting = Arc::new(CountingHandler::new(Echo));
    let server = Server::spawn_tls(counting.clone(), local()).unwrap();
    let mut ch = HttpChannel::connect(&server.url(), Some(&"0".repeat(64))).unwrap();
    assert!(ch.security().is_secure());
    assert!(ch.send(&Request::get("/")).is_err());
    assert_eq!(counting.count(), 0);
}

#[test]
fn plain_endpoints_are_insecure() {
    let server = Server::spawn_plain(Arc::new(Echo), local()).unwrap();
    assert!(server.url().starts_with("http://"));
    assert_eq!(server.fingerprint(), None);
    let ch = HttpChannel::connect(&server.url(), Some(&"a".repeat(64))).unwrap();
    assert_eq!(ch.security(), ChannelSecurity::Insecure);
    let tls = Server::spawn_tls(Arc::new(Echo), local()).unwrap();
    let ch = HttpChannel::connect(&tls.url(), None).unwrap();
    assert_eq!(ch.security(), ChannelSecurity::Insecure);
}

#[test]
fn scenario_passes_over_loopback_tls() {
    let dir = tempfile::tempdir().unwrap();
    let config = ScenarioConfig {
        profile: SimProfile {
            days: 8,
            ..SimProfile::new(11)
        },
        ..ScenarioConfig::default()
    };
    let services = spawn_loopback(dir.path(), config.required_days).unwrap();
    let report = run_scenario(&config, &services.deployment).unwrap();
    assert_eq!(report.mode, "loopback");
    assert!(report.passed(), "{}", report.render());
    assert_eq!(report.measures_exercised(), 9, "{}", report.render());
    assert_eq!(report.check("delivery").unwrap().status, Status::Pass);
}

#[test]
fn planted_linkage_fails_over_loopback_tls() {
    let dir = tempfile::tempdir().unwrap();
    let config = ScenarioConfig {
        profile: SimProfile {
            days: 3,
            ..SimProfile::new(5)
        },
        required_days: 2,
        plant_linkage: true,
        ..ScenarioConfig::default()
    };
    let services = spawn_loopback(dir.path(), config.required_days).unwrap();
    let report = run_scenario(&config, &services.deployment).unwrap();
    assert_eq!(report.check("I").unwrap().status, Status::Fail, "{}", report.render());
}
