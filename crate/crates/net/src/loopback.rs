//! Scenario deployment whose services sit behind real TLS sockets.

use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sensorium_core::api::{BackendApi, EnrollmentApi, Handler};
use sensorium_core::backend::{read_tree, Backend};
use sensorium_core::enrollment::EnrollmentService;
use sensorium_core::scenario::Deployment;
use sensorium_core::time::{Clock, SystemClock};
use sensorium_core::transport::Channel;

use crate::{HttpChannel, NetError, Server};

/// Address and pinned certificate of one listener.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub url: String,
    pub fingerprint: String,
}

impl Endpoint {
    pub fn of(server: &Server) -> Option<Self> {
        Some(Endpoint {
            url: server.url(),
            fingerprint: server.fingerprint()?.to_string(),
        })
    }

    fn channel(&self) -> Box<dyn Channel> {
        Box::new(HttpChannel::connect(&self.url, Some(&self.fingerprint)).expect("valid endpoint"))
    }
}

/// Services reached over HTTPS. Exports and persisted bytes are read from
/// the services' directories, which the caller shares with the servers.
#[derive(Debug, Clone)]
pub struct RemoteDeployment {
    pub backend: Endpoint,
    pub enrollment: Endpoint,
    pub operator: Endpoint,
    pub backend_root: PathBuf,
    pub enrollment_file: PathBuf,
}

impl Deployment for RemoteDeployment {
    fn mode(&self) -> &'static str {
        "loopback"
    }

    fn backend_channel(&self) -> Box<dyn Channel> {
        self.backend.channel()
    }

    fn plain_backend_channel(&self) -> Box<dyn Channel> {
        let url = self.backend.url.replacen("https://", "http://", 1);
        Box::new(HttpChannel::connect(&url, None).expect("valid endpoint"))
    }

    fn enrollment_channel(&self) -> Box<dyn Channel> {
        self.enrollment.channel()
    }

    fn operator_channel(&self) -> Box<dyn Channel> {
        self.operator.channel()
    }

    fn backend_export(&self) -> io::Result<String> {
        let snapshot = Backend::open(&self.backend_root, Arc::new(SystemClock))
            .map_err(|e| io::Error::other(e.to_string()))?;
        Ok(snapshot.export_manifest())
    }

    fn enrollment_export(&self) -> io::Result<String> {
        let snapshot = EnrollmentService::open(&self.enrollment_file, 0, Arc::new(SystemClock))
            .map_err(|e| io::Error::other(e.to_string()))?;
        Ok(snapshot.export_manifest())
    }

    fn backend_persistence(&self) -> io::Result<Vec<(PathBuf, Vec<u8>)>> {
        read_tree(&self.backend_root)
    }

    fn backend_requests(&self) -> Option<u64> {
        None
    }
}

/// Backend and enrollment servers running in this process on loopback ports.
pub struct LoopbackServices {
    pub backend: Server,
    pub enrollment: Server,
    pub operator: Server,
    pub deployment: RemoteDeployment,
}

/// Backend under `root/backend`, enrollment file `root/enrollment/enrollments.jsonl`.
pub fn spawn_loopback(root: &Path, required_days: u32) -> Result<LoopbackServices, NetError> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let backend_root = root.join("backend");
    let enrollment_file = root.join("enrollment").join("enrollments.jsonl");
    std::fs::create_dir_all(root.join("enrollment"))?;
    let backend = Arc::new(Backend::open(&backend_root, clock.clone()).map_err(io::Error::other)?);
    let enrollment = Arc::new(
        EnrollmentService::open(&enrollment_file, required_days, clock).map_err(io::Error::other)?,
    );
    let local: SocketAddr = ([127, 0, 0, 1], 0).into();
    let backend_api: Arc<dyn Handler> = Arc::new(BackendApi::new(backend));
    let enroll_api: Arc<dyn Handler> = Arc::new(EnrollmentApi::new(enrollment.clone(), false));
    let operator_api: Arc<dyn Handler> = Arc::new(EnrollmentApi::new(enrollment, true));
    let backend = Server::spawn_tls(backend_api, local)?;
    let enrollment = Server::spawn_tls(enroll_api, local)?;
    let operator = Server::spawn_tls(operator_api, local)?;
    let deployment = RemoteDeployment {
        backend: Endpoint::of(&backend).expect("tls"),
        enrollment: Endpoint::of(&enrollment).expect("tls"),
        operator: Endpoint::of(&operator).expect("tls"),
        backend_root,
        enrollment_file,
    };
    Ok(LoopbackServices {
        backend,
        enrollment,
        operator,
        deployment,
    })
}
