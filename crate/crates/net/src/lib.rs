//! HTTP transport for the backend and enrollment services.
//!
//! [`Server`] serves any [`Handler`] over TLS with a freshly generated
//! self-signed certificate, or over plain HTTP when asked to. [`HttpChannel`]
//! is the client side: it only trusts a server whose certificate hashes to
//! the pinned fingerprint.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use http_body_util::{BodyExt, Full};
use hyper::body::{Bytes, Incoming};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper_util::rt::TokioIo;
use rustls::client::danger::{HandshakeSignatureValid, ServerCertVerified, ServerCertVerifier};
use rustls::crypto::{verify_tls12_signature, verify_tls13_signature, CryptoProvider};
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName, UnixTime};
use rustls::{DigitallySignedStruct, SignatureScheme};
use sensorium_core::api::Handler;
use sensorium_core::transport::{
    Channel, ChannelConfig, ChannelError, ChannelSecurity, Method, Request, Response,
};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio_rustls::TlsAcceptor;

mod loopback;

pub use loopback::{spawn_loopback, Endpoint, LoopbackServices, RemoteDeployment};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("certificate generation: {0}")]
    Certificate(String),
    #[error("tls: {0}")]
    Tls(#[from] rustls::Error),
    #[error("http client: {0}")]
    Client(String),
}

/// Lowercase hex SHA-256 of a DER certificate.
pub fn fingerprint(der: &[u8]) -> String {
    hex::encode(Sha256::digest(der))
}

fn provider() -> Arc<CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

/// A running server. Dropping the handle stops it.
pub struct Server {
    addr: SocketAddr,
    fingerprint: Option<String>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    /// Serves `handler` over TLS on `bind` (port 0 picks a free port).
    pub fn spawn_tls(handler: Arc<dyn Handler>, bind: SocketAddr) -> Result<Self, NetError> {
        let certified = rcgen::generate_simple_self_signed(vec!["localhost".into(), "127.0.0.1".into()])
            .map_err(|e| NetError::Certificate(e.to_string()))?;
        let der = certified.cert.der().clone();
        let key = PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(certified.key_pair.serialize_der()));
        let fp = fingerprint(&der);
        let config = rustls::ServerConfig::builder_with_provider(provider())
            .with_safe_default_protocol_versions()?
            .with_no_client_auth()
            .with_single_cert(vec![der], key)?;
        Self::spawn(handler, bind, Some(TlsAcceptor::from(Arc::new(config))), Some(fp))
    }

    /// Serves `handler` over plain HTTP. Secure clients refuse to talk to it.
    pub fn spawn_plain(handler: Arc<dyn Handler>, bind: SocketAddr) -> Result<Self, NetError> {
        Self::spawn(handler, bind, None, None)
    }

    fn spawn(
        handler: Arc<dyn Handler>,
        bind: SocketAddr,
        tls: Option<TlsAcceptor>,
        fingerprint: Option<String>,
    ) -> Result<Self, NetError> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(TcpListener::bind(bind))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel();
        let thread = std::thread::spawn(move || {
            runtime.block_on(accept_loop(listener, handler, tls, rx));
            runtime.shutdown_background();
        });
        Ok(Server {
            addr,
            fingerprint,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        let scheme = if self.fingerprint.is_some() { "https" } else { "http" };
        format!("{scheme}://{}/", self.addr)
    }

    /// Fingerprint of the server certificate; `None` for plain HTTP.
    pub fn fingerprint(&self) -> Option<&str> {
        self.fingerprint.as_deref()
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

async fn accept_loop(
    listener: TcpListener,
    handler: Arc<dyn Handler>,
    tls: Option<TlsAcceptor>,
    mut shutdown: oneshot::Receiver<()>,
) {
    loop {
        let stream = tokio::select! {
            _ = &mut shutdown => return,
            accepted = listener.accept() => match accepted {
                Ok((stream, _)) => stream,
                Err(_) => continue,
            },
        };
        let handler = handler.clone();
        let tls = tls.clone();
        tokio::spawn(async move {
            let service = service_fn(move |req| serve(handler.clone(), req));
            match tls {
                Some(acceptor) => {
                    if let Ok(stream) = acceptor.accept(stream).await {
                        let _ = http1::Builder::new()
                            .serve_connection(TokioIo::new(stream), service)
                            .await;
                    }
                }
                None => {
                    let _ = http1::Builder::new()
                        .serve_connection(TokioIo::new(stream), service)
                        .await;
                }
            }
        });
    }
}

async fn serve(
    handler: Arc<dyn Handler>,
    req: hyper::Request<Incoming>,
) -> Result<hyper::Response<Full<Bytes>>, Infallible> {
    let method = match *req.method() {
        hyper::Method::GET => Some(Method::Get),
        hyper::Method::POST => Some(Method::Post),
        hyper::Method::DELETE => Some(Method::Delete),
        _ => None,
    };
    let path = req
        .uri()
        .path_and_query()
        .map(|p| p.as_str().to_string())
        .unwrap_or_else(|| "/".into());
    let body = match req.into_body().collect().await {
        Ok(b) => b.to_bytes().to_vec(),
        Err(_) => return Ok(reply(Response { status: 400, body: Vec::new() })),
    };
    let Some(method) = method else {
        return Ok(reply(Response { status: 405, body: Vec::new() }));
    };
    let request = Request { method, path, body };
    // Handlers do blocking file i/o.
    let response = tokio::task::spawn_blocking(move || handler.handle(&request))
        .await
        .unwrap_or(Response { status: 500, body: Vec::new() });
    Ok(reply(response))
}

fn reply(r: Response) -> hyper::Response<Full<Bytes>> {
    hyper::Response::builder()
        .status(r.status)
        .header("content-type", "application/json")
        .body(Full::new(Bytes::from(r.body)))
        .expect("static response parts are valid")
}

/// Accepts exactly one server certificate, identified by its SHA-256.
/// Handshake signatures are still verified.
#[derive(Debug)]
struct PinnedVerifier {
    fingerprint: String,
    provider: Arc<CryptoProvider>,
}

impl ServerCertVerifier for PinnedVerifier {
    fn verify_server_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        _intermediates: &[CertificateDer<'_>],
        _server_name: &ServerName<'_>,
        _ocsp_response: &[u8],
        _now: UnixTime,
    ) -> Result<ServerCertVerified, rustls::Error> {
        if fingerprint(end_entity) == self.fingerprint {
            Ok(ServerCertVerified::assertion())
        } else {
            Err(rustls::Error::General("server certificate fingerprint mismatch".into()))
        }
    }

    fn verify_tls12_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_tls12_signature(message, cert, dss, &self.provider.signature_verification_algorithms)
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_tls13_signature(message, cert, dss, &self.provider.signature_verification_algorithms)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        self.provider.signature_verification_algorithms.supported_schemes()
    }
}

/// Blocking HTTP client channel. Secure only for `https` with a pinned
/// fingerprint; otherwise it reports [`ChannelSecurity::Insecure`] and the
/// transport layer never hands it data.
pub struct HttpChannel {
    config: ChannelConfig,
    client: reqwest::blocking::Client,
}

impl HttpChannel {
    pub fn new(config: ChannelConfig) -> Result<Self, NetError> {
        let builder = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .redirect(reqwest::redirect::Policy::none());
        let builder = match config.security() {
            ChannelSecurity::Secure { server_fingerprint } => {
                let provider = provider();
                let tls = rustls::ClientConfig::builder_with_provider(provider.clone())
                    .with_safe_default_protocol_versions()?
                    .dangerous()
                    .with_custom_certificate_verifier(Arc::new(PinnedVerifier {
                        fingerprint: server_fingerprint,
                        provider,
                    }))
                    .with_no_client_auth();
                builder.use_preconfigured_tls(tls).https_only(true)
            }
            ChannelSecurity::Insecure => builder,
        };
        let client = builder.build().map_err(|e| NetError::Client(e.to_string()))?;
        Ok(HttpChannel { config, client })
    }

    /// Shorthand for [`HttpChannel::new`] from a URL and optional fingerprint.
    pub fn connect(url: &str, fingerprint: Option<&str>) -> Result<Self, NetError> {
        let config = ChannelConfig::new(url, fingerprint.map(str::to_string))
            .map_err(|e| NetError::Client(e.to_string()))?;
        Self::new(config)
    }
}

impl Channel for HttpChannel {
    fn security(&self) -> ChannelSecurity {
        self.config.security()
    }

    fn send(&mut self, request: &Request) -> Result<Response, ChannelError> {
        let url = self
            .config
            .endpoint
            .join(request.path.trim_start_matches('/'))
            .map_err(|e| ChannelError::Network(e.to_string()))?;
        let builder = match request.method {
            Method::Get => self.client.get(url),
            Method::Post => self
                .client
                .post(url)
                .header("content-type", "application/json")
                .body(request.body.clone()),
            Method::Delete => self.client.delete(url),
        };
        let resp = builder
            .send()
            .map_err(|e| ChannelError::Network(error_chain(&e)))?;
        let status = resp.status().as_u16();
        let body = resp
            .bytes()
            .map_err(|e| ChannelError::Network(error_chain(&e)))?
            .to_vec();
        Ok(Response { status, body })
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        out.push_str(": ");
        out.push_str(&s.to_string());
        cur = s.source();
    }
    out
}
