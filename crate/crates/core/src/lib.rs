//! Privacy-preserving mobile context-data collection.
//!
//! The device side ([`agent`], [`anonymizer`], [`transport`]) collects
//! metadata from the eighteen sources of [`context_model`], anonymizes it
//! before storage and uploads it to the [`backend`] under a random device
//! pseudonym. Compensation runs through the separate [`enrollment`] service,
//! which shares no identifier with the backend. [`sim`] and [`scenario`]
//! drive the whole system on a virtual clock.

pub mod agent;
pub mod anonymizer;
pub mod api;
pub mod backend;
pub mod config;
pub mod context_model;
pub mod enrollment;
pub mod ids;
pub mod time;
pub mod transport;
pub mod scenario;
pub mod sim;
