//! Deterministic discrete-event simulator: builds the hub network, generates
//! synthetic patients and sessions, and drives queries, auditing, training
//! and consensus rounds end to end.

use std::path::PathBuf;

use thiserror::Error;

mod config;
mod events;
mod report;
mod scenario;
mod topology;

pub use config::{LedgerMode, ScenarioConfig, Tuning};
pub use events::{EventKind, EventPayload, EventQueue, SimEvent};
pub use report::{
    emit_report, inspect_round, read_key, replay, require_key, write_artifacts, LedgerSummary, RoundInspection, RoundReport, RunReport,
    VerificationSummary,
};
pub use scenario::{run_scenario, simulate, SimOutcome, BD_DIM, ID_DIM};
pub use topology::{build_topology, hub_id, party_id, robot_id, Topology};

pub(crate) const STREAM_TOPOLOGY: u64 = 1;
pub(crate) const STREAM_PATIENTS: u64 = 2;
pub(crate) const STREAM_TRUTH: u64 = 3;
pub(crate) const STREAM_SESSIONS: u64 = 4;
pub(crate) const STREAM_NOISE: u64 = 5;
pub(crate) const STREAM_KEYS: u64 = 6;
pub(crate) const STREAM_HELDOUT: u64 = 7;
pub(crate) const STREAM_NONCES: u64 = 8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("tick {tick}, {event:?}: {message}")]
    Event { tick: u64, event: EventKind, message: String },
    #[error("invariant violated at tick {tick}: {what}")]
    InvariantViolation { tick: u64, what: String },
    #[error("missing artifact {0}")]
    MissingArtifacts(PathBuf),
    #[error("the network key is required to read consensus payloads")]
    KeyRequired,
    #[error("unknown round {0}")]
    UnknownRound(u64),
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

#[cfg(test)]
pub(crate) fn test_config() -> ScenarioConfig {
    ScenarioConfig {
        seed: 11,
        num_hubs: 4,
        robots_per_hub: 2,
        edge_density: 0.3,
        num_patients: 24,
        sessions_per_patient: 1,
        k_per_algorithm: 3,
        consensus_window: 10,
        quorum: None,
        feedback_noise_stddev: 0.05,
        fold_destination_updates: false,
        ledger_mode: LedgerMode::SemiPrivate,
        tuning: Tuning::default(),
    }
}
