//! Privacy-preserving aggregated queries, hash-chained audit logging,
//! version-controlled model sharing and consensus-gated model promotion,
//! with a deterministic discrete-event simulator that drives the whole
//! lifecycle.

pub mod codec;
pub mod ledger;
pub mod opal;
pub mod audit;
pub mod modelstore;
pub mod learner;
pub mod consensus;
pub mod simnet;
