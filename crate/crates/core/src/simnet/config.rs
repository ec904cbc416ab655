use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::ledger::PermissionMode;

/// Scenario parameters. Loaded from TOML; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub num_hubs: usize,
    pub robots_per_hub: usize,
    /// Probability of each non-tree hub pair being linked, in [0, 1].
    pub edge_density: f64,
    pub num_patients: usize,
    pub sessions_per_patient: usize,
    pub k_per_algorithm: u32,
    /// Ticks between a candidate announcement and its round deadline.
    pub consensus_window: u64,
    /// Reports required to decide a round; defaults to half the reporters, rounded up.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quorum: Option<usize>,
    pub feedback_noise_stddev: f64,
    pub fold_destination_updates: bool,
    pub ledger_mode: LedgerMode,
    #[serde(default)]
    pub tuning: Tuning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    Public,
    SemiPrivate,
    Private,
}

impl From<LedgerMode> for PermissionMode {
    fn from(m: LedgerMode) -> Self {
        match m {
            LedgerMode::Public => PermissionMode::Public,
            LedgerMode::SemiPrivate => PermissionMode::SemiPrivate,
            LedgerMode::Private => PermissionMode::Private,
        }
    }
}

/// Simulator knobs with conventional defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tuning {
    /// Training epochs per candidate. Zero proposes an unchanged copy of the baseline.
    pub epochs: u32,
    pub learning_rate: f64,
    pub samples_per_session: usize,
    /// Ticks per hub-to-hub hop.
    pub edge_latency: u64,
    pub heldout_size: usize,
    /// Let the source robot score its own candidate alongside the destinations.
    pub include_source_feedback: bool,
}

impl Default for Tuning {
    fn default() -> Self {
        Self {
            epochs: 12,
            learning_rate: 1.0,
            samples_per_session: 16,
            edge_latency: 1,
            heldout_size: 256,
            include_source_feedback: false,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_robots(&self) -> usize {
        self.num_hubs * self.robots_per_hub
    }

    /// Robots that score each candidate.
    pub fn reporters(&self) -> usize {
        self.num_robots() - 1 + usize::from(self.tuning.include_source_feedback)
    }

    pub fn effective_quorum(&self) -> usize {
        self.quorum.unwrap_or_else(|| self.reporters().div_ceil(2)).max(1)
    }

    /// One round per `num_robots` sessions: every robot runs one session per round.
    pub fn rounds(&self) -> usize {
        self.num_patients * self.sessions_per_patient / self.num_robots()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_owned()));
        if self.num_hubs == 0 {
            return bad("num_hubs must be positive");
        }
        if self.robots_per_hub == 0 {
            return bad("robots_per_hub must be positive");
        }
        if !(0.0..=1.0).contains(&self.edge_density) {
            return bad("edge_density must lie in [0, 1]");
        }
        if self.num_patients < self.num_hubs {
            return bad("num_patients must be at least num_hubs");
        }
        if self.sessions_per_patient == 0 {
            return bad("sessions_per_patient must be positive");
        }
        if self.k_per_algorithm < 2 {
            return bad("k_per_algorithm must be at least 2");
        }
        if self.consensus_window == 0 {
            return bad("consensus_window must be positive");
        }
        if self.quorum == Some(0) {
            return bad("quorum must be positive");
        }
        if !(self.feedback_noise_stddev.is_finite() && self.feedback_noise_stddev >= 0.0) {
            return bad("feedback_noise_stddev must be finite and non-negative");
        }
        let t = &self.tuning;
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return bad("tuning.learning_rate must be positive");
        }
        if t.samples_per_session == 0 || t.heldout_size == 0 {
            return bad("tuning sample counts must be positive");
        }
        if self.rounds() == 0 {
            return bad("num_patients * sessions_per_patient must cover one session per robot");
        }
        Ok(())
    }
}
