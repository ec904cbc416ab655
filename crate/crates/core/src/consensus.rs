//! Candidate-model rounds: proposal, time-boxed feedback, the strict mean
//! comparison against the incumbent, promotion or rollback, and the signed
//! ledger record of the outcome.
//!
//! Only one round may be open network-wide at any time.

use std::collections::BTreeMap;
use std::fmt;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Digest, Encoder};
use crate::learner::{federated_average, LearnerError};
use crate::ledger::{
    consensus_signing_message, decrypt_payload, encrypt_payload, BlockRef, CryptoError, Identity, Ledger, LedgerError,
    NetworkKey, Transaction,
};
use crate::modelstore::{Announcement, FloodReport, HubNetwork, ModelDelta, ModelStoreError, ModelVersion, Repository, VersionId};

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("round {0} is still open")]
    RoundInProgress(RoundId),
    #[error("candidate does not descend from the baseline")]
    OrphanCandidate,
    #[error("unknown round {0}")]
    UnknownRound(RoundId),
    #[error("round {0} is closed")]
    RoundClosed(RoundId),
    #[error("robot {0} already reported")]
    DuplicateFeedback(String),
    #[error("feedback at tick {received_at} is past the deadline {deadline}")]
    LateFeedback { received_at: u64, deadline: u64 },
    #[error("feedback pair is inconsistent: {0}")]
    MismatchedFeedback(String),
    #[error("round {0} is not open")]
    RoundNotOpen(RoundId),
    #[error("round {round} cannot resolve before tick {deadline} with {reported}/{expected} reports")]
    TooEarly {
        round: RoundId,
        deadline: u64,
        reported: usize,
        expected: usize,
    },
    #[error("round {0} was not accepted")]
    NotAccepted(RoundId),
    #[error("round {0} has not been resolved")]
    RoundNotResolved(RoundId),
    #[error("signer {signer} is not the round's source robot {source_robot}")]
    WrongSigner { signer: String, source_robot: String },
    #[error("quorum must be at least 1")]
    InvalidQuorum,
    #[error(transparent)]
    Store(#[from] ModelStoreError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("payload decode: {0}")]
    Payload(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoundId(pub u64);

impl fmt::Display for RoundId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateModel {
    pub model: ModelVersion,
    pub source_hub: String,
    pub source_robot: String,
    pub locked_score: f64,
    pub announced_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackScore {
    pub robot_id: String,
    pub model_hash: VersionId,
    pub score: f64,
    pub received_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundState {
    Open,
    Accepted,
    Rejected,
    Expired,
}

impl RoundState {
    pub fn code(self) -> u8 {
        match self {
            RoundState::Open => 0x00,
            RoundState::Accepted => 0x01,
            RoundState::Rejected => 0x02,
            RoundState::Expired => 0x03,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x01 => Some(RoundState::Accepted),
            0x02 => Some(RoundState::Rejected),
            0x03 => Some(RoundState::Expired),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub outcome: RoundState,
    pub candidate_mean: Option<f64>,
    pub baseline_mean: Option<f64>,
    pub reported: usize,
    pub quorum: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Expired below quorum; otherwise accepted iff the candidate mean is
/// strictly greater than the baseline mean.
pub fn decide(candidate_scores: &[f64], baseline_scores: &[f64], quorum: usize) -> Decision {
    let candidate_mean = mean(candidate_scores);
    let baseline_mean = mean(baseline_scores);
    let outcome = if candidate_scores.len() < quorum {
        RoundState::Expired
    } else {
        match (candidate_mean, baseline_mean) {
            (Some(c), Some(b)) if c > b => RoundState::Accepted,
            _ => RoundState::Rejected,
        }
    };
    Decision {
        outcome,
        candidate_mean,
        baseline_mean,
        reported: candidate_scores.len(),
        quorum,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusRound {
    pub round_id: RoundId,
    pub candidate: CandidateModel,
    pub baseline: ModelVersion,
    pub baseline_scores: Vec<FeedbackScore>,
    pub candidate_scores: Vec<FeedbackScore>,
    pub opened_at: u64,
    pub deadline: u64,
    pub quorum: usize,
    /// Robots expected to report; the round may resolve early once all have.
    pub expected_reporters: usize,
    pub state: RoundState,
    pub decision: Option<Decision>,
    /// Hash of the delta the round proposed, replaced by the adopted delta on promotion.
    pub update_hash: Digest,
    pub notarized_at: Option<BlockRef>,
}

impl ConsensusRound {
    pub fn is_open(&self) -> bool {
        self.state == RoundState::Open
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Promotion {
    pub version: ModelVersion,
    pub delta: ModelDelta,
}

/// Owns every round and enforces the single-open-round rule.
#[derive(Debug, Default)]
pub struct Coordinator {
    rounds: BTreeMap<RoundId, ConsensusRound>,
    open: Option<RoundId>,
    next_id: u64,
}

impl Coordinator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn round(&self, id: RoundId) -> Option<&ConsensusRound> {
        self.rounds.get(&id)
    }

    pub fn rounds(&self) -> impl Iterator<Item = &ConsensusRound> {
        self.rounds.values()
    }

    pub fn open_round_id(&self) -> Option<RoundId> {
        self.open
    }

    pub fn open_round_count(&self) -> usize {
        self.rounds.values().filter(|r| r.is_open()).count()
    }

    fn round_mut(&mut self, id: RoundId) -> Result<&mut ConsensusRound, ConsensusError> {
        self.rounds.get_mut(&id).ok_or(ConsensusError::UnknownRound(id))
    }

    /// Opens a round for a candidate already committed in `source_repo`.
    #[allow(clippy::too_many_arguments)]
    pub fn open_round(
        &mut self,
        source_repo: &Repository,
        candidate: CandidateModel,
        baseline: ModelVersion,
        window: u64,
        quorum: usize,
        expected_reporters: usize,
        now: u64,
    ) -> Result<RoundId, ConsensusError> {
        if let Some(open) = self.open {
            return Err(ConsensusError::RoundInProgress(open));
        }
        if quorum == 0 {
            return Err(ConsensusError::InvalidQuorum);
        }
        if candidate.model.version_id == baseline.version_id
            || !source_repo.contains(&candidate.model.version_id)
            || !source_repo.is_ancestor(&baseline.version_id, &candidate.model.version_id)
        {
            return Err(ConsensusError::OrphanCandidate);
        }
        let update_hash = ModelDelta::between(&baseline, &candidate.model)?.update_hash;
        let id = RoundId(self.next_id);
        self.next_id += 1;
        self.rounds.insert(
            id,
            ConsensusRound {
                round_id: id,
                candidate,
                baseline,
                baseline_scores: Vec::new(),
                candidate_scores: Vec::new(),
                opened_at: now,
                deadline: now + window,
                quorum,
                expected_reporters,
                state: RoundState::Open,
                decision: None,
                update_hash,
                notarized_at: None,
            },
        );
        self.open = Some(id);
        Ok(id)
    }

    /// Opens a round at the candidate's source hub and floods the
    /// announcement through `network`.
    pub fn open_and_announce(
        &mut self,
        network: &mut HubNetwork,
        candidate: CandidateModel,
        window: u64,
        quorum: usize,
        now: u64,
    ) -> Result<(RoundId, Announcement, FloodReport), ConsensusError> {
        let source = network
            .hub(&candidate.source_hub)
            .ok_or_else(|| ModelStoreError::UnknownHub(candidate.source_hub.clone()))?;
        let baseline = source.repo().checkout_consensual()?;
        let expected = network.hubs().map(|h| h.subscriber_count()).sum::<usize>().saturating_sub(1);
        let delta = ModelDelta::between(&baseline, &candidate.model)?;
        let source_hub = candidate.source_hub.clone();
        let id = self.open_round(source.repo(), candidate, baseline, window, quorum, expected, now)?;
        let ann = Announcement::with_sequence(delta, source_hub, id.0);
        let report = network.flood(&ann)?;
        Ok((id, ann, report))
    }

    /// Records one robot's paired scores for the candidate and the baseline.
    pub fn submit_feedback(
        &mut self,
        round_id: RoundId,
        candidate_fb: FeedbackScore,
        baseline_fb: FeedbackScore,
    ) -> Result<bool, ConsensusError> {
        let round = self.round_mut(round_id)?;
        if !round.is_open() {
            return Err(ConsensusError::RoundClosed(round_id));
        }
        if candidate_fb.robot_id != baseline_fb.robot_id || candidate_fb.received_at != baseline_fb.received_at {
            return Err(ConsensusError::MismatchedFeedback("robot or time differs".into()));
        }
        if candidate_fb.model_hash != round.candidate.model.version_id || baseline_fb.model_hash != round.baseline.version_id {
            return Err(ConsensusError::MismatchedFeedback("scores name the wrong models".into()));
        }
        if candidate_fb.received_at > round.deadline {
            return Err(ConsensusError::LateFeedback {
                received_at: candidate_fb.received_at,
                deadline: round.deadline,
            });
        }
        if round.candidate_scores.iter().any(|s| s.robot_id == candidate_fb.robot_id) {
            return Err(ConsensusError::DuplicateFeedback(candidate_fb.robot_id));
        }
        round.candidate_scores.push(candidate_fb);
        round.baseline_scores.push(baseline_fb);
        Ok(true)
    }

    pub fn resolve(&mut self, round_id: RoundId, now: u64) -> Result<Decision, ConsensusError> {
        let round = self.round_mut(round_id)?;
        if !round.is_open() {
            return Err(ConsensusError::RoundNotOpen(round_id));
        }
        let reported = round.candidate_scores.len();
        if now < round.deadline && reported < round.expected_reporters.max(1) {
            return Err(ConsensusError::TooEarly {
                round: round_id,
                deadline: round.deadline,
                reported,
                expected: round.expected_reporters,
            });
        }
        let c: Vec<f64> = round.candidate_scores.iter().map(|s| s.score).collect();
        let b: Vec<f64> = round.baseline_scores.iter().map(|s| s.score).collect();
        let decision = decide(&c, &b, round.quorum);
        round.state = decision.outcome;
        round.decision = Some(decision);
        self.open = None;
        Ok(decision)
    }

    /// Builds the next consensual model at the source hub and commits it at
    /// every hub. With `returned` updates (deltas from the candidate), the
    /// new model is their weighted average applied to the candidate.
    pub fn promote(
        &mut self,
        round_id: RoundId,
        network: &mut HubNetwork,
        returned: &[(ModelDelta, f64)],
        now: u64,
    ) -> Result<Promotion, ConsensusError> {
        let round = self.round_mut(round_id)?;
        if round.state != RoundState::Accepted {
            return Err(ConsensusError::NotAccepted(round_id));
        }
        let source = network
            .hub_mut(&round.candidate.source_hub)
            .ok_or_else(|| ModelStoreError::UnknownHub(round.candidate.source_hub.clone()))?;
        let candidate = &round.candidate.model;
        let next = if returned.is_empty() {
            candidate.clone()
        } else {
            let (deltas, weights): (Vec<ModelDelta>, Vec<f64>) = returned.iter().cloned().unzip();
            let folded = federated_average(candidate, &deltas, &weights, now)?;
            source.repo_mut().set_head(&candidate.version_id)?;
            source.repo_mut().commit(folded.params, folded.hyperparams, now)?
        };
        let delta = ModelDelta::between(&round.baseline, &next)?;
        network.adopt_everywhere(&delta, now)?;
        round.update_hash = delta.update_hash;
        Ok(Promotion { version: next, delta })
    }

    /// Returns every hub and robot to the pre-round consensual model.
    pub fn roll_back(&mut self, round_id: RoundId, network: &mut HubNetwork) -> Result<(), ConsensusError> {
        let round = self.round_mut(round_id)?;
        if matches!(round.state, RoundState::Open | RoundState::Accepted) {
            return Err(ConsensusError::RoundNotResolved(round_id));
        }
        network.discard_everywhere()?;
        Ok(())
    }

    /// Appends the signed, encrypted record of a resolved round.
    pub fn notarize<R: RngCore + CryptoRng>(
        &mut self,
        round_id: RoundId,
        chain: &mut Ledger,
        network_key: &NetworkKey,
        signer: &Identity,
        timestamp: u64,
        rng: &mut R,
    ) -> Result<BlockRef, ConsensusError> {
        let round = self.round_mut(round_id)?;
        if round.is_open() || round.decision.is_none() {
            return Err(ConsensusError::RoundNotResolved(round_id));
        }
        if signer.id() != round.candidate.source_robot {
            return Err(ConsensusError::WrongSigner {
                signer: signer.id().to_owned(),
                source_robot: round.candidate.source_robot.clone(),
            });
        }
        let payload = ConsensusPayload::from_round(round).encode();
        let encrypted_payload = encrypt_payload(&payload, network_key, rng);
        let signature = signer.sign(&consensus_signing_message(timestamp, &round.update_hash, &encrypted_payload));
        let tx = Transaction::ModelConsensus {
            timestamp,
            model_update_hash: round.update_hash,
            encrypted_payload,
            signer_id: signer.id().to_owned(),
            signature,
        };
        let at = chain.append_transaction(tx, signer)?;
        round.notarized_at = Some(at);
        Ok(at)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantScore {
    pub robot_id: String,
    pub candidate_score: f64,
    pub baseline_score: f64,
}

/// Plaintext of the encrypted notarization field:
/// count ‖ (id length ‖ id ‖ candidate score ‖ baseline score)* ‖ quorum ‖ decision byte,
/// with 4-byte LE lengths, 8-byte LE integers and IEEE-754 LE scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusPayload {
    pub participants: Vec<ParticipantScore>,
    pub quorum: u64,
    pub decision: RoundState,
}

impl ConsensusPayload {
    pub fn from_round(round: &ConsensusRound) -> Self {
        Self {
            participants: round
                .candidate_scores
                .iter()
                .zip(&round.baseline_scores)
                .map(|(c, b)| ParticipantScore {
                    robot_id: c.robot_id.clone(),
                    candidate_score: c.score,
                    baseline_score: b.score,
                })
                .collect(),
            quorum: round.quorum as u64,
            decision: round.state,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw_u64(self.participants.len() as u64);
        for p in &self.participants {
            enc.str(&p.robot_id).raw_f64(p.candidate_score).raw_f64(p.baseline_score);
        }
        enc.raw_u64(self.quorum).raw(&[self.decision.code()]);
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let n = dec.raw_u64()?;
        if n > bytes.len() as u64 {
            return Err(DecodeError::Invalid(format!("participant count {n}")));
        }
        let mut participants = Vec::with_capacity(n as usize);
        for _ in 0..n {
            participants.push(ParticipantScore {
                robot_id: dec.str()?.to_owned(),
                candidate_score: dec.raw_f64()?,
                baseline_score: dec.raw_f64()?,
            });
        }
        let quorum = dec.raw_u64()?;
        let code = dec.tag()?;
        let decision = RoundState::from_code(code).ok_or(DecodeError::UnknownTag(code))?;
        dec.finish()?;
        Ok(Self {
            participants,
            quorum,
            decision,
        })
    }

    /// Re-runs the decision rule over the embedded scores.
    pub fn recompute(&self) -> Decision {
        let c: Vec<f64> = self.participants.iter().map(|p| p.candidate_score).collect();
        let b: Vec<f64> = self.participants.iter().map(|p| p.baseline_score).collect();
        decide(&c, &b, self.quorum as usize)
    }

    /// Decrypts a notarization transaction's payload.
    pub fn open(tx: &Transaction, key: &NetworkKey) -> Result<Self, ConsensusError> {
        match tx {
            Transaction::ModelConsensus { encrypted_payload, .. } => {
                Ok(Self::decode(&decrypt_payload(encrypted_payload, key)?)?)
            }
            other => Err(ConsensusError::Payload(DecodeError::Invalid(format!(
                "{} carries no consensus payload",
                other.kind()
            )))),
        }
    }
}
