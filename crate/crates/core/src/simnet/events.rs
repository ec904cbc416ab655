use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::consensus::RoundId;
use crate::opal::AggregatedAnswer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    SessionStart,
    QueryIssued,
    AnswerDelivered,
    TrainComplete,
    CandidateAnnounced,
    FeedbackDue,
    RoundResolve,
    PromotionBroadcast,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventPayload {
    Session { robot: String, session: u64, patient: usize },
    Query { robot: String, session: u64, slot: usize },
    Answer { robot: String, session: u64, slot: usize, answer: AggregatedAnswer },
    Train { robot: String },
    Announce { robot: String },
    Feedback { robot: String, round: RoundId },
    Resolve { round: RoundId },
    Broadcast { round: RoundId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub at: u64,
    pub seq: u64,
    pub payload: EventPayload,
}

impl SimEvent {
    pub fn kind(&self) -> EventKind {
        match self.payload {
            EventPayload::Session { .. } => EventKind::SessionStart,
            EventPayload::Query { .. } => EventKind::QueryIssued,
            EventPayload::Answer { .. } => EventKind::AnswerDelivered,
            EventPayload::Train { .. } => EventKind::TrainComplete,
            EventPayload::Announce { .. } => EventKind::CandidateAnnounced,
            EventPayload::Feedback { .. } => EventKind::FeedbackDue,
            EventPayload::Resolve { .. } => EventKind::RoundResolve,
            EventPayload::Broadcast { .. } => EventKind::PromotionBroadcast,
        }
    }
}

/// Pending events keyed by (tick, insertion sequence), a total order.
#[derive(Debug, Default)]
pub struct EventQueue {
    pending: BTreeMap<(u64, u64), EventPayload>,
    next_seq: u64,
    last_popped: Option<(u64, u64)>,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn schedule(&mut self, at: u64, payload: EventPayload) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        let prev = self.pending.insert((at, seq), payload);
        debug_assert!(prev.is_none());
        seq
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        let ((at, seq), payload) = self.pending.pop_first()?;
        assert!(self.last_popped.map_or(true, |last| last < (at, seq)), "event order regressed");
        self.last_popped = Some((at, seq));
        Some(SimEvent { at, seq, payload })
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}
