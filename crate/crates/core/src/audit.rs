//! Query/answer auditing: the data service keeps each full pair, the ledger
//! only ever sees its hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Digest;
use crate::ledger::{BlockRef, Identity, Ledger, LedgerError, LedgerView, Transaction};
use crate::opal::{AggregatedAnswer, Query};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("answer is for query {answer} but query is {query}")]
    MismatchedIds { query: String, answer: String },
    #[error("no transaction at block {}, tx {}", .0.block, .0.tx)]
    UnknownBlockRef(BlockRef),
    #[error("pair {0} has not been submitted to the ledger")]
    NotSubmitted(Digest),
    #[error("no stored pair with hash {0}")]
    UnknownPair(Digest),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("pair store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("pair store parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditedPair {
    pub query: Query,
    pub answer: AggregatedAnswer,
    pub pair_hash: Digest,
    pub stored_at: String,
    pub ledger_ref: Option<BlockRef>,
}

/// H(canonical(query) ‖ canonical(answer)).
pub fn pair_hash(query: &Query, answer: &AggregatedAnswer) -> Digest {
    let mut bytes = query.canonical();
    bytes.extend_from_slice(&answer.canonical());
    Digest::of(&bytes)
}

/// Content-addressed store of audited pairs held by one data-service party.
/// With a directory, every pair is mirrored to `<hash>.json`.
#[derive(Debug)]
pub struct PairStore {
    party_id: String,
    dir: Option<PathBuf>,
    pairs: BTreeMap<Digest, AuditedPair>,
}

impl PairStore {
    pub fn in_memory(party_id: impl Into<String>) -> Self {
        Self {
            party_id: party_id.into(),
            dir: None,
            pairs: BTreeMap::new(),
        }
    }

    /// Opens (creating if needed) a store directory and loads what is there.
    pub fn open(party_id: impl Into<String>, dir: &Path) -> Result<Self, AuditError> {
        fs::create_dir_all(dir)?;
        let mut pairs = BTreeMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for path in entries {
            let text = fs::read_to_string(&path)?;
            let pair: AuditedPair = serde_json::from_str(&text).map_err(|e| AuditError::Parse {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            pairs.insert(pair.pair_hash, pair);
        }
        Ok(Self {
            party_id: party_id.into(),
            dir: Some(dir.to_path_buf()),
            pairs,
        })
    }

    pub fn party_id(&self) -> &str {
        &self.party_id
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, hash: &Digest) -> Option<&AuditedPair> {
        self.pairs.get(hash)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AuditedPair> {
        self.pairs.values()
    }

    pub fn path_for(&self, hash: &Digest) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.json", hash.to_hex())))
    }

    fn persist(&self, pair: &AuditedPair) -> Result<(), AuditError> {
        if let Some(path) = self.path_for(&pair.pair_hash) {
            let text = serde_json::to_string_pretty(pair).expect("audited pair serializes");
            fs::write(path, text)?;
        }
        Ok(())
    }

    pub fn record_pair(&mut self, query: &Query, answer: &AggregatedAnswer) -> Result<Digest, AuditError> {
        if query.query_id != answer.query_id {
            return Err(AuditError::MismatchedIds {
                query: query.query_id.clone(),
                answer: answer.query_id.clone(),
            });
        }
        let hash = pair_hash(query, answer);
        if !self.pairs.contains_key(&hash) {
            let pair = AuditedPair {
                query: query.clone(),
                answer: answer.clone(),
                pair_hash: hash,
                stored_at: self.party_id.clone(),
                ledger_ref: None,
            };
            self.persist(&pair)?;
            self.pairs.insert(hash, pair);
        }
        Ok(hash)
    }

    pub fn attach_ref(&mut self, hash: &Digest, at: BlockRef) -> Result<&AuditedPair, AuditError> {
        let pair = self.pairs.get_mut(hash).ok_or(AuditError::UnknownPair(*hash))?;
        pair.ledger_ref = Some(at);
        let pair = pair.clone();
        self.persist(&pair)?;
        Ok(&self.pairs[hash])
    }
}

/// Appends a QueryAudit transaction. `submitter` needs write permission;
/// `querier_id` names who asked.
pub fn submit_audit_tx(
    chain: &mut Ledger,
    pair_hash: Digest,
    submitter: &Identity,
    querier_id: &str,
    t: u64,
) -> Result<BlockRef, AuditError> {
    let tx = Transaction::QueryAudit {
        pair_hash,
        querier_id: querier_id.to_owned(),
        timestamp: t,
    };
    Ok(chain.append_transaction(tx, submitter)?)
}

/// Stores the pair, notarizes its hash, and links the two. The answer may be
/// released only after this returns.
pub fn record_and_submit(
    store: &mut PairStore,
    chain: &mut Ledger,
    query: &Query,
    answer: &AggregatedAnswer,
    submitter: &Identity,
    t: u64,
) -> Result<AuditedPair, AuditError> {
    let hash = store.record_pair(query, answer)?;
    let at = submit_audit_tx(chain, hash, submitter, &query.requester_id, t)?;
    Ok(store.attach_ref(&hash, at)?.clone())
}

/// True iff the candidate's recomputed pair hash equals the hash notarized at
/// its ledger reference.
pub fn verify_pair(chain: &LedgerView<'_>, candidate: &AuditedPair) -> Result<bool, AuditError> {
    let at = candidate.ledger_ref.ok_or(AuditError::NotSubmitted(candidate.pair_hash))?;
    let tx = chain.transaction(at).map_err(|_| AuditError::UnknownBlockRef(at))?;
    let Transaction::QueryAudit { pair_hash: on_chain, .. } = tx else {
        return Ok(false);
    };
    let recomputed = pair_hash(&candidate.query, &candidate.answer);
    Ok(recomputed == *on_chain && candidate.pair_hash == *on_chain)
}
