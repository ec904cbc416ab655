use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SimError, SimOutcome};
use crate::audit::{verify_pair, AuditedPair, PairStore};
use crate::codec::Digest;
use crate::consensus::{ConsensusPayload, RoundState};
use crate::ledger::{
    consensus_signing_message, decode_frames, validate_encoded, verify, AccessPolicy, BlockRef, Ledger, NetworkKey,
    PublicKey, Transaction, ValidationReport,
};
use crate::modelstore::VersionId;

pub const LEDGER_FILE: &str = "ledger.bin";
pub const REPORT_FILE: &str = "report.json";
pub const IDENTITIES_FILE: &str = "identities.json";
pub const KEY_FILE: &str = "network.key";
pub const CONFIG_FILE: &str = "config.toml";
pub const PAIRS_DIR: &str = "pairs";
pub const HUBS_DIR: &str = "hubs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub ok: bool,
    pub blocks: usize,
    pub first_broken: Option<u64>,
    pub tip: Digest,
}

impl Default for LedgerSummary {
    fn default() -> Self {
        Self {
            ok: false,
            blocks: 0,
            first_broken: None,
            tip: Digest::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_id: u64,
    pub source_hub: String,
    pub source_robot: String,
    pub opened_at: u64,
    pub deadline: u64,
    pub baseline_id: VersionId,
    pub candidate_id: VersionId,
    pub locked_score: f64,
    pub reported: usize,
    pub late: usize,
    pub quorum: usize,
    pub candidate_mean: Option<f64>,
    pub baseline_mean: Option<f64>,
    pub decision: RoundState,
    pub consensual_after: VersionId,
    pub update_hash: Digest,
    pub notarized_at: BlockRef,
    /// Held-out loss of the consensual model once the round has closed.
    pub heldout_mse: f64,
}

/// Outcome of one scenario run. Field order is the serialization order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub hubs: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub robots: usize,
    pub sessions: u64,
    pub queries_issued: u64,
    pub answers_delivered: u64,
    pub answers_suppressed: u64,
    pub query_audit_txs: u64,
    pub model_consensus_txs: u64,
    pub verifiable_pairs: u64,
    pub rounds: Vec<RoundReport>,
    pub promotions: u64,
    pub rollbacks: u64,
    pub late_feedback: u64,
    pub initial_heldout_mse: f64,
    /// Held-out loss of the consensual model after each round.
    pub loss_trajectory: Vec<f64>,
    pub final_heldout_mse: f64,
    /// Promotions whose held-out loss exceeds the previous consensual model's.
    pub monotonicity_violations: u64,
    pub final_consensual: Option<VersionId>,
    pub ledger: LedgerSummary,
    pub events: BTreeMap<String, u64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

pub fn emit_report(report: &RunReport, path: &Path) -> Result<(), SimError> {
    fs::write(path, report.to_json())?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IdentityFile {
    policy: AccessPolicy,
    directory: BTreeMap<String, PublicKey>,
}

/// Writes the run's persistent artifacts under `dir`:
/// `ledger.bin`, `pairs/<party>/`, `hubs/<hub>/repo/`, `identities.json`,
/// `network.key`, `config.toml` and `report.json`.
pub fn write_artifacts(outcome: &SimOutcome, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    outcome.ledger.save(&dir.join(LEDGER_FILE)).map_err(|e| SimError::Io(e.to_string()))?;
    for (party, store) in &outcome.stores {
        let mut disk = PairStore::open(party.clone(), &dir.join(PAIRS_DIR).join(party)).map_err(|e| SimError::Io(e.to_string()))?;
        for pair in store.iter() {
            let hash = disk.record_pair(&pair.query, &pair.answer).map_err(|e| SimError::Io(e.to_string()))?;
            if let Some(at) = pair.ledger_ref {
                disk.attach_ref(&hash, at).map_err(|e| SimError::Io(e.to_string()))?;
            }
        }
    }
    for hub in outcome.network.hubs() {
        hub.repo()
            .save(&dir.join(HUBS_DIR).join(hub.id()).join("repo"))
            .map_err(|e| SimError::Io(e.to_string()))?;
    }
    let ids = IdentityFile {
        policy: outcome.ledger.policy().clone(),
        directory: outcome.ledger.directory().clone(),
    };
    fs::write(dir.join(IDENTITIES_FILE), serde_json::to_string_pretty(&ids).expect("identities serialize"))?;
    fs::write(dir.join(KEY_FILE), outcome.network_key.to_hex())?;
    fs::write(dir.join(CONFIG_FILE), outcome.config.to_toml())?;
    emit_report(&outcome.report, &dir.join(REPORT_FILE))
}

fn require(path: &Path) -> Result<(), SimError> {
    if path.exists() {
        Ok(())
    } else {
        Err(SimError::MissingArtifacts(path.to_path_buf()))
    }
}

fn read_report(dir: &Path) -> Result<RunReport, SimError> {
    let path = dir.join(REPORT_FILE);
    require(&path)?;
    serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| SimError::Parse(format!("{}: {e}", path.display())))
}

fn read_identities(dir: &Path) -> Result<IdentityFile, SimError> {
    let path = dir.join(IDENTITIES_FILE);
    require(&path)?;
    serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| SimError::Parse(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub chain: Option<ValidationReport>,
    pub pairs_checked: usize,
    /// Pair hashes (or file names, for unreadable files) that failed verification.
    pub failed_pairs: Vec<String>,
    pub query_audit_txs: usize,
    /// Audit transactions with no stored pair.
    pub unmatched_audit_txs: usize,
    pub consensus_txs: usize,
    /// Blocks whose consensus signature does not verify.
    pub bad_signatures: Vec<u64>,
    pub payloads_checked: usize,
    /// Blocks whose decrypted payload disagrees with its own decision or the report.
    pub payload_mismatches: Vec<u64>,
    pub payload_checks_skipped: bool,
    pub notices: Vec<String>,
}

impl VerificationSummary {
    pub fn all_passed(&self) -> bool {
        self.chain.as_ref().is_some_and(|c| c.ok)
            && self.failed_pairs.is_empty()
            && self.unmatched_audit_txs == 0
            && self.bad_signatures.is_empty()
            && self.payload_mismatches.is_empty()
    }
}

fn stored_pairs(dir: &Path) -> Result<Vec<(String, Result<AuditedPair, String>)>, SimError> {
    let root = dir.join(PAIRS_DIR);
    require(&root)?;
    let mut files = Vec::new();
    let mut parties: Vec<_> = fs::read_dir(&root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    parties.sort();
    for party in parties.into_iter().filter(|p| p.is_dir()) {
        let mut entries: Vec<_> = fs::read_dir(&party)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for path in entries.into_iter().filter(|p| p.extension().is_some_and(|x| x == "json")) {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let parsed = fs::read_to_string(&path)
                .map_err(|e| e.to_string())
                .and_then(|t| serde_json::from_str::<AuditedPair>(&t).map_err(|e| e.to_string()));
            files.push((name, parsed));
        }
    }
    Ok(files)
}

/// Re-validates the chain, re-verifies every stored pair and, given the
/// network key, re-checks every consensus decision from its payload.
pub fn replay(dir: &Path, key: Option<&NetworkKey>) -> Result<VerificationSummary, SimError> {
    let ledger_path = dir.join(LEDGER_FILE);
    require(&ledger_path)?;
    let ids = read_identities(dir)?;
    let report = read_report(dir)?;
    let bytes = fs::read(&ledger_path)?;
    let mut summary = VerificationSummary {
        chain: Some(validate_encoded(&bytes)),
        ..Default::default()
    };
    let blocks: Vec<_> = decode_frames(&bytes).into_iter().map_while(Result::ok).collect();
    let chain = Ledger::from_blocks(AccessPolicy::public(), blocks);
    let view = chain.view("replay").map_err(|e| SimError::Parse(e.to_string()))?;

    let mut stored = BTreeMap::new();
    for (name, parsed) in stored_pairs(dir)? {
        summary.pairs_checked += 1;
        match parsed {
            Ok(pair) => {
                if !verify_pair(&view, &pair).unwrap_or(false) {
                    summary.failed_pairs.push(pair.pair_hash.to_hex());
                }
                stored.insert(pair.pair_hash, pair);
            }
            Err(e) => {
                summary.failed_pairs.push(name.clone());
                summary.notices.push(format!("pair file {name} unreadable: {e}"));
            }
        }
    }

    let rounds: BTreeMap<BlockRef, _> = report.rounds.iter().map(|r| (r.notarized_at, r)).collect();
    if key.is_none() {
        summary.payload_checks_skipped = true;
        summary.notices.push("no network key given; consensus payload checks skipped".into());
    }
    for block in view.blocks() {
        for (i, tx) in block.transactions.iter().enumerate() {
            let at = BlockRef {
                block: block.index,
                tx: i as u32,
            };
            match tx {
                Transaction::QueryAudit { pair_hash, .. } => {
                    summary.query_audit_txs += 1;
                    if !stored.contains_key(pair_hash) {
                        summary.unmatched_audit_txs += 1;
                    }
                }
                Transaction::ModelConsensus {
                    timestamp,
                    model_update_hash,
                    encrypted_payload,
                    signer_id,
                    signature,
                } => {
                    summary.consensus_txs += 1;
                    let msg = consensus_signing_message(*timestamp, model_update_hash, encrypted_payload);
                    let signed = ids.directory.get(signer_id).is_some_and(|pk| verify(&msg, signature, pk));
                    if !signed {
                        summary.bad_signatures.push(block.index);
                    }
                    let Some(key) = key else { continue };
                    summary.payloads_checked += 1;
                    let consistent = match ConsensusPayload::open(tx, key) {
                        Ok(p) => {
                            let recomputed = p.recompute().outcome;
                            let reported = rounds.get(&at);
                            recomputed == p.decision
                                && reported.is_some_and(|r| r.decision == p.decision && r.update_hash == *model_update_hash)
                        }
                        Err(e) => {
                            summary.notices.push(format!("block {}: {e}", block.index));
                            false
                        }
                    };
                    if !consistent {
                        summary.payload_mismatches.push(block.index);
                    }
                }
            }
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundInspection {
    pub round: RoundReport,
    pub transaction: Option<Transaction>,
    pub payload: Option<ConsensusPayload>,
    pub recomputed_decision: Option<RoundState>,
}

/// Looks up a round in the report and its notarization on the chain.
pub fn inspect_round(dir: &Path, round_id: u64, key: Option<&NetworkKey>) -> Result<RoundInspection, SimError> {
    let report = read_report(dir)?;
    let round = report
        .rounds
        .iter()
        .find(|r| r.round_id == round_id)
        .cloned()
        .ok_or(SimError::UnknownRound(round_id))?;
    let ledger_path = dir.join(LEDGER_FILE);
    require(&ledger_path)?;
    let blocks: Vec<_> = decode_frames(&fs::read(&ledger_path)?).into_iter().map_while(Result::ok).collect();
    let transaction = blocks
        .get(round.notarized_at.block as usize)
        .and_then(|b| b.transactions.get(round.notarized_at.tx as usize))
        .cloned();
    let payload = match (key, &transaction) {
        (Some(key), Some(tx)) => Some(ConsensusPayload::open(tx, key).map_err(|e| SimError::Parse(e.to_string()))?),
        _ => None,
    };
    Ok(RoundInspection {
        recomputed_decision: payload.as_ref().map(|p| p.recompute().outcome),
        round,
        transaction,
        payload,
    })
}

/// Reads a hex network key file.
pub fn read_key(path: &Path) -> Result<NetworkKey, SimError> {
    let text = fs::read_to_string(path)?;
    text.trim().parse().map_err(|e| SimError::Parse(format!("{}: {e:?}", path.display())))
}

/// Fails with `KeyRequired` when no key is available.
pub fn require_key(key: Option<NetworkKey>) -> Result<NetworkKey, SimError> {
    key.ok_or(SimError::KeyRequired)
}
