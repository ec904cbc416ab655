//! Append-only hash-chained ledger with permissioned access.
//!
//! Every append seals exactly one transaction into a new block. Blocks link
//! through `prev_hash`, and `block_hash` commits to the block's index,
//! predecessor, timestamp and the canonical bytes of its transactions.

mod crypto;
mod tx;

pub use crypto::{
    decrypt_payload, encrypt_payload, sign, verify, CryptoError, Identity, NetworkKey, PublicIdentity,
    PublicKey, SIGNATURE_LEN,
};
pub use tx::{consensus_signing_message, Transaction, TAG_MODEL_CONSENSUS, TAG_QUERY_AUDIT};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Digest, Encoder};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("{caller} may not {action} this ledger")]
    PermissionDenied { caller: String, action: &'static str },
    #[error("signature does not verify for signer {0}")]
    InvalidSignature(String),
    #[error("identity {0} is not registered")]
    UnknownIdentity(String),
    #[error("no transaction at block {}, tx {}", .0.block, .0.tx)]
    UnknownBlockRef(BlockRef),
    #[error("timestamp {got} precedes last block timestamp {last}")]
    NonMonotonicTimestamp { last: u64, got: u64 },
    #[error("ledger file: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger decode: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PermissionMode {
    Public,
    SemiPrivate,
    Private,
}

/// Who may read and who may append.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccessPolicy {
    pub mode: PermissionMode,
    /// Appenders in SemiPrivate mode.
    pub writers: BTreeSet<String>,
    /// Readers and appenders in Private mode.
    pub members: BTreeSet<String>,
}

impl AccessPolicy {
    pub fn public() -> Self {
        Self {
            mode: PermissionMode::Public,
            writers: BTreeSet::new(),
            members: BTreeSet::new(),
        }
    }

    pub fn semi_private<I: IntoIterator<Item = S>, S: Into<String>>(writers: I) -> Self {
        Self {
            mode: PermissionMode::SemiPrivate,
            writers: writers.into_iter().map(Into::into).collect(),
            members: BTreeSet::new(),
        }
    }

    pub fn private<I: IntoIterator<Item = S>, S: Into<String>>(members: I) -> Self {
        Self {
            mode: PermissionMode::Private,
            writers: BTreeSet::new(),
            members: members.into_iter().map(Into::into).collect(),
        }
    }

    pub fn can_read(&self, id: &str) -> bool {
        match self.mode {
            PermissionMode::Public | PermissionMode::SemiPrivate => true,
            PermissionMode::Private => self.members.contains(id),
        }
    }

    pub fn can_write(&self, id: &str) -> bool {
        match self.mode {
            PermissionMode::Public => true,
            PermissionMode::SemiPrivate => self.writers.contains(id),
            PermissionMode::Private => self.members.contains(id),
        }
    }
}

/// Locates one transaction on the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockRef {
    pub block: u64,
    pub tx: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest,
    pub timestamp: u64,
    pub transactions: Vec<Transaction>,
    pub block_hash: Digest,
}

impl Block {
    pub fn genesis() -> Self {
        Self::seal(0, Digest::ZERO, 0, Vec::new())
    }

    pub fn seal(index: u64, prev_hash: Digest, timestamp: u64, transactions: Vec<Transaction>) -> Self {
        let mut block = Block {
            index,
            prev_hash,
            timestamp,
            transactions,
            block_hash: Digest::ZERO,
        };
        block.block_hash = block.compute_hash();
        block
    }

    fn preimage(&self) -> Encoder {
        let mut enc = Encoder::new();
        enc.u64(self.index)
            .digest(&self.prev_hash)
            .u64(self.timestamp)
            .u64(self.transactions.len() as u64);
        for tx in &self.transactions {
            enc.bytes(&tx.canonical());
        }
        enc
    }

    pub fn compute_hash(&self) -> Digest {
        Digest::of(self.preimage().as_slice())
    }

    /// Persisted record: the hash preimage followed by the stored block hash.
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = self.preimage();
        enc.digest(&self.block_hash);
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let index = dec.u64()?;
        let prev_hash = dec.digest()?;
        let timestamp = dec.u64()?;
        let count = dec.u64()?;
        // Each transaction needs at least a 4-byte length prefix.
        if count > (bytes.len() / 4) as u64 {
            return Err(DecodeError::Invalid(format!("transaction count {count}")));
        }
        let transactions = (0..count)
            .map(|_| Transaction::decode(dec.bytes()?))
            .collect::<Result<Vec<_>, _>>()?;
        let block_hash = dec.digest()?;
        dec.finish()?;
        Ok(Block {
            index,
            prev_hash,
            timestamp,
            transactions,
            block_hash,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub blocks_checked: usize,
    pub first_broken: Option<u64>,
    pub reason: Option<String>,
}

impl ValidationReport {
    fn clean(blocks_checked: usize) -> Self {
        Self {
            ok: true,
            blocks_checked,
            first_broken: None,
            reason: None,
        }
    }

    fn broken(blocks_checked: usize, index: u64, reason: String) -> Self {
        Self {
            ok: false,
            blocks_checked,
            first_broken: Some(index),
            reason: Some(reason),
        }
    }
}

/// Checks indices, hashes, links and timestamp order; reports the earliest break.
pub fn validate_blocks(blocks: &[Block]) -> ValidationReport {
    if blocks.is_empty() {
        return ValidationReport::broken(0, 0, "missing genesis block".into());
    }
    for (pos, block) in blocks.iter().enumerate() {
        let pos = pos as u64;
        if block.index != pos {
            return ValidationReport::broken(blocks.len(), pos, format!("index field is {}", block.index));
        }
        if block.compute_hash() != block.block_hash {
            return ValidationReport::broken(blocks.len(), pos, "block hash does not recompute".into());
        }
        let expected_prev = if pos == 0 {
            Digest::ZERO
        } else {
            blocks[pos as usize - 1].block_hash
        };
        if block.prev_hash != expected_prev {
            return ValidationReport::broken(blocks.len(), pos, "prev_hash link mismatch".into());
        }
        if pos > 0 && block.timestamp < blocks[pos as usize - 1].timestamp {
            return ValidationReport::broken(blocks.len(), pos, "timestamp decreases".into());
        }
    }
    ValidationReport::clean(blocks.len())
}

/// Frames blocks as 4-byte LE length ‖ block record.
pub fn encode_blocks(blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::new();
    for block in blocks {
        let rec = block.encode();
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

/// Splits a ledger file into per-block decode results. A frame that cannot
/// be split ends the list with an error entry.
pub fn decode_frames(bytes: &[u8]) -> Vec<Result<Block, DecodeError>> {
    let mut out = Vec::new();
    let mut dec = Decoder::new(bytes);
    while !dec.is_empty() {
        match dec.bytes() {
            Ok(frame) => out.push(Block::decode(frame)),
            Err(e) => {
                out.push(Err(e));
                break;
            }
        }
    }
    out
}

/// Validates a serialized ledger. Undecodable frames count as broken blocks.
pub fn validate_encoded(bytes: &[u8]) -> ValidationReport {
    let frames = decode_frames(bytes);
    let mut blocks = Vec::with_capacity(frames.len());
    for (i, frame) in frames.into_iter().enumerate() {
        match frame {
            Ok(b) => blocks.push(b),
            Err(e) => {
                let partial = validate_blocks(&blocks);
                if !partial.ok && !blocks.is_empty() {
                    return partial;
                }
                return ValidationReport::broken(i + 1, i as u64, format!("undecodable block: {e}"));
            }
        }
    }
    validate_blocks(&blocks)
}

pub fn load_blocks(path: &Path) -> Result<Vec<Block>, LedgerError> {
    let bytes = fs::read(path)?;
    Ok(decode_frames(&bytes).into_iter().collect::<Result<Vec<_>, _>>()?)
}

/// Single logical chain with an exclusive writer. Readers go through [`Ledger::view`].
#[derive(Debug, Clone)]
pub struct Ledger {
    policy: AccessPolicy,
    directory: BTreeMap<String, PublicKey>,
    blocks: Vec<Block>,
}

impl Ledger {
    pub fn new(policy: AccessPolicy) -> Self {
        Self {
            policy,
            directory: BTreeMap::new(),
            blocks: vec![Block::genesis()],
        }
    }

    /// Rebuilds a ledger from persisted blocks. Chain validity is not checked here.
    pub fn from_blocks(policy: AccessPolicy, blocks: Vec<Block>) -> Self {
        Self {
            policy,
            directory: BTreeMap::new(),
            blocks,
        }
    }

    pub fn policy(&self) -> &AccessPolicy {
        &self.policy
    }

    pub fn register_identity(&mut self, identity: PublicIdentity) {
        self.directory.insert(identity.id, identity.public_key);
    }

    pub fn public_key(&self, id: &str) -> Option<&PublicKey> {
        self.directory.get(id)
    }

    pub fn directory(&self) -> &BTreeMap<String, PublicKey> {
        &self.directory
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip_hash(&self) -> Digest {
        self.blocks.last().map(|b| b.block_hash).unwrap_or(Digest::ZERO)
    }

    pub fn append_transaction(&mut self, tx: Transaction, caller: &Identity) -> Result<BlockRef, LedgerError> {
        if !self.policy.can_write(caller.id()) {
            return Err(LedgerError::PermissionDenied {
                caller: caller.id().to_owned(),
                action: "append to",
            });
        }
        if let Transaction::ModelConsensus {
            timestamp,
            model_update_hash,
            encrypted_payload,
            signer_id,
            signature,
        } = &tx
        {
            let key = self
                .directory
                .get(signer_id)
                .ok_or_else(|| LedgerError::UnknownIdentity(signer_id.clone()))?;
            let msg = consensus_signing_message(*timestamp, model_update_hash, encrypted_payload);
            if !verify(&msg, signature, key) {
                return Err(LedgerError::InvalidSignature(signer_id.clone()));
            }
        }
        let last = self.blocks.last().expect("ledger always holds genesis");
        if tx.timestamp() < last.timestamp {
            return Err(LedgerError::NonMonotonicTimestamp {
                last: last.timestamp,
                got: tx.timestamp(),
            });
        }
        let block = Block::seal(last.index + 1, last.block_hash, tx.timestamp(), vec![tx]);
        let index = block.index;
        self.blocks.push(block);
        Ok(BlockRef { block: index, tx: 0 })
    }

    /// Read access for `reader`, refused for non-members of a private ledger.
    pub fn view(&self, reader: &str) -> Result<LedgerView<'_>, LedgerError> {
        if !self.policy.can_read(reader) {
            return Err(LedgerError::PermissionDenied {
                caller: reader.to_owned(),
                action: "read",
            });
        }
        Ok(LedgerView {
            blocks: &self.blocks,
            directory: &self.directory,
        })
    }

    pub fn validate_chain(&self) -> ValidationReport {
        validate_blocks(&self.blocks)
    }

    pub fn save(&self, path: &Path) -> Result<(), LedgerError> {
        let mut file = fs::File::create(path)?;
        file.write_all(&encode_blocks(&self.blocks))?;
        file.sync_all()?;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn blocks_mut(&mut self) -> &mut Vec<Block> {
        &mut self.blocks
    }
}

/// Permission-checked read handle.
#[derive(Debug, Clone, Copy)]
pub struct LedgerView<'a> {
    blocks: &'a [Block],
    directory: &'a BTreeMap<String, PublicKey>,
}

impl<'a> LedgerView<'a> {
    pub fn blocks(&self) -> &'a [Block] {
        self.blocks
    }

    pub fn block(&self, index: u64) -> Option<&'a Block> {
        self.blocks.get(usize::try_from(index).ok()?)
    }

    pub fn transaction(&self, at: BlockRef) -> Result<&'a Transaction, LedgerError> {
        self.block(at.block)
            .and_then(|b| b.transactions.get(at.tx as usize))
            .ok_or(LedgerError::UnknownBlockRef(at))
    }

    pub fn public_key(&self, id: &str) -> Option<&'a PublicKey> {
        self.directory.get(id)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_blocks(self.blocks)
    }
}
