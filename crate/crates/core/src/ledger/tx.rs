use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Decoder, Digest, Encoder};

pub const TAG_QUERY_AUDIT: u8 = 0x01;
pub const TAG_MODEL_CONSENSUS: u8 = 0x02;

/// A ledger entry. Neither variant carries raw query, answer or training data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Transaction {
    QueryAudit {
        pair_hash: Digest,
        querier_id: String,
        timestamp: u64,
    },
    ModelConsensus {
        timestamp: u64,
        model_update_hash: Digest,
        #[serde(with = "hex_bytes")]
        encrypted_payload: Vec<u8>,
        signer_id: String,
        #[serde(with = "hex_bytes")]
        signature: Vec<u8>,
    },
}

impl Transaction {
    pub fn timestamp(&self) -> u64 {
        match self {
            Transaction::QueryAudit { timestamp, .. }
            | Transaction::ModelConsensus { timestamp, .. } => *timestamp,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Transaction::QueryAudit { .. } => "QueryAudit",
            Transaction::ModelConsensus { .. } => "ModelConsensus",
        }
    }

    pub fn canonical(&self) -> Vec<u8> {
        match self {
            Transaction::QueryAudit {
                pair_hash,
                querier_id,
                timestamp,
            } => {
                let mut enc = Encoder::with_tag(TAG_QUERY_AUDIT);
                enc.digest(pair_hash).str(querier_id).u64(*timestamp);
                enc.finish()
            }
            Transaction::ModelConsensus {
                timestamp,
                model_update_hash,
                encrypted_payload,
                signer_id,
                signature,
            } => {
                let mut enc = Encoder::with_tag(TAG_MODEL_CONSENSUS);
                enc.u64(*timestamp)
                    .digest(model_update_hash)
                    .bytes(encrypted_payload)
                    .str(signer_id)
                    .bytes(signature);
                enc.finish()
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let tx = match dec.tag()? {
            TAG_QUERY_AUDIT => Transaction::QueryAudit {
                pair_hash: dec.digest()?,
                querier_id: dec.str()?.to_owned(),
                timestamp: dec.u64()?,
            },
            TAG_MODEL_CONSENSUS => Transaction::ModelConsensus {
                timestamp: dec.u64()?,
                model_update_hash: dec.digest()?,
                encrypted_payload: dec.bytes()?.to_vec(),
                signer_id: dec.str()?.to_owned(),
                signature: dec.bytes()?.to_vec(),
            },
            other => return Err(DecodeError::UnknownTag(other)),
        };
        dec.finish()?;
        Ok(tx)
    }

    pub fn hash(&self) -> Digest {
        Digest::of(&self.canonical())
    }
}

/// Bytes covered by a ModelConsensus signature: timestamp ‖ update hash ‖ payload.
pub fn consensus_signing_message(
    timestamp: u64,
    model_update_hash: &Digest,
    encrypted_payload: &[u8],
) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.u64(timestamp)
        .digest(model_update_hash)
        .bytes(encrypted_payload);
    enc.finish()
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}
