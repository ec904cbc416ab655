use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Decoder, Digest, Encoder};

/// Content address of a model version.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VersionId(pub Digest);

impl fmt::Display for VersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl fmt::Debug for VersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VersionId({})", &self.0.to_hex()[..12])
    }
}

impl FromStr for VersionId {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(VersionId(s.parse()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub epochs: u32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            rho: 0.95,
            epsilon: 1e-6,
            epochs: 1,
        }
    }
}

impl Hyperparams {
    pub const NAMES: [&'static str; 4] = ["learning_rate", "rho", "epsilon", "epochs"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "learning_rate" => Some(self.learning_rate),
            "rho" => Some(self.rho),
            "epsilon" => Some(self.epsilon),
            "epochs" => Some(self.epochs as f64),
            _ => None,
        }
    }

    pub fn set(&mut self, name: &str, value: f64) -> bool {
        match name {
            "learning_rate" => self.learning_rate = value,
            "rho" => self.rho = value,
            "epsilon" => self.epsilon = value,
            "epochs" => self.epochs = value as u32,
            _ => return false,
        }
        true
    }

    /// Entries of `to` that differ bitwise from `self`.
    pub fn changes_to(&self, to: &Hyperparams) -> BTreeMap<String, f64> {
        Self::NAMES
            .iter()
            .filter_map(|&n| {
                let (a, b) = (self.get(n)?, to.get(n)?);
                (a.to_bits() != b.to_bits()).then(|| (n.to_owned(), b))
            })
            .collect()
    }

    pub(crate) fn encode(&self, enc: &mut Encoder) {
        enc.f64(self.learning_rate)
            .f64(self.rho)
            .f64(self.epsilon)
            .u64(self.epochs as u64);
    }

    pub(crate) fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            learning_rate: dec.f64()?,
            rho: dec.f64()?,
            epsilon: dec.f64()?,
            epochs: u32::try_from(dec.u64()?).map_err(|e| DecodeError::Invalid(e.to_string()))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub version_id: VersionId,
    pub params: Vec<f64>,
    pub hyperparams: Hyperparams,
    pub parent_id: Option<VersionId>,
    pub created_at: u64,
    pub consensual: bool,
}

impl ModelVersion {
    pub fn new(params: Vec<f64>, hyperparams: Hyperparams, parent_id: Option<VersionId>, created_at: u64) -> Self {
        let version_id = Self::compute_id(&params, &hyperparams, parent_id.as_ref());
        Self {
            version_id,
            params,
            hyperparams,
            parent_id,
            created_at,
            consensual: false,
        }
    }

    pub fn compute_id(params: &[f64], hyperparams: &Hyperparams, parent_id: Option<&VersionId>) -> VersionId {
        let mut enc = Encoder::new();
        enc.f64_slice(params);
        hyperparams.encode(&mut enc);
        match parent_id {
            Some(p) => enc.bytes(&[1]).digest(&p.0),
            None => enc.bytes(&[0]),
        };
        VersionId(Digest::of(enc.as_slice()))
    }

    pub fn id_is_consistent(&self) -> bool {
        Self::compute_id(&self.params, &self.hyperparams, self.parent_id.as_ref()) == self.version_id
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// On-disk record. The id is stored and re-derived on load.
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.digest(&self.version_id.0).f64_slice(&self.params);
        self.hyperparams.encode(&mut enc);
        match &self.parent_id {
            Some(p) => enc.bytes(&[1]).digest(&p.0),
            None => enc.bytes(&[0]),
        };
        enc.u64(self.created_at).bytes(&[self.consensual as u8]);
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let version_id = VersionId(dec.digest()?);
        let params = dec.f64_vec()?;
        let hyperparams = Hyperparams::decode(&mut dec)?;
        let parent_id = match dec.bytes()? {
            [0] => None,
            [1] => Some(VersionId(dec.digest()?)),
            other => return Err(DecodeError::Invalid(format!("parent flag {other:?}"))),
        };
        let created_at = dec.u64()?;
        let consensual = match dec.bytes()? {
            [0] => false,
            [1] => true,
            other => return Err(DecodeError::Invalid(format!("consensual flag {other:?}"))),
        };
        dec.finish()?;
        Ok(Self {
            version_id,
            params,
            hyperparams,
            parent_id,
            created_at,
            consensual,
        })
    }
}
