use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Hyperparams, ModelStoreError, ModelVersion, VersionId};
use crate::codec::{DecodeError, Decoder, Digest, Encoder};

/// Dense difference between two versions.
///
/// `param_diff[i]` is the rounded difference `to[i] - from[i]`. Rounding can
/// make `from[i] + param_diff[i]` miss `to[i]` by an ulp (or more under
/// cancellation), so `exact_patch` lists the coordinates where that happens
/// together with their exact target values. Applying diff then patch
/// reproduces the target bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDelta {
    pub from_id: VersionId,
    pub to_id: VersionId,
    pub to_parent: Option<VersionId>,
    pub param_diff: Vec<f64>,
    pub exact_patch: Vec<(u32, f64)>,
    pub hyper_diff: BTreeMap<String, f64>,
    pub update_hash: Digest,
}

impl ModelDelta {
    pub fn between(from: &ModelVersion, to: &ModelVersion) -> Result<Self, ModelStoreError> {
        if from.dim() != to.dim() {
            return Err(ModelStoreError::DimensionMismatch {
                expected: from.dim(),
                got: to.dim(),
            });
        }
        let param_diff: Vec<f64> = to.params.iter().zip(&from.params).map(|(t, f)| t - f).collect();
        let exact_patch = from
            .params
            .iter()
            .zip(&param_diff)
            .zip(&to.params)
            .enumerate()
            .filter(|(_, ((f, d), t))| (*f + *d).to_bits() != t.to_bits())
            .map(|(i, (_, t))| (i as u32, *t))
            .collect();
        let mut delta = ModelDelta {
            from_id: from.version_id,
            to_id: to.version_id,
            to_parent: to.parent_id,
            param_diff,
            exact_patch,
            hyper_diff: from.hyperparams.changes_to(&to.hyperparams),
            update_hash: Digest::ZERO,
        };
        delta.update_hash = Digest::of(&delta.body());
        Ok(delta)
    }

    fn body(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.digest(&self.from_id.0).digest(&self.to_id.0);
        match &self.to_parent {
            Some(p) => enc.bytes(&[1]).digest(&p.0),
            None => enc.bytes(&[0]),
        };
        enc.f64_slice(&self.param_diff);
        let mut patch = Encoder::new();
        patch.raw_u64(self.exact_patch.len() as u64);
        for (i, v) in &self.exact_patch {
            patch.raw_u64(*i as u64).raw_f64(*v);
        }
        enc.bytes(patch.as_slice());
        enc.u64(self.hyper_diff.len() as u64);
        for (name, v) in &self.hyper_diff {
            enc.str(name).f64(*v);
        }
        enc.finish()
    }

    pub fn recompute_hash(&self) -> Digest {
        Digest::of(&self.body())
    }

    /// Body followed by the update hash.
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(&self.body()).digest(&self.update_hash);
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut outer = Decoder::new(bytes);
        let body = outer.bytes()?;
        let update_hash = outer.digest()?;
        outer.finish()?;

        let mut dec = Decoder::new(body);
        let from_id = VersionId(dec.digest()?);
        let to_id = VersionId(dec.digest()?);
        let to_parent = match dec.bytes()? {
            [0] => None,
            [1] => Some(VersionId(dec.digest()?)),
            other => return Err(DecodeError::Invalid(format!("parent flag {other:?}"))),
        };
        let param_diff = dec.f64_vec()?;
        let mut patch = Decoder::new(dec.bytes()?);
        let n = patch.raw_u64()?;
        let mut exact_patch = Vec::new();
        for _ in 0..n {
            let i = u32::try_from(patch.raw_u64()?).map_err(|e| DecodeError::Invalid(e.to_string()))?;
            exact_patch.push((i, patch.raw_f64()?));
        }
        patch.finish()?;
        let n = dec.u64()?;
        let mut hyper_diff = BTreeMap::new();
        for _ in 0..n {
            let name = dec.str()?.to_owned();
            hyper_diff.insert(name, dec.f64()?);
        }
        dec.finish()?;
        Ok(Self {
            from_id,
            to_id,
            to_parent,
            param_diff,
            exact_patch,
            hyper_diff,
            update_hash,
        })
    }

    pub fn dim(&self) -> usize {
        self.param_diff.len()
    }

    pub fn apply_to_params(&self, params: &[f64]) -> Result<Vec<f64>, ModelStoreError> {
        if params.len() != self.param_diff.len() {
            return Err(ModelStoreError::DimensionMismatch {
                expected: self.param_diff.len(),
                got: params.len(),
            });
        }
        let mut out: Vec<f64> = params.iter().zip(&self.param_diff).map(|(p, d)| p + d).collect();
        for &(i, v) in &self.exact_patch {
            let slot = out.get_mut(i as usize).ok_or(ModelStoreError::DimensionMismatch {
                expected: params.len(),
                got: i as usize + 1,
            })?;
            *slot = v;
        }
        Ok(out)
    }

    pub fn apply_to_hyperparams(&self, base: &Hyperparams) -> Hyperparams {
        let mut out = *base;
        for (name, v) in &self.hyper_diff {
            out.set(name, *v);
        }
        out
    }

    /// Rebuilds the target version from `base` and checks its content address.
    pub fn reconstruct(&self, base: &ModelVersion, created_at: u64) -> Result<ModelVersion, ModelStoreError> {
        let params = apply_delta(base, self)?;
        let hyper = self.apply_to_hyperparams(&base.hyperparams);
        let v = ModelVersion::new(params, hyper, self.to_parent, created_at);
        if v.version_id != self.to_id {
            return Err(ModelStoreError::IntegrityMismatch {
                expected: self.to_id,
                computed: v.version_id,
            });
        }
        Ok(v)
    }
}

/// Applies `delta` to `base`; the base must be the delta's source version.
pub fn apply_delta(base: &ModelVersion, delta: &ModelDelta) -> Result<Vec<f64>, ModelStoreError> {
    if base.version_id != delta.from_id {
        return Err(ModelStoreError::StaleBase {
            expected: delta.from_id,
            found: Some(base.version_id),
        });
    }
    delta.apply_to_params(&base.params)
}
