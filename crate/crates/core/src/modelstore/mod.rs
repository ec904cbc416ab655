//! Per-hub version-controlled model repository and hub-level update
//! distribution.

mod delta;
mod hub;
mod version;

pub use delta::{apply_delta, ModelDelta};
pub use hub::{Announcement, AnnouncementId, FloodReport, Hub, HubNetwork, WorkingDirectory};
pub use version::{Hyperparams, ModelVersion, VersionId};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::codec::DecodeError;

#[derive(Debug, Error)]
pub enum ModelStoreError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameters contain non-finite values")]
    NonFiniteParams,
    #[error("unknown version {0}")]
    UnknownVersion(VersionId),
    #[error("repository has no consensual version")]
    NoConsensualVersion,
    #[error("delta based on {expected} but receiver holds {found:?}")]
    StaleBase { expected: VersionId, found: Option<VersionId> },
    #[error("content address mismatch: expected {expected}, computed {computed}")]
    IntegrityMismatch { expected: VersionId, computed: VersionId },
    #[error("{0} does not descend from the consensual head")]
    BranchingConsensus(VersionId),
    #[error("unknown hub {0}")]
    UnknownHub(String),
    #[error("no candidate staged at hub {0}")]
    NothingStaged(String),
    #[error("repository io: {0}")]
    Io(#[from] std::io::Error),
    #[error("repository decode: {0}")]
    Decode(#[from] DecodeError),
}

/// Version history of one hub. Consensual versions always form one ancestry path.
#[derive(Debug, Clone, PartialEq)]
pub struct Repository {
    dim: usize,
    versions: BTreeMap<VersionId, ModelVersion>,
    head: Option<VersionId>,
    consensual_head: Option<VersionId>,
}

impl Repository {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            versions: BTreeMap::new(),
            head: None,
            consensual_head: None,
        }
    }

    /// Repository whose first commit is immediately the consensual root.
    pub fn with_root(params: Vec<f64>, hyperparams: Hyperparams, created_at: u64) -> Result<Self, ModelStoreError> {
        let mut repo = Self::new(params.len());
        let root = repo.commit(params, hyperparams, created_at)?;
        repo.mark_consensual(&root.version_id)?;
        Ok(repo)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head(&self) -> Option<VersionId> {
        self.head
    }

    pub fn consensual_head(&self) -> Option<VersionId> {
        self.consensual_head
    }

    pub fn len(&self) -> usize {
        self.versions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.versions.is_empty()
    }

    pub fn contains(&self, id: &VersionId) -> bool {
        self.versions.contains_key(id)
    }

    pub fn versions(&self) -> impl Iterator<Item = &ModelVersion> {
        self.versions.values()
    }

    fn check_params(&self, params: &[f64]) -> Result<(), ModelStoreError> {
        if params.len() != self.dim {
            return Err(ModelStoreError::DimensionMismatch {
                expected: self.dim,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ModelStoreError::NonFiniteParams);
        }
        Ok(())
    }

    pub fn commit(&mut self, params: Vec<f64>, hyperparams: Hyperparams, now: u64) -> Result<ModelVersion, ModelStoreError> {
        self.check_params(&params)?;
        let v = ModelVersion::new(params, hyperparams, self.head, now);
        self.versions.entry(v.version_id).or_insert_with(|| v.clone());
        self.head = Some(v.version_id);
        Ok(v)
    }

    /// Adds a version produced elsewhere without moving the head.
    pub fn import(&mut self, mut version: ModelVersion) -> Result<VersionId, ModelStoreError> {
        self.check_params(&version.params)?;
        if !version.id_is_consistent() {
            return Err(ModelStoreError::IntegrityMismatch {
                expected: version.version_id,
                computed: ModelVersion::compute_id(&version.params, &version.hyperparams, version.parent_id.as_ref()),
            });
        }
        if let Some(parent) = version.parent_id {
            if !self.contains(&parent) {
                return Err(ModelStoreError::UnknownVersion(parent));
            }
        }
        let id = version.version_id;
        version.consensual = self.versions.get(&id).is_some_and(|v| v.consensual);
        self.versions.entry(id).or_insert(version);
        Ok(id)
    }

    pub fn checkout(&self, id: &VersionId) -> Result<ModelVersion, ModelStoreError> {
        self.versions.get(id).cloned().ok_or(ModelStoreError::UnknownVersion(*id))
    }

    pub fn checkout_head(&self) -> Result<ModelVersion, ModelStoreError> {
        let id = self.head.ok_or(ModelStoreError::NoConsensualVersion)?;
        self.checkout(&id)
    }

    pub fn checkout_consensual(&self) -> Result<ModelVersion, ModelStoreError> {
        let id = self.consensual_head.ok_or(ModelStoreError::NoConsensualVersion)?;
        self.checkout(&id)
    }

    pub fn diff(&self, from: &VersionId, to: &VersionId) -> Result<ModelDelta, ModelStoreError> {
        ModelDelta::between(&self.checkout(from)?, &self.checkout(to)?)
    }

    /// Whether `ancestor` is `descendant` or lies on its parent chain.
    pub fn is_ancestor(&self, ancestor: &VersionId, descendant: &VersionId) -> bool {
        let mut cursor = Some(*descendant);
        while let Some(id) = cursor {
            if id == *ancestor {
                return true;
            }
            cursor = self.versions.get(&id).and_then(|v| v.parent_id);
        }
        false
    }

    /// Marks a version as network-accepted and moves both heads to it.
    pub fn mark_consensual(&mut self, id: &VersionId) -> Result<(), ModelStoreError> {
        if !self.contains(id) {
            return Err(ModelStoreError::UnknownVersion(*id));
        }
        if let Some(current) = self.consensual_head {
            if !self.is_ancestor(&current, id) {
                return Err(ModelStoreError::BranchingConsensus(*id));
            }
        }
        self.versions.get_mut(id).expect("checked above").consensual = true;
        self.consensual_head = Some(*id);
        self.head = Some(*id);
        Ok(())
    }

    pub fn set_head(&mut self, id: &VersionId) -> Result<(), ModelStoreError> {
        if !self.contains(id) {
            return Err(ModelStoreError::UnknownVersion(*id));
        }
        self.head = Some(*id);
        Ok(())
    }

    /// Resets the head to the last consensual version.
    pub fn rollback(&mut self) -> Result<ModelVersion, ModelStoreError> {
        let id = self.consensual_head.ok_or(ModelStoreError::NoConsensualVersion)?;
        self.head = Some(id);
        self.checkout(&id)
    }

    /// Consensual versions from the root to the consensual head.
    pub fn consensual_chain(&self) -> Vec<VersionId> {
        let mut chain = Vec::new();
        let mut cursor = self.consensual_head;
        while let Some(id) = cursor {
            let v = &self.versions[&id];
            if v.consensual {
                chain.push(id);
            }
            cursor = v.parent_id;
        }
        chain.reverse();
        chain
    }

    /// True when every consensual version lies on the consensual head's ancestry.
    pub fn consensual_is_linear(&self) -> bool {
        let on_path = self.consensual_chain();
        self.versions.values().filter(|v| v.consensual).count() == on_path.len()
    }

    /// Writes `versions/<id>.ver` files and a `HEAD` file.
    pub fn save(&self, dir: &Path) -> Result<(), ModelStoreError> {
        let vdir = dir.join("versions");
        fs::create_dir_all(&vdir)?;
        for v in self.versions.values() {
            fs::write(vdir.join(format!("{}.ver", v.version_id)), v.encode())?;
        }
        let line = |id: Option<VersionId>| id.map_or_else(|| "-".to_string(), |i| i.to_string());
        fs::write(
            dir.join("HEAD"),
            format!("dim {}\nhead {}\nconsensual {}\n", self.dim, line(self.head), line(self.consensual_head)),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelStoreError> {
        let head_text = fs::read_to_string(dir.join("HEAD"))?;
        let mut fields = BTreeMap::new();
        for line in head_text.lines() {
            if let Some((k, v)) = line.split_once(' ') {
                fields.insert(k.to_owned(), v.to_owned());
            }
        }
        let bad = |what: &str| ModelStoreError::Decode(DecodeError::Invalid(format!("HEAD {what}")));
        let dim = fields.get("dim").and_then(|d| d.parse().ok()).ok_or_else(|| bad("dim"))?;
        let parse_id = |key: &str| -> Result<Option<VersionId>, ModelStoreError> {
            match fields.get(key).map(String::as_str) {
                None => Err(bad(key)),
                Some("-") => Ok(None),
                Some(s) => Ok(Some(s.parse()?)),
            }
        };
        let head = parse_id("head")?;
        let consensual_head = parse_id("consensual")?;
        let mut versions = BTreeMap::new();
        for entry in fs::read_dir(dir.join("versions"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "ver") {
                let v = ModelVersion::decode(&fs::read(&path)?)?;
                if !v.id_is_consistent() {
                    return Err(ModelStoreError::IntegrityMismatch {
                        expected: v.version_id,
                        computed: ModelVersion::compute_id(&v.params, &v.hyperparams, v.parent_id.as_ref()),
                    });
                }
                versions.insert(v.version_id, v);
            }
        }
        Ok(Self {
            dim,
            versions,
            head,
            consensual_head,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repo() -> Repository {
        Repository::with_root(vec![0.0, 0.0], Hyperparams::default(), 0).unwrap()
    }

    #[test]
    fn identical_params_get_distinct_ids_through_parent() {
        let mut r = repo();
        let a = r.commit(vec![1.0, 2.0], Hyperparams::default(), 1).unwrap();
        let b = r.commit(vec![1.0, 2.0], Hyperparams::default(), 2).unwrap();
        assert_ne!(a.version_id, b.version_id);
        assert_eq!(b.parent_id, Some(a.version_id));
    }

    #[test]
    fn commit_validation() {
        let mut r = repo();
        assert!(matches!(
            r.commit(vec![1.0], Hyperparams::default(), 1),
            Err(ModelStoreError::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(matches!(
            r.commit(vec![1.0, f64::NAN], Hyperparams::default(), 1),
            Err(ModelStoreError::NonFiniteParams)
        ));
    }

    #[test]
    fn checkout_round_trip_and_history() {
        let mut r = repo();
        let history: Vec<Vec<f64>> = (1..=3).map(|i| vec![i as f64 * 0.1, -(i as f64)]).collect();
        let ids: Vec<_> = history
            .iter()
            .map(|p| r.commit(p.clone(), Hyperparams::default(), 1).unwrap().version_id)
            .collect();
        assert_eq!(r.checkout(&r.head().unwrap()).unwrap().params, history[2]);
        for (id, params) in ids.iter().zip(&history) {
            assert_eq!(&r.checkout(id).unwrap().params, params);
        }
        let unknown = VersionId(crate::codec::Digest([3; 32]));
        assert!(matches!(r.checkout(&unknown), Err(ModelStoreError::UnknownVersion(_))));
    }

    #[test]
    fn rollback_restores_consensual_and_is_idempotent() {
        let mut r = repo();
        let base = r.checkout_consensual().unwrap();
        for i in 0..3 {
            r.commit(vec![i as f64, 1.0], Hyperparams::default(), 1).unwrap();
        }
        let back = r.rollback().unwrap();
        assert_eq!(back, base);
        assert_eq!(r.head(), Some(base.version_id));
        assert_eq!(r.rollback().unwrap(), base);
        assert!(matches!(Repository::new(2).rollback(), Err(ModelStoreError::NoConsensualVersion)));
    }

    #[test]
    fn consensual_chain_stays_linear() {
        let mut r = repo();
        let root = r.consensual_head().unwrap();
        let a = r.commit(vec![1.0, 1.0], Hyperparams::default(), 1).unwrap();
        r.mark_consensual(&a.version_id).unwrap();
        r.set_head(&root).unwrap();
        let side = r.commit(vec![5.0, 5.0], Hyperparams::default(), 2).unwrap();
        assert!(matches!(r.mark_consensual(&side.version_id), Err(ModelStoreError::BranchingConsensus(_))));
        assert_eq!(r.consensual_chain(), vec![root, a.version_id]);
        assert!(r.consensual_is_linear());
    }

    #[test]
    fn diff_between_stored_versions() {
        let mut r = Repository::with_root(vec![1.0, 2.0], Hyperparams::default(), 0).unwrap();
        let from = r.head().unwrap();
        let to = r.commit(vec![1.5, 2.0], Hyperparams::default(), 1).unwrap();
        let d = r.diff(&from, &to.version_id).unwrap();
        assert_eq!(d.param_diff, vec![0.5, 0.0]);
        assert_eq!(apply_delta(&r.checkout(&from).unwrap(), &d).unwrap(), to.params);
    }

    #[test]
    fn save_and_load() {
        let mut r = repo();
        r.commit(vec![0.25, -1.0 / 3.0], Hyperparams::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path()).unwrap();
        let back = Repository::load(dir.path()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn import_requires_parent_and_integrity() {
        let mut r = repo();
        let orphan = ModelVersion::new(vec![1.0, 1.0], Hyperparams::default(), Some(VersionId(crate::codec::Digest([9; 32]))), 0);
        assert!(matches!(r.import(orphan), Err(ModelStoreError::UnknownVersion(_))));
        let mut forged = ModelVersion::new(vec![1.0, 1.0], Hyperparams::default(), r.head(), 0);
        forged.params[0] = 2.0;
        assert!(matches!(r.import(forged), Err(ModelStoreError::IntegrityMismatch { .. })));
    }
}
