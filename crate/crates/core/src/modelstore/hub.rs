use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{ModelDelta, ModelStoreError, ModelVersion, Repository, VersionId};
use crate::codec::{DecodeError, Decoder, Digest, Encoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnouncementId(pub Digest);

/// A candidate update advertised to the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Announcement {
    pub update_hash: Digest,
    pub delta: ModelDelta,
    pub source_hub: String,
    /// Proposal number, so re-proposing identical content is a new message.
    pub sequence: u64,
}

impl Announcement {
    pub fn new(delta: ModelDelta, source_hub: impl Into<String>) -> Self {
        Self::with_sequence(delta, source_hub, 0)
    }

    pub fn with_sequence(delta: ModelDelta, source_hub: impl Into<String>, sequence: u64) -> Self {
        Self {
            update_hash: delta.update_hash,
            delta,
            source_hub: source_hub.into(),
            sequence,
        }
    }

    /// Wire form: update_hash ‖ delta ‖ source hub id ‖ sequence, each length-prefixed.
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.digest(&self.update_hash)
            .bytes(&self.delta.encode())
            .str(&self.source_hub)
            .u64(self.sequence);
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let update_hash = dec.digest()?;
        let delta = ModelDelta::decode(dec.bytes()?)?;
        let source_hub = dec.str()?.to_owned();
        let sequence = dec.u64()?;
        dec.finish()?;
        if delta.update_hash != update_hash || delta.recompute_hash() != update_hash {
            return Err(DecodeError::Invalid("update hash does not match delta".into()));
        }
        Ok(Self {
            update_hash,
            delta,
            source_hub,
            sequence,
        })
    }

    pub fn id(&self) -> AnnouncementId {
        AnnouncementId(Digest::of(&self.encode()))
    }
}

/// A robot's checked-out model. Received updates land here, never in the
/// hub repository, until the network promotes them.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingDirectory {
    pub robot_id: String,
    pub base: VersionId,
    pub params: Vec<f64>,
    pub applied_update: Option<Digest>,
    /// Versions this robot has committed locally, oldest first.
    pub committed: Vec<VersionId>,
}

impl WorkingDirectory {
    fn reset_to(&mut self, v: &ModelVersion) {
        self.base = v.version_id;
        self.params = v.params.clone();
        self.applied_update = None;
    }
}

#[derive(Debug, Clone)]
pub struct Hub {
    id: String,
    repo: Repository,
    robots: BTreeMap<String, WorkingDirectory>,
    seen: BTreeSet<AnnouncementId>,
    staged: Option<ModelVersion>,
    adopted: Vec<Digest>,
}

impl Hub {
    pub fn new(id: impl Into<String>, repo: Repository) -> Self {
        Self {
            id: id.into(),
            repo,
            robots: BTreeMap::new(),
            seen: BTreeSet::new(),
            staged: None,
            adopted: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn repo(&self) -> &Repository {
        &self.repo
    }

    pub fn repo_mut(&mut self) -> &mut Repository {
        &mut self.repo
    }

    pub fn staged(&self) -> Option<&ModelVersion> {
        self.staged.as_ref()
    }

    pub fn adopted_updates(&self) -> &[Digest] {
        &self.adopted
    }

    pub fn robots(&self) -> impl Iterator<Item = &WorkingDirectory> {
        self.robots.values()
    }

    pub fn robot(&self, robot_id: &str) -> Option<&WorkingDirectory> {
        self.robots.get(robot_id)
    }

    pub fn subscriber_count(&self) -> usize {
        self.robots.len()
    }

    pub fn subscribe(&mut self, robot_id: impl Into<String>) -> Result<(), ModelStoreError> {
        let base = self.repo.checkout_consensual()?;
        let robot_id = robot_id.into();
        self.robots.insert(
            robot_id.clone(),
            WorkingDirectory {
                robot_id,
                base: base.version_id,
                params: base.params,
                applied_update: None,
                committed: vec![base.version_id],
            },
        );
        Ok(())
    }

    /// Returns `Ok(false)` for an announcement already seen. A delta not based
    /// on this hub's consensual head yields `StaleBase`.
    pub fn receive_announcement(&mut self, ann: &Announcement) -> Result<bool, ModelStoreError> {
        if !self.seen.insert(ann.id()) {
            return Ok(false);
        }
        let base = self.repo.checkout_consensual()?;
        if ann.delta.from_id != base.version_id {
            return Err(ModelStoreError::StaleBase {
                expected: ann.delta.from_id,
                found: Some(base.version_id),
            });
        }
        let candidate = match self.repo.checkout(&ann.delta.to_id) {
            Ok(v) => v,
            Err(_) => ann.delta.reconstruct(&base, base.created_at)?,
        };
        self.staged = Some(candidate);
        Ok(true)
    }

    /// Recovery path for a stale receiver: stage the full version fetched from the source.
    pub fn stage_full_version(&mut self, version: ModelVersion) -> Result<(), ModelStoreError> {
        if !version.id_is_consistent() {
            return Err(ModelStoreError::IntegrityMismatch {
                expected: version.version_id,
                computed: ModelVersion::compute_id(&version.params, &version.hyperparams, version.parent_id.as_ref()),
            });
        }
        if version.dim() != self.repo.dim() {
            return Err(ModelStoreError::DimensionMismatch {
                expected: self.repo.dim(),
                got: version.dim(),
            });
        }
        self.staged = Some(version);
        Ok(())
    }

    /// Loads the staged candidate into every subscriber's working directory.
    pub fn notify_subscribers(&mut self) -> Result<usize, ModelStoreError> {
        let staged = self.staged.as_ref().ok_or_else(|| ModelStoreError::NothingStaged(self.id.clone()))?;
        let update = ModelDelta::between(&self.repo.checkout_consensual()?, staged)
            .map(|d| d.update_hash)
            .ok();
        for wd in self.robots.values_mut() {
            wd.base = staged.version_id;
            wd.params = staged.params.clone();
            wd.applied_update = update;
        }
        Ok(self.robots.len())
    }

    /// Drops the staged candidate and returns repository and robots to the
    /// consensual head.
    pub fn discard_staged(&mut self) -> Result<ModelVersion, ModelStoreError> {
        self.staged = None;
        let base = self.repo.rollback()?;
        for wd in self.robots.values_mut() {
            wd.reset_to(&base);
        }
        Ok(base)
    }

    /// Applies a promotion delta on top of the consensual head, commits the
    /// result as the new consensual version at the hub and in every robot.
    pub fn adopt(&mut self, delta: &ModelDelta, now: u64) -> Result<ModelVersion, ModelStoreError> {
        let base = self.repo.checkout_consensual()?;
        if delta.from_id != base.version_id {
            return Err(ModelStoreError::StaleBase {
                expected: delta.from_id,
                found: Some(base.version_id),
            });
        }
        if let Some(parent) = delta.to_parent {
            if !self.repo.contains(&parent) {
                match self.staged.take() {
                    Some(staged) if staged.version_id == parent => {
                        self.repo.import(staged)?;
                    }
                    other => {
                        self.staged = other;
                        return Err(ModelStoreError::UnknownVersion(parent));
                    }
                }
            }
        }
        let target = match self.repo.checkout(&delta.to_id) {
            Ok(v) => v,
            Err(_) => {
                let v = delta.reconstruct(&base, now)?;
                self.repo.import(v.clone())?;
                v
            }
        };
        self.repo.mark_consensual(&target.version_id)?;
        let local = ModelDelta::between(&base, &target)?;
        self.adopted.push(local.update_hash);
        self.staged = None;
        for wd in self.robots.values_mut() {
            wd.reset_to(&target);
            wd.committed.push(target.version_id);
        }
        self.repo.checkout(&target.version_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FloodReport {
    /// Forwarding round in which each hub first received the announcement.
    pub arrival_round: BTreeMap<String, u32>,
    pub delivered: usize,
    /// Hubs that reported a stale base and were recovered with a full version.
    pub recovered_stale: Vec<String>,
}

/// Hubs joined by undirected links; announcements flood hop by hop.
#[derive(Debug, Clone, Default)]
pub struct HubNetwork {
    hubs: BTreeMap<String, Hub>,
    links: BTreeMap<String, BTreeSet<String>>,
}

impl HubNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_hub(&mut self, hub: Hub) {
        self.links.entry(hub.id.clone()).or_default();
        self.hubs.insert(hub.id.clone(), hub);
    }

    pub fn connect(&mut self, a: &str, b: &str) -> Result<(), ModelStoreError> {
        for h in [a, b] {
            if !self.hubs.contains_key(h) {
                return Err(ModelStoreError::UnknownHub(h.to_owned()));
            }
        }
        self.links.entry(a.to_owned()).or_default().insert(b.to_owned());
        self.links.entry(b.to_owned()).or_default().insert(a.to_owned());
        Ok(())
    }

    pub fn hub(&self, id: &str) -> Option<&Hub> {
        self.hubs.get(id)
    }

    pub fn hub_mut(&mut self, id: &str) -> Option<&mut Hub> {
        self.hubs.get_mut(id)
    }

    pub fn hubs(&self) -> impl Iterator<Item = &Hub> {
        self.hubs.values()
    }

    pub fn neighbors(&self, id: &str) -> impl Iterator<Item = &String> {
        self.links.get(id).into_iter().flatten()
    }

    /// Floods `ann` from its source hub; each hub notifies its subscribers on
    /// first receipt and forwards to its neighbours in the next round.
    pub fn flood(&mut self, ann: &Announcement) -> Result<FloodReport, ModelStoreError> {
        let source = ann.source_hub.clone();
        if !self.hubs.contains_key(&source) {
            return Err(ModelStoreError::UnknownHub(source));
        }
        let mut report = FloodReport::default();
        let mut queue = VecDeque::from([(source, 0u32)]);
        while let Some((id, round)) = queue.pop_front() {
            let hub = self.hubs.get_mut(&id).expect("hub exists");
            let first = match hub.receive_announcement(ann) {
                Ok(first) => first,
                Err(ModelStoreError::StaleBase { .. }) => {
                    let full = self
                        .hubs
                        .get(&ann.source_hub)
                        .expect("source exists")
                        .repo
                        .checkout(&ann.delta.to_id)?;
                    let hub = self.hubs.get_mut(&id).expect("hub exists");
                    hub.stage_full_version(full)?;
                    report.recovered_stale.push(id.clone());
                    true
                }
                Err(e) => return Err(e),
            };
            if !first {
                continue;
            }
            let hub = self.hubs.get_mut(&id).expect("hub exists");
            report.delivered += hub.notify_subscribers()?;
            report.arrival_round.insert(id.clone(), round);
            for n in self.links.get(&id).into_iter().flatten() {
                queue.push_back((n.clone(), round + 1));
            }
        }
        Ok(report)
    }

    pub fn adopt_everywhere(&mut self, delta: &ModelDelta, now: u64) -> Result<(), ModelStoreError> {
        for hub in self.hubs.values_mut() {
            hub.adopt(delta, now)?;
        }
        Ok(())
    }

    pub fn discard_everywhere(&mut self) -> Result<(), ModelStoreError> {
        for hub in self.hubs.values_mut() {
            hub.discard_staged()?;
        }
        Ok(())
    }
}
