use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use zeroize::Zeroize;

use super::events::{EventKind, EventPayload, EventQueue, SimEvent};
use super::report::{LedgerSummary, RoundReport, RunReport};
use super::topology::{build_topology, Topology};
use super::{
    ScenarioConfig, SimError, STREAM_HELDOUT, STREAM_KEYS, STREAM_NOISE, STREAM_NONCES, STREAM_PATIENTS,
    STREAM_SESSIONS, STREAM_TRUTH,
};
use crate::audit::{record_and_submit, verify_pair, PairStore};
use crate::consensus::{CandidateModel, ConsensusError, Coordinator, FeedbackScore, RoundId, RoundState};
use crate::ledger::{AccessPolicy, Identity, Ledger, NetworkKey, PermissionMode, Transaction};
use crate::learner::{
    default_hyperparams, evaluate, fine_tune, mse, score_from_loss, sigmoid, Activation, FeatureVector,
    OptimizerState, Sample, TherapistFeedback, TrainConfig, TrainingBatch,
};
use crate::modelstore::{Hub, HubNetwork, ModelDelta, ModelVersion, Repository};
use crate::opal::{
    federate_query, AlgorithmRegistry, Aggregation, CmpOp, Condition, FederationOptions, Field, Filter,
    PatientRecord, ProtectedDatabase, Query, VettedAlgorithm,
};

/// Synthetic interaction-data features per sample.
pub const ID_DIM: usize = 4;
/// Background features per sample, one per session query.
pub const BD_DIM: usize = 2;
const DIM: usize = ID_DIM + BD_DIM + 1;
const TAGS: [&str; 4] = ["asd", "adhd", "language_delay", "motor_delay"];
const SCORE_GRID: f64 = (1u64 << 20) as f64;

/// Everything a finished run leaves behind, in memory.
pub struct SimOutcome {
    pub config: ScenarioConfig,
    pub report: RunReport,
    pub topology: Topology,
    pub ledger: Ledger,
    pub network: HubNetwork,
    pub stores: BTreeMap<String, PairStore>,
    pub coordinator: Coordinator,
    pub network_key: NetworkKey,
    /// Synthetic patient records. Held by the data parties only; never persisted.
    pub patients: Vec<PatientRecord>,
    /// Ground-truth parameters `[w*..., b*]`.
    pub ground_truth: Vec<f64>,
    /// Per round: every hub's head params (as bits) before the round opened.
    pub pre_round_heads: Vec<BTreeMap<String, Vec<u64>>>,
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<RunReport, SimError> {
    simulate(config).map(|o| o.report)
}

#[derive(Default)]
struct RobotState {
    hub: String,
    /// Session samples awaiting training. Wiped when handed to training.
    buffer: Vec<Sample>,
    /// The latest session's samples, used to score candidates.
    last_session: Vec<Sample>,
    next_patient: usize,
}

struct PendingSession {
    robot: String,
    patient: usize,
    bd: [Option<f64>; BD_DIM],
    delivered: usize,
}

struct RoundWork {
    round: RoundId,
    source_robot: String,
    self_scores: Option<(f64, f64)>,
    returned: Vec<(ModelDelta, f64)>,
    late: usize,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    topo: Topology,
    queue: EventQueue,
    session_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    nonce_rng: ChaCha8Rng,
    ledger: Ledger,
    network: HubNetwork,
    coordinator: Coordinator,
    registry: AlgorithmRegistry,
    parties: Vec<ProtectedDatabase>,
    stores: BTreeMap<String, PairStore>,
    identities: BTreeMap<String, Identity>,
    key: NetworkKey,
    robots: BTreeMap<String, RobotState>,
    robot_order: Vec<String>,
    patients: Vec<PatientRecord>,
    patients_by_hub: BTreeMap<String, Vec<usize>>,
    truth: Vec<f64>,
    heldout: Vec<Sample>,
    sessions: BTreeMap<u64, PendingSession>,
    next_session: u64,
    staged_candidate: Option<CandidateModel>,
    work: Option<RoundWork>,
    rounds_done: usize,
    report: RunReport,
    pre_round_heads: Vec<BTreeMap<String, Vec<u64>>>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn grid_score(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0..1u64 << 20) as f64 / SCORE_GRID
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn make_patients(cfg: &ScenarioConfig, topo: &Topology) -> (Vec<PatientRecord>, BTreeMap<String, Vec<usize>>) {
    let mut rng = rng_for(cfg.seed, STREAM_PATIENTS);
    let mut patients = Vec::with_capacity(cfg.num_patients);
    let mut by_hub: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for p in 0..cfg.num_patients {
        let h = p % cfg.num_hubs;
        let n_tags = rng.gen_range(1..=2);
        let condition_tags: BTreeSet<String> = TAGS.choose_multiple(&mut rng, n_tags).map(|t| t.to_string()).collect();
        patients.push(PatientRecord {
            record_id: format!("pt-{:016x}", rng.gen::<u64>()),
            age: rng.gen_range(4..=17),
            gender_code: rng.gen_range(0..=1),
            assessment_scores: (0..3).map(|_| grid_score(&mut rng)).collect(),
            condition_tags,
            party_id: topo.data_parties[h].clone(),
        });
        by_hub.entry(topo.hubs[h].clone()).or_default().push(p);
    }
    (patients, by_hub)
}

fn make_truth(cfg: &ScenarioConfig) -> Vec<f64> {
    let mut rng = rng_for(cfg.seed, STREAM_TRUTH);
    let mut truth: Vec<f64> = (0..ID_DIM).map(|_| 1.5 * normal(&mut rng)).collect();
    truth.extend((0..BD_DIM).map(|_| rng.gen_range(-2.0..2.0)));
    truth.push(0.5 * normal(&mut rng));
    truth
}

fn true_engagement(truth: &[f64], x: &FeatureVector) -> f64 {
    let z: f64 = truth.iter().zip(x.iter()).map(|(w, xi)| w * xi).sum::<f64>() + truth[DIM - 1];
    sigmoid(z)
}

/// Pooled background statistics a session for `p` would receive, computed
/// directly from the records. Used only to build the evaluation set.
fn cohort_features(patients: &[PatientRecord], p: &PatientRecord, k: u32) -> Vec<f64> {
    let lo = p.age / 4 * 4;
    let cohort: Vec<f64> = patients
        .iter()
        .filter(|q| q.gender_code == p.gender_code && (lo..=lo + 3).contains(&q.age))
        .map(|q| q.assessment_scores[0])
        .collect();
    let tag = p.condition_tags.iter().next().expect("every patient has a tag");
    let tagged: Vec<f64> = patients
        .iter()
        .filter(|q| q.condition_tags.contains(tag))
        .map(|q| q.assessment_scores[1])
        .collect();
    let k = k as usize;
    let mean = if cohort.len() >= k { cohort.iter().sum::<f64>() / cohort.len() as f64 } else { 0.5 };
    let share = if tagged.len() >= k {
        tagged.iter().filter(|v| **v > 0.5).count() as f64 / tagged.len() as f64
    } else {
        0.5
    };
    vec![mean, share]
}

/// Noise-free evaluation samples drawn like session data.
fn make_heldout(cfg: &ScenarioConfig, truth: &[f64], patients: &[PatientRecord]) -> Vec<Sample> {
    let mut rng = rng_for(cfg.seed, STREAM_HELDOUT);
    (0..cfg.tuning.heldout_size)
        .map(|i| {
            let p = &patients[rng.gen_range(0..patients.len())];
            let x = FeatureVector::new(
                (0..ID_DIM).map(|_| normal(&mut rng)).collect(),
                cohort_features(patients, p, cfg.k_per_algorithm),
            );
            let y = true_engagement(truth, &x);
            Sample {
                x,
                feedback: TherapistFeedback::new(y, "heldout", format!("heldout-{i}"), 0),
            }
        })
        .collect()
}

fn registry(k: u32) -> AlgorithmRegistry {
    let fields: BTreeSet<Field> = [
        Field::Age,
        Field::GenderCode,
        Field::ConditionTags,
        Field::AssessmentScore(0),
        Field::AssessmentScore(1),
        Field::AssessmentScore(2),
    ]
    .into();
    let mut reg = AlgorithmRegistry::new();
    for (algo_id, aggregation) in [
        ("cohort_mean", Aggregation::Mean),
        ("engaged_share", Aggregation::ProportionAbove { threshold: 0.5 }),
    ] {
        reg.register(VettedAlgorithm {
            algo_id: algo_id.into(),
            aggregation,
            allowed_fields: fields.clone(),
            min_group_size: k,
            expert_verified: true,
        })
        .expect("built-in algorithms are valid");
    }
    reg
}

fn head_bits(network: &HubNetwork) -> BTreeMap<String, Vec<u64>> {
    network
        .hubs()
        .map(|h| {
            let bits = h
                .repo()
                .checkout_head()
                .map(|v| v.params.iter().map(|p| p.to_bits()).collect())
                .unwrap_or_default();
            (h.id().to_owned(), bits)
        })
        .collect()
}

/// Runs a scenario to completion and keeps every in-memory artifact.
pub fn simulate(config: &ScenarioConfig) -> Result<SimOutcome, SimError> {
    config.validate()?;
    let mut sim = Sim::new(config)?;
    sim.schedule_round(0);
    while let Some(ev) = sim.queue.pop() {
        let (tick, kind) = (ev.at, ev.kind());
        *sim.report.events.entry(format!("{kind:?}")).or_default() += 1;
        sim.handle(ev)?;
        if sim.coordinator.open_round_count() > 1 {
            return Err(SimError::InvariantViolation {
                tick,
                what: "more than one open round".into(),
            });
        }
    }
    sim.finish()
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self, SimError> {
        let topo = build_topology(cfg)?;
        let (patients, patients_by_hub) = make_patients(cfg, &topo);
        let truth = make_truth(cfg);
        let heldout = make_heldout(cfg, &truth, &patients);

        let mut key_rng = rng_for(cfg.seed, STREAM_KEYS);
        let mut identities = BTreeMap::new();
        for id in topo.robots().map(|(_, r)| r.clone()).chain(topo.data_parties.iter().cloned()) {
            identities.insert(id.clone(), Identity::generate(id, &mut key_rng));
        }
        let key = NetworkKey::generate(&mut key_rng);
        let names = identities.keys().cloned();
        let policy = match PermissionMode::from(cfg.ledger_mode) {
            PermissionMode::Public => AccessPolicy::public(),
            PermissionMode::SemiPrivate => AccessPolicy::semi_private(names),
            PermissionMode::Private => AccessPolicy::private(names),
        };
        let mut ledger = Ledger::new(policy);
        for ident in identities.values() {
            ledger.register_identity(ident.public());
        }

        let mut hyper = default_hyperparams(cfg.tuning.epochs);
        hyper.learning_rate = cfg.tuning.learning_rate;
        let mut network = HubNetwork::new();
        for (hub, robots) in &topo.robots_per_hub {
            let repo = Repository::with_root(vec![0.0; DIM], hyper, 0).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
            let mut h = Hub::new(hub.clone(), repo);
            for r in robots {
                h.subscribe(r.clone()).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
            }
            network.add_hub(h);
        }
        for (a, b) in &topo.edges {
            network.connect(a, b).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        }

        let mut parties = Vec::new();
        let mut stores = BTreeMap::new();
        for (h, party) in topo.data_parties.iter().enumerate() {
            let records = patients_by_hub
                .get(&topo.hubs[h])
                .into_iter()
                .flatten()
                .map(|&i| patients[i].clone())
                .collect();
            parties.push(ProtectedDatabase::new(party.clone(), records).map_err(|e| SimError::InvalidConfig(e.to_string()))?);
            stores.insert(party.clone(), PairStore::in_memory(party.clone()));
        }

        let robots = topo
            .robots()
            .map(|(h, r)| {
                (
                    r.clone(),
                    RobotState {
                        hub: h.clone(),
                        ..Default::default()
                    },
                )
            })
            .collect();
        let robot_order = topo.robots().map(|(_, r)| r.clone()).collect();
        let report = RunReport {
            seed: cfg.seed,
            hubs: topo.hubs.clone(),
            edges: topo.edges.iter().cloned().collect(),
            robots: cfg.num_robots(),
            ..Default::default()
        };

        Ok(Self {
            cfg,
            queue: EventQueue::new(),
            session_rng: rng_for(cfg.seed, STREAM_SESSIONS),
            noise_rng: rng_for(cfg.seed, STREAM_NOISE),
            nonce_rng: rng_for(cfg.seed, STREAM_NONCES),
            ledger,
            network,
            coordinator: Coordinator::new(),
            registry: registry(cfg.k_per_algorithm),
            parties,
            stores,
            identities,
            key,
            robots,
            robot_order,
            patients,
            patients_by_hub,
            truth,
            heldout,
            sessions: BTreeMap::new(),
            next_session: 0,
            staged_candidate: None,
            work: None,
            rounds_done: 0,
            report,
            pre_round_heads: Vec::new(),
            topo,
        })
    }

    fn heldout_mse(&self, model: &ModelVersion) -> f64 {
        mse(&model.params, &self.heldout, Activation::Sigmoid).expect("held-out set matches model dimension")
    }

    fn consensual(&self, hub: &str) -> ModelVersion {
        self.network
            .hub(hub)
            .and_then(|h| h.repo().checkout_consensual().ok())
            .expect("every hub has a consensual head")
    }

    fn schedule_round(&mut self, start: u64) {
        if self.report.rounds.is_empty() {
            self.report.initial_heldout_mse = self.heldout_mse(&self.consensual(&self.topo.hubs[0]));
        }
        self.pre_round_heads.push(head_bits(&self.network));
        for robot in self.robot_order.clone() {
            let state = self.robots.get_mut(&robot).expect("robot exists");
            let hub_patients = &self.patients_by_hub[&state.hub];
            let patient = hub_patients[state.next_patient % hub_patients.len()];
            state.next_patient += 1;
            let session = self.next_session;
            self.next_session += 1;
            self.queue.schedule(start, EventPayload::Session { robot, session, patient });
        }
        let source = self.robot_order[self.rounds_done % self.robot_order.len()].clone();
        self.queue.schedule(start + 3, EventPayload::Train { robot: source });
    }

    fn handle(&mut self, ev: SimEvent) -> Result<(), SimError> {
        let (at, kind) = (ev.at, ev.kind());
        let err = |e: &dyn std::fmt::Display| SimError::Event {
            tick: at,
            event: kind,
            message: e.to_string(),
        };
        match ev.payload {
            EventPayload::Session { robot, session, patient } => {
                self.robots.get_mut(&robot).expect("robot exists").last_session.zeroize();
                self.sessions.insert(
                    session,
                    PendingSession {
                        robot: robot.clone(),
                        patient,
                        bd: [None; BD_DIM],
                        delivered: 0,
                    },
                );
                self.report.sessions += 1;
                for slot in 0..BD_DIM {
                    self.queue.schedule(at + 1, EventPayload::Query { robot: robot.clone(), session, slot });
                }
            }
            EventPayload::Query { robot, session, slot } => {
                let q = self.session_query(&robot, session, slot, at);
                let fed = federate_query(&self.parties, &self.registry, &q, FederationOptions::default()).map_err(|e| err(&e))?;
                if !fed.failures.is_empty() {
                    return Err(err(&format!("party failures: {:?}", fed.failures)));
                }
                let hub = &self.robots[&robot].hub;
                let party = self.topo.data_parties[self.topo.hubs.iter().position(|h| h == hub).expect("hub exists")].clone();
                let store = self.stores.get_mut(&party).expect("store exists");
                record_and_submit(store, &mut self.ledger, &q, &fed.answer, &self.identities[&party], at).map_err(|e| err(&e))?;
                self.report.queries_issued += 1;
                self.queue.schedule(
                    at + 1,
                    EventPayload::Answer {
                        robot,
                        session,
                        slot,
                        answer: fed.answer,
                    },
                );
            }
            EventPayload::Answer { robot, session, slot, answer } => {
                self.report.answers_delivered += 1;
                if answer.is_suppressed() {
                    self.report.answers_suppressed += 1;
                }
                let pending = self.sessions.get_mut(&session).ok_or_else(|| err(&"unknown session"))?;
                debug_assert_eq!(pending.robot, robot);
                pending.bd[slot] = answer.statistic.value();
                pending.delivered += 1;
                if pending.delivered == BD_DIM {
                    let pending = self.sessions.remove(&session).expect("present");
                    self.complete_session(&robot, session, &pending, at);
                }
            }
            EventPayload::Train { robot } => self.train(&robot, at).map_err(|e| err(&e))?,
            EventPayload::Announce { robot } => self.announce(&robot, at).map_err(|e| err(&e))?,
            EventPayload::Feedback { robot, round } => self.feedback(&robot, round, at).map_err(|e| err(&e))?,
            EventPayload::Resolve { round } => {
                self.coordinator.resolve(round, at).map_err(|e| err(&e))?;
                self.queue.schedule(at + 1, EventPayload::Broadcast { round });
            }
            EventPayload::Broadcast { round } => self.broadcast(round, at)?,
        }
        Ok(())
    }

    fn session_query(&self, robot: &str, session: u64, slot: usize, at: u64) -> Query {
        let p = &self.patients[self.sessions[&session].patient];
        let (algo_id, target_field, filter, baseline_filter) = if slot == 0 {
            let lo = (p.age / 4 * 4) as f64;
            let gender = Condition::new(Field::GenderCode, CmpOp::Eq(p.gender_code as f64));
            (
                "cohort_mean",
                Field::AssessmentScore(0),
                Filter::new(vec![
                    gender.clone(),
                    Condition::new(Field::Age, CmpOp::Ge(lo)),
                    Condition::new(Field::Age, CmpOp::Le(lo + 3.0)),
                ]),
                Some(Filter::new(vec![gender])),
            )
        } else {
            let tag = p.condition_tags.iter().next().expect("every patient has a tag").clone();
            (
                "engaged_share",
                Field::AssessmentScore(1),
                Filter::new(vec![Condition::new(Field::ConditionTags, CmpOp::HasTag(tag))]),
                None,
            )
        };
        Query {
            query_id: format!("s{session}-q{slot}"),
            algo_id: algo_id.into(),
            filter,
            target_field,
            requester_id: robot.to_owned(),
            timestamp: at,
            baseline_filter,
        }
    }

    /// Generates the session's interaction data and therapist feedback.
    fn complete_session(&mut self, robot: &str, session: u64, pending: &PendingSession, at: u64) {
        let bd: Vec<f64> = pending.bd.iter().map(|v| v.unwrap_or(0.5)).collect();
        let sigma = self.cfg.feedback_noise_stddev;
        let samples: Vec<Sample> = (0..self.cfg.tuning.samples_per_session)
            .map(|i| {
                let x = FeatureVector::new((0..ID_DIM).map(|_| normal(&mut self.session_rng)).collect(), bd.clone());
                let y = true_engagement(&self.truth, &x) + sigma * normal(&mut self.noise_rng);
                Sample {
                    x,
                    feedback: TherapistFeedback::new(y, robot, format!("s{session}-{i}"), at),
                }
            })
            .collect();
        let state = self.robots.get_mut(robot).expect("robot exists");
        state.buffer.extend(samples.iter().cloned());
        state.last_session = samples;
    }

    fn train(&mut self, robot: &str, at: u64) -> Result<(), Box<dyn std::error::Error>> {
        let hub = self.robots[robot].hub.clone();
        let baseline = self.consensual(&hub);
        let batch = TrainingBatch::new(std::mem::take(&mut self.robots.get_mut(robot).expect("robot exists").buffer));
        let (params, baseline_loss, candidate_loss) = if self.cfg.tuning.epochs == 0 {
            let loss = evaluate(&baseline, batch.samples())?.loss;
            drop(batch);
            (baseline.params.clone(), loss, loss)
        } else {
            let out = fine_tune(
                &baseline,
                batch,
                OptimizerState::for_model(&baseline),
                self.cfg.tuning.epochs,
                TrainConfig::default(),
                at,
            )?;
            let first = out.losses[0];
            let last = *out.losses.last().expect("at least one loss");
            (out.model.params, first, last)
        };
        let repo = self.network.hub_mut(&hub).expect("hub exists").repo_mut();
        let model = repo.commit(params, baseline.hyperparams, at)?;
        let (candidate_score, baseline_score) = (score_from_loss(candidate_loss), score_from_loss(baseline_loss));
        self.staged_candidate = Some(CandidateModel {
            model,
            source_hub: hub,
            source_robot: robot.to_owned(),
            locked_score: candidate_score,
            announced_at: at + 1,
        });
        self.work = Some(RoundWork {
            round: RoundId(u64::MAX),
            source_robot: robot.to_owned(),
            self_scores: Some((candidate_score, baseline_score)),
            returned: Vec::new(),
            late: 0,
        });
        self.queue.schedule(at + 1, EventPayload::Announce { robot: robot.to_owned() });
        Ok(())
    }

    fn announce(&mut self, source: &str, at: u64) -> Result<(), ConsensusError> {
        let candidate = self.staged_candidate.take().expect("candidate staged before announcement");
        let quorum = self.cfg.effective_quorum();
        let (round, _, flood) = self
            .coordinator
            .open_and_announce(&mut self.network, candidate, self.cfg.consensus_window, quorum, at)?;
        self.work.as_mut().expect("round work exists").round = round;
        for robot in self.robot_order.clone() {
            if robot == source && !self.cfg.tuning.include_source_feedback {
                continue;
            }
            let hops = flood.arrival_round.get(&self.robots[&robot].hub).copied().unwrap_or(0) as u64;
            self.queue
                .schedule(at + hops * self.cfg.tuning.edge_latency + 1, EventPayload::Feedback { robot, round });
        }
        let deadline = self.coordinator.round(round).expect("round exists").deadline;
        self.queue.schedule(deadline, EventPayload::Resolve { round });
        Ok(())
    }

    fn feedback(&mut self, robot: &str, round_id: RoundId, at: u64) -> Result<(), Box<dyn std::error::Error>> {
        let round = self.coordinator.round(round_id).expect("round exists");
        let (candidate, baseline) = (round.candidate.model.clone(), round.baseline.clone());
        let work = self.work.as_mut().expect("round work exists");
        let (cs, bs) = if robot == work.source_robot {
            work.self_scores.expect("source scored its candidate")
        } else {
            let hub = &self.robots[robot].hub;
            let wd = self.network.hub(hub).and_then(|h| h.robot(robot)).expect("robot subscribed");
            if wd.base != candidate.version_id {
                return Err(format!("{robot} does not hold the candidate").into());
            }
            let samples = &self.robots[robot].last_session;
            let c = score_from_loss(mse(&wd.params, samples, Activation::Sigmoid)?);
            let b = score_from_loss(mse(&baseline.params, samples, Activation::Sigmoid)?);
            (c, b)
        };
        let fb = |model: &ModelVersion, score| FeedbackScore {
            robot_id: robot.to_owned(),
            model_hash: model.version_id,
            score,
            received_at: at,
        };
        match self.coordinator.submit_feedback(round_id, fb(&candidate, cs), fb(&baseline, bs)) {
            Ok(_) => {}
            Err(ConsensusError::LateFeedback { .. }) => {
                self.work.as_mut().expect("round work exists").late += 1;
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        }
        if self.cfg.fold_destination_updates && self.cfg.tuning.epochs > 0 && robot != self.work.as_ref().unwrap().source_robot {
            let samples = self.robots[robot].last_session.clone();
            let weight = samples.len() as f64;
            let out = fine_tune(
                &candidate,
                TrainingBatch::new(samples),
                OptimizerState::for_model(&candidate),
                self.cfg.tuning.epochs,
                TrainConfig::default(),
                at,
            )?;
            let delta = ModelDelta::between(&candidate, &out.model)?;
            self.work.as_mut().expect("round work exists").returned.push((delta, weight));
        }
        Ok(())
    }

    fn broadcast(&mut self, round_id: RoundId, at: u64) -> Result<(), SimError> {
        let kind = EventKind::PromotionBroadcast;
        let err = |e: &dyn std::fmt::Display| SimError::Event {
            tick: at,
            event: kind,
            message: e.to_string(),
        };
        let violation = |what: String| SimError::InvariantViolation { tick: at, what };
        let work = self.work.take().expect("round work exists");
        let round = self.coordinator.round(round_id).expect("round exists").clone();
        let accepted = round.state == RoundState::Accepted;
        if accepted {
            let returned = if self.cfg.fold_destination_updates { work.returned.as_slice() } else { &[] };
            self.coordinator.promote(round_id, &mut self.network, returned, at).map_err(|e| err(&e))?;
            self.report.promotions += 1;
        } else {
            self.coordinator.roll_back(round_id, &mut self.network).map_err(|e| err(&e))?;
            self.report.rollbacks += 1;
            let before = self.pre_round_heads.last().expect("recorded at round start");
            if head_bits(&self.network) != *before {
                return Err(violation(format!("round {round_id} rollback changed a hub head")));
            }
        }
        let heads: BTreeSet<_> = self.network.hubs().map(|h| h.repo().consensual_head()).collect();
        if heads.len() != 1 {
            return Err(violation("hubs disagree on the consensual head".into()));
        }
        for hub in self.network.hubs() {
            if !hub.repo().consensual_is_linear() {
                return Err(violation(format!("{} consensual chain branches", hub.id())));
            }
            let c = hub.repo().checkout_consensual().map_err(|e| err(&e))?;
            if hub.robots().any(|wd| wd.params != c.params) {
                return Err(violation(format!("{} robots diverge from the consensual model", hub.id())));
            }
        }
        let signer = &self.identities[&work.source_robot];
        let at_ref = self
            .coordinator
            .notarize(round_id, &mut self.ledger, &self.key, signer, at, &mut self.nonce_rng)
            .map_err(|e| err(&e))?;
        let round = self.coordinator.round(round_id).expect("round exists");
        let decision = round.decision.expect("resolved");
        let consensual = self.consensual(&self.topo.hubs[0]);
        let heldout_mse = self.heldout_mse(&consensual);
        self.report.late_feedback += work.late as u64;
        self.report.loss_trajectory.push(heldout_mse);
        self.report.rounds.push(RoundReport {
            round_id: round_id.0,
            source_hub: round.candidate.source_hub.clone(),
            source_robot: round.candidate.source_robot.clone(),
            opened_at: round.opened_at,
            deadline: round.deadline,
            baseline_id: round.baseline.version_id,
            candidate_id: round.candidate.model.version_id,
            locked_score: round.candidate.locked_score,
            reported: decision.reported,
            late: work.late,
            quorum: decision.quorum,
            candidate_mean: decision.candidate_mean,
            baseline_mean: decision.baseline_mean,
            decision: decision.outcome,
            consensual_after: consensual.version_id,
            update_hash: round.update_hash,
            notarized_at: at_ref,
            heldout_mse,
        });
        self.rounds_done += 1;
        if self.rounds_done < self.cfg.rounds() {
            self.schedule_round(at + 1);
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SimOutcome, SimError> {
        let tick = self.report.rounds.last().map_or(0, |r| r.deadline + 1);
        let violation = |what: String| SimError::InvariantViolation { tick, what };
        let chain = self.ledger.validate_chain();
        let view = self.ledger.view(self.topo.data_parties[0].as_str()).map_err(|e| violation(e.to_string()))?;
        for block in view.blocks() {
            for tx in &block.transactions {
                match tx {
                    Transaction::QueryAudit { .. } => self.report.query_audit_txs += 1,
                    Transaction::ModelConsensus { .. } => self.report.model_consensus_txs += 1,
                }
            }
        }
        let mut verifiable = 0;
        for store in self.stores.values() {
            for pair in store.iter() {
                if verify_pair(&view, pair).unwrap_or(false) {
                    verifiable += 1;
                }
            }
        }
        self.report.verifiable_pairs = verifiable;
        let r = &self.report;
        if !(r.answers_delivered == r.query_audit_txs && r.query_audit_txs == r.verifiable_pairs) {
            return Err(violation(format!(
                "audit conservation: {} answers, {} audit txs, {} verifiable pairs",
                r.answers_delivered, r.query_audit_txs, r.verifiable_pairs
            )));
        }
        if r.model_consensus_txs != r.rounds.len() as u64 {
            return Err(violation("a resolved round lacks its notarization".into()));
        }
        let mut best = self.report.initial_heldout_mse;
        let mut violations = 0;
        for round in self.report.rounds.iter().filter(|r| r.decision == RoundState::Accepted) {
            if round.heldout_mse > best {
                violations += 1;
            }
            best = round.heldout_mse;
        }
        self.report.monotonicity_violations = violations;
        let final_model = self.consensual(&self.topo.hubs[0]);
        self.report.final_consensual = Some(final_model.version_id);
        self.report.final_heldout_mse = self.heldout_mse(&final_model);
        self.report.ledger = LedgerSummary {
            ok: chain.ok,
            blocks: chain.blocks_checked,
            first_broken: chain.first_broken,
            tip: self.ledger.tip_hash(),
        };
        if !chain.ok {
            return Err(violation(format!("ledger invalid: {:?}", chain.reason)));
        }
        Ok(SimOutcome {
            config: self.cfg.clone(),
            report: self.report,
            topology: self.topo,
            ledger: self.ledger,
            network: self.network,
            stores: self.stores,
            coordinator: self.coordinator,
            network_key: self.key,
            patients: self.patients,
            ground_truth: self.truth,
            pre_round_heads: self.pre_round_heads,
        })
    }
}
