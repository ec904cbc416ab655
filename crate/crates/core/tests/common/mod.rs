#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robochain::codec::Digest;
use robochain::consensus::{CandidateModel, ConsensusError, Coordinator, FeedbackScore, RoundState};
use robochain::learner::{Activation, FeatureVector, Sample, TherapistFeedback};
use robochain::ledger::{
    consensus_signing_message, encrypt_payload, AccessPolicy, Identity, Ledger, NetworkKey, Transaction,
};
use robochain::modelstore::{Hub, HubNetwork, Hyperparams, Repository};
use robochain::simnet::{LedgerMode, ScenarioConfig, Tuning};
use robochain::opal::{
    Aggregation, AlgorithmRegistry, CmpOp, Condition, Field, Filter, PatientRecord, ProtectedDatabase, Query,
    VettedAlgorithm,
};

pub const TAGS: [&str; 4] = ["asd", "adhd", "language_delay", "motor_delay"];
pub const SCORES: usize = 3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A value in [0, 1) on the 2^-20 grid, so sums of up to 2^33 values are exact.
pub fn grid(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0..1u64 << 20) as f64 / (1u64 << 20) as f64
}

pub fn record(rng: &mut ChaCha8Rng, party: &str, i: usize) -> PatientRecord {
    let picks = rng.gen_range(0..=2);
    let tags: BTreeSet<String> = TAGS
        .choose_multiple(rng, picks)
        .map(|t| t.to_string())
        .collect();
    PatientRecord {
        record_id: format!("{party}-rec-{i:05}-{:08x}", rng.gen::<u32>()),
        age: rng.gen_range(3..=18),
        gender_code: rng.gen_range(0..=1),
        assessment_scores: (0..SCORES).map(|_| grid(rng)).collect(),
        condition_tags: tags,
        party_id: party.to_owned(),
    }
}

pub fn records(rng: &mut ChaCha8Rng, party: &str, n: usize) -> Vec<PatientRecord> {
    (0..n).map(|i| record(rng, party, i)).collect()
}

pub fn all_fields() -> BTreeSet<Field> {
    let mut f: BTreeSet<Field> = [Field::Age, Field::GenderCode, Field::ConditionTags].into();
    f.extend((0..SCORES).map(Field::AssessmentScore));
    f
}

pub const ALGOS: [(&str, Aggregation); 4] = [
    ("count", Aggregation::Count),
    ("mean", Aggregation::Mean),
    ("variance", Aggregation::Variance),
    ("share_above", Aggregation::ProportionAbove { threshold: 0.5 }),
];

/// One algorithm per aggregation, each with group threshold `k`.
pub fn registry(k: u32) -> AlgorithmRegistry {
    let mut reg = AlgorithmRegistry::new();
    for (id, aggregation) in ALGOS {
        reg.register(VettedAlgorithm {
            algo_id: id.into(),
            aggregation,
            allowed_fields: all_fields(),
            min_group_size: k,
            expert_verified: true,
        })
        .unwrap();
    }
    reg
}

pub fn condition(rng: &mut ChaCha8Rng) -> Condition {
    match rng.gen_range(0..5) {
        0 => Condition::new(Field::Age, CmpOp::Ge(rng.gen_range(3..=18) as f64)),
        1 => Condition::new(Field::Age, CmpOp::Lt(rng.gen_range(3..=18) as f64)),
        2 => Condition::new(Field::GenderCode, CmpOp::Eq(rng.gen_range(0..=1) as f64)),
        3 => Condition::new(Field::ConditionTags, CmpOp::HasTag(TAGS.choose(rng).unwrap().to_string())),
        _ => Condition::new(Field::AssessmentScore(rng.gen_range(0..SCORES)), CmpOp::Gt(grid(rng))),
    }
}

pub fn filter(rng: &mut ChaCha8Rng) -> Filter {
    Filter::new((0..rng.gen_range(0..=3)).map(|_| condition(rng)).collect())
}

pub fn query(rng: &mut ChaCha8Rng, i: usize) -> Query {
    let (algo, _) = ALGOS[rng.gen_range(0..ALGOS.len())];
    Query {
        query_id: format!("q{i}"),
        algo_id: algo.into(),
        filter: filter(rng),
        target_field: Field::AssessmentScore(rng.gen_range(0..SCORES)),
        requester_id: "robot".into(),
        timestamp: i as u64,
        baseline_filter: rng.gen_bool(0.3).then(|| filter(rng)),
    }
}

pub fn aggregation_of(algo_id: &str) -> Aggregation {
    ALGOS.iter().find(|(id, _)| *id == algo_id).unwrap().1
}

/// Independent reading of one filter condition.
pub fn holds(c: &Condition, r: &PatientRecord) -> bool {
    let x = match c.field {
        Field::Age => r.age as f64,
        Field::GenderCode => r.gender_code as f64,
        Field::AssessmentScore(i) => r.assessment_scores[i],
        Field::ConditionTags => {
            return matches!(&c.op, CmpOp::HasTag(t) if r.condition_tags.contains(t));
        }
    };
    match &c.op {
        CmpOp::Eq(v) => x == *v,
        CmpOp::Lt(v) => x < *v,
        CmpOp::Le(v) => x <= *v,
        CmpOp::Gt(v) => x > *v,
        CmpOp::Ge(v) => x >= *v,
        CmpOp::In(set) => set.contains(&x),
        CmpOp::HasTag(_) => false,
    }
}

/// Naive recount over pooled records: (group size, statistic).
pub fn oracle(records: &[PatientRecord], q: &Query) -> (usize, f64) {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| q.filter.conditions().iter().all(|c| holds(c, r)))
        .map(|r| match q.target_field {
            Field::AssessmentScore(i) => r.assessment_scores[i],
            Field::Age => r.age as f64,
            Field::GenderCode => r.gender_code as f64,
            Field::ConditionTags => 0.0,
        })
        .collect();
    let n = values.len();
    if n == 0 {
        return (0, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stat = match aggregation_of(&q.algo_id) {
        Aggregation::Count => n as f64,
        Aggregation::Mean => mean,
        Aggregation::Variance => values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64,
        Aggregation::ProportionAbove { threshold } => values.iter().filter(|&&v| v > threshold).count() as f64 / n as f64,
    };
    (n, stat)
}

/// Splits `records` across `parties` databases at random.
pub fn split(rng: &mut ChaCha8Rng, records: &[PatientRecord], parties: usize) -> Vec<ProtectedDatabase> {
    let mut buckets = vec![Vec::new(); parties];
    for r in records {
        buckets[rng.gen_range(0..parties)].push(r.clone());
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, recs)| ProtectedDatabase::new(format!("party{i}"), recs).unwrap())
        .collect()
}

pub fn digest(rng: &mut ChaCha8Rng) -> Digest {
    Digest(rng.gen())
}

/// A transaction that `signer` may append at time `t`.
pub fn random_tx(rng: &mut ChaCha8Rng, signer: &Identity, key: &NetworkKey, t: u64) -> Transaction {
    if rng.gen_bool(0.7) {
        Transaction::QueryAudit {
            pair_hash: digest(rng),
            querier_id: format!("robot{}", rng.gen_range(0..100)),
            timestamp: t,
        }
    } else {
        let hash = digest(rng);
        let plain: Vec<u8> = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
        let payload = encrypt_payload(&plain, key, rng);
        let signature = signer.sign(&consensus_signing_message(t, &hash, &payload));
        Transaction::ModelConsensus {
            timestamp: t,
            model_update_hash: hash,
            encrypted_payload: payload,
            signer_id: signer.id().to_owned(),
            signature,
        }
    }
}

/// A public ledger holding `n` random transactions from one registered signer.
pub fn random_ledger(rng: &mut ChaCha8Rng, n: usize) -> Ledger {
    let signer = Identity::generate("writer", rng);
    let key = NetworkKey::generate(rng);
    let mut ledger = Ledger::new(AccessPolicy::public());
    ledger.register_identity(signer.public());
    let mut t = 0;
    for _ in 0..n {
        t += rng.gen_range(0..3);
        let tx = random_tx(rng, &signer, &key, t);
        ledger.append_transaction(tx, &signer).unwrap();
    }
    ledger
}

/// `hubs` hubs on a line, each with `robots` subscribers and the same root model.
pub fn line_network(hubs: usize, robots: usize, root: &[f64]) -> HubNetwork {
    let mut net = HubNetwork::new();
    for h in 0..hubs {
        let repo = Repository::with_root(root.to_vec(), Hyperparams::default(), 0).unwrap();
        let mut hub = Hub::new(format!("h{h}"), repo);
        for r in 0..robots {
            hub.subscribe(format!("h{h}-r{r}")).unwrap();
        }
        net.add_hub(hub);
    }
    for h in 1..hubs {
        net.connect(&format!("h{}", h - 1), &format!("h{h}")).unwrap();
    }
    net
}

pub struct FuzzedRound {
    pub outcome: RoundState,
    pub oracle: RoundState,
    pub second_proposer_refused: bool,
    pub max_open_rounds: usize,
    pub heads_ok: bool,
}

/// Independent reading of the decision rule.
pub fn oracle_outcome(candidate: &[f64], baseline: &[f64], quorum: usize) -> RoundState {
    if candidate.len() < quorum {
        return RoundState::Expired;
    }
    let mut c = 0.0;
    let mut b = 0.0;
    for (x, y) in candidate.iter().zip(baseline) {
        c += x;
        b += y;
    }
    let n = candidate.len() as f64;
    if c / n > b / n {
        RoundState::Accepted
    } else {
        RoundState::Rejected
    }
}

fn fuzz_score(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.4) {
        [0.25, 0.5, 0.75][rng.gen_range(0..3)]
    } else {
        rng.gen_range(0.0..1.0)
    }
}

/// Drives one randomized round through open, feedback, resolve and
/// promotion or rollback, probing the single-proposer rule on the way.
pub fn fuzz_round(net: &mut HubNetwork, coord: &mut Coordinator, rng: &mut ChaCha8Rng, now: u64) -> FuzzedRound {
    let hubs: Vec<String> = net.hubs().map(|h| h.id().to_owned()).collect();
    let source = hubs[rng.gen_range(0..hubs.len())].clone();
    let source_robot = format!("{source}-r0");
    let baseline = net.hub(&source).unwrap().repo().checkout_consensual().unwrap();
    let params = if rng.gen_bool(0.2) {
        baseline.params.clone()
    } else {
        baseline.params.iter().map(|p| p + rng.gen_range(-0.1..0.1)).collect()
    };
    let model = net.hub_mut(&source).unwrap().repo_mut().commit(params, baseline.hyperparams, now).unwrap();
    let candidate = CandidateModel {
        model: model.clone(),
        source_hub: source.clone(),
        source_robot: source_robot.clone(),
        locked_score: 0.5,
        announced_at: now,
    };
    let robots: Vec<String> = net
        .hubs()
        .flat_map(|h| h.robots().map(|wd| wd.robot_id.clone()).collect::<Vec<_>>())
        .filter(|r| *r != source_robot)
        .collect();
    let quorum = rng.gen_range(1..=robots.len());
    let window = 10;
    let (id, _, _) = coord.open_and_announce(net, candidate, window, quorum, now).unwrap();
    let mut max_open = coord.open_round_count();

    let rival_hub = hubs[rng.gen_range(0..hubs.len())].clone();
    let rival_base = net.hub(&rival_hub).unwrap().repo().checkout_consensual().unwrap();
    let rival_params: Vec<f64> = rival_base.params.iter().map(|p| p + 1.0).collect();
    let rival = net.hub_mut(&rival_hub).unwrap().repo_mut().commit(rival_params, rival_base.hyperparams, now).unwrap();
    let refused = matches!(
        coord.open_and_announce(
            net,
            CandidateModel {
                model: rival,
                source_hub: rival_hub.clone(),
                source_robot: format!("{rival_hub}-r0"),
                locked_score: 0.5,
                announced_at: now,
            },
            window,
            1,
            now,
        ),
        Err(ConsensusError::RoundInProgress(open)) if open == id
    );
    max_open = max_open.max(coord.open_round_count());
    let rival_repo = net.hub_mut(&rival_hub).unwrap().repo_mut();
    rival_repo.rollback().unwrap();
    if rival_hub == source {
        rival_repo.set_head(&model.version_id).unwrap();
    }

    let mut cand_scores = Vec::new();
    let mut base_scores = Vec::new();
    let reporters: Vec<&String> = robots.iter().filter(|_| rng.gen_bool(0.6)).collect();
    for robot in reporters {
        let at = now + rng.gen_range(1..=window);
        let (c, b) = (fuzz_score(rng), fuzz_score(rng));
        let fb = |model_hash, score| FeedbackScore {
            robot_id: robot.clone(),
            model_hash,
            score,
            received_at: at,
        };
        coord.submit_feedback(id, fb(model.version_id, c), fb(baseline.version_id, b)).unwrap();
        cand_scores.push(c);
        base_scores.push(b);
    }
    let decision = coord.resolve(id, now + window).unwrap();
    max_open = max_open.max(coord.open_round_count());
    match decision.outcome {
        RoundState::Accepted => {
            coord.promote(id, net, &[], now + window).unwrap();
        }
        _ => coord.roll_back(id, net).unwrap(),
    }
    let expected_head = if decision.outcome == RoundState::Accepted { model.version_id } else { baseline.version_id };
    let heads_ok = net.hubs().all(|h| {
        h.repo().consensual_head() == Some(expected_head)
            && h.robots().all(|wd| wd.base == expected_head)
            && h.staged().is_none()
    });
    FuzzedRound {
        outcome: decision.outcome,
        oracle: oracle_outcome(&cand_scores, &base_scores, quorum),
        second_proposer_refused: refused,
        max_open_rounds: max_open,
        heads_ok,
    }
}

/// Four hubs with two robots each; `sessions_per_patient` sets the round count.
pub fn scenario(seed: u64, num_patients: usize, sessions_per_patient: usize) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        num_hubs: 4,
        robots_per_hub: 2,
        edge_density: 0.3,
        num_patients,
        sessions_per_patient,
        k_per_algorithm: 3,
        consensus_window: 10,
        quorum: None,
        feedback_noise_stddev: 0.05,
        fold_destination_updates: false,
        ledger_mode: LedgerMode::SemiPrivate,
        tuning: Tuning::default(),
    }
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, out);
        } else {
            out.push(p);
        }
    }
}

pub fn artifact_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    files_under(dir, &mut out);
    out
}

/// Searches every file under `dir` for record ids and for assessment scores
/// in decimal or little-endian binary form. Scores whose decimal rendering
/// is shorter than six characters are too common to attribute and only
/// their binary form is searched.
pub fn scan_for_raw_data(dir: &Path, patients: &[PatientRecord]) -> Vec<String> {
    let mut needles: Vec<(String, Vec<u8>)> = Vec::new();
    for p in patients {
        needles.push((format!("record id {}", p.record_id), p.record_id.as_bytes().to_vec()));
        for v in &p.assessment_scores {
            let text = v.to_string();
            if text.len() >= 6 {
                needles.push((format!("score text {text}"), text.into_bytes()));
            }
            needles.push((format!("score bytes {v}"), v.to_le_bytes().to_vec()));
        }
    }
    let mut hits = Vec::new();
    for file in artifact_files(dir) {
        let bytes = fs::read(&file).unwrap();
        for (what, needle) in &needles {
            if bytes.windows(needle.len()).any(|w| w == needle.as_slice()) {
                hits.push(format!("{what} in {}", file.display()));
            }
        }
    }
    hits
}

/// Rewrites one stored pair so its content no longer matches the ledger.
/// Returns the pair's hash.
pub fn tamper_one_pair(dir: &Path) -> String {
    let file = artifact_files(&dir.join("pairs"))
        .into_iter()
        .find(|p| p.extension().is_some_and(|e| e == "json"))
        .expect("a stored pair");
    let mut pair: serde_json::Value = serde_json::from_str(&fs::read_to_string(&file).unwrap()).unwrap();
    let ts = pair["query"]["timestamp"].as_u64().unwrap();
    pair["query"]["timestamp"] = (ts + 1).into();
    fs::write(&file, serde_json::to_string_pretty(&pair).unwrap()).unwrap();
    file.file_stem().unwrap().to_string_lossy().into_owned()
}

/// Parameters spread over many magnitudes, with occasional zeros and near-duplicates.
pub fn wild(rng: &mut ChaCha8Rng, like: Option<f64>) -> f64 {
    match (rng.gen_range(0..10), like) {
        (0, _) => 0.0,
        (1 | 2, Some(x)) => x * (1.0 + rng.gen_range(-1e-12..1e-12)),
        _ => {
            let sign = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
            sign * rng.gen_range(1.0..2.0) * 2f64.powi(rng.gen_range(-40..40))
        }
    }
}

pub fn params(rng: &mut ChaCha8Rng, dim: usize, like: Option<&[f64]>) -> Vec<f64> {
    (0..dim).map(|i| wild(rng, like.map(|p| p[i]))).collect()
}

pub fn bits(p: &[f64]) -> Vec<u64> {
    p.iter().map(|x| x.to_bits()).collect()
}

pub fn batch(rng: &mut ChaCha8Rng, id_dim: usize, bd_dim: usize, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            x: FeatureVector::new(
                (0..id_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                (0..bd_dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
            ),
            feedback: TherapistFeedback::new(rng.gen_range(0.0..1.0), "r", format!("s{i}"), i as u64),
        })
        .collect()
}

pub fn naive_loss(params: &[f64], samples: &[Sample], activation: Activation) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let xs: Vec<f64> = s.x.id_features.iter().chain(&s.x.bd_features).copied().collect();
        let mut z = params[params.len() - 1];
        for (w, x) in params.iter().zip(&xs) {
            z += w * x;
        }
        let p = match activation {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        };
        total += (p - s.feedback.target).powi(2);
    }
    total / samples.len() as f64
}

/// Central differences of the naive loss.
pub fn numeric_gradient(params: &[f64], samples: &[Sample], activation: Activation) -> Vec<f64> {
    let h = 1e-6;
    (0..params.len())
        .map(|i| {
            let mut up = params.to_vec();
            let mut down = params.to_vec();
            up[i] += h;
            down[i] -= h;
            (naive_loss(&up, samples, activation) - naive_loss(&down, samples, activation)) / (2.0 * h)
        })
        .collect()
}
