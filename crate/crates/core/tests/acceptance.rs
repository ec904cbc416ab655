//! Acceptance suite. Each criterion prints one PASS or FAIL line to stderr
//! (uncaptured) and then asserts its outcome.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;

use robochain::audit::verify_pair;
use robochain::consensus::{ConsensusPayload, Coordinator, RoundId, RoundState};
use robochain::learner::{fine_tune, gradient, Activation, FeatureVector, OptimizerState, Sample, TherapistFeedback, TrainConfig, TrainingBatch, UpdateRule};
use robochain::ledger::{encode_blocks, validate_encoded, Block, NetworkKey, Transaction};
use robochain::modelstore::{apply_delta, Hyperparams, ModelVersion, Repository};
use robochain::opal::{federate_query, Aggregation, FederationOptions, GroupSize, ProtectedDatabase, Statistic};
use robochain::simnet::{replay, run_scenario, simulate, write_artifacts, ScenarioConfig, SimOutcome};

fn report(id: u32, title: &str, ok: bool, detail: String, elapsed: Duration) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let line = format!("{verdict} [{id:>2}] {title}: {detail} ({:.2} s)\n", elapsed.as_secs_f64());
    // Written to the raw handle so the line shows even when test output is captured.
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {id} failed: {detail}");
}

fn blocks_of(outcome_ledger: &robochain::ledger::Ledger) -> Vec<Block> {
    outcome_ledger.view("auditor").unwrap().blocks().to_vec()
}

#[test]
fn criterion_01_ledger_integrity() {
    let start = Instant::now();
    let mut rng = common::rng(1);
    let mut chains = Vec::with_capacity(1000);
    let mut clean = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(5..=50);
        let ledger = common::random_ledger(&mut rng, n);
        let bytes = encode_blocks(&blocks_of(&ledger));
        let r = validate_encoded(&bytes);
        if r.ok && r.blocks_checked == n + 1 {
            clean += 1;
        }
        chains.push((blocks_of(&ledger), bytes));
    }
    let mut located = 0;
    for _ in 0..200 {
        let (blocks, bytes) = &chains[rng.gen_range(0..chains.len())];
        let offset = rng.gen_range(0..bytes.len());
        let mut end = 0;
        let mut target = 0;
        for (i, b) in blocks.iter().enumerate() {
            end += 4 + b.encode().len();
            if offset < end {
                target = i as u64;
                break;
            }
        }
        let mut mutated = bytes.clone();
        mutated[offset] ^= rng.gen_range(1..=255u8);
        let r = validate_encoded(&mutated);
        if !r.ok && r.first_broken == Some(target) {
            located += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        "ledger integrity",
        clean == 1000 && located == 200 && elapsed < Duration::from_secs(10),
        format!("{clean}/1000 random chains validate, {located}/200 byte mutations located at the earliest block"),
        elapsed,
    );
}

#[test]
fn criterion_02_audit_completeness() {
    let start = Instant::now();
    let out = simulate(&common::scenario(2, 40, 4)).unwrap();
    let r = &out.report;
    let view = out.ledger.view("auditor").unwrap();
    let audit_txs = view
        .blocks()
        .iter()
        .flat_map(|b| &b.transactions)
        .filter(|t| matches!(t, Transaction::QueryAudit { .. }))
        .count() as u64;
    let pairs: Vec<_> = out.stores.values().flat_map(|s| s.iter()).collect();
    let verified = pairs.iter().filter(|p| verify_pair(&view, p).unwrap_or(false)).count();

    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&out, dir.path()).unwrap();
    let before = replay(dir.path(), Some(&out.network_key)).unwrap();
    let tampered = common::tamper_one_pair(dir.path());
    let after = replay(dir.path(), Some(&out.network_key)).unwrap();
    let elapsed = start.elapsed();
    let ok = r.queries_issued >= 100
        && r.answers_delivered == audit_txs
        && r.answers_delivered == r.query_audit_txs
        && verified == pairs.len()
        && pairs.len() as u64 == audit_txs
        && before.all_passed()
        && after.failed_pairs == vec![tampered]
        && elapsed < Duration::from_secs(30);
    report(
        2,
        "audit completeness",
        ok,
        format!(
            "{} queries, {} answers, {audit_txs} audit txs, {verified}/{} pairs verify, replay after tampering flags {:?}",
            r.queries_issued,
            r.answers_delivered,
            pairs.len(),
            after.failed_pairs.len()
        ),
        elapsed,
    );
}

#[test]
fn criterion_03_privacy_suppression() {
    let start = Instant::now();
    let mut rng = common::rng(3);
    let mut violations = 0;
    let mut suppressed = 0;
    for i in 0..10_000 {
        let k = rng.gen_range(2..=8);
        let n = rng.gen_range(0..60);
        let recs = common::records(&mut rng, "p", n);
        let reg = common::registry(k);
        let q = common::query(&mut rng, i);
        let answer = if rng.gen_bool(0.5) {
            ProtectedDatabase::new("p", recs.clone()).unwrap().execute_query(&reg, &q).unwrap()
        } else {
            let parties = rng.gen_range(1..5);
            federate_query(&common::split(&mut rng, &recs, parties), &reg, &q, FederationOptions::default()).unwrap().answer
        };
        let (size, _) = common::oracle(&recs, &q);
        let below = size < k as usize;
        let hidden = answer.statistic == Statistic::Suppressed && answer.group_size == GroupSize::BelowThreshold;
        if below != hidden || (below && answer.relative_comparison_pct.is_some()) {
            violations += 1;
        }
        suppressed += usize::from(hidden);
    }
    let out = simulate(&common::scenario(13, 40, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&out, dir.path()).unwrap();
    let leaks = common::scan_for_raw_data(dir.path(), &out.patients);
    let files = common::artifact_files(dir.path()).len();
    let elapsed = start.elapsed();
    report(
        3,
        "privacy suppression",
        violations == 0 && leaks.is_empty() && suppressed > 0,
        format!(
            "{violations} threshold violations in 10000 pairs ({suppressed} suppressed), {} raw values found in {files} artifact files",
            leaks.len()
        ),
        elapsed,
    );
}

#[test]
fn criterion_04_federation_exactness() {
    let start = Instant::now();
    let mut rng = common::rng(4);
    let reg = common::registry(3);
    let mut mismatches = 0;
    let mut compared = 0;
    let mut worst_var = 0.0f64;
    for i in 0..1000 {
        let n = rng.gen_range(10..200);
        let recs = common::records(&mut rng, "pool", n);
        let parties = rng.gen_range(2..=6);
        let dbs = common::split(&mut rng, &recs, parties);
        for (algo, aggregation) in common::ALGOS {
            let mut q = common::query(&mut rng, i);
            q.algo_id = algo.into();
            if rng.gen_bool(0.5) {
                q.filter = Default::default();
            }
            let fed = federate_query(&dbs, &reg, &q, FederationOptions::default()).unwrap().answer;
            let (size, stat) = common::oracle(&recs, &q);
            match fed.statistic {
                Statistic::Suppressed => mismatches += usize::from(size >= 3),
                Statistic::Value(v) => {
                    compared += 1;
                    let size_ok = fed.group_size == GroupSize::Exact(size as u64);
                    let value_ok = match aggregation {
                        Aggregation::Variance => {
                            let rel = if stat == 0.0 { v.abs() } else { ((v - stat) / stat).abs() };
                            worst_var = worst_var.max(rel);
                            rel <= 1e-9
                        }
                        _ => v == stat,
                    };
                    mismatches += usize::from(!(size_ok && value_ok));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        4,
        "federation exactness",
        mismatches == 0 && compared > 2000,
        format!("1000 splits, {compared} released statistics compared, {mismatches} mismatches, worst variance rel. error {worst_var:.2e}"),
        elapsed,
    );
}

#[test]
fn criterion_05_delta_round_trip() {
    let start = Instant::now();
    let mut rng = common::rng(5);
    let mut exact = 0;
    for _ in 0..1000 {
        let mut repo = Repository::new(64);
        let a = repo.commit(common::params(&mut rng, 64, None), Hyperparams::default(), 0).unwrap();
        let b = repo.commit(common::params(&mut rng, 64, Some(&a.params)), Hyperparams::default(), 1).unwrap();
        let d = repo.diff(&a.version_id, &b.version_id).unwrap();
        let rebuilt = apply_delta(&repo.checkout(&a.version_id).unwrap(), &d).unwrap();
        if common::bits(&rebuilt) == common::bits(&repo.checkout(&b.version_id).unwrap().params) {
            exact += 1;
        }
    }
    let elapsed = start.elapsed();
    report(5, "delta round-trip", exact == 1000, format!("{exact}/1000 64-dim pairs reproduced bitwise"), elapsed);
}

#[test]
fn criterion_06_gradient_check() {
    let start = Instant::now();
    let mut rng = common::rng(6);
    let mut agree = 0;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let id_dim = rng.gen_range(1..6);
        let bd_dim = rng.gen_range(0..4);
        let n = rng.gen_range(1..40);
        let samples = common::batch(&mut rng, id_dim, bd_dim, n);
        let params: Vec<f64> = (0..=id_dim + bd_dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let act = if rng.gen_bool(0.8) { Activation::Sigmoid } else { Activation::Identity };
        let analytic = gradient(&params, &samples, act).unwrap();
        let numeric = common::numeric_gradient(&params, &samples, act);
        let ok = analytic.iter().zip(&numeric).all(|(a, n)| {
            let scale = a.abs().max(n.abs());
            let rel = if scale < 1e-10 { 0.0 } else { (a - n).abs() / scale };
            worst = worst.max(rel);
            rel <= 1e-5
        });
        agree += usize::from(ok);
    }
    let model = ModelVersion::new(vec![0.0, 0.0], Hyperparams { learning_rate: 0.1, ..Hyperparams::default() }, None, 0);
    let sample = Sample { x: FeatureVector::new(vec![1.0], vec![]), feedback: TherapistFeedback::new(1.0, "r", "s", 0) };
    let cfg = TrainConfig { activation: Activation::Identity, rule: UpdateRule::Sgd };
    let step = fine_tune(&model, TrainingBatch::new(vec![sample]), OptimizerState::for_model(&model), 1, cfg, 1).unwrap();
    let w = step.model.params[0];
    let elapsed = start.elapsed();
    report(
        6,
        "gradient check",
        agree == 100 && w == 0.2,
        format!("{agree}/100 batches within 1e-5 (worst {worst:.2e}), single step gives w = {w}"),
        elapsed,
    );
}

#[test]
fn criterion_07_consensus_decision_oracle() {
    let start = Instant::now();
    let mut rng = common::rng(7);
    let mut agree = 0;
    let mut single = 0;
    let mut heads = 0;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let total = 500;
    let mut done = 0;
    while done < total {
        let mut net = common::line_network(rng.gen_range(2..5), rng.gen_range(1..4), &[0.2, -0.1, 0.0]);
        let mut coord = Coordinator::new();
        for r in 0..25 {
            let f = common::fuzz_round(&mut net, &mut coord, &mut rng, 1 + 20 * r);
            agree += usize::from(f.outcome == f.oracle);
            single += usize::from(f.second_proposer_refused && f.max_open_rounds == 1);
            heads += usize::from(f.heads_ok);
            *seen.entry(format!("{:?}", f.outcome)).or_default() += 1;
            done += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        7,
        "consensus decision oracle",
        agree == total && single == total && heads == total && seen.len() == 3,
        format!("{agree}/{total} outcomes match, single proposer held in {single}/{total}, outcomes {seen:?}"),
        elapsed,
    );
}

fn heads_after(out: &SimOutcome) -> Vec<BTreeMap<String, Vec<u64>>> {
    let mut after: Vec<_> = out.pre_round_heads[1..].to_vec();
    after.push(
        out.network
            .hubs()
            .map(|h| (h.id().to_owned(), common::bits(&h.repo().checkout_head().unwrap().params)))
            .collect(),
    );
    after
}

#[test]
fn criterion_08_rollback_exactness() {
    let start = Instant::now();
    let mut exact_rounds = 0;
    let mut rounds = 0;
    let mut non_rejected = 0;
    let mut robots_ok = true;
    for seed in 0..50u64 {
        let mut cfg = common::scenario(800 + seed, 16, 2);
        if seed % 2 == 0 {
            // Unchanged candidate with noise-free feedback: a tie.
            cfg.tuning.epochs = 0;
            cfg.feedback_noise_stddev = 0.0;
        } else {
            // Trained candidate, unreachable quorum: the round expires.
            cfg.quorum = Some(cfg.reporters() + 1);
        }
        let out = simulate(&cfg).unwrap();
        non_rejected += out.report.rounds.iter().filter(|r| r.decision == RoundState::Accepted).count();
        for (before, after) in out.pre_round_heads.iter().zip(heads_after(&out)) {
            rounds += 1;
            exact_rounds += usize::from(*before == after);
        }
        for hub in out.network.hubs() {
            let head = common::bits(&hub.repo().checkout_head().unwrap().params);
            robots_ok &= hub.robots().all(|wd| common::bits(&wd.params) == head) && hub.staged().is_none();
        }
    }
    let elapsed = start.elapsed();
    report(
        8,
        "rollback exactness",
        exact_rounds == rounds && non_rejected == 0 && robots_ok,
        format!("{exact_rounds}/{rounds} failed rounds left every hub head bitwise unchanged across 50 scenarios, robot copies restored: {robots_ok}"),
        elapsed,
    );
}

#[test]
fn criterion_09_notarization_round_trip() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut accepted_total = 0;
    let mut rejected_total = 0;
    for cfg in [common::scenario(9, 40, 2), ScenarioConfig { feedback_noise_stddev: 0.6, ..common::scenario(19, 40, 2) }] {
        let out = simulate(&cfg).unwrap();
        let view = out.ledger.view(&out.report.rounds[0].source_robot).unwrap();
        let consensus_txs: Vec<_> = view
            .blocks()
            .iter()
            .flat_map(|b| &b.transactions)
            .filter(|t| matches!(t, Transaction::ModelConsensus { .. }))
            .collect();
        if consensus_txs.len() != out.report.rounds.len() {
            failures.push(format!("{} consensus txs for {} rounds", consensus_txs.len(), out.report.rounds.len()));
        }
        let stranger = NetworkKey::from_bytes([7; 32]);
        let mut adopted = Vec::new();
        for rr in &out.report.rounds {
            checked += 1;
            let round = out.coordinator.round(RoundId(rr.round_id)).unwrap();
            let tx = view.transaction(rr.notarized_at).unwrap();
            let Transaction::ModelConsensus { model_update_hash, .. } = tx else {
                failures.push(format!("round {} points at a non-consensus tx", rr.round_id));
                continue;
            };
            match ConsensusPayload::open(tx, &out.network_key) {
                Ok(p) => {
                    let expect = ConsensusPayload::from_round(round);
                    let same_scores = p.participants.len() == round.candidate_scores.len()
                        && p.participants.iter().zip(round.candidate_scores.iter().zip(&round.baseline_scores)).all(
                            |(ps, (c, b))| ps.robot_id == c.robot_id && ps.candidate_score == c.score && ps.baseline_score == b.score,
                        );
                    if p != expect || !same_scores || p.decision != round.state || p.recompute().outcome != round.state {
                        failures.push(format!("round {} payload differs", rr.round_id));
                    }
                }
                Err(e) => failures.push(format!("round {}: {e}", rr.round_id)),
            }
            if ConsensusPayload::open(tx, &stranger).is_ok() {
                failures.push(format!("round {} opened with a non-member key", rr.round_id));
            }
            if *model_update_hash != round.update_hash {
                failures.push(format!("round {} update hash differs from the round's", rr.round_id));
            }
            if round.state == RoundState::Accepted {
                accepted_total += 1;
                adopted.push(*model_update_hash);
            } else {
                rejected_total += 1;
            }
        }
        for hub in out.network.hubs() {
            if hub.adopted_updates() != adopted.as_slice() {
                failures.push(format!("{} adopted updates differ from the notarized hashes", hub.id()));
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        9,
        "notarization round-trip",
        failures.is_empty() && accepted_total > 0 && rejected_total > 0,
        format!("{checked} rounds ({accepted_total} accepted, {rejected_total} not), problems: {failures:?}"),
        elapsed,
    );
}

#[test]
fn criterion_10_end_to_end_convergence() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in [7u64, 101, 202, 303, 404] {
        let cfg = common::scenario(seed, 40, 4);
        let out = simulate(&cfg).unwrap();
        let r = &out.report;
        let mut best = r.initial_heldout_mse;
        let mut violations = 0;
        let mut promotions = 0;
        let mut last = r.initial_heldout_mse;
        for round in r.rounds.iter().filter(|x| x.decision == RoundState::Accepted) {
            promotions += 1;
            if round.heldout_mse > best {
                violations += 1;
            }
            best = round.heldout_mse;
            last = round.heldout_mse;
        }
        let ratio = r.final_heldout_mse / r.initial_heldout_mse;
        let consistent = last == r.final_heldout_mse
            && out.network.hubs().all(|h| h.repo().consensual_head() == r.final_consensual);
        let pass = r.rounds.len() == 20 && promotions > 0 && violations * 20 <= promotions.max(20) && ratio < 0.25 && consistent;
        ok &= pass;
        lines.push(format!("seed {seed}: {promotions} promotions, {violations} violations, final/initial {ratio:.3}"));
    }
    let elapsed = start.elapsed();
    report(10, "end-to-end convergence", ok && elapsed < Duration::from_secs(120), lines.join("; "), elapsed);
}

#[test]
fn criterion_11_determinism() {
    let start = Instant::now();
    let mut configs = vec![common::scenario(11, 40, 4), common::scenario(12, 16, 2)];
    configs[1].fold_destination_updates = true;
    configs[1].ledger_mode = robochain::simnet::LedgerMode::Private;
    let mut single = common::scenario(13, 2, 1);
    single.num_hubs = 1;
    single.robots_per_hub = 1;
    single.quorum = Some(1);
    single.tuning.include_source_feedback = true;
    configs.push(single);
    let mut identical = 0;
    for cfg in &configs {
        let a = run_scenario(cfg).unwrap();
        let b = run_scenario(cfg).unwrap();
        identical += usize::from(a.to_json() == b.to_json() && serde_json::to_vec(&a).unwrap() == serde_json::to_vec(&b).unwrap());
    }
    let elapsed = start.elapsed();
    report(
        11,
        "determinism",
        identical == configs.len(),
        format!("{identical}/{} scenarios produced bitwise-identical reports on rerun", configs.len()),
        elapsed,
    );
}
