mod common;

use proptest::prelude::*;

use robochain::consensus::RoundState;
use robochain::ledger::Transaction;
use robochain::simnet::{
    build_topology, inspect_round, replay, run_scenario, simulate, write_artifacts, EventPayload, EventQueue,
    ScenarioConfig, SimError,
};

const DEFAULT_TOML: &str = include_str!("../../../scenarios/default.toml");

fn bits(p: &[f64]) -> Vec<u64> {
    p.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn shipped_config_loads() {
    let cfg = ScenarioConfig::from_toml(DEFAULT_TOML).unwrap();
    assert_eq!(cfg.rounds(), 20);
    assert_eq!(cfg.num_robots(), 8);
    assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn single_robot_promotes_once() {
    let mut cfg = common::scenario(3, 1, 1);
    cfg.num_hubs = 1;
    cfg.robots_per_hub = 1;
    cfg.quorum = Some(1);
    cfg.tuning.include_source_feedback = true;
    let out = simulate(&cfg).unwrap();
    let r = &out.report;
    assert_eq!(r.promotions, 1);
    assert_eq!(r.rounds[0].decision, RoundState::Accepted);
    assert!(r.rounds[0].candidate_mean > r.rounds[0].baseline_mean);
    assert!(r.query_audit_txs >= 1);
    assert_eq!(r.model_consensus_txs, 1);
    let hub = out.network.hub("hub0").unwrap();
    assert_eq!(hub.repo().consensual_head(), Some(r.rounds[0].candidate_id));
}

#[test]
fn identical_candidate_is_rejected_and_heads_hold() {
    let mut cfg = common::scenario(4, 16, 2);
    cfg.feedback_noise_stddev = 0.0;
    cfg.tuning.epochs = 0;
    let out = simulate(&cfg).unwrap();
    assert_eq!(out.report.rounds.len(), 4);
    for round in &out.report.rounds {
        assert_eq!(round.decision, RoundState::Rejected);
        assert_eq!(round.candidate_mean, round.baseline_mean);
    }
    let before = &out.pre_round_heads[0];
    for hub in out.network.hubs() {
        assert_eq!(&bits(&hub.repo().checkout_head().unwrap().params), &before[hub.id()]);
    }
}

#[test]
fn reports_are_pure_functions_of_config() {
    let cfg = common::scenario(21, 16, 2);
    assert_eq!(run_scenario(&cfg).unwrap().to_json(), run_scenario(&cfg).unwrap().to_json());
    let other = ScenarioConfig { seed: 22, ..cfg.clone() };
    assert_ne!(run_scenario(&cfg).unwrap().to_json(), run_scenario(&other).unwrap().to_json());
}

#[test]
fn audit_is_conserved_and_ledger_is_typed() {
    let out = simulate(&common::scenario(5, 24, 2)).unwrap();
    let r = &out.report;
    assert_eq!(r.answers_delivered, r.query_audit_txs);
    assert_eq!(r.verifiable_pairs, r.query_audit_txs);
    assert_eq!(r.model_consensus_txs, r.rounds.len() as u64);
    assert_eq!(r.promotions + r.rollbacks, r.rounds.len() as u64);
    let view = out.ledger.view("hub0-robot0").unwrap();
    let audits = view.blocks().iter().flat_map(|b| &b.transactions).filter(|t| matches!(t, Transaction::QueryAudit { .. }));
    assert_eq!(audits.count() as u64, r.query_audit_txs);
    assert!(out.ledger.validate_chain().ok);
}

#[test]
fn artifacts_replay_clean_and_pinpoint_tampering() {
    let out = simulate(&common::scenario(6, 24, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&out, dir.path()).unwrap();

    let clean = replay(dir.path(), Some(&out.network_key)).unwrap();
    assert!(clean.all_passed(), "{clean:?}");
    assert_eq!(clean.pairs_checked as u64, out.report.verifiable_pairs);
    assert_eq!(clean.payloads_checked, out.report.rounds.len());

    let keyless = replay(dir.path(), None).unwrap();
    assert!(keyless.all_passed());
    assert!(keyless.payload_checks_skipped);
    assert_eq!(keyless.payloads_checked, 0);
    assert!(!keyless.notices.is_empty());

    let insp = inspect_round(dir.path(), 0, Some(&out.network_key)).unwrap();
    assert_eq!(insp.recomputed_decision, Some(insp.round.decision));
    assert!(matches!(inspect_round(dir.path(), 0, None), Ok(i) if i.payload.is_none()));
    assert!(matches!(inspect_round(dir.path(), 999, None), Err(SimError::UnknownRound(999))));

    let hash = common::tamper_one_pair(dir.path());
    let after = replay(dir.path(), Some(&out.network_key)).unwrap();
    assert_eq!(after.failed_pairs, vec![hash]);
    assert!(after.chain.unwrap().ok);
}

#[test]
fn missing_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(replay(dir.path(), None), Err(SimError::MissingArtifacts(_))));
}

#[test]
fn persisted_artifacts_hold_no_raw_patient_data() {
    let out = simulate(&common::scenario(8, 24, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&out, dir.path()).unwrap();
    let hits = common::scan_for_raw_data(dir.path(), &out.patients);
    assert!(hits.is_empty(), "{hits:#?}");
    // The scan itself must notice a planted leak.
    let p = &out.patients[0];
    std::fs::write(dir.path().join("leak.bin"), p.assessment_scores[1].to_le_bytes()).unwrap();
    std::fs::write(dir.path().join("leak.txt"), &p.record_id).unwrap();
    assert_eq!(common::scan_for_raw_data(dir.path(), &out.patients).len(), 2);
}

#[test]
fn private_ledger_runs_end_to_end() {
    let mut cfg = common::scenario(9, 16, 1);
    cfg.ledger_mode = robochain::simnet::LedgerMode::Private;
    let out = simulate(&cfg).unwrap();
    assert!(out.report.ledger.ok);
    assert!(out.ledger.view("outsider").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topologies_are_connected_trees_plus_extras(seed: u64, hubs in 1usize..12, density in 0.0f64..=1.0) {
        let mut cfg = common::scenario(seed, 2 * hubs, 1);
        cfg.num_hubs = hubs;
        cfg.edge_density = density;
        let t = build_topology(&cfg).unwrap();
        prop_assert!(t.is_connected());
        prop_assert!(t.edges.len() >= hubs - 1);
        prop_assert!(t.edges.len() <= hubs * (hubs - 1) / 2);
        prop_assert!(t.edges.iter().all(|(a, b)| a < b));
        prop_assert_eq!(t.robots().count(), hubs * 2);
        prop_assert_eq!(build_topology(&cfg).unwrap(), t);
    }

    #[test]
    fn events_pop_in_time_then_insertion_order(ticks in proptest::collection::vec(0u64..20, 1..60)) {
        let mut q = EventQueue::new();
        for (i, t) in ticks.iter().enumerate() {
            q.schedule(*t, EventPayload::Train { robot: format!("r{i}") });
        }
        let mut last = None;
        while let Some(ev) = q.pop() {
            prop_assert!(last < Some((ev.at, ev.seq)));
            prop_assert_eq!(ticks[ev.seq as usize], ev.at);
            last = Some((ev.at, ev.seq));
        }
    }
}
