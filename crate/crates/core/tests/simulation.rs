mod common;

use p4qs_core::config::{ChurnAction, ChurnEvent, Protocol, SimConfig};
use p4qs_core::peer::Fault;
use p4qs_core::scenarios::{run_scenario, Preset};
use p4qs_core::simnet::{simulate, SimError};

use common::small_config;

fn churn(at_ms: u64, peer: u32, action: ChurnAction) -> ChurnEvent {
    ChurnEvent { at_ms, peer, action }
}

#[test]
fn same_seed_same_trace() {
    let a = simulate(small_config(4)).unwrap();
    let b = simulate(small_config(4)).unwrap();
    let c = simulate(small_config(5)).unwrap();
    assert_eq!(a.trace_digest, b.trace_digest);
    assert_eq!(a.trace_records, b.trace_records);
    assert_ne!(a.trace_digest, c.trace_digest);
}

#[test]
fn zero_clients_only_move_tickets() {
    let mut cfg = small_config(1);
    cfg.workload.clients = 0;
    let dir = tempfile::TempDir::new().unwrap();
    let trace = dir.path().join("t.jsonl");
    cfg.trace_path = Some(trace.display().to_string());
    let o = simulate(cfg).unwrap();
    assert!(o.planned.is_empty());
    assert!(o.adversary.batches.is_empty());
    let text = std::fs::read_to_string(trace).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        match v["ev"].as_str().unwrap() {
            "deliver" => {
                let kind = v["kind"].as_u64().unwrap();
                assert!(kind == 5 || kind == 6, "unexpected kind {kind}");
            }
            "distribute" | "timer" => {}
            other => panic!("unexpected event {other}"),
        }
    }
}

#[test]
fn every_batch_reaches_k_and_counts_reconcile() {
    for k in [2, 4, 6] {
        let mut cfg = small_config(2);
        cfg.k = k;
        let o = simulate(cfg).unwrap();
        assert!(o.lbs_batch_sizes().all(|n| n >= k), "K={k}");
        assert!(o.net.reconciles());
        let (inflow, outflow) = o.window_balance();
        assert_eq!(inflow, outflow);
        assert_eq!(o.total(|m| m.location_leaks), 0);
    }
}

#[test]
fn undersized_fault_is_a_breach() {
    let mut cfg = small_config(1);
    cfg.fault = Some(Fault::UndersizedBatch);
    match simulate(cfg) {
        Err(SimError::InvariantBreach(b)) => assert!(b[0].contains("K = 4"), "{b:?}"),
        other => panic!("expected a breach, got {:?}", other.map(|o| o.trace_digest)),
    }
}

#[test]
fn forged_tickets_get_the_sender_revoked() {
    let mut cfg = small_config(3);
    cfg.churn = vec![churn(0, 7, ChurnAction::InjectInvalid)];
    let o = simulate(cfg).unwrap();
    let revokers = o.metrics.iter().filter(|m| m.revoked.iter().any(|p| p.0 == 7)).count();
    assert!(revokers > 0);
    assert!(o.total(|m| m.exchange_invalid) > 0);
    // A forged ticket never gets past the server.
    let rejected = o.adversary.rejections().count();
    assert_eq!(rejected, 0);
}

#[test]
fn departed_peers_are_routed_around() {
    let mut cfg = small_config(6);
    cfg.churn = vec![
        churn(30_000, 12, ChurnAction::Leave),
        churn(31_000, 13, ChurnAction::Leave),
        churn(90_000, 12, ChurnAction::Join),
        churn(100_000, 14, ChurnAction::Rejoin),
    ];
    let o = simulate(cfg).unwrap();
    assert!(o.net.reconciles());
    let done = o.total(|m| m.completed);
    assert!(done as f64 >= 0.8 * o.planned.len() as f64, "{done} of {}", o.planned.len());
}

#[test]
fn non_cooperative_peers_cost_retries_not_anonymity() {
    let mut cfg = small_config(7);
    cfg.churn = (10..16).map(|p| churn(0, p, ChurnAction::NonCooperative)).collect();
    let o = simulate(cfg).unwrap();
    assert!(o.net.dropped_noncooperative > 0);
    assert!(o.lbs_batch_sizes().all(|n| n >= 4));
    assert!(o.total(|m| m.retries) + o.total(|m| m.failed) > 0);
}

#[test]
fn pseudonym_baseline_is_fully_linkable() {
    let mut cfg = small_config(8);
    cfg.protocol = Protocol::Pseudonym;
    let (_, r) = run_scenario(cfg).unwrap();
    assert_eq!(r.linkage_accuracy, Some(1.0));
    assert_eq!(r.ownership_analytic, 1.0);
    assert!(r.queries_completed > 0);
}

#[test]
fn exchange_dilutes_ledger_linkage() {
    let (_, p4) = run_scenario(small_config(9)).unwrap();
    let mut base = small_config(9);
    base.protocol = Protocol::Pseudonym;
    let (_, b) = run_scenario(base).unwrap();
    assert!(p4.linkage_accuracy.unwrap() < 0.25);
    assert!(p4.linkage_accuracy <= b.linkage_accuracy);
}

#[test]
fn highway_speeders_hidden_by_tickets() {
    let (_, p4) = run_scenario(Preset::Dusw.config(1)).unwrap();
    let mut base = Preset::Dusw.config(1);
    base.protocol = Protocol::Pseudonym;
    let (_, b) = run_scenario(base).unwrap();
    assert!(p4.speeders > 0);
    assert_eq!(p4.speeders, b.speeders);
    assert!(p4.speed_inference_rate.unwrap() < b.speed_inference_rate.unwrap());
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = Preset::Dusw.config(3);
    cfg.churn = vec![churn(5, 1, ChurnAction::Leave)];
    let back = SimConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
}
