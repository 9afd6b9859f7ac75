//! Builds a decision table offline, prints a slice of it, and uses it to
//! route a few requests online.
//!
//! cargo run --release --example decision_table -- [out.json]

use std::sync::Arc;

use ppdsim::costmodel::CostModel;
use ppdsim::routing::{discretize, DecisionTable, RouteRequest, Router, RoutingPolicy, SessionTable, SloWeights};
use ppdsim::sweep::{build_table, TableBuild};
use ppdsim::workload::ConvDigest;

fn main() -> ppdsim::Result<()> {
    let cost = Arc::new(CostModel::default());
    let mut opts = TableBuild::new("2P_2D".parse()?, SloWeights::BALANCED);
    opts.duration_s = 5.0;
    let table = build_table(&cost, &opts)?;

    let mut entries: Vec<_> = table.entries().collect();
    entries.sort_by_key(|(k, _)| **k);
    let local = entries.iter().filter(|(_, e)| e.x_star == 1).count();
    println!("{} entries, {local} choose decode-local prefill", table.len());
    for (key, e) in entries.iter().filter(|(k, _)| k.qps_bin.qps() == 8.0) {
        if e.available {
            println!(
                "{:<32} dTTFT {:+.3} dTPOT {:+.3} score {:+.3} x*={}",
                key.to_string(),
                e.delta_ttft,
                e.delta_tpot,
                e.score,
                e.x_star
            );
        } else {
            println!("{:<32} unavailable, x*=0", key.to_string());
        }
    }

    // A latency-insensitive deployment re-scores without new measurements.
    let tpot_heavy = table.reweighted(SloWeights::new(1.0, 20.0)?);
    let local = tpot_heavy.entries().filter(|(_, e)| e.x_star == 1).count();
    println!("with weights (1, 20): {local} local entries");

    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, table.to_json())?;
        let back = DecisionTable::from_json(&std::fs::read_to_string(&path)?)?;
        assert_eq!(back.len(), table.len());
        println!("wrote {path}");
    }

    let mut router = Router::new(RoutingPolicy::dynamic(Arc::new(table)));
    let mut sessions = SessionTable::new();
    let conv = ConvDigest::of("Summarize this contract.");
    for (turn, n_in, n_ctx) in [(1, 2000, 0), (2, 1800, 2200), (3, 6000, 4200)] {
        let req = RouteRequest {
            conv_hash: conv,
            turn_index: turn,
            n_in,
            n_out: 200,
            n_ctx,
        };
        let d = router.decide(&req, 8.0, turn as f64, &mut sessions, &|_| false);
        if d.new_session {
            sessions.assign(&conv, "D0");
        }
        let key = match discretize(turn, n_in, 200, n_ctx, 8.0) {
            Ok(k) => k.to_string(),
            Err(_) => "-".into(),
        };
        println!("turn {turn} key {key} -> {:?} (x={})", d.target, d.x_used);
    }
    Ok(())
}
