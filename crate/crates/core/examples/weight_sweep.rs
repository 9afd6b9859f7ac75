//! Measures a decision table once, then re-scores it under several SLO
//! weightings and reports how much traffic each sends to decode-local
//! prefill and what that does to TTFT and TPOT.
//!
//! cargo run --release --example weight_sweep

use std::sync::Arc;

use ppdsim::costmodel::CostModel;
use ppdsim::routing::SloWeights;
use ppdsim::sweep::{build_table, weight_sweep, weight_sweep_csv, TableBuild, WeightSweepPlan};

fn main() -> ppdsim::Result<()> {
    let cost = Arc::new(CostModel::default());
    let shape = "2P_2D".parse()?;
    let mut opts = TableBuild::new(shape, SloWeights::BALANCED);
    opts.duration_s = 5.0;
    let measured = build_table(&cost, &opts)?;

    let weights = [(1.0, 0.0), (1.0, 1.0), (1.0, 3.0), (1.0, 6.0), (0.0, 1.0)]
        .map(|(a, b)| SloWeights::new(a, b).expect("valid weights"));
    let plan = WeightSweepPlan {
        shape,
        duration_s: 10.0,
        ..Default::default()
    };
    let rows = weight_sweep(&cost, &measured, &weights, &plan)?;
    print!("{}", weight_sweep_csv(&rows));
    Ok(())
}
