//! Reduces the simulator to an M/M/1 queue (one prefill slot, exponential
//! service, single-token requests) and compares the mean wait with the
//! closed form rho / (mu - lambda).
//!
//! cargo run --release --example mm1_validation

use std::sync::Arc;

use ppdsim::costmodel::CostModel;
use ppdsim::simulator::{simulate, ClusterConfig, ServiceModel};
use ppdsim::workload::{generate_conversations, TurnProfile, WorkloadSpec};

fn main() -> ppdsim::Result<()> {
    let mu = 10.0;
    let mut cfg = ClusterConfig::named("1P_1D", 0.0, Arc::new(CostModel::default()))?;
    cfg.prefill_service = ServiceModel::Exponential { mean_s: 1.0 / mu };
    cfg.max_concurrent_prefills = 1;

    println!("{:>6} {:>8} {:>10} {:>10} {:>7}", "rho", "n", "sim", "theory", "err");
    for lambda in [2.0, 5.0, 8.0] {
        let one = TurnProfile::new(1, 1);
        let spec = WorkloadSpec::new(one, one, 1).with_qps(lambda).with_duration(20_000.0);
        let convs = generate_conversations(&spec, 42)?;
        let r = simulate(&cfg, &convs, 42)?;
        let waits: Vec<f64> = r.timings.iter().filter_map(|t| t.prefill_wait).collect();
        let sim = waits.iter().sum::<f64>() / waits.len() as f64;
        let rho = lambda / mu;
        let theory = rho / (mu - lambda);
        println!(
            "{rho:>6.1} {:>8} {sim:>10.5} {theory:>10.5} {:>6.2}%",
            waits.len(),
            100.0 * (sim - theory).abs() / theory
        );
    }
    Ok(())
}
