//! Throttles the KV link and shows transfer queueing building up under x=0
//! while decode-local prefill stays unaffected.
//!
//! cargo run --release --example saturation

use std::sync::Arc;

use ppdsim::costmodel::{CalibrationTable, CostModel};
use ppdsim::metrics::aggregate_records;
use ppdsim::simulator::{simulate, ClusterConfig, QUEUE_DELAY_BOUNDS_S};
use ppdsim::workload::{generate_conversations, TurnProfile, WorkloadSpec};

fn main() -> ppdsim::Result<()> {
    let cost = Arc::new(CostModel::new(CalibrationTable::default().with_link_bandwidth(8e9))?);
    let profile = TurnProfile::new(1000, 100);
    println!("bounds (s): {QUEUE_DELAY_BOUNDS_S:?}");
    println!(
        "{:>4} {:>5} {:>8} {:>10} {:>10}  queue delay histogram",
        "qps", "x", "success", "ttft_t2", "util"
    );
    for qps in [4.0, 8.0, 12.0, 16.0] {
        let spec = WorkloadSpec::new(profile, profile, 3).with_qps(qps).with_duration(60.0);
        let convs = generate_conversations(&spec, 1)?;
        for x in [0.0, 1.0] {
            let r = simulate(&ClusterConfig::named("1P_3D", x, cost.clone())?, &convs, 1)?;
            let m = aggregate_records(&r.records)?;
            let busy = r.link_stats.bytes / cost.calibration().link_bandwidth / r.makespan;
            println!(
                "{qps:>4} {x:>5} {:>8.3} {:>10.4} {:>9.1}%  {:?}",
                m.success_rate,
                m.ttft_t2_mean.unwrap_or(f64::NAN),
                100.0 * busy,
                r.link_stats.queue_delay_histogram
            );
        }
    }
    Ok(())
}
