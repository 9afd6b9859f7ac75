//! Runs one cluster configuration on a catalog workload and prints the
//! aggregate metrics, link usage and node utilization.
//!
//! cargo run --example simulate_cluster -- [config] [workload] [qps]

use std::sync::Arc;

use ppdsim::costmodel::CostModel;
use ppdsim::metrics::aggregate_records;
use ppdsim::simulator::{simulate, ClusterConfig, ConfigLabel};
use ppdsim::workload::{catalog_workload, generate_conversations};

fn main() -> ppdsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let label: ConfigLabel = args.next().as_deref().unwrap_or("2P_2D@x=1/2").parse()?;
    let workload = args.next().unwrap_or_else(|| "prefill_heavy_2_large".into());
    let qps: f64 = args.next().map_or(8.0, |s| s.parse().expect("qps"));

    let cost = Arc::new(CostModel::default());
    let cfg = ClusterConfig::from_label(&label, cost, None)?;
    let spec = catalog_workload(&workload)
        .expect("catalog workload")
        .spec
        .with_qps(qps)
        .with_duration(30.0);
    let convs = generate_conversations(&spec, 1)?;
    let result = simulate(&cfg, &convs, 1)?;

    let m = aggregate_records(&result.records)?;
    println!(
        "{label} on {workload} at {qps} conv/s: {} requests",
        result.records.len()
    );
    println!("{}", serde_json::to_string_pretty(&m)?);
    println!(
        "link: {} transfers, {:.1} GB, histogram {:?}",
        result.link_stats.transfers,
        result.link_stats.bytes / 1e9,
        result.link_stats.queue_delay_histogram
    );
    for u in &result.utilization {
        println!(
            "{:>4} {}: prefill busy {:5.1}%  decode busy {:5.1}%",
            u.node,
            u.role,
            100.0 * u.prefill_busy_s / result.makespan,
            100.0 * u.decode_busy_s / result.makespan
        );
    }
    Ok(())
}
