//! Sweeps the full configuration catalog over a few cells, then prints the
//! winner distribution and each cell's TTFT/throughput Pareto frontier.
//!
//! cargo run --release --example pareto_and_winners

use std::sync::Arc;

use ppdsim::costmodel::CostModel;
use ppdsim::metrics::{pareto_frontier, winner_distribution, ParetoPoint};
use ppdsim::simulator::standard_configs;
use ppdsim::sweep::{cell_results, run_sweep, SweepContext, SweepPlan};
use ppdsim::workload::catalog_workload;

fn main() -> ppdsim::Result<()> {
    let plan = SweepPlan {
        configs: standard_configs().iter().map(|c| c.to_string()).collect(),
        workloads: ["balanced_small", "prefill_heavy_2_large", "decode_heavy_1_small"]
            .iter()
            .map(|id| catalog_workload(id).expect("catalog workload"))
            .collect(),
        qps_levels: vec![4.0, 16.0],
        seeds: vec![1],
        duration_s: 10.0,
    };
    let rs = run_sweep(&plan, &SweepContext::new(Arc::new(CostModel::default())), None)?;
    let rows = rs.mean_rows();

    let winners = winner_distribution(&cell_results(&rows)?)?;
    print!("{}", winners.to_csv());
    println!(
        "TTFT and TPOT winners differ in {:.0}% of cells\n",
        100.0 * winners.ttft_tpot_disagreement
    );

    for w in &plan.workloads {
        for &q in &plan.qps_levels {
            let points: Vec<ParetoPoint> = rows
                .iter()
                .filter(|r| r.workload_id == w.id && r.qps == q && !r.metrics.degraded)
                .filter_map(|r| {
                    Some(ParetoPoint {
                        ttft_p99: r.metrics.ttft_t2_p99.or(r.metrics.ttft_t1_p99)?,
                        tps: r.metrics.tps,
                        label: r.config.clone(),
                    })
                })
                .collect();
            let front = pareto_frontier(&points);
            let names: Vec<&str> = front.iter().map(|p| p.label.as_str()).collect();
            println!("{} @ {q}: {}", w.id, names.join(", "));
        }
    }
    Ok(())
}
