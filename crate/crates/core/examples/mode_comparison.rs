//! Compares x=0 (always prefill on P) with x=1 (always append on the
//! session's decode node) per cluster shape and QPS band.
//!
//! cargo run --release --example mode_comparison

use std::sync::Arc;

use ppdsim::costmodel::CostModel;
use ppdsim::sweep::{compare_modes, run_sweep, Metric, QpsBand, SweepContext, SweepPlan};
use ppdsim::workload::catalog;

fn main() -> ppdsim::Result<()> {
    let shapes = ["1P_3D", "2P_2D", "3P_1D"];
    let plan = SweepPlan {
        configs: shapes
            .iter()
            .flat_map(|s| [format!("{s}@x=0"), format!("{s}@x=1")])
            .collect(),
        workloads: catalog()
            .into_iter()
            .filter(|w| w.id.starts_with("prefill_heavy"))
            .collect(),
        qps_levels: vec![2.0, 8.0, 16.0],
        seeds: vec![1, 2],
        duration_s: 10.0,
    };
    let rs = run_sweep(&plan, &SweepContext::new(Arc::new(CostModel::default())), None)?;
    let rows = rs.mean_rows();

    for metric in [Metric::TtftT2Mean, Metric::TpotMean] {
        let table = compare_modes(&rows, "x=0", "x=1", metric);
        println!("{metric:?}: change from x=0 to x=1 (%)");
        print!("{:>6}", "");
        for band in QpsBand::ALL {
            print!(" {:>8}", band.as_str());
        }
        println!();
        for shape in shapes {
            print!("{shape:>6}");
            for band in QpsBand::ALL {
                match table.get(shape, band) {
                    Some(v) => print!(" {v:>+8.1}"),
                    None => print!(" {:>8}", "-"),
                }
            }
            println!();
        }
    }
    Ok(())
}
