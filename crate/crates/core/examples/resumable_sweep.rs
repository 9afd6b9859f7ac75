//! Runs a sweep into a directory, simulates an interruption by truncating
//! its cell log, and resumes. The resumed files match an uninterrupted run.
//!
//! cargo run --release --example resumable_sweep -- [dir]

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use ppdsim::costmodel::CostModel;
use ppdsim::sweep::{run_sweep, ResultSet, SweepContext, SweepPlan};

const PLAN: &str = r#"
configs = ["4R", "2P_2D@x=0", "2P_2D@x=1/2", "2P_2D@x=1"]
workloads = ["balanced_small", "prefill_heavy_1_large"]
qps_levels = [2.0, 8.0]
seeds = [1, 2]
duration_s = 10.0
"#;

fn main() -> ppdsim::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("ppdsim-sweep"), Into::into);
    let _ = fs::remove_dir_all(&dir);
    let plan = SweepPlan::from_toml(PLAN)?;
    let ctx = SweepContext::new(Arc::new(CostModel::default()));

    run_sweep(&plan, &ctx, Some(&dir))?;
    let complete = fs::read(dir.join("results.csv"))?;

    let log = fs::read_to_string(dir.join("cells.jsonl"))?;
    let keep: Vec<&str> = log.lines().take(log.lines().count() / 2).collect();
    fs::write(dir.join("cells.jsonl"), keep.join("\n") + "\n")?;
    println!("truncated cell log to {} lines", keep.len());

    let resumed = run_sweep(&plan, &ctx, Some(&dir))?;
    assert_eq!(fs::read(dir.join("results.csv"))?, complete);
    println!("resumed {} cells, results identical", resumed.cells.len());

    let reread = ResultSet::read(&dir)?;
    println!(
        "{} failed cells; rows written to {}",
        reread.failed().len(),
        dir.join("results.csv").display()
    );
    Ok(())
}
