use std::collections::BTreeMap;
use std::fs;
use std::sync::Arc;

use ppdsim::costmodel::CostModel;
use ppdsim::sweep::{run_sweep, CellOutcome, ResultSet, SweepContext, SweepPlan};
use ppdsim::workload::catalog;

fn plan() -> SweepPlan {
    SweepPlan {
        configs: ["4R", "1P_3D@x=1", "2P_2D@x=0", "1R_1P_2D@x=1/2"]
            .map(String::from)
            .to_vec(),
        workloads: catalog().into_iter().take(3).collect(),
        qps_levels: vec![1.0, 8.0],
        seeds: vec![1, 2],
        duration_s: 5.0,
    }
}

fn by_key(rs: &ResultSet) -> BTreeMap<String, CellOutcome> {
    rs.cells
        .iter()
        .map(|c| {
            (
                format!(
                    "{}|{}|{}|{}",
                    c.cell.config, c.cell.workload_id, c.cell.qps, c.cell.seed
                ),
                c.clone(),
            )
        })
        .collect()
}

#[test]
fn interrupted_sweep_resumes_to_identical_files() {
    let cost = Arc::new(CostModel::default());
    let ctx = SweepContext::new(cost);
    let full = tempfile::tempdir().unwrap();
    run_sweep(&plan(), &ctx, Some(full.path())).unwrap();

    let part = tempfile::tempdir().unwrap();
    run_sweep(&plan(), &ctx, Some(part.path())).unwrap();
    // Keep the header, ten cells and a torn line, as after a crash.
    let cells = fs::read_to_string(part.path().join("cells.jsonl")).unwrap();
    let header: Vec<&str> = cells.lines().filter(|l| l.starts_with('#')).collect();
    let body: Vec<&str> = cells.lines().filter(|l| !l.starts_with('#')).collect();
    let mut cut = header.join("\n") + "\n";
    cut += &body[..10].join("\n");
    cut += "\n{\"config\":\"4R\",\"work";
    fs::write(part.path().join("cells.jsonl"), cut).unwrap();
    fs::remove_file(part.path().join("results.csv")).unwrap();

    let resumed = run_sweep(&plan(), &ctx, Some(part.path())).unwrap();
    assert_eq!(resumed.cells.len(), plan().cells().len());
    for f in ["manifest.json", "cells.jsonl", "results.csv"] {
        assert_eq!(
            fs::read(full.path().join(f)).unwrap(),
            fs::read(part.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(ResultSet::read(part.path()).unwrap(), resumed);
}

#[test]
fn resume_refuses_a_different_plan() {
    let ctx = SweepContext::new(Arc::new(CostModel::default()));
    let dir = tempfile::tempdir().unwrap();
    run_sweep(&plan(), &ctx, Some(dir.path())).unwrap();
    let mut other = plan();
    other.seeds = vec![9];
    assert!(run_sweep(&other, &ctx, Some(dir.path())).is_err());
}

#[test]
fn cell_order_does_not_change_results() {
    let ctx = SweepContext::new(Arc::new(CostModel::default()));
    let a = run_sweep(&plan(), &ctx, None).unwrap();
    let mut p = plan();
    p.configs.reverse();
    p.workloads.reverse();
    p.qps_levels.reverse();
    p.seeds.reverse();
    let mut serial = ctx.clone();
    serial.parallelism = 1;
    let b = run_sweep(&p, &serial, None).unwrap();
    assert_eq!(by_key(&a), by_key(&b));
}
