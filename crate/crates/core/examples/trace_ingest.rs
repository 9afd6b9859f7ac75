//! Ingests a conversation trace, keeps the prefill-heavy multi-turn
//! conversations, and replays them at a chosen rate on two configurations.
//!
//! cargo run --example trace_ingest -- [trace.jsonl] [qps]

use std::io::{BufReader, Cursor};
use std::sync::Arc;

use ppdsim::costmodel::CostModel;
use ppdsim::metrics::aggregate_records;
use ppdsim::simulator::{build_cluster, run_simulation, ClusterConfig};
use ppdsim::workload::{ingest_trace, TraceFilter};

const SAMPLE: &str = r#"{"conv_id":"c1","turns":[{"input_tokens":300,"output_tokens":200},{"input_tokens":2400,"output_tokens":120},{"input_tokens":1800,"output_tokens":90}]}
{"conv_id":"c2","turns":[{"input_tokens":120,"output_tokens":400},{"input_tokens":60,"output_tokens":350}]}
{"conv_id":"c3","turns":[{"input_tokens":900,"output_tokens":150},{"input_tokens":3100,"output_tokens":200}]}
{"conv_id":"c4","turns":[{"input_tokens":500,"output_tokens":100}]}
"#;

fn main() -> ppdsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let text = match args.next() {
        Some(path) => std::fs::read_to_string(path)?,
        None => SAMPLE.to_string(),
    };
    let qps: f64 = args.next().map_or(1.0, |s| s.parse().expect("qps"));

    let filter = TraceFilter {
        prefill_heavy_only: true,
        ..Default::default()
    };
    let convs = ingest_trace(BufReader::new(Cursor::new(text)), &filter)?;
    let ids: Vec<&str> = convs.iter().map(|c| c.conv_id.as_str()).collect();
    println!("kept {} conversations: {}", convs.len(), ids.join(", "));

    let cost = Arc::new(CostModel::default());
    for (name, x) in [("2P_2D", 0.0), ("2P_2D", 1.0)] {
        let cluster = build_cluster(&ClusterConfig::named(name, x, cost.clone())?)?;
        let r = run_simulation(cluster, &convs, Some(qps), 1)?;
        let m = aggregate_records(&r.records)?;
        println!(
            "{name} x={x}: turn-2+ TTFT {:.4}s, TPOT {:.5}s, {} transfers",
            m.ttft_t2_mean.unwrap_or(f64::NAN),
            m.tpot_mean.unwrap_or(f64::NAN),
            r.link_stats.transfers
        );
    }
    Ok(())
}
