//! Generates a multi-turn Poisson workload and prints its shape.
//!
//! cargo run --example generate_workload -- [qps] [duration_s]

use ppdsim::workload::{catalog_workload, generate_conversations, write_trace, WorkloadType};

fn main() -> ppdsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let qps: f64 = args.next().map_or(4.0, |s| s.parse().expect("qps"));
    let duration: f64 = args.next().map_or(30.0, |s| s.parse().expect("duration"));

    let named = catalog_workload("prefill_heavy_2_large").expect("catalog entry");
    let spec = named.spec.with_qps(qps).with_duration(duration);
    let convs = generate_conversations(&spec, 1)?;

    let turns: usize = convs.iter().map(|c| c.num_turns()).sum();
    println!(
        "{} conversations, {turns} turns, category {}",
        convs.len(),
        spec.category().as_str()
    );
    let first = &convs[0];
    println!("first conversation {}:", first.conv_id);
    for t in &first.turns {
        println!(
            "  turn {} arrival={:?} in={} out={} ctx={} ({})",
            t.turn_index,
            t.arrival_time,
            t.new_input_tokens,
            t.target_output_tokens,
            t.cached_context_tokens,
            WorkloadType::classify(t.new_input_tokens, t.target_output_tokens).as_str(),
        );
    }

    let mut buf = Vec::new();
    write_trace(&convs[..2.min(convs.len())], &mut buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}
