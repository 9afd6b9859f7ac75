//! Prints prefill costs and the decode slowdown caused by co-scheduled
//! prefills, full versus append.
//!
//! cargo run --example interference_model

use ppdsim::costmodel::{BatchState, CostModel, LinkState, PrefillKind};

fn main() -> ppdsim::Result<()> {
    let cost = CostModel::default();
    println!("calibration {}", cost.calibration_hash());

    println!("\nprefill time (ms)");
    println!("{:>8} {:>10} {:>22}", "tokens", "full", "append over 8K ctx");
    for n in [128, 512, 2048, 8192, 32768] {
        println!(
            "{n:>8} {:>10.2} {:>22.2}",
            1e3 * cost.full_prefill_time(n)?,
            1e3 * cost.append_prefill_time(n, 8192)?,
        );
    }

    println!("\ndecode step multiplier, batch 32");
    println!("{:>8} {:>5} {:>8} {:>8}", "tokens", "ops", "full", "append");
    for tokens in [1024, 8192, 65536] {
        for ops in [1, 4] {
            let m = |kind| cost.interference_multiplier(&BatchState::decode_only(32).with_prefill(kind, tokens, ops));
            println!(
                "{tokens:>8} {ops:>5} {:>8.3} {:>8.3}",
                m(PrefillKind::Full).multiplier,
                m(PrefillKind::Append).multiplier,
            );
        }
    }

    let idle = cost.kv_transfer_time(4096, LinkState::default())?;
    println!(
        "\n4096-token KV transfer: {:.1} MB in {:.2} ms on an idle link",
        cost.kv_bytes(4096) / 1e6,
        1e3 * idle
    );
    Ok(())
}
