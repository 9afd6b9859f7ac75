//! Starts a routing gateway on a local port, registers fake backends via
//! heartbeats, routes a short conversation and prints the gateway stats.
//!
//! cargo run --example gateway_roundtrip

use std::sync::Arc;

use ppdsim::gateway::{spawn_server, Client, Gateway, Message, RouteQuery, SystemClock};
use ppdsim::routing::RoutingPolicy;
use ppdsim::simulator::NodeRole;

fn main() -> ppdsim::Result<()> {
    let gateway = Arc::new(Gateway::new(RoutingPolicy::static_x(0.5)?, SystemClock::new()));
    let server = spawn_server(gateway, "127.0.0.1:0", 1.0)?;
    println!("gateway listening on {}", server.local_addr());

    let mut client = Client::connect(server.local_addr())?;
    client.heartbeat("p0", NodeRole::P, "10.0.0.1:8000")?;
    client.heartbeat("d0", NodeRole::D, "10.0.1.1:8000")?;
    client.heartbeat("d1", NodeRole::D, "10.0.1.2:8000")?;

    let first = "Translate the attached report into French.";
    let mut ctx = 0;
    for turn in 1..=4 {
        let q = RouteQuery {
            conv_first_message: first.into(),
            turn_index: turn,
            n_in: 800,
            n_out_est: 150,
            n_ctx: ctx,
        };
        match client.route(q)? {
            Message::RouteReply(r) => println!(
                "turn {turn}: {} ({:?}, x={}) session on {}",
                r.target_address, r.target_role, r.x_used, r.session_state.decode_address
            ),
            other => println!("turn {turn}: {other:?}"),
        }
        ctx += 950;
    }
    println!("{}", serde_json::to_string_pretty(&client.stats()?)?);
    server.shutdown();
    Ok(())
}
