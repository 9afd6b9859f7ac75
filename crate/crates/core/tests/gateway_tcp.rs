use std::io::Write;
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;

use ppdsim::gateway::{read_frame, spawn_server, Client, Gateway, ManualClock, Message, RouteQuery};
use ppdsim::routing::RoutingPolicy;
use ppdsim::simulator::NodeRole;

fn query(conv: &str, turn: u32) -> Message {
    Message::RouteQuery(RouteQuery {
        conv_first_message: conv.into(),
        turn_index: turn,
        n_in: 300,
        n_out_est: 100,
        n_ctx: (turn - 1) * 400,
    })
}

fn reply(m: Message) -> ppdsim::gateway::RouteReply {
    match m {
        Message::RouteReply(r) => r,
        other => panic!("expected a route reply, got {other:?}"),
    }
}

#[test]
fn fake_backends_and_concurrent_clients() {
    let clock = ManualClock::new(0.0);
    let g = Arc::new(Gateway::new(RoutingPolicy::static_x(1.0).unwrap(), clock.clone()));
    let server = spawn_server(Arc::clone(&g), "127.0.0.1:0", 0.05).unwrap();
    let addr = server.local_addr();

    let mut beats = Client::connect(addr).unwrap();
    beats.heartbeat("p0", NodeRole::P, "10.1.0.1:8000").unwrap();
    for i in 0..3 {
        beats
            .heartbeat(&format!("d{i}"), NodeRole::D, &format!("10.2.0.{i}:8000"))
            .unwrap();
    }
    // Heartbeats have no reply; a stats round trip orders them before queries.
    assert_eq!(beats.stats().unwrap().backends["D"], 3);

    let workers: Vec<_> = (0..4)
        .map(|w| {
            thread::spawn(move || {
                let mut c = Client::connect(addr).unwrap();
                for conv in 0..25 {
                    let name = format!("w{w}-c{conv}");
                    let first = reply(
                        c.route(match query(&name, 1) {
                            Message::RouteQuery(q) => q,
                            _ => unreachable!(),
                        })
                        .unwrap(),
                    );
                    assert_eq!(first.target_address, "10.1.0.1:8000");
                    for turn in 2..=4 {
                        let r = reply(c.request(&query(&name, turn)).unwrap());
                        assert_eq!(r.x_used, 1);
                        assert_eq!(r.target_address, first.session_state.decode_address);
                    }
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }

    let stats = beats.stats().unwrap();
    assert_eq!(stats.decisions, 400);
    assert_eq!(stats.modes.x0, 100);
    assert_eq!(stats.modes.x1, 300);
    assert_eq!(stats.sessions, 100);
    assert!(stats.p99_decision_latency_us.unwrap() < 1000.0);

    // Every decode node goes silent; the pruner thread removes them.
    clock.set(20.0);
    beats.heartbeat("p0", NodeRole::P, "10.1.0.1:8000").unwrap();
    clock.set(31.0);
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
    while g.backends().len() > 1 && std::time::Instant::now() < deadline {
        thread::sleep(std::time::Duration::from_millis(20));
    }
    assert_eq!(g.backends().len(), 1);
    assert_eq!(g.session_count(), 0);
    assert_eq!(
        beats.request(&query("w0-c0", 5)).unwrap(),
        Message::NoCapacity { role: NodeRole::D }
    );

    server.shutdown();
}

#[test]
fn malformed_frames_get_protocol_errors() {
    let g = Arc::new(Gateway::new(
        RoutingPolicy::static_x(0.0).unwrap(),
        ManualClock::new(0.0),
    ));
    let server = spawn_server(Arc::clone(&g), "127.0.0.1:0", 1.0).unwrap();
    let mut s = TcpStream::connect(server.local_addr()).unwrap();
    let body = b"{\"kind\":\"route_query\",\"turn_index\":1}";
    s.write_all(&(body.len() as u32).to_be_bytes()).unwrap();
    s.write_all(body).unwrap();
    assert!(matches!(read_frame(&mut s).unwrap(), Some(Message::Error { .. })));

    // The connection survives a bad payload.
    let mut c = Client::connect(server.local_addr()).unwrap();
    assert_eq!(c.stats().unwrap().modes.protocol_errors, 1);

    // An oversized length prefix closes the connection after an error frame.
    s.write_all(&u32::MAX.to_be_bytes()).unwrap();
    assert!(matches!(read_frame(&mut s).unwrap(), Some(Message::Error { .. })));
    assert!(read_frame(&mut s).unwrap().is_none());
    server.shutdown();
}
