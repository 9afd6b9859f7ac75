//! Routing gateway: session affinity, heartbeat discovery and a framed TCP
//! transport. The [`Gateway`] core is sans-IO and takes time from a [`Clock`].

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::metrics::percentile_nearest_rank;
use crate::routing::{QpsWindow, RouteRequest, Router, RoutingPolicy, SessionTable, TargetRole, SESSION_TTL_S};
use crate::simulator::{NodeRole, QPS_WINDOW_S};
use crate::workload::ConvDigest;

pub const HEARTBEAT_TIMEOUT_S: f64 = 30.0;
pub const HEARTBEAT_INTERVAL_S: f64 = 10.0;
pub const MAX_FRAME_BYTES: u32 = 1 << 20;
const LATENCY_SAMPLES: usize = 10_000;

/// Seconds since some fixed origin.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

/// Wall clock measured from construction.
#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Settable clock for tests; clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    bits: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn new(t: f64) -> Self {
        let c = Self::default();
        c.set(t);
        c
    }

    pub fn set(&self, t: f64) {
        self.bits.store(t.to_bits(), Ordering::SeqCst);
    }

    pub fn advance(&self, dt: f64) {
        self.set(self.now() + dt);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEntry {
    pub server_id: String,
    pub role: NodeRole,
    pub address: String,
    pub last_heartbeat: f64,
    /// Sessions (D, R) or requests (P) dispatched so far; used for balancing.
    pub dispatched: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteQuery {
    pub conv_first_message: String,
    pub turn_index: u32,
    pub n_in: u32,
    pub n_out_est: u32,
    pub n_ctx: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub conv_hash: String,
    pub turn_count: u32,
    /// Address of the pinned decode or replica node; a P node ships KV here.
    pub decode_address: String,
    pub new_session: bool,
    pub eviction_miss: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteReply {
    pub target_address: String,
    pub target_role: NodeRole,
    pub x_used: u8,
    pub session_state: SessionState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub x0: u64,
    pub x1: u64,
    pub replica: u64,
    pub no_capacity: u64,
    pub protocol_errors: u64,
}

/// Gateway counters. The schema is local to this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub modes: ModeCounts,
    pub decisions: u64,
    pub p99_decision_latency_us: Option<f64>,
    pub backends: BTreeMap<String, usize>,
    pub sessions: usize,
}

/// Messages on the wire, one JSON object per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    RouteQuery(RouteQuery),
    RouteReply(RouteReply),
    NoCapacity {
        role: NodeRole,
    },
    Heartbeat {
        server_id: String,
        role: NodeRole,
        address: String,
    },
    StatsQuery,
    Stats(Stats),
    Error {
        message: String,
    },
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    let body = serde_json::to_vec(msg)?;
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&n| n <= MAX_FRAME_BYTES)
        .ok_or_else(|| Error::Protocol(format!("frame of {} bytes too large", body.len())))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame's payload; `None` on clean end of stream.
pub fn read_frame_bytes<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>> {
    match read_frame_bytes(r)? {
        None => Ok(None),
        Some(body) => serde_json::from_slice(&body)
            .map(Some)
            .map_err(|e| Error::Protocol(format!("malformed message: {e}"))),
    }
}

struct State {
    backends: BTreeMap<String, BackendEntry>,
    sessions: SessionTable,
    router: Router,
    qps: QpsWindow,
    modes: ModeCounts,
    latencies_us: VecDeque<f64>,
    decisions: u64,
}

impl State {
    fn live(&self, id: &str, now: f64) -> bool {
        self.backends
            .get(id)
            .is_some_and(|b| now - b.last_heartbeat <= HEARTBEAT_TIMEOUT_S)
    }

    /// Least-dispatched live backend among `roles`, ties to the smallest id.
    fn pick(&self, roles: &[NodeRole], now: f64) -> Option<String> {
        self.backends
            .values()
            .filter(|b| roles.contains(&b.role) && now - b.last_heartbeat <= HEARTBEAT_TIMEOUT_S)
            .min_by(|a, b| a.dispatched.cmp(&b.dispatched).then(a.server_id.cmp(&b.server_id)))
            .map(|b| b.server_id.clone())
    }

    fn dispatch(&mut self, id: &str) -> (String, NodeRole) {
        let b = self.backends.get_mut(id).expect("picked from registry");
        b.dispatched += 1;
        (b.address.clone(), b.role)
    }
}

/// Sans-IO routing core. One mutex guards registry, sessions and router so
/// that no reply names a backend pruned before the reply was formed.
pub struct Gateway<C: Clock> {
    clock: C,
    ttl_s: f64,
    state: Mutex<State>,
}

impl<C: Clock> Gateway<C> {
    pub fn new(policy: RoutingPolicy, clock: C) -> Self {
        Self::with_ttl(policy, clock, SESSION_TTL_S)
    }

    pub fn with_ttl(policy: RoutingPolicy, clock: C, ttl_s: f64) -> Self {
        let origin = clock.now();
        Self {
            clock,
            ttl_s,
            state: Mutex::new(State {
                backends: BTreeMap::new(),
                sessions: SessionTable::with_ttl(ttl_s),
                router: Router::new(policy),
                qps: QpsWindow::with_origin(QPS_WINDOW_S, origin),
                modes: ModeCounts::default(),
                latencies_us: VecDeque::with_capacity(LATENCY_SAMPLES),
                decisions: 0,
            }),
        }
    }

    pub fn clock(&self) -> &C {
        &self.clock
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Inserts or refreshes a backend; a new entry starts at the pool's
    /// minimum dispatch count.
    pub fn register_heartbeat(&self, server_id: &str, role: NodeRole, address: &str) {
        let now = self.clock.now();
        let mut st = self.lock();
        let floor = st
            .backends
            .values()
            .filter(|b| b.role == role)
            .map(|b| b.dispatched)
            .min()
            .unwrap_or(0);
        match st.backends.get_mut(server_id) {
            Some(b) => {
                if b.role != role {
                    log::info!("backend {server_id} changed role {} -> {role}", b.role);
                    b.role = role;
                    b.dispatched = floor;
                }
                b.address = address.to_string();
                b.last_heartbeat = now;
            }
            None => {
                st.backends.insert(
                    server_id.to_string(),
                    BackendEntry {
                        server_id: server_id.to_string(),
                        role,
                        address: address.to_string(),
                        last_heartbeat: now,
                        dispatched: floor,
                    },
                );
            }
        }
        if role == NodeRole::P {
            // A node that left the decode pool keeps no sessions.
            st.sessions.invalidate_node(server_id);
        }
    }

    /// Removes backends silent for more than the heartbeat timeout and the
    /// sessions pinned to them.
    pub fn prune_dead(&self) -> Vec<String> {
        let now = self.clock.now();
        let mut st = self.lock();
        let dead: Vec<String> = st
            .backends
            .values()
            .filter(|b| now - b.last_heartbeat > HEARTBEAT_TIMEOUT_S)
            .map(|b| b.server_id.clone())
            .collect();
        for id in &dead {
            st.backends.remove(id);
            st.sessions.invalidate_node(id);
            log::info!("pruned backend {id}");
        }
        dead
    }

    pub fn evict_sessions(&self) -> usize {
        let now = self.clock.now();
        self.lock().sessions.evict_expired(now, self.ttl_s)
    }

    pub fn backends(&self) -> Vec<BackendEntry> {
        self.lock().backends.values().cloned().collect()
    }

    pub fn session_count(&self) -> usize {
        self.lock().sessions.len()
    }

    /// Routes one query. `Err(role)` means no live backend of that role.
    pub fn handle_request(&self, q: &RouteQuery) -> std::result::Result<RouteReply, NodeRole> {
        let started = Instant::now();
        let now = self.clock.now();
        let hash = ConvDigest::of(&q.conv_first_message);
        let mut st = self.lock();
        let out = Self::route(&mut st, q, hash, now);
        match &out {
            Ok(r) if r.target_role == NodeRole::R => st.modes.replica += 1,
            Ok(r) if r.x_used == 1 => st.modes.x1 += 1,
            Ok(_) => st.modes.x0 += 1,
            Err(_) => st.modes.no_capacity += 1,
        }
        st.decisions += 1;
        if st.latencies_us.len() == LATENCY_SAMPLES {
            st.latencies_us.pop_front();
        }
        st.latencies_us.push_back(started.elapsed().as_secs_f64() * 1e6);
        out
    }

    fn route(st: &mut State, q: &RouteQuery, hash: ConvDigest, now: f64) -> std::result::Result<RouteReply, NodeRole> {
        let pinned = st.sessions.get(&hash, now).and_then(|e| e.assigned_pd.clone());
        if let Some(node) = pinned {
            if !st.live(&node, now) {
                st.sessions.remove(&hash);
            }
        }
        // Capacity is checked before the session is touched.
        let have_session = q.turn_index >= 2 && st.sessions.get(&hash, now).is_some_and(|e| e.assigned_pd.is_some());
        let fresh_pin = if have_session {
            None
        } else {
            let pin = st.pick(&[NodeRole::D, NodeRole::R], now).ok_or(NodeRole::D)?;
            let pin_role = st.backends[&pin].role;
            if pin_role == NodeRole::D && st.pick(&[NodeRole::P], now).is_none() {
                return Err(NodeRole::P);
            }
            Some(pin)
        };
        if q.turn_index <= 1 {
            st.qps.record(now);
        }
        let measured = st.qps.rate(now);
        let req = RouteRequest {
            conv_hash: hash,
            turn_index: q.turn_index.max(1),
            n_in: q.n_in,
            n_out: q.n_out_est,
            n_ctx: q.n_ctx,
        };
        let backends = &st.backends;
        let is_replica = |id: &str| backends.get(id).is_some_and(|b| b.role == NodeRole::R);
        let decision = st.router.decide(&req, measured, now, &mut st.sessions, &is_replica);

        let pd = if decision.new_session {
            let pin = match fresh_pin {
                Some(p) => p,
                // A turn-2+ session vanished between the check and decide.
                None => st.pick(&[NodeRole::D, NodeRole::R], now).ok_or(NodeRole::D)?,
            };
            st.sessions.assign(&hash, &pin);
            st.backends.get_mut(&pin).expect("live").dispatched += 1;
            pin
        } else {
            decision.assigned_pd.clone().expect("existing session is pinned")
        };
        let pd_role = st.backends[&pd].role;
        let decode_address = st.backends[&pd].address.clone();

        let (target_address, target_role) = match (pd_role, decision.target) {
            (NodeRole::R, _) | (_, TargetRole::DecodeLocal) | (_, TargetRole::ReplicaLocal) => {
                (decode_address.clone(), pd_role)
            }
            (_, TargetRole::Prefill) => {
                let p = st.pick(&[NodeRole::P], now).ok_or(NodeRole::P)?;
                st.dispatch(&p)
            }
        };
        Ok(RouteReply {
            target_address,
            target_role,
            x_used: decision.x_used,
            session_state: SessionState {
                conv_hash: hash.to_hex(),
                turn_count: decision.turn_count,
                decode_address,
                new_session: decision.new_session,
                eviction_miss: decision.eviction_miss,
            },
        })
    }

    pub fn stats(&self) -> Stats {
        let st = self.lock();
        let lat: Vec<f64> = st.latencies_us.iter().copied().collect();
        let mut backends = BTreeMap::new();
        for b in st.backends.values() {
            *backends.entry(b.role.to_string()).or_insert(0) += 1;
        }
        Stats {
            modes: st.modes.clone(),
            decisions: st.decisions,
            p99_decision_latency_us: percentile_nearest_rank(&lat, 99.0),
            backends,
            sessions: st.sessions.len(),
        }
    }

    fn protocol_error(&self) {
        self.lock().modes.protocol_errors += 1;
    }

    /// Processes one decoded frame payload; `None` for fire-and-forget kinds.
    pub fn handle_frame(&self, payload: &[u8]) -> Option<Message> {
        let msg: Message = match serde_json::from_slice(payload) {
            Ok(m) => m,
            Err(e) => {
                self.protocol_error();
                return Some(Message::Error {
                    message: format!("malformed message: {e}"),
                });
            }
        };
        match msg {
            Message::RouteQuery(q) => Some(match self.handle_request(&q) {
                Ok(r) => Message::RouteReply(r),
                Err(role) => Message::NoCapacity { role },
            }),
            Message::Heartbeat {
                server_id,
                role,
                address,
            } => {
                self.register_heartbeat(&server_id, role, &address);
                None
            }
            Message::StatsQuery => Some(Message::Stats(self.stats())),
            other => {
                self.protocol_error();
                Some(Message::Error {
                    message: format!("unexpected message kind: {other:?}"),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub bind: String,
    pub table_path: Option<PathBuf>,
    pub ttl_s: f64,
    pub prune_interval_s: f64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7600".into(),
            table_path: None,
            ttl_s: SESSION_TTL_S,
            prune_interval_s: HEARTBEAT_INTERVAL_S,
        }
    }
}

/// Running TCP server; dropping it does not stop it, call [`shutdown`](Self::shutdown).
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wakes the blocking accept.
        let _ = TcpStream::connect(self.addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Binds and starts the accept loop and the pruner thread.
pub fn spawn_server<C: Clock + 'static>(
    gateway: Arc<Gateway<C>>,
    bind: &str,
    prune_interval_s: f64,
) -> Result<ServerHandle> {
    if !(prune_interval_s > 0.0) {
        return Err(validation("prune interval must be positive"));
    }
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));

    let g = Arc::clone(&gateway);
    let s = Arc::clone(&stop);
    let pruner = thread::spawn(move || {
        let tick = Duration::from_millis(50);
        let mut last = Instant::now();
        while !s.load(Ordering::SeqCst) {
            thread::sleep(tick);
            if last.elapsed().as_secs_f64() >= prune_interval_s {
                last = Instant::now();
                g.prune_dead();
                g.evict_sessions();
            }
        }
    });

    let s = Arc::clone(&stop);
    let acceptor = thread::spawn(move || {
        for conn in listener.incoming() {
            if s.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let g = Arc::clone(&gateway);
                    thread::spawn(move || {
                        if let Err(e) = serve_connection(&*g, stream) {
                            log::debug!("connection closed: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });

    Ok(ServerHandle {
        addr,
        stop,
        threads: vec![acceptor, pruner],
    })
}

fn serve_connection<C: Clock>(g: &Gateway<C>, mut stream: TcpStream) -> Result<()> {
    stream.set_nodelay(true)?;
    loop {
        let body = match read_frame_bytes(&mut stream) {
            Ok(Some(b)) => b,
            Ok(None) => return Ok(()),
            Err(e @ Error::Protocol(_)) => {
                g.protocol_error();
                write_frame(&mut stream, &Message::Error { message: e.to_string() })?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(reply) = g.handle_frame(&body) {
            write_frame(&mut stream, &reply)?;
        }
    }
}

/// Blocking client for one gateway connection.
pub struct Client {
    stream: TcpStream,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        write_frame(&mut self.stream, msg)
    }

    pub fn request(&mut self, msg: &Message) -> Result<Message> {
        self.send(msg)?;
        read_frame(&mut self.stream)?.ok_or_else(|| Error::Protocol("connection closed before reply".into()))
    }

    pub fn heartbeat(&mut self, server_id: &str, role: NodeRole, address: &str) -> Result<()> {
        self.send(&Message::Heartbeat {
            server_id: server_id.into(),
            role,
            address: address.into(),
        })
    }

    pub fn route(&mut self, q: RouteQuery) -> Result<Message> {
        self.request(&Message::RouteQuery(q))
    }

    pub fn stats(&mut self) -> Result<Stats> {
        match self.request(&Message::StatsQuery)? {
            Message::Stats(s) => Ok(s),
            other => Err(Error::Protocol(format!("expected stats, got {other:?}"))),
        }
    }
}
