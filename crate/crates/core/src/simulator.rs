//! Deterministic discrete-event simulation of a P/D/R cluster.
//!
//! Prefill on a node is processor-shared among at most
//! `max_concurrent_prefills` jobs; extra jobs wait FIFO. Decode uses
//! continuous batching: one event per batched iteration, admission at
//! iteration boundaries, and the co-located prefill work present when an
//! iteration starts sets its interference multiplier. KV transfers share a
//! FIFO link between the P and D pools.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::costmodel::{BatchState, CostModel, PrefillKind};
use crate::error::{validation, Error, Result};
use crate::metrics::{ConfigCategory, RequestRecord, RequestStatus, RouteTaken};
use crate::routing::{DecisionTable, QpsWindow, RouteRequest, Router, RoutingPolicy, SessionTable, TargetRole};
use crate::workload::{replay_at_qps, Conversation};

pub const DEFAULT_REQUEST_TIMEOUT_S: f64 = 30.0;
pub const DEFAULT_MAX_DECODE_BATCH: u32 = 200;
pub const DEFAULT_MAX_CONCURRENT_PREFILLS: u32 = 4;
/// Window of the router's arrival-rate estimate.
pub const QPS_WINDOW_S: f64 = 10.0;
/// RNG stream for service draws, distinct from the workload generator's.
const SERVICE_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeRole {
    P,
    D,
    R,
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeRole::P => "P",
            NodeRole::D => "D",
            NodeRole::R => "R",
        })
    }
}

impl FromStr for NodeRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" | "p" => Ok(NodeRole::P),
            "D" | "d" => Ok(NodeRole::D),
            "R" | "r" => Ok(NodeRole::R),
            _ => Err(validation(format!("unknown node role {s:?}"))),
        }
    }
}

/// Node counts, written like `1P_3D`, `4R` or `1R_1P_2D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClusterShape {
    pub p: u32,
    pub d: u32,
    pub r: u32,
}

impl ClusterShape {
    pub fn total(&self) -> u32 {
        self.p + self.d + self.r
    }
}

impl fmt::Display for ClusterShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = [(self.r, 'R'), (self.p, 'P'), (self.d, 'D')]
            .into_iter()
            .filter(|(n, _)| *n > 0)
            .map(|(n, c)| format!("{n}{c}"))
            .collect();
        f.write_str(&parts.join("_"))
    }
}

impl FromStr for ClusterShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown cluster config {s:?}"));
        let mut shape = ClusterShape { p: 0, d: 0, r: 0 };
        let mut seen = [false; 3];
        for part in s.split('_') {
            let (num, role) = part.split_at(part.len().saturating_sub(1));
            let n: u32 = num.parse().map_err(|_| bad())?;
            let (slot, idx) = match role {
                "P" => (&mut shape.p, 0),
                "D" => (&mut shape.d, 1),
                "R" => (&mut shape.r, 2),
                _ => return Err(bad()),
            };
            if seen[idx] || n == 0 {
                return Err(bad());
            }
            seen[idx] = true;
            *slot = n;
        }
        if shape.total() == 0 {
            return Err(bad());
        }
        Ok(shape)
    }
}

/// Routing setting attached to a shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum XSetting {
    Static(f64),
    Dynamic,
}

fn format_fraction(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x == 1.0 {
        return "1".into();
    }
    for den in 2..=12u32 {
        let num = (x * f64::from(den)).round();
        if (num / f64::from(den) - x).abs() < 1e-9 {
            return format!("{num}/{den}");
        }
    }
    x.to_string()
}

fn parse_fraction(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.parse().ok()?;
            let b: f64 = b.parse().ok()?;
            (b != 0.0).then_some(a / b)
        }
        None => s.parse().ok(),
    }
}

/// A named configuration such as `1P_3D@x=1/3`, `2R_1P_1D@x=0` or `4R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigLabel {
    pub shape: ClusterShape,
    pub x: XSetting,
}

impl ConfigLabel {
    pub fn new(shape: ClusterShape, x: XSetting) -> Self {
        Self { shape, x }
    }

    pub fn category(&self) -> ConfigCategory {
        let s = self.shape;
        if s.r > 0 && s.p + s.d == 0 {
            return ConfigCategory::Replica;
        }
        if s.r > 0 {
            return ConfigCategory::Hybrid;
        }
        match self.x {
            XSetting::Static(0.0) => ConfigCategory::PdX0,
            XSetting::Static(1.0) => ConfigCategory::PdX1,
            _ => ConfigCategory::Fractional,
        }
    }

    /// `x=0`, `x=1/3`, `dyn`, or `-` for replica-only shapes.
    pub fn x_mode(&self) -> String {
        if self.shape.d == 0 && self.shape.p == 0 {
            return "-".into();
        }
        match self.x {
            XSetting::Static(x) => format!("x={}", format_fraction(x)),
            XSetting::Dynamic => "dyn".into(),
        }
    }
}

impl fmt::Display for ConfigLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = self.x_mode();
        if mode == "-" {
            write!(f, "{}", self.shape)
        } else {
            write!(f, "{}@{}", self.shape, mode)
        }
    }
}

impl FromStr for ConfigLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (shape, mode) = match s.split_once('@') {
            Some((a, b)) => (a, Some(b)),
            None => (s, None),
        };
        let shape: ClusterShape = shape.parse()?;
        let x = match mode {
            None => XSetting::Static(0.0),
            Some("dyn") => XSetting::Dynamic,
            Some(m) => {
                let v = m
                    .strip_prefix("x=")
                    .and_then(parse_fraction)
                    .filter(|v| (0.0..=1.0).contains(v))
                    .ok_or_else(|| Error::Config(format!("bad routing mode in {s:?}")))?;
                XSetting::Static(v)
            }
        };
        Ok(ConfigLabel { shape, x })
    }
}

fn label(s: &str) -> ConfigLabel {
    s.parse().expect("built-in label parses")
}

/// The seventeen evaluated configurations.
pub fn standard_configs() -> Vec<ConfigLabel> {
    [
        "4R",
        "1P_3D@x=0",
        "2P_2D@x=0",
        "3P_1D@x=0",
        "1P_3D@x=1",
        "2P_2D@x=1",
        "3P_1D@x=1",
        "1P_3D@x=1/3",
        "1P_3D@x=2/3",
        "2P_2D@x=1/2",
        "1R_1P_2D@x=0",
        "1R_1P_2D@x=1",
        "1R_1P_2D@x=1/2",
        "1R_2P_1D@x=0",
        "1R_2P_1D@x=1",
        "2R_1P_1D@x=0",
        "2R_1P_1D@x=1",
    ]
    .into_iter()
    .map(label)
    .collect()
}

/// The non-hybrid subset of [`standard_configs`].
pub fn core_configs() -> Vec<ConfigLabel> {
    standard_configs()
        .into_iter()
        .filter(|c| c.category() != ConfigCategory::Hybrid)
        .collect()
}

/// Prefill service-time model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ServiceModel {
    /// Cost-model prefill times.
    CostModel,
    /// Exponentially distributed service with the given mean, ignoring token
    /// counts. Used to reduce the simulator to textbook queues.
    Exponential { mean_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkTopology {
    /// One FIFO link shared by every P->D transfer.
    Shared,
    /// A dedicated FIFO link per (P, D) pair.
    PerPair,
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub label: String,
    pub p_nodes: u32,
    pub d_nodes: u32,
    pub r_nodes: u32,
    pub routing: RoutingPolicy,
    pub cost: Arc<CostModel>,
    pub max_decode_batch: u32,
    pub request_timeout: f64,
    pub max_concurrent_prefills: u32,
    pub prefill_service: ServiceModel,
    pub link_topology: LinkTopology,
}

impl ClusterConfig {
    pub fn new(shape: ClusterShape, routing: RoutingPolicy, cost: Arc<CostModel>) -> Self {
        let x = match &routing {
            RoutingPolicy::Static { x } => XSetting::Static(*x),
            RoutingPolicy::Dynamic { .. } => XSetting::Dynamic,
        };
        Self {
            label: ConfigLabel::new(shape, x).to_string(),
            p_nodes: shape.p,
            d_nodes: shape.d,
            r_nodes: shape.r,
            routing,
            cost,
            max_decode_batch: DEFAULT_MAX_DECODE_BATCH,
            request_timeout: DEFAULT_REQUEST_TIMEOUT_S,
            max_concurrent_prefills: DEFAULT_MAX_CONCURRENT_PREFILLS,
            prefill_service: ServiceModel::CostModel,
            link_topology: LinkTopology::Shared,
        }
    }

    /// Expands a label; dynamic labels need `table`.
    pub fn from_label(label: &ConfigLabel, cost: Arc<CostModel>, table: Option<Arc<DecisionTable>>) -> Result<Self> {
        let routing = match label.x {
            XSetting::Static(x) => RoutingPolicy::static_x(x)?,
            XSetting::Dynamic => RoutingPolicy::dynamic(
                table.ok_or_else(|| Error::Config("dynamic routing needs a decision table".into()))?,
            ),
        };
        Ok(Self::new(label.shape, routing, cost))
    }

    /// Parses `name` (e.g. `"2P_2D"`) and attaches a static `x`.
    pub fn named(name: &str, x: f64, cost: Arc<CostModel>) -> Result<Self> {
        let shape: ClusterShape = name.parse()?;
        Ok(Self::new(shape, RoutingPolicy::static_x(x)?, cost))
    }

    pub fn shape(&self) -> ClusterShape {
        ClusterShape {
            p: self.p_nodes,
            d: self.d_nodes,
            r: self.r_nodes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(format!("{}: {m}", self.label)));
        if self.shape().total() == 0 {
            return cfg("cluster has no nodes");
        }
        if self.max_decode_batch == 0 || self.max_concurrent_prefills == 0 {
            return cfg("batch and prefill limits must be >= 1");
        }
        if !(self.request_timeout.is_finite() && self.request_timeout > 0.0) {
            return cfg("request timeout must be > 0");
        }
        if let ServiceModel::Exponential { mean_s } = self.prefill_service {
            if !(mean_s.is_finite() && mean_s > 0.0) {
                return cfg("exponential service mean must be > 0");
            }
        }
        if self.d_nodes > 0 && self.p_nodes == 0 {
            return cfg("decode nodes need at least one prefill node");
        }
        if self.p_nodes > 0 && self.d_nodes == 0 {
            return cfg("prefill nodes need at least one decode node");
        }
        let needs_d = match &self.routing {
            RoutingPolicy::Static { x } => *x > 0.0,
            RoutingPolicy::Dynamic { .. } => true,
        };
        if needs_d && self.d_nodes == 0 {
            return cfg("x > 0 requires decode nodes");
        }
        Ok(())
    }
}

/// Node state before a run.
#[derive(Debug, Clone)]
pub struct Cluster {
    config: ClusterConfig,
    nodes: Vec<Node>,
}

impl Cluster {
    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn node_roles(&self) -> Vec<(String, NodeRole)> {
        self.nodes.iter().map(|n| (n.id.clone(), n.role)).collect()
    }
}

pub fn build_cluster(config: &ClusterConfig) -> Result<Cluster> {
    config.validate()?;
    let mut nodes = Vec::new();
    for (role, count, prefix) in [
        (NodeRole::P, config.p_nodes, "p"),
        (NodeRole::D, config.d_nodes, "d"),
        (NodeRole::R, config.r_nodes, "r"),
    ] {
        for i in 0..count {
            nodes.push(Node::new(format!("{prefix}{i}"), role));
        }
    }
    Ok(Cluster {
        config: config.clone(),
        nodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub transfers: u64,
    pub tokens: u64,
    pub bytes: f64,
    pub aborted: u64,
    /// Counts of transfer queueing delays below each bound in
    /// [`QUEUE_DELAY_BOUNDS_S`], plus a final overflow bucket.
    pub queue_delay_histogram: Vec<u64>,
}

pub const QUEUE_DELAY_BOUNDS_S: [f64; 6] = [0.0, 0.001, 0.01, 0.1, 1.0, 10.0];

impl Default for LinkStats {
    fn default() -> Self {
        Self {
            transfers: 0,
            tokens: 0,
            bytes: 0.0,
            aborted: 0,
            queue_delay_histogram: vec![0; QUEUE_DELAY_BOUNDS_S.len() + 1],
        }
    }
}

impl LinkStats {
    fn record_delay(&mut self, delay: f64) {
        let i = QUEUE_DELAY_BOUNDS_S
            .iter()
            .position(|&b| delay <= b)
            .unwrap_or(QUEUE_DELAY_BOUNDS_S.len());
        self.queue_delay_histogram[i] += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeUtilization {
    pub node: String,
    pub role: NodeRole,
    /// Time with at least one prefill in service.
    pub prefill_busy_s: f64,
    /// Time spent in decode iterations.
    pub decode_busy_s: f64,
}

/// Per-request internals not carried by [`RequestRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTiming {
    pub conv_id: String,
    pub turn_index: u32,
    pub prefill_node: Option<String>,
    pub decode_node: String,
    pub prefill_kind: PrefillKind,
    pub prefill_tokens: u32,
    /// Arrival to prefill start.
    pub prefill_wait: Option<f64>,
    pub prefill_service: f64,
    pub transfer_tokens: u32,
    pub transfer_wait: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub seed: u64,
    pub calibration_hash: String,
    pub conversations: usize,
    pub qps_replay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub manifest: RunManifest,
    /// Sorted by (conv_id, turn_index).
    pub records: Vec<RequestRecord>,
    pub timings: Vec<RequestTiming>,
    pub link_stats: LinkStats,
    pub utilization: Vec<NodeUtilization>,
    /// Decode iterations whose interference lookup left the calibrated range.
    pub clamped_lookups: u64,
    pub makespan: f64,
    /// Prefix caches held by each node at the end of the run, sorted by
    /// (node, conv_id).
    pub prefix_caches: Vec<CacheEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub node: String,
    pub conv_id: String,
    pub tokens: u32,
}

impl SimResult {
    /// Number of transfers per conversation id.
    pub fn transfers_per_conversation(&self) -> HashMap<&str, u32> {
        let mut out: HashMap<&str, u32> = HashMap::new();
        for t in &self.timings {
            let e = out.entry(t.conv_id.as_str()).or_default();
            if t.transfer_tokens > 0 {
                *e += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct PrefillJob {
    req: usize,
    /// Exclusive-service seconds still owed.
    remaining: f64,
    kind: PrefillKind,
    /// Interference coordinate: prompt length for full prefill, attended span
    /// for append prefill.
    coord_tokens: u32,
}

#[derive(Debug, Clone)]
struct Node {
    id: String,
    role: NodeRole,
    prefill_active: Vec<PrefillJob>,
    prefill_queue: VecDeque<PrefillJob>,
    prefill_updated: f64,
    prefill_version: u64,
    decode_active: Vec<usize>,
    decode_waiting: VecDeque<usize>,
    iter_running: bool,
    prefix_cache: HashMap<usize, u32>,
    /// Unfinished requests that will decode here.
    outstanding: u32,
    prefill_busy: f64,
    decode_busy: f64,
}

impl Node {
    fn new(id: String, role: NodeRole) -> Self {
        Self {
            id,
            role,
            prefill_active: Vec::new(),
            prefill_queue: VecDeque::new(),
            prefill_updated: 0.0,
            prefill_version: 0,
            decode_active: Vec::new(),
            decode_waiting: VecDeque::new(),
            iter_running: false,
            prefix_cache: HashMap::new(),
            outstanding: 0,
            prefill_busy: 0.0,
            decode_busy: 0.0,
        }
    }

    fn prefill_depth(&self) -> usize {
        self.prefill_active.len() + self.prefill_queue.len()
    }

    /// Charges elapsed processor-shared service to active jobs.
    fn advance_prefill(&mut self, now: f64) {
        let k = self.prefill_active.len();
        let dt = now - self.prefill_updated;
        if k > 0 && dt > 0.0 {
            let share = dt / k as f64;
            for j in &mut self.prefill_active {
                j.remaining -= share;
            }
            self.prefill_busy += dt;
        }
        self.prefill_updated = now;
    }
}

#[derive(Debug, Clone)]
struct Link {
    busy: Option<usize>,
    queue: VecDeque<(usize, f64)>,
    version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    Prefill(usize),
    Transfer(usize),
    DecodeWaiting(usize),
    Decoding(usize),
    Done,
}

#[derive(Debug, Clone)]
struct Req {
    conv: usize,
    turn: usize,
    arrival: f64,
    route: RouteTaken,
    decode_node: usize,
    prefill_node: usize,
    prefill_kind: PrefillKind,
    prefill_tokens: u32,
    prefill_start: Option<f64>,
    prefill_service: f64,
    transfer_tokens: u32,
    transfer_enqueued: f64,
    transfer_start: Option<f64>,
    stage: Stage,
    emitted: u32,
    target: u32,
    first_token: Option<f64>,
    completion: Option<f64>,
    status: Option<RequestStatus>,
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Arrival { conv: usize, turn: usize },
    PrefillDone { node: usize, version: u64, req: usize },
    TransferDone { link: usize, version: u64 },
    IterDone { node: usize },
    Timeout { req: usize },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    /// Reversed so the max-heap pops the earliest event, FIFO among ties.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Sim<'a> {
    cfg: ClusterConfig,
    cost: Arc<CostModel>,
    convs: &'a [Conversation],
    nodes: Vec<Node>,
    node_index: HashMap<String, usize>,
    p_nodes: Vec<usize>,
    target_nodes: Vec<usize>,
    d_count: usize,
    links: Vec<Link>,
    reqs: Vec<Req>,
    heap: BinaryHeap<Event>,
    seq: u64,
    router: Router,
    sessions: SessionTable,
    qps: QpsWindow,
    rng: ChaCha8Rng,
    service: Option<Exp<f64>>,
    link_stats: LinkStats,
    clamped: u64,
    makespan: f64,
}

impl<'a> Sim<'a> {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn link_for(&self, req: &Req) -> usize {
        match self.cfg.link_topology {
            LinkTopology::Shared => 0,
            LinkTopology::PerPair => {
                let p = self.p_nodes.iter().position(|&n| n == req.prefill_node).unwrap_or(0);
                let d = req.decode_node - self.p_nodes.len();
                p * self.d_count + d
            }
        }
    }

    fn least_loaded(&self, candidates: &[usize], load: impl Fn(&Node) -> usize) -> usize {
        *candidates
            .iter()
            .min_by_key(|&&i| (load(&self.nodes[i]), i))
            .expect("validated cluster has candidates")
    }

    fn on_arrival(&mut self, now: f64, conv_idx: usize, turn_idx: usize) -> Result<()> {
        let conv = &self.convs[conv_idx];
        let turn = &conv.turns[turn_idx];
        if turn_idx == 0 {
            self.qps.record(now);
        }
        let measured = self.qps.rate(now);
        let rreq = RouteRequest {
            conv_hash: conv.first_message_digest,
            turn_index: turn.turn_index,
            n_in: turn.new_input_tokens,
            n_out: turn.target_output_tokens,
            n_ctx: turn.cached_context_tokens,
        };
        let nodes = &self.nodes;
        let index = &self.node_index;
        let is_replica = |id: &str| index.get(id).is_some_and(|&i| nodes[i].role == NodeRole::R);
        let decision = self
            .router
            .decide(&rreq, measured, now, &mut self.sessions, &is_replica);

        let target = if decision.new_session {
            let t = self.least_loaded(&self.target_nodes, |n| n.outstanding as usize);
            let id = self.nodes[t].id.clone();
            self.sessions.assign(&conv.first_message_digest, &id);
            t
        } else {
            let id = decision.assigned_pd.as_deref().expect("live session has a node");
            self.node_index[id]
        };
        let n_ctx = turn.cached_context_tokens;
        let m = turn.new_input_tokens;
        let cached = self.nodes[target].prefix_cache.get(&conv_idx).copied();
        let local = match self.nodes[target].role {
            NodeRole::R => true,
            _ => decision.target == TargetRole::DecodeLocal,
        };
        let (route, prefill_node, kind, tokens) = if local {
            let route = if self.nodes[target].role == NodeRole::R {
                RouteTaken::RLocal
            } else {
                RouteTaken::DLocal
            };
            if n_ctx > 0 && cached == Some(n_ctx) {
                (route, target, PrefillKind::Append, m)
            } else {
                (route, target, PrefillKind::Full, n_ctx + m)
            }
        } else {
            let p = self.least_loaded(&self.p_nodes, Node::prefill_depth);
            (RouteTaken::PPath, p, PrefillKind::Full, n_ctx + m)
        };
        let service = match self.service {
            Some(exp) => exp.sample(&mut self.rng),
            None => match kind {
                PrefillKind::Full => self.cost.full_prefill_time(tokens)?,
                PrefillKind::Append => self.cost.append_prefill_time(tokens, n_ctx)?,
            },
        };
        let coord = match kind {
            PrefillKind::Full => tokens,
            PrefillKind::Append => n_ctx + m,
        };
        let transfer_tokens = if route == RouteTaken::PPath { n_ctx + m } else { 0 };
        let id = self.reqs.len();
        self.reqs.push(Req {
            conv: conv_idx,
            turn: turn_idx,
            arrival: now,
            route,
            decode_node: target,
            prefill_node,
            prefill_kind: kind,
            prefill_tokens: tokens,
            prefill_start: None,
            prefill_service: service,
            transfer_tokens,
            transfer_enqueued: 0.0,
            transfer_start: None,
            stage: Stage::Prefill(prefill_node),
            emitted: 0,
            target: turn.target_output_tokens,
            first_token: None,
            completion: None,
            status: None,
        });
        self.nodes[target].outstanding += 1;
        self.push(now + self.cfg.request_timeout, EventKind::Timeout { req: id });

        let node = &mut self.nodes[prefill_node];
        node.advance_prefill(now);
        let job = PrefillJob {
            req: id,
            remaining: service,
            kind,
            coord_tokens: coord,
        };
        if node.prefill_active.len() < self.cfg.max_concurrent_prefills as usize {
            node.prefill_active.push(job);
            self.reqs[id].prefill_start = Some(now);
        } else {
            node.prefill_queue.push_back(job);
        }
        self.reschedule_prefill(prefill_node, now);
        Ok(())
    }

    fn reschedule_prefill(&mut self, n: usize, now: f64) {
        let node = &mut self.nodes[n];
        node.prefill_version += 1;
        let k = node.prefill_active.len();
        let next = node
            .prefill_active
            .iter()
            .min_by(|a, b| a.remaining.total_cmp(&b.remaining).then(a.req.cmp(&b.req)))
            .map(|j| (j.req, j.remaining.max(0.0)));
        let version = node.prefill_version;
        if let Some((req, rem)) = next {
            self.push(now + rem * k as f64, EventKind::PrefillDone { node: n, version, req });
        }
    }

    /// Moves queued jobs into free service slots.
    fn refill_prefill(&mut self, n: usize, now: f64) {
        let cap = self.cfg.max_concurrent_prefills as usize;
        while self.nodes[n].prefill_active.len() < cap {
            let Some(job) = self.nodes[n].prefill_queue.pop_front() else {
                break;
            };
            self.reqs[job.req].prefill_start = Some(now);
            self.nodes[n].prefill_active.push(job);
        }
    }

    fn on_prefill_done(&mut self, now: f64, n: usize, version: u64, req: usize) {
        if self.nodes[n].prefill_version != version {
            return;
        }
        self.nodes[n].advance_prefill(now);
        let mut finished = Vec::new();
        self.nodes[n].prefill_active.retain(|j| {
            let done = j.req == req || j.remaining <= 1e-12;
            if done {
                finished.push(j.req);
            }
            !done
        });
        finished.sort_unstable();
        self.refill_prefill(n, now);
        self.reschedule_prefill(n, now);
        for r in finished {
            self.after_prefill(now, r);
        }
    }

    fn after_prefill(&mut self, now: f64, r: usize) {
        if self.reqs[r].route == RouteTaken::PPath {
            let link = self.link_for(&self.reqs[r]);
            self.reqs[r].stage = Stage::Transfer(link);
            self.reqs[r].transfer_enqueued = now;
            self.links[link].queue.push_back((r, now));
            if self.links[link].busy.is_none() {
                self.start_next_transfer(link, now);
            }
        } else {
            self.join_decode(now, r);
        }
    }

    fn start_next_transfer(&mut self, l: usize, now: f64) {
        let Some((r, enq)) = self.links[l].queue.pop_front() else {
            self.links[l].busy = None;
            return;
        };
        self.links[l].busy = Some(r);
        self.links[l].version += 1;
        self.reqs[r].transfer_start = Some(now);
        self.link_stats.record_delay(now - enq);
        let dur = self.cost.transfer_duration(self.reqs[r].transfer_tokens);
        let version = self.links[l].version;
        self.push(now + dur, EventKind::TransferDone { link: l, version });
    }

    fn on_transfer_done(&mut self, now: f64, l: usize, version: u64) {
        if self.links[l].version != version {
            return;
        }
        let Some(r) = self.links[l].busy.take() else {
            return;
        };
        let tokens = self.reqs[r].transfer_tokens;
        self.link_stats.transfers += 1;
        self.link_stats.tokens += u64::from(tokens);
        self.link_stats.bytes += self.cost.kv_bytes(tokens);
        self.start_next_transfer(l, now);
        self.join_decode(now, r);
    }

    fn join_decode(&mut self, now: f64, r: usize) {
        let n = self.reqs[r].decode_node;
        self.reqs[r].stage = Stage::DecodeWaiting(n);
        self.nodes[n].decode_waiting.push_back(r);
        if !self.nodes[n].iter_running {
            self.start_iteration(n, now);
        }
    }

    fn start_iteration(&mut self, n: usize, now: f64) {
        let cap = self.cfg.max_decode_batch as usize;
        while self.nodes[n].decode_active.len() < cap {
            let Some(r) = self.nodes[n].decode_waiting.pop_front() else {
                break;
            };
            self.reqs[r].stage = Stage::Decoding(n);
            self.nodes[n].decode_active.push(r);
        }
        let node = &self.nodes[n];
        if node.decode_active.is_empty() {
            self.nodes[n].iter_running = false;
            return;
        }
        let mut state = BatchState::decode_only(node.decode_active.len() as u32);
        for j in &node.prefill_active {
            state = state.with_prefill(j.kind, u64::from(j.coord_tokens), 1);
        }
        let interference = self.cost.interference_multiplier(&state);
        if interference.clamped {
            self.clamped += 1;
        }
        let step = self.cost.decode_step_time(&state).expect("batch is non-empty");
        self.nodes[n].iter_running = true;
        self.nodes[n].decode_busy += step;
        self.push(now + step, EventKind::IterDone { node: n });
    }

    fn on_iter_done(&mut self, now: f64, n: usize) {
        let active = std::mem::take(&mut self.nodes[n].decode_active);
        let mut still = Vec::with_capacity(active.len());
        for r in active {
            let req = &mut self.reqs[r];
            req.emitted += 1;
            if req.emitted == 1 {
                req.first_token = Some(now);
            }
            if req.emitted >= req.target {
                self.complete(now, r);
            } else {
                still.push(r);
            }
        }
        self.nodes[n].decode_active = still;
        self.start_iteration(n, now);
    }

    fn complete(&mut self, now: f64, r: usize) {
        let (conv_idx, turn_idx, n) = {
            let req = &mut self.reqs[r];
            req.stage = Stage::Done;
            req.completion = Some(now);
            req.status = Some(RequestStatus::Completed);
            (req.conv, req.turn, req.decode_node)
        };
        let conv = &self.convs[conv_idx];
        let t = &conv.turns[turn_idx];
        let history = t.cached_context_tokens + t.new_input_tokens + t.target_output_tokens;
        let node = &mut self.nodes[n];
        node.outstanding -= 1;
        node.prefix_cache.insert(conv_idx, history);
        self.makespan = self.makespan.max(now);
        if turn_idx + 1 < conv.turns.len() {
            self.push(
                now + conv.think_time_s,
                EventKind::Arrival {
                    conv: conv_idx,
                    turn: turn_idx + 1,
                },
            );
        }
    }

    fn on_timeout(&mut self, now: f64, r: usize) {
        if self.reqs[r].status.is_some() {
            return;
        }
        let stage = self.reqs[r].stage;
        match stage {
            Stage::Prefill(n) => {
                self.nodes[n].advance_prefill(now);
                self.nodes[n].prefill_active.retain(|j| j.req != r);
                self.nodes[n].prefill_queue.retain(|j| j.req != r);
                self.refill_prefill(n, now);
                self.reschedule_prefill(n, now);
            }
            Stage::Transfer(l) => {
                if self.links[l].busy == Some(r) {
                    self.link_stats.aborted += 1;
                    self.links[l].version += 1;
                    self.start_next_transfer(l, now);
                } else {
                    self.links[l].queue.retain(|(q, _)| *q != r);
                }
            }
            Stage::DecodeWaiting(n) => self.nodes[n].decode_waiting.retain(|&q| q != r),
            Stage::Decoding(n) => self.nodes[n].decode_active.retain(|&q| q != r),
            Stage::Done => {}
        }
        let req = &mut self.reqs[r];
        req.stage = Stage::Done;
        req.status = Some(RequestStatus::TimedOut);
        let n = req.decode_node;
        self.nodes[n].outstanding -= 1;
        self.makespan = self.makespan.max(now);
    }

    fn run(&mut self) -> Result<()> {
        while let Some(ev) = self.heap.pop() {
            let now = ev.time;
            match ev.kind {
                EventKind::Arrival { conv, turn } => self.on_arrival(now, conv, turn)?,
                EventKind::PrefillDone { node, version, req } => self.on_prefill_done(now, node, version, req),
                EventKind::TransferDone { link, version } => self.on_transfer_done(now, link, version),
                EventKind::IterDone { node } => self.on_iter_done(now, node),
                EventKind::Timeout { req } => self.on_timeout(now, req),
            }
        }
        Ok(())
    }
}

fn check_conversations(convs: &[Conversation], replay: bool) -> Result<()> {
    for c in convs {
        if c.turns.is_empty() {
            return Err(validation(format!("conversation {} has no turns", c.conv_id)));
        }
        if !replay && c.first_arrival().is_none() {
            return Err(validation(format!("conversation {} has no Turn-1 arrival", c.conv_id)));
        }
        if let Some(t) = c.turns.iter().find(|t| t.target_output_tokens == 0) {
            return Err(validation(format!(
                "conversation {} turn {} has zero output tokens",
                c.conv_id, t.turn_index
            )));
        }
        if let Some(t) = c.turns.iter().find(|t| t.new_input_tokens == 0) {
            return Err(validation(format!(
                "conversation {} turn {} has zero input tokens",
                c.conv_id, t.turn_index
            )));
        }
    }
    Ok(())
}

/// Runs `conversations` to completion or timeout on `cluster`.
///
/// With `qps_replay`, Turn-1 arrivals are redrawn as a Poisson process at
/// that rate from `seed`. `seed` also drives stochastic service models.
pub fn run_simulation(
    cluster: Cluster,
    conversations: &[Conversation],
    qps_replay: Option<f64>,
    seed: u64,
) -> Result<SimResult> {
    check_conversations(conversations, qps_replay.is_some())?;
    let replayed;
    let convs: &[Conversation] = match qps_replay {
        Some(q) => {
            let mut owned = conversations.to_vec();
            replay_at_qps(&mut owned, q, seed)?;
            replayed = owned;
            &replayed
        }
        None => conversations,
    };
    let Cluster { config, nodes } = cluster;
    let node_index = nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
    let p_nodes: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].role == NodeRole::P).collect();
    let target_nodes: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].role != NodeRole::P).collect();
    let d_count = nodes.iter().filter(|n| n.role == NodeRole::D).count();
    let link_count = match config.link_topology {
        LinkTopology::Shared => 1,
        LinkTopology::PerPair => (p_nodes.len() * d_count).max(1),
    };
    let service = match config.prefill_service {
        ServiceModel::CostModel => None,
        ServiceModel::Exponential { mean_s } => Some(Exp::new(1.0 / mean_s).map_err(|e| validation(e.to_string()))?),
    };
    let mut sim = Sim {
        cost: config.cost.clone(),
        router: Router::new(config.routing.clone()),
        cfg: config,
        convs,
        nodes,
        node_index,
        p_nodes,
        target_nodes,
        d_count,
        links: vec![
            Link {
                busy: None,
                queue: VecDeque::new(),
                version: 0,
            };
            link_count
        ],
        reqs: Vec::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        sessions: SessionTable::new(),
        qps: QpsWindow::with_origin(QPS_WINDOW_S, 0.0),
        rng: {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(SERVICE_STREAM);
            rng
        },
        service,
        link_stats: LinkStats::default(),
        clamped: 0,
        makespan: 0.0,
    };
    let mut order: Vec<usize> = (0..convs.len()).collect();
    order.sort_by(|&a, &b| {
        let ta = convs[a].first_arrival().unwrap_or(0.0);
        let tb = convs[b].first_arrival().unwrap_or(0.0);
        ta.total_cmp(&tb).then(a.cmp(&b))
    });
    for i in order {
        let at = convs[i].first_arrival().expect("arrivals checked");
        sim.push(at, EventKind::Arrival { conv: i, turn: 0 });
    }
    sim.run()?;
    finish(sim, seed, qps_replay)
}

fn finish(sim: Sim<'_>, seed: u64, qps_replay: Option<f64>) -> Result<SimResult> {
    let mut rows: Vec<(RequestRecord, RequestTiming)> = sim
        .reqs
        .iter()
        .map(|r| {
            let conv = &sim.convs[r.conv];
            let turn = &conv.turns[r.turn];
            let record = RequestRecord {
                conv_id: conv.conv_id.clone(),
                turn_index: turn.turn_index,
                arrival: r.arrival,
                first_token: r.first_token,
                completion: r.completion,
                output_tokens_emitted: r.emitted,
                route_taken: r.route,
                status: r.status.unwrap_or(RequestStatus::TimedOut),
            };
            let timing = RequestTiming {
                conv_id: conv.conv_id.clone(),
                turn_index: turn.turn_index,
                prefill_node: (r.prefill_node != r.decode_node).then(|| sim.nodes[r.prefill_node].id.clone()),
                decode_node: sim.nodes[r.decode_node].id.clone(),
                prefill_kind: r.prefill_kind,
                prefill_tokens: r.prefill_tokens,
                prefill_wait: r.prefill_start.map(|s| s - r.arrival),
                prefill_service: r.prefill_service,
                transfer_tokens: if r.transfer_start.is_some() {
                    r.transfer_tokens
                } else {
                    0
                },
                transfer_wait: r.transfer_start.map(|s| s - r.transfer_enqueued),
            };
            (record, timing)
        })
        .collect();
    rows.sort_by(|a, b| a.0.conv_id.cmp(&b.0.conv_id).then(a.0.turn_index.cmp(&b.0.turn_index)));
    let (records, timings) = rows.into_iter().unzip();
    let mut nodes = sim.nodes;
    let makespan = sim.makespan;
    let mut prefix_caches: Vec<CacheEntry> = nodes
        .iter()
        .flat_map(|n| {
            n.prefix_cache.iter().map(|(&c, &tokens)| CacheEntry {
                node: n.id.clone(),
                conv_id: sim.convs[c].conv_id.clone(),
                tokens,
            })
        })
        .collect();
    prefix_caches.sort_by(|a, b| a.node.cmp(&b.node).then_with(|| a.conv_id.cmp(&b.conv_id)));
    let utilization = nodes
        .iter_mut()
        .map(|n| {
            n.advance_prefill(makespan);
            NodeUtilization {
                node: n.id.clone(),
                role: n.role,
                prefill_busy_s: n.prefill_busy,
                decode_busy_s: n.decode_busy,
            }
        })
        .collect();
    Ok(SimResult {
        manifest: RunManifest {
            config: sim.cfg.label.clone(),
            seed,
            calibration_hash: sim.cost.calibration_hash().to_string(),
            conversations: sim.convs.len(),
            qps_replay,
        },
        records,
        timings,
        link_stats: sim.link_stats,
        utilization,
        clamped_lookups: sim.clamped,
        makespan,
        prefix_caches,
    })
}

/// [`build_cluster`] followed by [`run_simulation`] without replay.
pub fn simulate(config: &ClusterConfig, conversations: &[Conversation], seed: u64) -> Result<SimResult> {
    run_simulation(build_cluster(config)?, conversations, None, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::TurnProfile;

    fn cost() -> Arc<CostModel> {
        Arc::new(CostModel::default())
    }

    fn conv(id: &str, profiles: &[TurnProfile], at: f64) -> Conversation {
        let mut c = Conversation::from_profiles(id, profiles);
        c.turns[0].arrival_time = Some(at);
        c
    }

    #[test]
    fn shapes_parse_and_print() {
        let s: ClusterShape = "2P_2D".parse().unwrap();
        assert_eq!((s.p, s.d, s.r), (2, 2, 0));
        let s: ClusterShape = "4R".parse().unwrap();
        assert_eq!((s.p, s.d, s.r), (0, 0, 4));
        let s: ClusterShape = "1R_1P_2D".parse().unwrap();
        assert_eq!((s.p, s.d, s.r), (1, 2, 1));
        assert_eq!(s.to_string(), "1R_1P_2D");
        for bad in ["", "2Q", "P", "1P_1P", "0P_1D", "1P__1D"] {
            assert!(bad.parse::<ClusterShape>().is_err(), "{bad}");
        }
    }

    #[test]
    fn labels_round_trip_and_categorize() {
        let all = standard_configs();
        assert_eq!(all.len(), 17);
        assert_eq!(core_configs().len(), 10);
        for l in &all {
            assert_eq!(&l.to_string().parse::<ConfigLabel>().unwrap(), l);
        }
        assert_eq!(label("1P_3D@x=1/3").category(), ConfigCategory::Fractional);
        assert_eq!(label("4R").category(), ConfigCategory::Replica);
        assert_eq!(label("2R_1P_1D@x=1").category(), ConfigCategory::Hybrid);
        assert!("1P_3D@x=2".parse::<ConfigLabel>().is_err());
    }

    #[test]
    fn invalid_clusters_fail_at_build() {
        assert!(ClusterConfig::named("4R", 1.0, cost())
            .and_then(|c| build_cluster(&c))
            .is_err());
        assert!(ClusterConfig::named("2P", 0.0, cost())
            .and_then(|c| build_cluster(&c))
            .is_err());
        assert!(ClusterConfig::named("2D", 0.0, cost())
            .and_then(|c| build_cluster(&c))
            .is_err());
        assert!(build_cluster(&ClusterConfig::named("4R", 0.0, cost()).unwrap()).is_ok());
    }

    #[test]
    fn replica_single_turn_ttft_is_prefill_plus_one_step() {
        let cfg = ClusterConfig::named("4R", 0.0, cost()).unwrap();
        let res = simulate(&cfg, &[conv("a", &[TurnProfile::new(1000, 5)], 0.0)], 1).unwrap();
        let r = &res.records[0];
        let c = &cfg.cost;
        let want = c.full_prefill_time(1000).unwrap() + c.decode_step_time(&BatchState::decode_only(1)).unwrap();
        assert!((r.first_token.unwrap() - want).abs() < 1e-12);
        assert_eq!(r.output_tokens_emitted, 5);
        assert_eq!(res.link_stats.bytes, 0.0);
        assert_eq!(r.route_taken, RouteTaken::RLocal);
    }

    #[test]
    fn transfer_counts_per_mode() {
        let profiles = [TurnProfile::new(1000, 50), TurnProfile::new(200, 50)];
        let c = conv("a", &profiles, 0.0);
        let one = simulate(
            &ClusterConfig::named("1P_1D", 1.0, cost()).unwrap(),
            std::slice::from_ref(&c),
            1,
        )
        .unwrap();
        assert_eq!(one.link_stats.transfers, 1);
        assert_eq!(one.records[1].route_taken, RouteTaken::DLocal);
        assert_eq!(one.timings[1].prefill_kind, PrefillKind::Append);

        let zero = simulate(&ClusterConfig::named("1P_1D", 0.0, cost()).unwrap(), &[c], 1).unwrap();
        assert_eq!(zero.link_stats.transfers, 2);
        assert_eq!(zero.timings[1].prefill_tokens, 1000 + 50 + 200);
        assert_eq!(zero.timings[1].prefill_kind, PrefillKind::Full);
        assert_eq!(zero.link_stats.tokens, 1000 + 1250);
    }

    #[test]
    fn timeout_frees_resources_and_ends_conversation() {
        let mut cfg = ClusterConfig::named("1P_1D", 0.0, cost()).unwrap();
        cfg.request_timeout = 0.05;
        let c = conv("a", &[TurnProfile::new(8000, 10), TurnProfile::new(10, 10)], 0.0);
        let res = simulate(&cfg, &[c], 1).unwrap();
        assert_eq!(res.records.len(), 1);
        assert_eq!(res.records[0].status, RequestStatus::TimedOut);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = crate::workload::WorkloadSpec::new(TurnProfile::new(2048, 128), TurnProfile::new(512, 128), 3)
            .with_qps(6.0);
        let convs = crate::workload::generate_conversations(&spec, 3).unwrap();
        let cfg = ClusterConfig::named("2P_2D", 0.5, cost()).unwrap();
        let a = simulate(&cfg, &convs, 9).unwrap();
        let b = simulate(&cfg, &convs, 9).unwrap();
        assert_eq!(a, b);
    }
}
