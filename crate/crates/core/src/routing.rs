//! Append-prefill routing.
//!
//! Phase 1 ([`build_decision_table`]) benchmarks every discretized workload
//! under x=0 (append-prefill on a P node, KV transferred every turn) and x=1
//! (append-prefill locally on the decode node holding the cache) and stores
//! the binary choice that maximizes
//! `w_ttft * delta_ttft - w_tpot * delta_tpot`.
//!
//! Phase 2 ([`Router::decide`]) maps each Turn-2+ request to its table entry.
//! Turn 1 always takes the P path.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::workload::{ConvDigest, TurnProfile, WorkloadSpec, WorkloadType};

pub const DECISION_TABLE_VERSION: u32 = 1;

/// Benchmark QPS grid.
pub const QPS_GRID: [f64; 10] = [0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0];

/// Session idle time after which a conversation's entry is dropped.
pub const SESSION_TTL_S: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloWeights {
    pub w_ttft: f64,
    pub w_tpot: f64,
}

impl SloWeights {
    pub const BALANCED: SloWeights = SloWeights {
        w_ttft: 1.0,
        w_tpot: 1.0,
    };

    pub fn new(w_ttft: f64, w_tpot: f64) -> Result<Self> {
        let w = SloWeights { w_ttft, w_tpot };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.w_ttft) || !ok(self.w_tpot) {
            return Err(validation("weights must be finite and non-negative"));
        }
        if self.w_ttft == 0.0 && self.w_tpot == 0.0 {
            return Err(validation("weights must not both be zero"));
        }
        Ok(())
    }
}

impl FromStr for SloWeights {
    type Err = Error;

    /// Parses `"w_ttft,w_tpot"`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| validation(format!("weights must look like '1,1', got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| validation(format!("bad weight {v:?}: {e}")))
        };
        SloWeights::new(parse(a)?, parse(b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextClass {
    Small,
    Medium,
    Large,
}

impl ContextClass {
    pub const ALL: [ContextClass; 3] = [ContextClass::Small, ContextClass::Medium, ContextClass::Large];

    pub fn as_str(&self) -> &'static str {
        match self {
            ContextClass::Small => "small",
            ContextClass::Medium => "medium",
            ContextClass::Large => "large",
        }
    }
}

/// A QPS grid value, stored in milli-QPS so keys hash exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QpsBin(u32);

impl QpsBin {
    pub fn from_qps(qps: f64) -> Self {
        QpsBin((qps * 1000.0).round() as u32)
    }

    pub fn qps(&self) -> f64 {
        f64::from(self.0) / 1000.0
    }
}

impl fmt::Display for QpsBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.qps())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkloadKey {
    pub context_class: ContextClass,
    pub workload_type: WorkloadType,
    pub qps_bin: QpsBin,
}

impl fmt::Display for WorkloadKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}|{}",
            self.context_class.as_str(),
            self.workload_type,
            self.qps_bin
        )
    }
}

impl FromStr for WorkloadKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || validation(format!("malformed workload key {s:?}"));
        let mut parts = s.split('|');
        let ctx = parts.next().ok_or_else(bad)?;
        let wt = parts.next().ok_or_else(bad)?;
        let q = parts.next().ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let context_class = ContextClass::ALL
            .into_iter()
            .find(|c| c.as_str() == ctx)
            .ok_or_else(bad)?;
        let workload_type = WorkloadType::parse(wt).ok_or_else(bad)?;
        let qps: f64 = q.parse().map_err(|_| bad())?;
        Ok(WorkloadKey {
            context_class,
            workload_type,
            qps_bin: QpsBin::from_qps(qps),
        })
    }
}

/// Maps raw request features onto table keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretizer {
    /// `small < context_bounds[0] <= medium < context_bounds[1] <= large`.
    pub context_bounds: [u32; 2],
    /// Input/output ratio bounds between decode-heavy, balanced and
    /// prefill-heavy.
    pub ratio_bounds: [f64; 2],
    /// Ascending QPS bins.
    pub qps_grid: Vec<f64>,
}

impl Default for Discretizer {
    fn default() -> Self {
        Self {
            context_bounds: [4096, 16384],
            ratio_bounds: [0.5, 2.0],
            qps_grid: QPS_GRID.to_vec(),
        }
    }
}

impl Discretizer {
    pub fn validate(&self) -> Result<()> {
        if self.context_bounds[0] >= self.context_bounds[1] {
            return Err(validation("context bounds must be increasing"));
        }
        if !(self.ratio_bounds[0] < self.ratio_bounds[1]) {
            return Err(validation("ratio bounds must be increasing"));
        }
        if self.qps_grid.is_empty()
            || self.qps_grid.windows(2).any(|w| !(w[0] < w[1]))
            || self.qps_grid.iter().any(|q| !(q.is_finite() && *q > 0.0))
        {
            return Err(validation("qps grid must be positive and strictly ascending"));
        }
        Ok(())
    }

    pub fn context_class(&self, n_ctx: u32) -> ContextClass {
        if n_ctx < self.context_bounds[0] {
            ContextClass::Small
        } else if n_ctx < self.context_bounds[1] {
            ContextClass::Medium
        } else {
            ContextClass::Large
        }
    }

    /// Nearest grid value; exact midpoints go to the lower bin.
    pub fn qps_bin(&self, q: f64) -> QpsBin {
        let grid = &self.qps_grid;
        let mut best = grid[0];
        for &g in &grid[1..] {
            if (q - g).abs() < (q - best).abs() {
                best = g;
            }
        }
        QpsBin::from_qps(best)
    }

    pub fn discretize(&self, t: u32, n_in: u32, n_out: u32, n_ctx: u32, q: f64) -> Result<WorkloadKey> {
        if t < 2 {
            return Err(validation("Turn-1 requests are never looked up"));
        }
        Ok(WorkloadKey {
            context_class: self.context_class(n_ctx),
            workload_type: WorkloadType::classify_with(n_in, n_out, self.ratio_bounds[0], self.ratio_bounds[1]),
            qps_bin: self.qps_bin(q),
        })
    }

    /// Every key of the grid.
    pub fn keys(&self) -> Vec<WorkloadKey> {
        let mut out = Vec::new();
        for c in ContextClass::ALL {
            for w in WorkloadType::ALL {
                for &q in &self.qps_grid {
                    out.push(WorkloadKey {
                        context_class: c,
                        workload_type: w,
                        qps_bin: QpsBin::from_qps(q),
                    });
                }
            }
        }
        out
    }
}

/// [`Discretizer::discretize`] with the default thresholds.
pub fn discretize(t: u32, n_in: u32, n_out: u32, n_ctx: u32, q: f64) -> Result<WorkloadKey> {
    Discretizer::default().discretize(t, n_in, n_out, n_ctx, q)
}

/// Turn-2 measurements for one key under both routing modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase1Measurement {
    pub ttft_x0: f64,
    pub ttft_x1: f64,
    pub tpot_x0: f64,
    pub tpot_x1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEntry {
    pub ttft_x0: f64,
    pub ttft_x1: f64,
    pub tpot_x0: f64,
    pub tpot_x1: f64,
    pub delta_ttft: f64,
    pub delta_tpot: f64,
    pub score: f64,
    pub x_star: u8,
    /// False when Phase 1 could not measure this key; lookups then fall back
    /// to x=0.
    #[serde(default = "yes")]
    pub available: bool,
}

fn yes() -> bool {
    true
}

impl DecisionEntry {
    pub fn evaluate(m: Phase1Measurement, w: SloWeights) -> Self {
        let delta_ttft = (m.ttft_x0 - m.ttft_x1) / m.ttft_x0;
        let delta_tpot = (m.tpot_x1 - m.tpot_x0) / m.tpot_x0;
        let score = w.w_ttft * delta_ttft - w.w_tpot * delta_tpot;
        let usable = score.is_finite();
        DecisionEntry {
            ttft_x0: m.ttft_x0,
            ttft_x1: m.ttft_x1,
            tpot_x0: m.tpot_x0,
            tpot_x1: m.tpot_x1,
            delta_ttft,
            delta_tpot,
            score,
            x_star: u8::from(usable && score > 0.0),
            available: usable,
        }
    }

    pub fn unavailable() -> Self {
        DecisionEntry {
            ttft_x0: 0.0,
            ttft_x1: 0.0,
            tpot_x0: 0.0,
            tpot_x1: 0.0,
            delta_ttft: 0.0,
            delta_tpot: 0.0,
            score: 0.0,
            x_star: 0,
            available: false,
        }
    }

    pub fn measurement(&self) -> Option<Phase1Measurement> {
        self.available.then_some(Phase1Measurement {
            ttft_x0: self.ttft_x0,
            ttft_x1: self.ttft_x1,
            tpot_x0: self.tpot_x0,
            tpot_x1: self.tpot_x1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableHeader {
    pub version: u32,
    pub weights: SloWeights,
    pub calibration_hash: String,
    pub built_at: String,
    /// Cluster shape the table was measured on.
    pub cluster: String,
    pub discretizer: Discretizer,
    /// Phase-1 seeds.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Invocation that produced the table, if any.
    #[serde(default)]
    pub command: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    header: TableHeader,
    entries: BTreeMap<String, DecisionEntry>,
}

/// Discretized workload -> x* map. Immutable once built or loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTable {
    pub header: TableHeader,
    entries: HashMap<WorkloadKey, DecisionEntry>,
}

impl DecisionTable {
    pub fn new(header: TableHeader, entries: HashMap<WorkloadKey, DecisionEntry>) -> Self {
        Self { header, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &WorkloadKey) -> Option<&DecisionEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&WorkloadKey, &DecisionEntry)> {
        self.entries.iter()
    }

    /// x* for a key, or 0 when the key is missing or unavailable.
    pub fn lookup(&self, key: &WorkloadKey) -> u8 {
        match self.entries.get(key) {
            Some(e) if e.available => e.x_star,
            _ => 0,
        }
    }

    /// Recomputes scores and decisions from the stored measurements under
    /// new weights.
    pub fn reweighted(&self, weights: SloWeights) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, e)| {
                let e = match e.measurement() {
                    Some(m) => DecisionEntry::evaluate(m, weights),
                    None => DecisionEntry::unavailable(),
                };
                (*k, e)
            })
            .collect();
        DecisionTable {
            header: TableHeader {
                weights,
                ..self.header.clone()
            },
            entries,
        }
    }

    pub fn to_json(&self) -> String {
        let file = TableFile {
            header: self.header.clone(),
            entries: self.entries.iter().map(|(k, e)| (k.to_string(), e.clone())).collect(),
        };
        serde_json::to_string_pretty(&file).expect("table serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_str(text)?;
        if file.header.version != DECISION_TABLE_VERSION {
            return Err(validation(format!(
                "unsupported decision table version {}",
                file.header.version
            )));
        }
        file.header.weights.validate()?;
        file.header.discretizer.validate()?;
        let mut entries = HashMap::with_capacity(file.entries.len());
        for (k, e) in file.entries {
            entries.insert(k.parse()?, e);
        }
        Ok(DecisionTable {
            header: file.header,
            entries,
        })
    }
}

/// One grid key with the workload benchmarked for it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub key: WorkloadKey,
    pub spec: WorkloadSpec,
}

/// Representative workloads: each key's Turn-2 context lands mid-class and
/// its Turn-2 profile sits in the middle of its ratio band.
pub fn default_grid(disc: &Discretizer, duration_s: f64) -> Vec<GridPoint> {
    disc.keys()
        .into_iter()
        .map(|key| {
            let ctx = match key.context_class {
                ContextClass::Small => 2048,
                ContextClass::Medium => 8192,
                ContextClass::Large => 24576,
            };
            let t2 = match key.workload_type {
                WorkloadType::DecodeHeavy => TurnProfile::new(128, 512),
                WorkloadType::Balanced => TurnProfile::new(384, 384),
                WorkloadType::PrefillHeavy => TurnProfile::new(1536, 192),
            };
            let t1 = TurnProfile::new(ctx - 256, 256);
            GridPoint {
                key,
                spec: WorkloadSpec::new(t1, t2, 2)
                    .with_qps(key.qps_bin.qps())
                    .with_duration(duration_s),
            }
        })
        .collect()
}

/// Phase 1: measure every grid point under x=0 and x=1 and store x*.
///
/// `runner(spec, x)` returns `(turn-2 TTFT, TPOT)` aggregates. A failing
/// runner marks that key unavailable.
pub fn build_decision_table<F>(
    grid: &[GridPoint],
    weights: SloWeights,
    header: TableHeader,
    runner: F,
) -> Result<DecisionTable>
where
    F: Fn(&WorkloadSpec, f64) -> Result<(f64, f64)> + Sync,
{
    weights.validate()?;
    let entries = grid
        .par_iter()
        .map(|p| {
            let measured = runner(&p.spec, 0.0).and_then(|a| runner(&p.spec, 1.0).map(|b| (a, b)));
            let entry = match measured {
                Ok(((ttft_x0, tpot_x0), (ttft_x1, tpot_x1))) => DecisionEntry::evaluate(
                    Phase1Measurement {
                        ttft_x0,
                        ttft_x1,
                        tpot_x0,
                        tpot_x1,
                    },
                    weights,
                ),
                Err(e) => {
                    log::info!("phase-1 measurement failed for {}: {e}", p.key);
                    DecisionEntry::unavailable()
                }
            };
            (p.key, entry)
        })
        .collect();
    Ok(DecisionTable {
        header: TableHeader { weights, ..header },
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub conv_hash: ConvDigest,
    pub turn_count: u32,
    pub assigned_pd: Option<String>,
    pub last_access: f64,
}

/// Conversation-to-decode-node affinity, keyed by first-message digest.
#[derive(Debug, Clone, Default)]
pub struct SessionTable {
    entries: HashMap<ConvDigest, SessionEntry>,
    ttl: Option<f64>,
}

impl SessionTable {
    pub fn new() -> Self {
        Self::with_ttl(SESSION_TTL_S)
    }

    pub fn with_ttl(ttl: f64) -> Self {
        Self {
            entries: HashMap::new(),
            ttl: Some(ttl),
        }
    }

    pub fn ttl(&self) -> f64 {
        self.ttl.unwrap_or(SESSION_TTL_S)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Live entry for `hash`; entries idle longer than the TTL are treated as
    /// already evicted.
    pub fn get(&self, hash: &ConvDigest, now: f64) -> Option<&SessionEntry> {
        let ttl = self.ttl();
        self.entries.get(hash).filter(|e| now - e.last_access <= ttl)
    }

    /// Creates the entry (turn 1) or bumps its turn count, refreshing
    /// `last_access`. A provided node replaces the recorded assignment.
    pub fn session_update(&mut self, hash: ConvDigest, now: f64, assigned_pd: Option<&str>) -> SessionEntry {
        let e = self.entries.entry(hash).or_insert_with(|| SessionEntry {
            conv_hash: hash,
            turn_count: 0,
            assigned_pd: None,
            last_access: now,
        });
        e.turn_count += 1;
        e.last_access = now;
        if let Some(pd) = assigned_pd {
            e.assigned_pd = Some(pd.to_string());
        }
        e.clone()
    }

    pub fn assign(&mut self, hash: &ConvDigest, node: &str) {
        if let Some(e) = self.entries.get_mut(hash) {
            e.assigned_pd = Some(node.to_string());
        }
    }

    pub fn remove(&mut self, hash: &ConvDigest) -> Option<SessionEntry> {
        self.entries.remove(hash)
    }

    /// Drops every session pinned to `node`, returning how many were removed.
    pub fn invalidate_node(&mut self, node: &str) -> usize {
        let before = self.entries.len();
        self.entries.retain(|_, e| e.assigned_pd.as_deref() != Some(node));
        before - self.entries.len()
    }

    /// Removes entries idle for strictly longer than `ttl`.
    pub fn evict_expired(&mut self, now: f64, ttl: f64) -> usize {
        let before = self.entries.len();
        self.entries.retain(|_, e| now - e.last_access <= ttl);
        before - self.entries.len()
    }
}

/// Routing mode.
#[derive(Debug, Clone)]
pub enum RoutingPolicy {
    /// Route a fixed fraction `x` of Turn-2+ append-prefills to decode nodes.
    Static { x: f64 },
    /// Per-request lookup in a Phase-1 table.
    Dynamic {
        table: Arc<DecisionTable>,
        weights: SloWeights,
    },
}

impl RoutingPolicy {
    pub fn static_x(x: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) {
            return Err(validation(format!("static x must be in [0, 1], got {x}")));
        }
        Ok(RoutingPolicy::Static { x })
    }

    pub fn dynamic(table: Arc<DecisionTable>) -> Self {
        let weights = table.header.weights;
        RoutingPolicy::Dynamic { table, weights }
    }

    /// True when no Turn-2+ request can ever run on a decode node.
    pub fn never_local(&self) -> bool {
        matches!(self, RoutingPolicy::Static { x } if *x == 0.0)
    }
}

/// Deterministic accumulator sending exactly `floor(n * x)` of the first `n`
/// decisions to the decode node.
#[derive(Debug, Clone, Default)]
pub struct StrideCounter {
    issued: u64,
}

impl StrideCounter {
    pub fn next(&mut self, x: f64) -> u8 {
        let k = self.issued;
        self.issued += 1;
        let before = (k as f64 * x + 1e-9).floor();
        let after = ((k + 1) as f64 * x + 1e-9).floor();
        u8::from(after > before)
    }
}

/// Where a request's prefill runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRole {
    /// Prefill on a P node, then KV transfer to the session's decode node.
    Prefill,
    /// Append-prefill on the session's decode node.
    DecodeLocal,
    /// Everything on the session's replica node.
    ReplicaLocal,
}

/// Request features visible to the router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteRequest {
    pub conv_hash: ConvDigest,
    pub turn_index: u32,
    pub n_in: u32,
    pub n_out: u32,
    pub n_ctx: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    pub target: TargetRole,
    pub x_used: u8,
    /// The session's pinned node, if it already has one.
    pub assigned_pd: Option<String>,
    /// A session was created; the caller must pin a decode (or replica)
    /// node with [`SessionTable::assign`].
    pub new_session: bool,
    /// A Turn-2+ request found no live session and was handled as Turn 1.
    pub eviction_miss: bool,
    pub turn_count: u32,
}

/// Online router: policy plus per-policy stride state.
#[derive(Debug, Clone)]
pub struct Router {
    policy: RoutingPolicy,
    discretizer: Discretizer,
    stride: StrideCounter,
}

impl Router {
    pub fn new(policy: RoutingPolicy) -> Self {
        let discretizer = match &policy {
            RoutingPolicy::Dynamic { table, .. } => table.header.discretizer.clone(),
            RoutingPolicy::Static { .. } => Discretizer::default(),
        };
        Self {
            policy,
            discretizer,
            stride: StrideCounter::default(),
        }
    }

    pub fn policy(&self) -> &RoutingPolicy {
        &self.policy
    }

    /// x for a Turn-2+ request that has a live decode-node session.
    pub fn choose_x(&mut self, req: &RouteRequest, measured_qps: f64) -> u8 {
        match &self.policy {
            RoutingPolicy::Static { x } => self.stride.next(*x),
            RoutingPolicy::Dynamic { table, .. } => {
                match self
                    .discretizer
                    .discretize(req.turn_index, req.n_in, req.n_out, req.n_ctx, measured_qps)
                {
                    Ok(key) => table.lookup(&key),
                    Err(_) => 0,
                }
            }
        }
    }

    /// Routes one request and updates its session.
    ///
    /// `is_replica` tells whether a pinned node is a replica, for which x
    /// does not apply.
    pub fn decide(
        &mut self,
        req: &RouteRequest,
        measured_qps: f64,
        now: f64,
        sessions: &mut SessionTable,
        is_replica: &dyn Fn(&str) -> bool,
    ) -> RouteDecision {
        let live = (req.turn_index >= 2)
            .then(|| sessions.get(&req.conv_hash, now))
            .flatten()
            .filter(|e| e.assigned_pd.is_some())
            .cloned();
        let Some(existing) = live else {
            let eviction_miss = req.turn_index >= 2;
            sessions.remove(&req.conv_hash);
            let entry = sessions.session_update(req.conv_hash, now, None);
            return RouteDecision {
                target: TargetRole::Prefill,
                x_used: 0,
                assigned_pd: None,
                new_session: true,
                eviction_miss,
                turn_count: entry.turn_count,
            };
        };
        let node = existing.assigned_pd.clone().expect("filtered above");
        let entry = sessions.session_update(req.conv_hash, now, None);
        let (target, x_used) = if is_replica(&node) {
            (TargetRole::ReplicaLocal, 1)
        } else if self.choose_x(req, measured_qps) == 1 {
            (TargetRole::DecodeLocal, 1)
        } else {
            (TargetRole::Prefill, 0)
        };
        RouteDecision {
            target,
            x_used,
            assigned_pd: Some(node),
            new_session: false,
            eviction_miss: false,
            turn_count: entry.turn_count,
        }
    }
}

/// Sliding-window estimate of the conversation arrival rate.
#[derive(Debug, Clone)]
pub struct QpsWindow {
    window: f64,
    origin: Option<f64>,
    arrivals: VecDeque<f64>,
}

impl QpsWindow {
    pub fn new(window: f64) -> Self {
        Self {
            window,
            origin: None,
            arrivals: VecDeque::new(),
        }
    }

    pub fn with_origin(window: f64, origin: f64) -> Self {
        Self {
            origin: Some(origin),
            ..Self::new(window)
        }
    }

    pub fn record(&mut self, t: f64) {
        self.origin.get_or_insert(t);
        self.arrivals.push_back(t);
    }

    /// Arrivals in `(now - window, now]`, divided by the window length or by
    /// the observed span (at least one second) while the window is still
    /// filling.
    pub fn rate(&mut self, now: f64) -> f64 {
        while self.arrivals.front().is_some_and(|&t| t <= now - self.window) {
            self.arrivals.pop_front();
        }
        let origin = self.origin.unwrap_or(now);
        let span = self.window.min((now - origin).max(1.0));
        self.arrivals.len() as f64 / span
    }
}
