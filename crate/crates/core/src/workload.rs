//! Multi-turn conversation workloads.
//!
//! Synthetic workloads draw Turn-1 arrivals from a Poisson process and give
//! every turn fixed (optionally jittered) token counts. Real traces are read
//! from line-delimited JSON, one conversation per line, and replayed at a
//! target rate with [`replay_at_qps`].

use std::fmt;
use std::io::{BufRead, Write};

use md5::{Digest, Md5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Token counts for one turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnProfile {
    #[serde(rename = "input")]
    pub input_tokens: u32,
    #[serde(rename = "output")]
    pub output_tokens: u32,
}

impl TurnProfile {
    pub const fn new(input_tokens: u32, output_tokens: u32) -> Self {
        Self {
            input_tokens,
            output_tokens,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.input_tokens == 0 || self.output_tokens == 0 {
            return Err(validation(format!(
                "{what}: input and output token counts must be >= 1"
            )));
        }
        Ok(())
    }
}

/// Workload category by the new-input / output token ratio of a turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadType {
    DecodeHeavy,
    Balanced,
    PrefillHeavy,
}

impl WorkloadType {
    pub const ALL: [WorkloadType; 3] = [
        WorkloadType::DecodeHeavy,
        WorkloadType::Balanced,
        WorkloadType::PrefillHeavy,
    ];

    /// Default classification: ratio < 0.5 is decode-heavy, ratio > 2 is
    /// prefill-heavy, everything in between is balanced. A zero output count
    /// is treated as prefill-heavy.
    pub fn classify(n_in: u32, n_out: u32) -> Self {
        Self::classify_with(n_in, n_out, 0.5, 2.0)
    }

    pub fn classify_with(n_in: u32, n_out: u32, low: f64, high: f64) -> Self {
        if n_out == 0 {
            return WorkloadType::PrefillHeavy;
        }
        let ratio = f64::from(n_in) / f64::from(n_out);
        if ratio < low {
            WorkloadType::DecodeHeavy
        } else if ratio > high {
            WorkloadType::PrefillHeavy
        } else {
            WorkloadType::Balanced
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            WorkloadType::DecodeHeavy => "decode_heavy",
            WorkloadType::Balanced => "balanced",
            WorkloadType::PrefillHeavy => "prefill_heavy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for WorkloadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_num_turns() -> u32 {
    2
}

/// Parameters of a synthetic multi-turn workload.
///
/// This is also the on-disk workload spec file (TOML), so field names carry
/// their units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Conversation arrival rate (conversations per second).
    pub qps: f64,
    pub duration_s: f64,
    #[serde(default = "default_num_turns")]
    pub num_turns: u32,
    pub turn1: TurnProfile,
    pub turn2plus: TurnProfile,
    /// Delay between a turn's final token and the next turn's arrival.
    #[serde(default)]
    pub think_time_s: f64,
    /// Uniform +/- jitter applied to every token count, in percent.
    #[serde(default)]
    pub jitter_pct: f64,
}

impl WorkloadSpec {
    pub fn new(turn1: TurnProfile, turn2plus: TurnProfile, num_turns: u32) -> Self {
        Self {
            qps: 1.0,
            duration_s: 10.0,
            num_turns,
            turn1,
            turn2plus,
            think_time_s: 0.0,
            jitter_pct: 0.0,
        }
    }

    pub fn with_qps(mut self, qps: f64) -> Self {
        self.qps = qps;
        self
    }

    pub fn with_duration(mut self, duration_s: f64) -> Self {
        self.duration_s = duration_s;
        self
    }

    /// Category implied by the Turn-2+ profile.
    pub fn category(&self) -> WorkloadType {
        WorkloadType::classify(self.turn2plus.input_tokens, self.turn2plus.output_tokens)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.qps.is_finite() && self.qps > 0.0) {
            return Err(validation(format!("qps must be > 0, got {}", self.qps)));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(validation(format!("duration_s must be > 0, got {}", self.duration_s)));
        }
        if self.num_turns == 0 {
            return Err(validation("num_turns must be >= 1"));
        }
        if !(self.think_time_s.is_finite() && self.think_time_s >= 0.0) {
            return Err(validation("think_time_s must be >= 0"));
        }
        if !(self.jitter_pct.is_finite() && (0.0..100.0).contains(&self.jitter_pct)) {
            return Err(validation("jitter_pct must be in [0, 100)"));
        }
        self.turn1.validate("turn1")?;
        self.turn2plus.validate("turn2plus")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: WorkloadSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// 128-bit digest identifying a conversation by its first user message.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConvDigest(pub [u8; 16]);

impl ConvDigest {
    pub fn of(first_message: &str) -> Self {
        ConvDigest(Md5::digest(first_message.as_bytes()).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for ConvDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConvDigest({})", self.to_hex())
    }
}

impl fmt::Display for ConvDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ConvDigest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ConvDigest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 16 bytes"))?;
        Ok(ConvDigest(arr))
    }
}

/// One turn of a conversation as seen by the serving system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRequest {
    pub conv_id: String,
    pub turn_index: u32,
    pub new_input_tokens: u32,
    pub cached_context_tokens: u32,
    pub target_output_tokens: u32,
    /// Set for Turn 1 once arrivals are scheduled; later turns arrive when
    /// the previous turn completes.
    pub arrival_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    pub first_message_digest: ConvDigest,
    pub turns: Vec<TurnRequest>,
    #[serde(default)]
    pub think_time_s: f64,
}

impl Conversation {
    /// Builds a conversation from per-turn profiles, filling in turn indices
    /// and cumulative cached context.
    pub fn from_profiles(conv_id: impl Into<String>, profiles: &[TurnProfile]) -> Self {
        let conv_id = conv_id.into();
        let mut context = 0u32;
        let turns = profiles
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let turn = TurnRequest {
                    conv_id: conv_id.clone(),
                    turn_index: i as u32 + 1,
                    new_input_tokens: p.input_tokens,
                    cached_context_tokens: context,
                    target_output_tokens: p.output_tokens,
                    arrival_time: None,
                };
                context += p.input_tokens + p.output_tokens;
                turn
            })
            .collect();
        Conversation {
            first_message_digest: ConvDigest::of(&conv_id),
            conv_id,
            turns,
            think_time_s: 0.0,
        }
    }

    pub fn first_arrival(&self) -> Option<f64> {
        self.turns.first().and_then(|t| t.arrival_time)
    }

    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }

    /// Mean new-input / output ratio over Turn 2+.
    pub fn turn2plus_ratio(&self) -> Option<f64> {
        let (inp, out) = self.turns.iter().skip(1).fold((0u64, 0u64), |(i, o), t| {
            (i + u64::from(t.new_input_tokens), o + u64::from(t.target_output_tokens))
        });
        if self.turns.len() < 2 {
            None
        } else if out == 0 {
            Some(f64::INFINITY)
        } else {
            Some(inp as f64 / out as f64)
        }
    }

    fn profiles(&self) -> Vec<TurnProfile> {
        self.turns
            .iter()
            .map(|t| TurnProfile::new(t.new_input_tokens, t.target_output_tokens))
            .collect()
    }
}

/// Poisson arrival times in `[0, duration)`, strictly increasing.
pub fn arrival_schedule(qps: f64, duration: f64, seed: u64) -> Result<Vec<f64>> {
    if !(qps.is_finite() && qps > 0.0) {
        return Err(validation(format!("qps must be > 0, got {qps}")));
    }
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(validation(format!("duration must be >= 0, got {duration}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(qps).map_err(|e| validation(e.to_string()))?;
    let mut out = Vec::with_capacity((qps * duration * 1.2) as usize + 4);
    let mut t = 0.0;
    loop {
        let gap: f64 = exp.sample(&mut rng);
        if gap <= 0.0 {
            continue;
        }
        t += gap;
        if t >= duration {
            break;
        }
        out.push(t);
    }
    Ok(out)
}

fn jitter(count: u32, pct: f64, rng: &mut ChaCha8Rng) -> u32 {
    if pct == 0.0 {
        return count;
    }
    let f = 1.0 + rng.random_range(-pct..=pct) / 100.0;
    ((f64::from(count) * f).round() as u32).max(1)
}

/// Generates conversations whose Turn-1 arrivals form a Poisson process at
/// `spec.qps` over `[0, spec.duration_s)`.
pub fn generate_conversations(spec: &WorkloadSpec, seed: u64) -> Result<Vec<Conversation>> {
    spec.validate()?;
    let arrivals = arrival_schedule(spec.qps, spec.duration_s, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let convs = arrivals
        .into_iter()
        .enumerate()
        .map(|(i, at)| {
            let profiles: Vec<TurnProfile> = (0..spec.num_turns)
                .map(|t| {
                    let p = if t == 0 { spec.turn1 } else { spec.turn2plus };
                    TurnProfile::new(
                        jitter(p.input_tokens, spec.jitter_pct, &mut rng),
                        jitter(p.output_tokens, spec.jitter_pct, &mut rng),
                    )
                })
                .collect();
            let mut conv = Conversation::from_profiles(format!("conv-{i:06}"), &profiles);
            conv.turns[0].arrival_time = Some(at);
            conv.think_time_s = spec.think_time_s;
            conv
        })
        .collect();
    Ok(convs)
}

/// Assigns Turn-1 arrivals to already-built conversations (e.g. from a trace)
/// using exponential inter-arrival gaps at `qps`, in input order.
pub fn replay_at_qps(conversations: &mut [Conversation], qps: f64, seed: u64) -> Result<()> {
    if !(qps.is_finite() && qps > 0.0) {
        return Err(validation(format!("qps must be > 0, got {qps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(qps).map_err(|e| validation(e.to_string()))?;
    let mut t = 0.0;
    for conv in conversations.iter_mut() {
        t += exp.sample(&mut rng);
        if let Some(first) = conv.turns.first_mut() {
            first.arrival_time = Some(t);
        }
    }
    Ok(())
}

/// Selection applied while ingesting a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFilter {
    pub min_turns: usize,
    /// Keep only conversations whose Turn-2+ input/output ratio exceeds 2.
    pub prefill_heavy_only: bool,
    /// Uniformly sample this many surviving conversations (without
    /// replacement, original order kept). Fewer survivors keeps them all.
    pub sample: Option<(usize, u64)>,
}

impl Default for TraceFilter {
    fn default() -> Self {
        Self {
            min_turns: 2,
            prefill_heavy_only: false,
            sample: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceTurn {
    input_tokens: u32,
    output_tokens: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRecord {
    conv_id: String,
    turns: Vec<TraceTurn>,
}

/// Reads a line-delimited trace. Arrival times are left unset.
pub fn ingest_trace<R: BufRead>(source: R, filter: &TraceFilter) -> Result<Vec<Conversation>> {
    let mut kept = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.turns.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "conversation has no turns".into(),
            });
        }
        if let Some(t) = rec.turns.iter().find(|t| t.input_tokens == 0 || t.output_tokens == 0) {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "turn token counts must be >= 1 (got {}/{})",
                    t.input_tokens, t.output_tokens
                ),
            });
        }
        let profiles: Vec<TurnProfile> = rec
            .turns
            .iter()
            .map(|t| TurnProfile::new(t.input_tokens, t.output_tokens))
            .collect();
        let conv = Conversation::from_profiles(rec.conv_id, &profiles);
        if conv.num_turns() < filter.min_turns {
            continue;
        }
        if filter.prefill_heavy_only && !conv.turn2plus_ratio().is_some_and(|r| r > 2.0) {
            continue;
        }
        kept.push(conv);
    }
    if let Some((n, seed)) = filter.sample {
        if n < kept.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, kept.len(), n).into_vec();
            idx.sort_unstable();
            let mut slots: Vec<Option<Conversation>> = kept.into_iter().map(Some).collect();
            kept = idx.into_iter().filter_map(|i| slots[i].take()).collect();
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(kept)
}

/// Writes conversations in the trace format read by [`ingest_trace`].
pub fn write_trace<W: Write>(conversations: &[Conversation], mut out: W) -> Result<()> {
    for conv in conversations {
        let rec = TraceRecord {
            conv_id: conv.conv_id.clone(),
            turns: conv
                .profiles()
                .into_iter()
                .map(|p| TraceTurn {
                    input_tokens: p.input_tokens,
                    output_tokens: p.output_tokens,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// A workload with a stable identifier, as used by sweeps and the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedWorkload {
    pub id: String,
    pub spec: WorkloadSpec,
}

/// Turn-1 profiles of the default catalog.
pub const TURN1_PROFILES: [(&str, TurnProfile); 2] = [
    ("small", TurnProfile::new(512, 256)),
    ("large", TurnProfile::new(4096, 256)),
];

/// Turn-2+ profiles of the default catalog: four decode-heavy, two balanced
/// and three prefill-heavy shapes. These token counts are calibration
/// choices.
pub const TURN2_PROFILES: [(&str, TurnProfile); 9] = [
    ("decode_heavy_1", TurnProfile::new(64, 384)),
    ("decode_heavy_2", TurnProfile::new(128, 512)),
    ("decode_heavy_3", TurnProfile::new(96, 256)),
    ("decode_heavy_4", TurnProfile::new(192, 448)),
    ("balanced", TurnProfile::new(256, 256)),
    ("balanced_wide", TurnProfile::new(512, 384)),
    ("prefill_heavy_1", TurnProfile::new(1024, 128)),
    ("prefill_heavy_2", TurnProfile::new(2048, 128)),
    ("prefill_heavy_3", TurnProfile::new(4096, 256)),
];

/// The 18 default two-turn workloads (2 Turn-1 x 9 Turn-2 profiles), named
/// `<turn2>_<turn1>`, e.g. `balanced_small`.
pub fn catalog() -> Vec<NamedWorkload> {
    let mut out = Vec::with_capacity(18);
    for (t1_name, t1) in TURN1_PROFILES {
        for (t2_name, t2) in TURN2_PROFILES {
            out.push(NamedWorkload {
                id: format!("{t2_name}_{t1_name}"),
                spec: WorkloadSpec::new(t1, t2, 2),
            });
        }
    }
    out
}

pub fn catalog_workload(id: &str) -> Option<NamedWorkload> {
    catalog().into_iter().find(|w| w.id == id)
}
