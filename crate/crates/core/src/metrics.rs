//! Serving metrics: per-request timings, run aggregates, Pareto frontiers and
//! per-category winner tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Success rate below which a run counts as degraded.
pub const DEGRADED_BELOW: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteTaken {
    PPath,
    DLocal,
    RLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Completed,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestRecord {
    pub conv_id: String,
    pub turn_index: u32,
    pub arrival: f64,
    pub first_token: Option<f64>,
    pub completion: Option<f64>,
    pub output_tokens_emitted: u32,
    pub route_taken: RouteTaken,
    pub status: RequestStatus,
}

impl RequestRecord {
    pub fn validate(&self) -> Result<()> {
        if self.status == RequestStatus::Completed {
            match (self.first_token, self.completion) {
                (Some(f), Some(c)) if c >= f && f >= self.arrival => {}
                _ => {
                    return Err(validation(format!(
                        "completed record {}#{} lacks ordered first_token/completion",
                        self.conv_id, self.turn_index
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerRequest {
    pub ttft: Option<f64>,
    pub tpot: Option<f64>,
    pub latency: Option<f64>,
    pub success: bool,
}

pub fn per_request(r: &RequestRecord) -> PerRequest {
    if r.status != RequestStatus::Completed {
        return PerRequest {
            ttft: None,
            tpot: None,
            latency: None,
            success: false,
        };
    }
    let ttft = r.first_token.map(|f| f - r.arrival);
    let latency = r.completion.map(|c| c - r.arrival);
    let tpot = match (r.first_token, r.completion) {
        (Some(f), Some(c)) if r.output_tokens_emitted >= 2 => Some((c - f) / f64::from(r.output_tokens_emitted - 1)),
        _ => None,
    };
    PerRequest {
        ttft,
        tpot,
        latency,
        success: true,
    }
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// sample at or below it.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub ttft_t1_mean: Option<f64>,
    pub ttft_t1_p99: Option<f64>,
    pub ttft_t2_mean: Option<f64>,
    pub ttft_t2_p99: Option<f64>,
    pub tpot_mean: Option<f64>,
    pub latency_mean: Option<f64>,
    pub tps: f64,
    pub success_rate: f64,
    pub degraded: bool,
}

/// Aggregates over `records`; `tps` divides emitted tokens of completed
/// requests by `window` seconds.
pub fn aggregate(records: &[RequestRecord], window: f64) -> Result<AggregateMetrics> {
    if records.is_empty() {
        return Err(validation("cannot aggregate an empty record set"));
    }
    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    let mut tpot = Vec::new();
    let mut latency = Vec::new();
    let mut tokens = 0u64;
    let mut completed = 0usize;
    for r in records {
        let m = per_request(r);
        if !m.success {
            continue;
        }
        completed += 1;
        tokens += u64::from(r.output_tokens_emitted);
        if let Some(t) = m.ttft {
            if r.turn_index <= 1 {
                t1.push(t);
            } else {
                t2.push(t);
            }
        }
        tpot.extend(m.tpot);
        latency.extend(m.latency);
    }
    let success_rate = completed as f64 / records.len() as f64;
    let tps = if window > 0.0 { tokens as f64 / window } else { 0.0 };
    Ok(AggregateMetrics {
        ttft_t1_mean: mean(&t1),
        ttft_t1_p99: percentile_nearest_rank(&t1, 99.0),
        ttft_t2_mean: mean(&t2),
        ttft_t2_p99: percentile_nearest_rank(&t2, 99.0),
        tpot_mean: mean(&tpot),
        latency_mean: mean(&latency),
        tps,
        success_rate,
        degraded: success_rate < DEGRADED_BELOW,
    })
}

/// Throughput window derivable from the records alone: the latest completion,
/// or the latest arrival when nothing completed.
pub fn observation_window(records: &[RequestRecord]) -> f64 {
    let last_completion = records
        .iter()
        .filter_map(|r| r.completion)
        .fold(f64::NEG_INFINITY, f64::max);
    if last_completion.is_finite() {
        return last_completion;
    }
    records.iter().map(|r| r.arrival).fold(0.0, f64::max)
}

/// [`aggregate`] over [`observation_window`].
pub fn aggregate_records(records: &[RequestRecord]) -> Result<AggregateMetrics> {
    aggregate(records, observation_window(records))
}

pub fn write_records<W: Write>(records: &[RequestRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(source: R) -> Result<Vec<RequestRecord>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let r: RequestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        r.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

pub const AGGREGATE_COLUMNS: [&str; 13] = [
    "config",
    "x_mode",
    "workload_id",
    "qps",
    "ttft_t1_mean",
    "ttft_t1_p99",
    "ttft_t2_mean",
    "ttft_t2_p99",
    "tpot_mean",
    "latency_mean",
    "tps",
    "success_rate",
    "degraded",
];

/// One aggregate export row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config: String,
    pub x_mode: String,
    pub workload_id: String,
    pub qps: f64,
    pub metrics: AggregateMetrics,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = AGGREGATE_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config,
            r.x_mode,
            r.workload_id,
            r.qps,
            opt(m.ttft_t1_mean),
            opt(m.ttft_t1_p99),
            opt(m.ttft_t2_mean),
            opt(m.ttft_t2_p99),
            opt(m.tpot_mean),
            opt(m.latency_mean),
            m.tps,
            m.success_rate,
            m.degraded
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub ttft_p99: f64,
    pub tps: f64,
    pub label: String,
}

/// `a` dominates `b`: no worse on both axes and strictly better on one.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.ttft_p99 <= b.ttft_p99 && a.tps >= b.tps && (a.ttft_p99 < b.ttft_p99 || a.tps > b.tps)
}

/// Non-dominated points, duplicates collapsed to their first occurrence,
/// stably ordered by ascending tps.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut front: Vec<ParetoPoint> = Vec::new();
    for p in points {
        if points.iter().any(|q| dominates(q, p)) {
            continue;
        }
        if front.iter().any(|f| f.ttft_p99 == p.ttft_p99 && f.tps == p.tps) {
            continue;
        }
        front.push(p.clone());
    }
    front.sort_by(|a, b| a.tps.total_cmp(&b.tps));
    front
}

/// Groups of configurations compared in the winner table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigCategory {
    Replica,
    PdX0,
    Fractional,
    PdX1,
    Hybrid,
}

impl ConfigCategory {
    /// Categories with their own winner-table row.
    pub const ROWS: [ConfigCategory; 4] = [
        ConfigCategory::Replica,
        ConfigCategory::PdX0,
        ConfigCategory::Fractional,
        ConfigCategory::PdX1,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ConfigCategory::Replica => "Replica",
            ConfigCategory::PdX0 => "x=0",
            ConfigCategory::Fractional => "0<x<1",
            ConfigCategory::PdX1 => "x=1",
            ConfigCategory::Hybrid => "Hybrid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MinTtftT2,
    MinTpot,
    MaxTps,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::MinTtftT2, Objective::MinTpot, Objective::MaxTps];

    /// Lower-is-better score, absent when the metric is.
    fn key(&self, m: &AggregateMetrics) -> Option<f64> {
        match self {
            Objective::MinTtftT2 => m.ttft_t2_mean,
            Objective::MinTpot => m.tpot_mean,
            Objective::MaxTps => Some(-m.tps),
        }
    }
}

/// One configuration's result within a (workload, qps) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub workload: String,
    pub qps: f64,
    pub config: String,
    pub category: ConfigCategory,
    pub metrics: AggregateMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinnerRow {
    pub category: ConfigCategory,
    /// Win percentages in [`Objective::ALL`] order.
    pub pct: [f64; 3],
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinnerTable {
    pub cells: usize,
    pub rows: Vec<WinnerRow>,
    /// Percent of cells won by hybrid configurations, per objective.
    pub hybrid_pct: [f64; 3],
    /// Percent of cells where every configuration was degraded or lacked the
    /// metric, per objective.
    pub no_winner_pct: [f64; 3],
    /// Fraction of cells whose TTFT and TPOT winners differ, among cells with
    /// both.
    pub ttft_tpot_disagreement: f64,
}

/// Winner of one objective within a cell. Degraded configs never win; ties go
/// to the lexicographically smallest config name.
fn cell_winner<'a>(cell: &[&'a CellResult], obj: Objective) -> Option<&'a CellResult> {
    cell.iter()
        .filter(|c| !c.metrics.degraded)
        .filter_map(|c| obj.key(&c.metrics).map(|k| (k, *c)))
        .min_by(|(ka, a), (kb, b)| ka.total_cmp(kb).then_with(|| a.config.cmp(&b.config)))
        .map(|(_, c)| c)
}

pub fn winner_distribution(results: &[CellResult]) -> Result<WinnerTable> {
    let mut cells: BTreeMap<(String, u64), Vec<&CellResult>> = BTreeMap::new();
    for r in results {
        cells.entry((r.workload.clone(), r.qps.to_bits())).or_default().push(r);
    }
    if cells.is_empty() {
        return Err(validation("winner table needs at least one cell"));
    }
    if let Some(((w, q), _)) = cells.iter().find(|(_, v)| v.len() < 2) {
        return Err(validation(format!(
            "cell ({w}, {}) has fewer than two configs",
            f64::from_bits(*q)
        )));
    }
    let n = cells.len();
    let mut wins: BTreeMap<ConfigCategory, [usize; 3]> = BTreeMap::new();
    let mut none = [0usize; 3];
    let mut both = 0usize;
    let mut disagree = 0usize;
    for cell in cells.values() {
        let winners: Vec<Option<&CellResult>> = Objective::ALL.iter().map(|o| cell_winner(cell, *o)).collect();
        for (i, w) in winners.iter().enumerate() {
            match w {
                Some(c) => wins.entry(c.category).or_default()[i] += 1,
                None => none[i] += 1,
            }
        }
        if let (Some(a), Some(b)) = (winners[0], winners[1]) {
            both += 1;
            if a.config != b.config {
                disagree += 1;
            }
        }
    }
    let pct = |counts: [usize; 3]| counts.map(|c| 100.0 * c as f64 / n as f64);
    let rows = ConfigCategory::ROWS
        .iter()
        .map(|cat| {
            let p = pct(wins.get(cat).copied().unwrap_or_default());
            WinnerRow {
                category: *cat,
                pct: p,
                avg: p.iter().sum::<f64>() / 3.0,
            }
        })
        .collect();
    Ok(WinnerTable {
        cells: n,
        rows,
        hybrid_pct: pct(wins.get(&ConfigCategory::Hybrid).copied().unwrap_or_default()),
        no_winner_pct: pct(none),
        ttft_tpot_disagreement: if both == 0 { 0.0 } else { disagree as f64 / both as f64 },
    })
}

impl WinnerTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,ttft_t2,tpot,tps,avg\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.1},{:.1},{:.1},{:.1}",
                r.category.label(),
                r.pct[0],
                r.pct[1],
                r.pct[2],
                r.avg
            );
        }
        for (label, p) in [("Hybrid", self.hybrid_pct), ("NoWinner", self.no_winner_pct)] {
            let _ = writeln!(
                s,
                "{label},{:.1},{:.1},{:.1},{:.1}",
                p[0],
                p[1],
                p[2],
                p.iter().sum::<f64>() / 3.0
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(turn: u32, arrival: f64, first: f64, done: f64, tokens: u32) -> RequestRecord {
        RequestRecord {
            conv_id: "c".into(),
            turn_index: turn,
            arrival,
            first_token: Some(first),
            completion: Some(done),
            output_tokens_emitted: tokens,
            route_taken: RouteTaken::PPath,
            status: RequestStatus::Completed,
        }
    }

    fn timed_out(turn: u32) -> RequestRecord {
        RequestRecord {
            first_token: None,
            completion: None,
            output_tokens_emitted: 0,
            status: RequestStatus::TimedOut,
            ..rec(turn, 0.0, 0.0, 0.0, 0)
        }
    }

    #[test]
    fn per_request_examples() {
        let m = per_request(&rec(1, 0.0, 0.1, 1.09, 100));
        assert!((m.ttft.unwrap() - 0.1).abs() < 1e-12);
        assert!((m.tpot.unwrap() - 0.01).abs() < 1e-12);
        assert!((m.latency.unwrap() - 1.09).abs() < 1e-12);
        assert!(m.success);

        let m = per_request(&timed_out(1));
        assert!(!m.success && m.ttft.is_none() && m.latency.is_none());

        assert!(per_request(&rec(1, 0.0, 0.1, 0.1, 1)).tpot.is_none());
    }

    #[test]
    fn nearest_rank_p99() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&v, 99.0), Some(99.0));
        assert_eq!(percentile_nearest_rank(&[3.0], 99.0), Some(3.0));
        assert_eq!(percentile_nearest_rank(&[], 99.0), None);
    }

    #[test]
    fn degraded_threshold() {
        let mk = |ok: usize| {
            let mut v: Vec<RequestRecord> = (0..ok).map(|_| rec(1, 0.0, 0.1, 1.0, 10)).collect();
            v.extend((ok..100).map(|_| timed_out(1)));
            aggregate(&v, 10.0).unwrap()
        };
        let a = mk(96);
        assert!((a.success_rate - 0.96).abs() < 1e-12 && !a.degraded);
        assert!(mk(94).degraded);
        assert!(!mk(95).degraded);
    }

    #[test]
    fn zero_completed_is_degraded_with_absent_aggregates() {
        let a = aggregate(&[timed_out(1), timed_out(2)], 10.0).unwrap();
        assert_eq!(a.success_rate, 0.0);
        assert!(a.degraded && a.ttft_t1_mean.is_none() && a.tpot_mean.is_none());
        assert_eq!(a.tps, 0.0);
        assert!(aggregate(&[], 1.0).is_err());
    }

    #[test]
    fn turn_split_and_tps() {
        let v = vec![rec(1, 0.0, 0.2, 1.0, 11), rec(2, 2.0, 2.05, 3.0, 21), timed_out(2)];
        let a = aggregate(&v, 4.0).unwrap();
        assert!((a.ttft_t1_mean.unwrap() - 0.2).abs() < 1e-12);
        assert!((a.ttft_t2_mean.unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(a.tps, 32.0 / 4.0);
        assert_eq!(observation_window(&v), 3.0);
    }

    #[test]
    fn records_round_trip_and_closure() {
        let v = vec![rec(1, 0.0, 0.2, 1.0, 11), rec(2, 2.0, 2.05, 3.3, 21), timed_out(2)];
        let mut buf = Vec::new();
        write_records(&v, &mut buf).unwrap();
        let back = read_records(&buf[..]).unwrap();
        assert_eq!(back, v);
        assert_eq!(aggregate_records(&back).unwrap(), aggregate_records(&v).unwrap());
    }

    #[test]
    fn malformed_completed_record_rejected() {
        let mut r = rec(1, 0.0, 0.2, 1.0, 11);
        r.first_token = None;
        let line = serde_json::to_string(&r).unwrap();
        assert!(matches!(
            read_records(line.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn csv_header_exact() {
        let csv = aggregate_csv(&[]);
        assert_eq!(
            csv.trim_end(),
            "config,x_mode,workload_id,qps,ttft_t1_mean,ttft_t1_p99,ttft_t2_mean,ttft_t2_p99,tpot_mean,latency_mean,tps,success_rate,degraded"
        );
    }

    fn pt(ttft: f64, tps: f64, label: &str) -> ParetoPoint {
        ParetoPoint {
            ttft_p99: ttft,
            tps,
            label: label.into(),
        }
    }

    #[test]
    fn frontier_examples() {
        let f = pareto_frontier(&[pt(0.010, 100.0, "a"), pt(0.020, 90.0, "b")]);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].label, "a");
        let f = pareto_frontier(&[pt(0.010, 100.0, "a"), pt(0.005, 80.0, "b")]);
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].label, "b");
        let f = pareto_frontier(&[pt(0.010, 100.0, "a"), pt(0.010, 100.0, "b")]);
        assert_eq!(f.len(), 1);
    }

    fn cell(workload: &str, config: &str, cat: ConfigCategory, t2: f64, tpot: f64, tps: f64) -> CellResult {
        CellResult {
            workload: workload.into(),
            qps: 1.0,
            config: config.into(),
            category: cat,
            metrics: AggregateMetrics {
                ttft_t1_mean: Some(0.1),
                ttft_t1_p99: Some(0.1),
                ttft_t2_mean: Some(t2),
                ttft_t2_p99: Some(t2),
                tpot_mean: Some(tpot),
                latency_mean: Some(1.0),
                tps,
                success_rate: 1.0,
                degraded: false,
            },
        }
    }

    #[test]
    fn single_cell_replica_wins_ttft() {
        let t = winner_distribution(&[
            cell("w", "4R", ConfigCategory::Replica, 0.01, 0.02, 10.0),
            cell("w", "1P_3D@x=0", ConfigCategory::PdX0, 0.05, 0.01, 20.0),
        ])
        .unwrap();
        assert_eq!(t.rows[0].pct, [100.0, 0.0, 0.0]);
        assert_eq!(t.rows[1].pct, [0.0, 100.0, 100.0]);
        assert_eq!(t.ttft_tpot_disagreement, 1.0);
    }

    #[test]
    fn three_cell_counting_fixture() {
        use ConfigCategory::*;
        let mut v = vec![
            // w1: replica wins TTFT, x=1 wins TPOT and TPS.
            cell("w1", "4R", Replica, 0.01, 0.03, 10.0),
            cell("w1", "2P_2D@x=1", PdX1, 0.02, 0.01, 30.0),
            // w2: x=1 wins everything.
            cell("w2", "4R", Replica, 0.05, 0.03, 10.0),
            cell("w2", "2P_2D@x=1", PdX1, 0.02, 0.01, 30.0),
            // w3: hybrid wins TTFT, x=0 wins TPOT, degraded x=1 ignored.
            cell("w3", "1R_1P_2D@x=0", Hybrid, 0.01, 0.05, 10.0),
            cell("w3", "1P_3D@x=0", PdX0, 0.02, 0.01, 30.0),
            cell("w3", "1P_3D@x=1", PdX1, 0.001, 0.001, 300.0),
        ];
        v[6].metrics.degraded = true;
        let t = winner_distribution(&v).unwrap();
        let third = 100.0 / 3.0;
        assert_eq!(t.cells, 3);
        assert_eq!(t.rows[0].pct, [third, 0.0, 0.0]);
        assert_eq!(t.rows[1].pct, [0.0, third, third]);
        assert_eq!(t.rows[3].pct, [third, 2.0 * third, 2.0 * third]);
        assert_eq!(t.hybrid_pct, [third, 0.0, 0.0]);
        assert!((t.ttft_tpot_disagreement - 2.0 / 3.0).abs() < 1e-12);
        for i in 0..3 {
            let total: f64 = t.rows.iter().map(|r| r.pct[i]).sum::<f64>() + t.hybrid_pct[i] + t.no_winner_pct[i];
            assert!((total - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_break_on_config_name() {
        let t = winner_distribution(&[
            cell("w", "b", ConfigCategory::PdX1, 0.01, 0.01, 10.0),
            cell("w", "a", ConfigCategory::PdX0, 0.01, 0.01, 10.0),
        ])
        .unwrap();
        assert_eq!(t.rows[1].pct, [100.0, 100.0, 100.0]);
    }

    #[test]
    fn all_degraded_cell_has_no_winner() {
        let mut v = vec![
            cell("w", "a", ConfigCategory::PdX1, 0.01, 0.01, 10.0),
            cell("w", "b", ConfigCategory::PdX0, 0.01, 0.01, 10.0),
        ];
        v.iter_mut().for_each(|c| c.metrics.degraded = true);
        let t = winner_distribution(&v).unwrap();
        assert_eq!(t.no_winner_pct, [100.0; 3]);
        assert!(winner_distribution(&v[..1]).is_err());
    }
}
