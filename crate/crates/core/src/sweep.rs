//! Experiment grids: the config x workload x QPS sweep, Phase-1 table
//! building, x=0 versus x=1 comparisons and the SLO-weight sweep.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costmodel::CostModel;
use crate::error::{validation, Error, Result};
use crate::metrics::{
    aggregate_records, per_request, AggregateMetrics, AggregateRow, CellResult, RequestStatus, RouteTaken,
    DEGRADED_BELOW,
};
use crate::routing::{
    build_decision_table, default_grid, DecisionTable, Discretizer, RoutingPolicy, SloWeights, TableHeader,
    DECISION_TABLE_VERSION, QPS_GRID,
};
use crate::simulator::{simulate, standard_configs, ClusterConfig, ClusterShape, ConfigLabel, XSetting};
use crate::workload::{catalog, catalog_workload, generate_conversations, Conversation, NamedWorkload, WorkloadSpec};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const DEFAULT_DURATION_S: f64 = 10.0;

/// A fully resolved experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    /// Config labels such as `2P_2D@x=1/2`.
    pub configs: Vec<String>,
    pub workloads: Vec<NamedWorkload>,
    pub qps_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub duration_s: f64,
}

/// On-disk plan. Workloads name catalog entries; `custom_workloads` adds
/// inline specs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    #[serde(default)]
    configs: Option<Vec<String>>,
    #[serde(default)]
    workloads: Option<Vec<String>>,
    #[serde(default)]
    custom_workloads: Vec<NamedWorkload>,
    #[serde(default)]
    qps_levels: Option<Vec<f64>>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    duration_s: Option<f64>,
}

impl Default for SweepPlan {
    /// 17 configs x 18 workloads x 10 QPS levels.
    fn default() -> Self {
        Self {
            configs: standard_configs().iter().map(ToString::to_string).collect(),
            workloads: catalog(),
            qps_levels: QPS_GRID.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            duration_s: DEFAULT_DURATION_S,
        }
    }
}

impl SweepPlan {
    /// Fields missing from the file take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: PlanFile = toml::from_str(text)?;
        let d = SweepPlan::default();
        let mut workloads = match f.workloads {
            Some(ids) => ids
                .iter()
                .map(|id| catalog_workload(id).ok_or_else(|| validation(format!("unknown catalog workload {id:?}"))))
                .collect::<Result<Vec<_>>>()?,
            None if f.custom_workloads.is_empty() => d.workloads,
            None => Vec::new(),
        };
        workloads.extend(f.custom_workloads);
        let plan = SweepPlan {
            configs: f.configs.unwrap_or(d.configs),
            workloads,
            qps_levels: f.qps_levels.unwrap_or(d.qps_levels),
            seeds: f.seeds.unwrap_or(d.seeds),
            duration_s: f.duration_s.unwrap_or(d.duration_s),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.configs.is_empty() || self.workloads.is_empty() || self.qps_levels.is_empty() || self.seeds.is_empty() {
            return Err(validation("plan needs configs, workloads, qps levels and seeds"));
        }
        for c in &self.configs {
            c.parse::<ConfigLabel>()?;
        }
        let mut ids = HashSet::new();
        for w in &self.workloads {
            if !ids.insert(&w.id) {
                return Err(validation(format!("duplicate workload id {:?}", w.id)));
            }
            w.spec.validate()?;
        }
        if self.qps_levels.iter().any(|q| !(q.is_finite() && *q > 0.0)) {
            return Err(validation("qps levels must be > 0"));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(validation("duration_s must be > 0"));
        }
        Ok(())
    }

    /// Cells in canonical order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for c in &self.configs {
            for w in &self.workloads {
                for &q in &self.qps_levels {
                    for &s in &self.seeds {
                        out.push(Cell {
                            config: c.clone(),
                            workload_id: w.id.clone(),
                            qps: q,
                            seed: s,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    fn workload(&self, id: &str) -> Option<&NamedWorkload> {
        self.workloads.iter().find(|w| w.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub config: String,
    pub workload_id: String,
    pub qps_bits: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub config: String,
    pub workload_id: String,
    pub qps: f64,
    pub seed: u64,
}

impl Cell {
    pub fn key(&self) -> CellKey {
        CellKey {
            config: self.config.clone(),
            workload_id: self.workload_id.clone(),
            qps_bits: self.qps.to_bits(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    #[serde(flatten)]
    pub cell: Cell,
    pub metrics: Option<AggregateMetrics>,
    pub error: Option<String>,
}

/// Provenance written next to every sweep output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub plan_hash: String,
    pub calibration_hash: String,
    pub table_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub command: Option<String>,
    pub plan: SweepPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultSet {
    pub manifest: SweepManifest,
    /// In [`SweepPlan::cells`] order.
    pub cells: Vec<CellOutcome>,
}

/// Shared inputs of every cell.
#[derive(Debug, Clone)]
pub struct SweepContext {
    pub cost: Arc<CostModel>,
    pub table: Option<Arc<DecisionTable>>,
    pub parallelism: usize,
    pub command: Option<String>,
}

impl SweepContext {
    pub fn new(cost: Arc<CostModel>) -> Self {
        Self {
            cost,
            table: None,
            parallelism: 0,
            command: None,
        }
    }
}

/// Simulates one cell and aggregates its records.
pub fn run_cell(
    label: &ConfigLabel,
    spec: &WorkloadSpec,
    qps: f64,
    seed: u64,
    cost: Arc<CostModel>,
    table: Option<Arc<DecisionTable>>,
) -> Result<AggregateMetrics> {
    let spec = spec.clone().with_qps(qps);
    let convs = generate_conversations(&spec, seed)?;
    if convs.is_empty() {
        return Err(validation("no conversations arrived in the window"));
    }
    let cfg = ClusterConfig::from_label(label, cost, table)?;
    aggregate_records(&simulate(&cfg, &convs, seed)?.records)
}

fn execute(plan: &SweepPlan, cell: &Cell, ctx: &SweepContext) -> CellOutcome {
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<AggregateMetrics> {
        let label: ConfigLabel = cell.config.parse()?;
        let w = plan
            .workload(&cell.workload_id)
            .ok_or_else(|| validation(format!("unknown workload {}", cell.workload_id)))?;
        let spec = w.spec.clone().with_duration(plan.duration_s);
        run_cell(&label, &spec, cell.qps, cell.seed, ctx.cost.clone(), ctx.table.clone())
    }));
    let (metrics, error) = match result {
        Ok(Ok(m)) => (Some(m), None),
        Ok(Err(e)) => (None, Some(e.to_string())),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "cell panicked".into());
            (None, Some(msg))
        }
    };
    CellOutcome {
        cell: cell.clone(),
        metrics,
        error,
    }
}

const MANIFEST_FILE: &str = "manifest.json";
const CELLS_FILE: &str = "cells.jsonl";
const RESULTS_FILE: &str = "results.csv";

fn manifest_for(plan: &SweepPlan, ctx: &SweepContext) -> SweepManifest {
    SweepManifest {
        plan_hash: plan.hash(),
        calibration_hash: ctx.cost.calibration_hash().to_string(),
        table_hash: ctx
            .table
            .as_ref()
            .map(|t| hex::encode(&Sha256::digest(t.to_json().as_bytes())[..8])),
        seeds: plan.seeds.clone(),
        command: ctx.command.clone(),
        plan: plan.clone(),
    }
}

/// Completed cells recorded in `dir`; unparseable trailing lines from an
/// interrupted write are dropped.
fn load_completed(dir: &Path, manifest: &SweepManifest) -> Result<Vec<CellOutcome>> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Ok(Vec::new());
    }
    let old: SweepManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
    if old.plan_hash != manifest.plan_hash
        || old.calibration_hash != manifest.calibration_hash
        || old.table_hash != manifest.table_hash
    {
        return Err(Error::Config(format!(
            "{} holds a different sweep (plan {}, calibration {})",
            dir.display(),
            old.plan_hash,
            old.calibration_hash
        )));
    }
    let cpath = dir.join(CELLS_FILE);
    if !cpath.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(cpath)?).lines() {
        let line = line?;
        if let Ok(o) = serde_json::from_str::<CellOutcome>(&line) {
            if o.metrics.is_some() {
                out.push(o);
            }
        }
    }
    Ok(out)
}

/// Runs every cell of `plan` not already completed in `out_dir`.
///
/// With an output directory, each finished cell is appended to
/// `cells.jsonl` as it completes, so an interrupted sweep resumes from there.
/// The final files are rewritten in canonical order.
pub fn run_sweep(plan: &SweepPlan, ctx: &SweepContext, out_dir: Option<&Path>) -> Result<ResultSet> {
    plan.validate()?;
    let manifest = manifest_for(plan, ctx);
    let mut done: Vec<CellOutcome> = Vec::new();
    let sink = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            done = load_completed(dir, &manifest)?;
            fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
            let mut f = BufWriter::new(File::create(dir.join(CELLS_FILE))?);
            f.write_all(with_manifest_comment(&manifest, "").as_bytes())?;
            for o in &done {
                serde_json::to_writer(&mut f, o)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
            let f = OpenOptions::new().append(true).open(dir.join(CELLS_FILE))?;
            Some(Mutex::new(BufWriter::new(f)))
        }
        None => None,
    };
    let have: HashSet<CellKey> = done.iter().map(|o| o.cell.key()).collect();
    let todo: Vec<Cell> = plan.cells().into_iter().filter(|c| !have.contains(&c.key())).collect();
    log::info!(
        "sweep {}: {} cells to run, {} resumed",
        manifest.plan_hash,
        todo.len(),
        have.len()
    );

    let work = || -> Vec<CellOutcome> {
        todo.par_iter()
            .map(|cell| {
                let o = execute(plan, cell, ctx);
                if let Some(sink) = &sink {
                    let mut w = sink.lock().unwrap_or_else(|e| e.into_inner());
                    let ok = serde_json::to_writer(&mut *w, &o).is_ok() && w.write_all(b"\n").is_ok();
                    if !ok || w.flush().is_err() {
                        log::warn!("could not record cell {:?}", o.cell);
                    }
                }
                o
            })
            .collect()
    };
    let fresh = if ctx.parallelism > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(ctx.parallelism)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work)
    } else {
        work()
    };
    drop(sink);

    let mut by_key: BTreeMap<usize, CellOutcome> = BTreeMap::new();
    let order: std::collections::HashMap<CellKey, usize> = plan
        .cells()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c.key(), i))
        .collect();
    for o in done.into_iter().chain(fresh) {
        by_key.insert(order[&o.cell.key()], o);
    }
    let results = ResultSet {
        manifest,
        cells: by_key.into_values().collect(),
    };
    if let Some(dir) = out_dir {
        results.write(dir)?;
    }
    Ok(results)
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Field-wise mean over seeds; `degraded` follows the mean success rate.
pub fn mean_metrics(runs: &[AggregateMetrics]) -> Option<AggregateMetrics> {
    if runs.is_empty() {
        return None;
    }
    let n = runs.len() as f64;
    let success_rate = runs.iter().map(|m| m.success_rate).sum::<f64>() / n;
    Some(AggregateMetrics {
        ttft_t1_mean: mean_opt(runs.iter().map(|m| m.ttft_t1_mean)),
        ttft_t1_p99: mean_opt(runs.iter().map(|m| m.ttft_t1_p99)),
        ttft_t2_mean: mean_opt(runs.iter().map(|m| m.ttft_t2_mean)),
        ttft_t2_p99: mean_opt(runs.iter().map(|m| m.ttft_t2_p99)),
        tpot_mean: mean_opt(runs.iter().map(|m| m.tpot_mean)),
        latency_mean: mean_opt(runs.iter().map(|m| m.latency_mean)),
        tps: runs.iter().map(|m| m.tps).sum::<f64>() / n,
        success_rate,
        degraded: success_rate < DEGRADED_BELOW,
    })
}

impl ResultSet {
    pub fn failed(&self) -> Vec<&CellOutcome> {
        self.cells.iter().filter(|o| o.metrics.is_none()).collect()
    }

    /// Mean-of-seeds rows in plan order.
    pub fn mean_rows(&self) -> Vec<AggregateRow> {
        let mut groups: Vec<((String, String, u64), Vec<AggregateMetrics>)> = Vec::new();
        for o in &self.cells {
            let k = (o.cell.config.clone(), o.cell.workload_id.clone(), o.cell.qps.to_bits());
            match groups.iter_mut().find(|(gk, _)| *gk == k) {
                Some((_, v)) => v.extend(o.metrics),
                None => groups.push((k, o.metrics.into_iter().collect())),
            }
        }
        groups
            .into_iter()
            .filter_map(|((config, workload_id, q), runs)| {
                let metrics = mean_metrics(&runs)?;
                let x_mode = config.parse::<ConfigLabel>().map(|l| l.x_mode()).unwrap_or_default();
                Some(AggregateRow {
                    config,
                    x_mode,
                    workload_id,
                    qps: f64::from_bits(q),
                    metrics,
                })
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&self.manifest)? + "\n",
        )?;
        let mut f = BufWriter::new(File::create(dir.join(CELLS_FILE))?);
        f.write_all(with_manifest_comment(&self.manifest, "").as_bytes())?;
        for o in &self.cells {
            serde_json::to_writer(&mut f, o)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        fs::write(
            dir.join(RESULTS_FILE),
            with_manifest_comment(&self.manifest, &crate::metrics::aggregate_csv(&self.mean_rows())),
        )?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: SweepManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let mut cells = Vec::new();
        for (i, line) in BufReader::new(File::open(dir.join(CELLS_FILE))?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            cells.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(ResultSet { manifest, cells })
    }
}

/// Prefixes delimited output with `#` lines naming its provenance.
pub fn with_manifest_comment(m: &SweepManifest, body: &str) -> String {
    let mut s = String::new();
    if let Some(cmd) = &m.command {
        let _ = writeln!(s, "# command: {cmd}");
    }
    let _ = writeln!(
        s,
        "# plan_hash: {} calibration_hash: {} seeds: {:?}",
        m.plan_hash, m.calibration_hash, m.seeds
    );
    s + body
}

/// Winner-table inputs from mean-of-seeds rows.
pub fn cell_results(rows: &[AggregateRow]) -> Result<Vec<CellResult>> {
    rows.iter()
        .map(|r| {
            let label: ConfigLabel = r.config.parse()?;
            Ok(CellResult {
                workload: r.workload_id.clone(),
                qps: r.qps,
                config: r.config.clone(),
                category: label.category(),
                metrics: r.metrics,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpsBand {
    Low,
    Med,
    High,
}

impl QpsBand {
    pub const ALL: [QpsBand; 3] = [QpsBand::Low, QpsBand::Med, QpsBand::High];

    /// Low is 0.5-2, med 4-8, high 12-20; other rates (including 10) belong
    /// to no band.
    pub fn of(qps: f64) -> Option<QpsBand> {
        if (0.5..=2.0).contains(&qps) {
            Some(QpsBand::Low)
        } else if (4.0..=8.0).contains(&qps) {
            Some(QpsBand::Med)
        } else if (12.0..=20.0).contains(&qps) {
            Some(QpsBand::High)
        } else {
            None
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            QpsBand::Low => "low",
            QpsBand::Med => "med",
            QpsBand::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TtftT2Mean,
    TtftT2P99,
    TtftT1Mean,
    TpotMean,
    Tps,
}

impl Metric {
    pub fn get(&self, m: &AggregateMetrics) -> Option<f64> {
        match self {
            Metric::TtftT2Mean => m.ttft_t2_mean,
            Metric::TtftT2P99 => m.ttft_t2_p99,
            Metric::TtftT1Mean => m.ttft_t1_mean,
            Metric::TpotMean => m.tpot_mean,
            Metric::Tps => Some(m.tps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImprovementRow {
    pub shape: String,
    pub band: QpsBand,
    /// Mean of `(to - from) / from` in percent; negative means `to` is lower.
    pub mean_pct: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImprovementTable {
    pub from_mode: String,
    pub to_mode: String,
    pub metric: Metric,
    pub rows: Vec<ImprovementRow>,
    /// Cells lacking a counterpart or the metric.
    pub excluded: usize,
}

impl ImprovementTable {
    pub fn get(&self, shape: &str, band: QpsBand) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.shape == shape && r.band == band)
            .map(|r| r.mean_pct)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("shape,low,med,high\n");
        let mut shapes: Vec<&str> = self.rows.iter().map(|r| r.shape.as_str()).collect();
        shapes.dedup();
        for shape in shapes {
            let cols: Vec<String> = QpsBand::ALL
                .iter()
                .map(|b| self.get(shape, *b).map(|v| format!("{v:.1}")).unwrap_or_default())
                .collect();
            let _ = writeln!(s, "{shape},{}", cols.join(","));
        }
        s
    }
}

/// Per shape and QPS band, the unweighted mean relative change of `metric`
/// when switching cells from `from_mode` to `to_mode` (e.g. `x=0`, `x=1`).
pub fn compare_modes(rows: &[AggregateRow], from_mode: &str, to_mode: &str, metric: Metric) -> ImprovementTable {
    let shape_of = |r: &AggregateRow| r.config.split('@').next().unwrap_or("").to_string();
    let mut acc: BTreeMap<(String, QpsBand), (f64, usize)> = BTreeMap::new();
    let mut shape_order: Vec<String> = Vec::new();
    let mut excluded = 0;
    for from in rows.iter().filter(|r| r.x_mode == from_mode) {
        let shape = shape_of(from);
        let to = rows.iter().find(|r| {
            r.x_mode == to_mode && shape_of(r) == shape && r.workload_id == from.workload_id && r.qps == from.qps
        });
        let (Some(to), Some(band)) = (to, QpsBand::of(from.qps)) else {
            excluded += 1;
            continue;
        };
        match (metric.get(&from.metrics), metric.get(&to.metrics)) {
            (Some(a), Some(b)) if a > 0.0 => {
                if !shape_order.contains(&shape) {
                    shape_order.push(shape.clone());
                }
                let e = acc.entry((shape, band)).or_default();
                e.0 += (b - a) / a;
                e.1 += 1;
            }
            _ => excluded += 1,
        }
    }
    let mut out = Vec::new();
    for shape in shape_order {
        for band in QpsBand::ALL {
            if let Some((sum, n)) = acc.get(&(shape.clone(), band)) {
                out.push(ImprovementRow {
                    shape: shape.clone(),
                    band,
                    mean_pct: 100.0 * sum / *n as f64,
                    cells: *n,
                });
            }
        }
    }
    ImprovementTable {
        from_mode: from_mode.into(),
        to_mode: to_mode.into(),
        metric,
        rows: out,
        excluded,
    }
}

/// Phase-1 measurement: Turn-2+ TTFT and TPOT of `spec` on `shape` at
/// static `x`, averaged over `seeds`.
///
/// Timed-out Turn-2+ requests count at the timeout, so a saturated mode is
/// not scored on its survivors alone.
pub fn phase1_measure(
    shape: ClusterShape,
    cost: &Arc<CostModel>,
    spec: &WorkloadSpec,
    x: f64,
    seeds: &[u64],
) -> Result<(f64, f64)> {
    let cfg = ClusterConfig::new(shape, RoutingPolicy::static_x(x)?, cost.clone());
    cfg.validate()?;
    let mut ttft = Vec::new();
    let mut tpot = Vec::new();
    for &seed in seeds {
        let convs = generate_conversations(spec, seed)?;
        let res = simulate(&cfg, &convs, seed)?;
        for r in res.records.iter().filter(|r| r.turn_index >= 2) {
            let m = per_request(r);
            match r.status {
                RequestStatus::Completed => ttft.extend(m.ttft),
                RequestStatus::TimedOut => ttft.push(cfg.request_timeout),
            }
            tpot.extend(m.tpot);
        }
    }
    if ttft.is_empty() || tpot.is_empty() {
        return Err(validation("no Turn-2+ requests were measured"));
    }
    Ok((
        ttft.iter().sum::<f64>() / ttft.len() as f64,
        tpot.iter().sum::<f64>() / tpot.len() as f64,
    ))
}

/// Options for [`build_table`].
#[derive(Debug, Clone)]
pub struct TableBuild {
    pub shape: ClusterShape,
    pub weights: SloWeights,
    pub discretizer: Discretizer,
    pub duration_s: f64,
    pub seeds: Vec<u64>,
    pub built_at: String,
    pub command: Option<String>,
}

impl TableBuild {
    pub fn new(shape: ClusterShape, weights: SloWeights) -> Self {
        Self {
            shape,
            weights,
            discretizer: Discretizer::default(),
            duration_s: DEFAULT_DURATION_S,
            seeds: vec![1],
            built_at: "unspecified".into(),
            command: None,
        }
    }
}

/// Runs Phase 1 over the default grid of `opts.discretizer`.
pub fn build_table(cost: &Arc<CostModel>, opts: &TableBuild) -> Result<DecisionTable> {
    opts.discretizer.validate()?;
    let grid = default_grid(&opts.discretizer, opts.duration_s);
    let header = TableHeader {
        version: DECISION_TABLE_VERSION,
        weights: opts.weights,
        calibration_hash: cost.calibration_hash().to_string(),
        built_at: opts.built_at.clone(),
        cluster: opts.shape.to_string(),
        discretizer: opts.discretizer.clone(),
        seeds: opts.seeds.clone(),
        command: opts.command.clone(),
    };
    build_decision_table(&grid, opts.weights, header, |spec, x| {
        phase1_measure(opts.shape, cost, spec, x, &opts.seeds)
    })
}

/// A three-turn mix of the catalog's prefill-heavy workloads, merged into one
/// arrival stream at `qps` conversations per second.
pub fn prefill_heavy_mix(qps: f64, duration_s: f64, seed: u64) -> Result<Vec<Conversation>> {
    let parts: Vec<NamedWorkload> = catalog()
        .into_iter()
        .filter(|w| w.id.starts_with("prefill_heavy"))
        .collect();
    let share = qps / parts.len() as f64;
    let mut all = Vec::new();
    for (i, w) in parts.iter().enumerate() {
        let mut spec = w.spec.clone().with_qps(share).with_duration(duration_s);
        spec.num_turns = 3;
        spec.jitter_pct = 20.0;
        for mut c in generate_conversations(&spec, seed.wrapping_mul(31).wrapping_add(i as u64))? {
            let id = format!("{}-{}", w.id, c.conv_id);
            c.first_message_digest = crate::workload::ConvDigest::of(&id);
            for t in &mut c.turns {
                t.conv_id = id.clone();
            }
            c.conv_id = id;
            all.push(c);
        }
    }
    all.sort_by(|a, b| {
        a.first_arrival()
            .unwrap_or(0.0)
            .total_cmp(&b.first_arrival().unwrap_or(0.0))
            .then_with(|| a.conv_id.cmp(&b.conv_id))
    });
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSweepRow {
    pub w_ttft: f64,
    pub w_tpot: f64,
    /// Relative change of mean Turn-2+ TTFT versus x=0, in percent.
    pub ttft_change_pct: f64,
    /// Relative change of mean TPOT versus x=0, in percent.
    pub tpot_change_pct: f64,
    /// Fraction of Turn-2+ requests prefilled on their decode node.
    pub d_local_ratio: f64,
}

/// Evaluation settings for [`weight_sweep`].
#[derive(Debug, Clone)]
pub struct WeightSweepPlan {
    pub shape: ClusterShape,
    pub qps_levels: Vec<f64>,
    pub duration_s: f64,
    pub seeds: Vec<u64>,
}

impl Default for WeightSweepPlan {
    fn default() -> Self {
        Self {
            shape: "2P_2D".parse().expect("valid shape"),
            qps_levels: vec![8.0, 16.0],
            duration_s: DEFAULT_DURATION_S,
            seeds: vec![1],
        }
    }
}

/// For each weight setting, re-scores `measured` (a Phase-1 table), routes
/// the prefill-heavy mix dynamically and compares it with x=0 on the same
/// conversations.
pub fn weight_sweep(
    cost: &Arc<CostModel>,
    measured: &DecisionTable,
    weights: &[SloWeights],
    plan: &WeightSweepPlan,
) -> Result<Vec<WeightSweepRow>> {
    let mut runs: Vec<(f64, Vec<Conversation>, u64)> = Vec::new();
    for &q in &plan.qps_levels {
        for &s in &plan.seeds {
            runs.push((q, prefill_heavy_mix(q, plan.duration_s, s)?, s));
        }
    }
    let t2 = |recs: &[crate::metrics::RequestRecord]| -> Vec<f64> {
        recs.iter()
            .filter(|r| r.turn_index >= 2)
            .filter_map(|r| per_request(r).ttft)
            .collect()
    };
    let baseline_cfg = ClusterConfig::new(plan.shape, RoutingPolicy::static_x(0.0)?, cost.clone());
    let mut base_ttft = Vec::new();
    let mut base_tpot = Vec::new();
    for (_, convs, seed) in &runs {
        let r = simulate(&baseline_cfg, convs, *seed)?;
        base_ttft.extend(t2(&r.records));
        base_tpot.extend(r.records.iter().filter_map(|r| per_request(r).tpot));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (b_ttft, b_tpot) = (mean(&base_ttft), mean(&base_tpot));
    weights
        .iter()
        .map(|&w| {
            let table = Arc::new(measured.reweighted(w));
            let cfg = ClusterConfig::new(plan.shape, RoutingPolicy::dynamic(table), cost.clone());
            let mut ttft = Vec::new();
            let mut tpot = Vec::new();
            let (mut local, mut later) = (0usize, 0usize);
            for (_, convs, seed) in &runs {
                let r = simulate(&cfg, convs, *seed)?;
                ttft.extend(t2(&r.records));
                tpot.extend(r.records.iter().filter_map(|r| per_request(r).tpot));
                for rec in r.records.iter().filter(|r| r.turn_index >= 2) {
                    later += 1;
                    local += usize::from(rec.route_taken == RouteTaken::DLocal);
                }
            }
            Ok(WeightSweepRow {
                w_ttft: w.w_ttft,
                w_tpot: w.w_tpot,
                ttft_change_pct: 100.0 * (mean(&ttft) - b_ttft) / b_ttft,
                tpot_change_pct: 100.0 * (mean(&tpot) - b_tpot) / b_tpot,
                d_local_ratio: local as f64 / later.max(1) as f64,
            })
        })
        .collect()
}

pub fn weight_sweep_csv(rows: &[WeightSweepRow]) -> String {
    let mut s = String::from("w_ttft,w_tpot,ttft_change_pct,tpot_change_pct,d_local_ratio\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.2},{:.2},{:.3}",
            r.w_ttft, r.w_tpot, r.ttft_change_pct, r.tpot_change_pct, r.d_local_ratio
        );
    }
    s
}

/// True when the label routes with a decision table.
pub fn needs_table(label: &ConfigLabel) -> bool {
    matches!(label.x, XSetting::Dynamic)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(config: &str, q: f64, t2: f64) -> AggregateRow {
        let label: ConfigLabel = config.parse().unwrap();
        AggregateRow {
            config: config.into(),
            x_mode: label.x_mode(),
            workload_id: "w".into(),
            qps: q,
            metrics: AggregateMetrics {
                ttft_t1_mean: Some(1.0),
                ttft_t1_p99: Some(1.0),
                ttft_t2_mean: Some(t2),
                ttft_t2_p99: Some(t2),
                tpot_mean: Some(0.01),
                latency_mean: Some(1.0),
                tps: 10.0,
                success_rate: 1.0,
                degraded: false,
            },
        }
    }

    #[test]
    fn default_plan_cell_count() {
        let plan = SweepPlan {
            seeds: vec![1],
            ..SweepPlan::default()
        };
        assert_eq!(plan.cells().len(), 3060);
    }

    #[test]
    fn restricted_plan_cell_count() {
        let plan = SweepPlan::from_toml(
            r#"configs = ["4R", "1P_3D@x=0", "1P_3D@x=1"]
               workloads = ["balanced_small"]
               qps_levels = [1.0, 2.0]
               seeds = [7]"#,
        )
        .unwrap();
        assert_eq!(plan.cells().len(), 6);
        assert!(SweepPlan::from_toml("bogus = 1").is_err());
        assert!(SweepPlan::from_toml(r#"workloads = ["nope"]"#).is_err());
    }

    #[test]
    fn halving_is_minus_fifty_everywhere() {
        let mut rows = Vec::new();
        for q in [0.5, 1.0, 4.0, 6.0, 10.0, 16.0] {
            rows.push(row("1P_3D@x=0", q, 2.0));
            rows.push(row("1P_3D@x=1", q, 1.0));
        }
        rows.push(row("3P_1D@x=0", 1.0, 2.0));
        let t = compare_modes(&rows, "x=0", "x=1", Metric::TtftT2Mean);
        for b in QpsBand::ALL {
            assert_eq!(t.get("1P_3D", b), Some(-50.0));
        }
        // qps 10 is outside every band; 3P_1D has no x=1 counterpart.
        assert_eq!(t.excluded, 2);
    }

    #[test]
    fn bands() {
        assert_eq!(QpsBand::of(6.0), Some(QpsBand::Med));
        assert_eq!(QpsBand::of(0.5), Some(QpsBand::Low));
        assert_eq!(QpsBand::of(20.0), Some(QpsBand::High));
        assert_eq!(QpsBand::of(10.0), None);
    }

    #[test]
    fn mean_of_seeds_recomputes_degraded() {
        let mut a = row("4R", 1.0, 1.0).metrics;
        let mut b = a;
        a.success_rate = 1.0;
        b.success_rate = 0.88;
        b.degraded = true;
        let m = mean_metrics(&[a, b]).unwrap();
        assert!((m.success_rate - 0.94).abs() < 1e-12 && m.degraded);
    }
}
