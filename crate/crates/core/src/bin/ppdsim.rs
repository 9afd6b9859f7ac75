use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use ppdsim::costmodel::{CalibrationTable, CostModel};
use ppdsim::gateway::{spawn_server, Gateway, SystemClock, HEARTBEAT_INTERVAL_S};
use ppdsim::metrics::{
    aggregate_records, pareto_frontier, winner_distribution, write_records, AggregateMetrics, ParetoPoint,
};
use ppdsim::routing::{DecisionTable, RoutingPolicy, SloWeights, SESSION_TTL_S};
use ppdsim::simulator::{
    build_cluster, run_simulation, ClusterConfig, ClusterShape, ConfigLabel, RunManifest, XSetting,
};
use ppdsim::sweep::{
    build_table, cell_results, compare_modes, needs_table, run_sweep, weight_sweep, weight_sweep_csv,
    with_manifest_comment, Metric, ResultSet, SweepContext, SweepPlan, TableBuild, WeightSweepPlan, DEFAULT_DURATION_S,
};
use ppdsim::workload::{
    catalog_workload, generate_conversations, ingest_trace, replay_at_qps, write_trace, TraceFilter, WorkloadSpec,
};
use ppdsim::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_PARTIAL: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ppdsim",
    version,
    about = "Disaggregated multi-turn serving simulator and router"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Calibration table (TOML); the built-in table when omitted.
    #[arg(long, global = true, env = "PPDSIM_CALIBRATION")]
    calibration: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one cluster configuration on one workload.
    Simulate(SimulateArgs),
    /// Run Phase 1 and write a decision table.
    BuildTable(BuildTableArgs),
    /// Run a sweep plan into a result directory.
    Sweep(SweepArgs),
    /// Derive winner, Pareto and mode-comparison tables from sweep results.
    Analyze(AnalyzeArgs),
    /// Re-score a decision table under several SLO weights and evaluate each.
    WeightSweep(WeightSweepArgs),
    /// Run the routing gateway.
    Serve(ServeArgs),
    /// Normalize a conversation trace.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Cluster shape such as 1P_3D or 4R, or a full label such as 1P_3D@x=1/2.
    #[arg(long)]
    config: String,
    /// Fraction of Turn-2+ requests prefilled locally, or "dyn".
    #[arg(long)]
    x: Option<String>,
    /// Decision table for dynamic routing.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Catalog workload id.
    #[arg(long, conflicts_with_all = ["workload_file", "trace"])]
    workload: Option<String>,
    /// Workload spec (TOML).
    #[arg(long, conflicts_with = "trace")]
    workload_file: Option<PathBuf>,
    /// Normalized trace to replay.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    qps: Option<f64>,
    #[arg(long = "duration-s", alias = "duration", default_value_t = DEFAULT_DURATION_S)]
    duration_s: f64,
    #[arg(long, default_value = "sim_out", env = "PPDSIM_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct BuildTableArgs {
    #[arg(long, default_value = "1,1")]
    weights: SloWeights,
    /// Only "default" is defined.
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long, default_value = "1P_3D")]
    shape: ClusterShape,
    #[arg(long = "duration-s", default_value_t = DEFAULT_DURATION_S)]
    duration_s: f64,
    #[arg(long, default_value = "decision_table.json", env = "PPDSIM_TABLE")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    parallelism: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// Plan file (TOML); the full default grid when omitted.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, env = "PPDSIM_OUT")]
    out: PathBuf,
    /// Continue a partial sweep instead of starting over.
    #[arg(long)]
    resume: bool,
    /// Decision table for dynamic configurations.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    parallelism: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Sweep result directory.
    results: PathBuf,
    #[arg(long)]
    winners: bool,
    #[arg(long)]
    pareto: bool,
    /// Compare two x modes, e.g. "0,1".
    #[arg(long)]
    compare: Option<String>,
    /// ttft_t2_mean, ttft_t2_p99, ttft_t1_mean, tpot_mean or tps.
    #[arg(long, default_value = "ttft_t2_mean")]
    metric: String,
    /// Output directory; the result directory when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WeightSweepArgs {
    /// Phase-1 table to re-score; built on --shape when omitted.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value = "1P_3D")]
    shape: ClusterShape,
    /// Semicolon-separated weight pairs.
    #[arg(long, default_value = "1,1;1,3;1,6")]
    weights: String,
    #[arg(long, value_delimiter = ',', default_value = "8,16")]
    qps: Vec<f64>,
    #[arg(long = "duration-s", default_value_t = DEFAULT_DURATION_S)]
    duration_s: f64,
    #[arg(long, default_value = "weight_sweep.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7600")]
    bind: String,
    /// Decision table for dynamic routing; static --x when omitted.
    #[arg(long, env = "PPDSIM_TABLE")]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    x: f64,
    #[arg(long = "ttl-s", default_value_t = SESSION_TTL_S)]
    ttl_s: f64,
    #[arg(long = "prune-interval-s", default_value_t = HEARTBEAT_INTERVAL_S)]
    prune_interval_s: f64,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 2)]
    min_turns: usize,
    #[arg(long)]
    prefill_heavy_only: bool,
    /// Keep a uniform sample of this many conversations.
    #[arg(long)]
    sample: Option<usize>,
}

enum Failure {
    Lib(Error),
    Exit(u8, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Lib(Error::Validation(msg.into()))
}

struct Ctx {
    seed: Option<u64>,
    cost: Arc<CostModel>,
    command: String,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }
}

fn command_line() -> String {
    let mut parts = vec!["ppdsim".to_string()];
    parts.extend(std::env::args().skip(1).map(|a| {
        if a.is_empty() || a.contains(char::is_whitespace) || a.contains(';') {
            format!("'{a}'")
        } else {
            a
        }
    }));
    parts.join(" ")
}

fn load_cost(path: Option<&Path>) -> Result<Arc<CostModel>, Failure> {
    let calib = match path {
        Some(p) => CalibrationTable::from_toml(&fs::read_to_string(p)?)?,
        None => CalibrationTable::default(),
    };
    Ok(Arc::new(CostModel::new(calib)?))
}

fn load_table(path: &Path, cost: &CostModel) -> Result<Arc<DecisionTable>, Failure> {
    let table = DecisionTable::from_json(&fs::read_to_string(path)?)?;
    if table.header.calibration_hash != cost.calibration_hash() {
        log::warn!(
            "table {} was built with calibration {}, running with {}",
            path.display(),
            table.header.calibration_hash,
            cost.calibration_hash()
        );
    }
    Ok(Arc::new(table))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct SimulateArtifact<'a> {
    command: &'a str,
    #[serde(flatten)]
    manifest: &'a RunManifest,
    workload: String,
    records_sha256: String,
    metrics: AggregateMetrics,
    clamped_lookups: u64,
    makespan: f64,
}

fn cmd_simulate(ctx: &Ctx, a: SimulateArgs) -> Outcome {
    let seed = ctx.seed();
    let mut label: ConfigLabel = match (&a.x, a.config.contains('@')) {
        (Some(_), true) => return Err(invalid("--x conflicts with an x given in --config")),
        (Some(x), false) => format!("{}@x={x}", a.config).replace("x=dyn", "dyn").parse()?,
        (None, _) => a.config.parse()?,
    };
    if a.x.is_none() && !a.config.contains('@') {
        label = ConfigLabel::new(label.shape, XSetting::Static(0.0));
    }
    let table = match (&a.table, needs_table(&label)) {
        (Some(p), _) => Some(load_table(p, &ctx.cost)?),
        (None, true) => return Err(invalid("dynamic routing needs --table")),
        (None, false) => None,
    };
    let cfg = ClusterConfig::from_label(&label, ctx.cost.clone(), table)?;

    let (convs, workload, replay) = if let Some(path) = &a.trace {
        let mut convs = ingest_trace(
            BufReader::new(fs::File::open(path)?),
            &TraceFilter {
                min_turns: 1,
                ..TraceFilter::default()
            },
        )?;
        if let Some(q) = a.qps {
            replay_at_qps(&mut convs, q, seed)?;
        }
        (convs, format!("trace:{}", path.display()), a.qps)
    } else {
        let (id, spec) = match (&a.workload, &a.workload_file) {
            (Some(id), _) => {
                let w = catalog_workload(id).ok_or_else(|| invalid(format!("unknown workload {id:?}")))?;
                (w.id, w.spec)
            }
            (None, Some(p)) => (
                p.display().to_string(),
                WorkloadSpec::from_toml(&fs::read_to_string(p)?)?,
            ),
            (None, None) => return Err(invalid("one of --workload, --workload-file, --trace is required")),
        };
        let mut spec = spec.with_duration(a.duration_s);
        if let Some(q) = a.qps {
            spec = spec.with_qps(q);
        }
        (generate_conversations(&spec, seed)?, id, None)
    };

    let result = run_simulation(build_cluster(&cfg)?, &convs, replay, seed)?;
    fs::create_dir_all(&a.out)?;
    let mut records = format!(
        "# command: {}\n# seed: {seed} calibration_hash: {}\n",
        ctx.command,
        ctx.cost.calibration_hash()
    )
    .into_bytes();
    write_records(&result.records, &mut records)?;
    fs::write(a.out.join("records.jsonl"), &records)?;
    let digest = sha256_hex(&records);
    let artifact = SimulateArtifact {
        command: &ctx.command,
        manifest: &result.manifest,
        workload,
        records_sha256: digest.clone(),
        metrics: aggregate_records(&result.records)?,
        clamped_lookups: result.clamped_lookups,
        makespan: result.makespan,
    };
    fs::write(
        a.out.join("aggregate.json"),
        serde_json::to_string_pretty(&artifact).map_err(Error::from)? + "\n",
    )?;
    println!(
        "records: {} ({} requests) sha256 {digest}",
        a.out.join("records.jsonl").display(),
        result.records.len()
    );
    Ok(())
}

fn cmd_build_table(ctx: &Ctx, a: BuildTableArgs) -> Outcome {
    if a.grid != "default" {
        return Err(invalid(format!(
            "unknown grid {:?}; only \"default\" is defined",
            a.grid
        )));
    }
    let mut opts = TableBuild::new(a.shape, a.weights);
    opts.duration_s = a.duration_s;
    opts.seeds = vec![ctx.seed()];
    opts.command = Some(ctx.command.clone());
    let build = || build_table(&ctx.cost, &opts);
    let table = if a.parallelism > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(a.parallelism)
            .build()
            .map_err(|e| Failure::Lib(Error::Config(e.to_string())))?
            .install(build)?
    } else {
        build()?
    };
    let unavailable = table.entries().filter(|(_, e)| !e.available).count();
    let local = table.entries().filter(|(_, e)| e.x_star == 1).count();
    fs::write(&a.out, table.to_json())?;
    println!(
        "table: {} ({} entries, {} prefer x=1, {} unavailable)",
        a.out.display(),
        table.len(),
        local,
        unavailable
    );
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, a: SweepArgs) -> Outcome {
    let mut plan = match &a.plan {
        Some(p) => SweepPlan::from_toml(&fs::read_to_string(p)?)?,
        None => SweepPlan::default(),
    };
    if let Some(s) = ctx.seed {
        plan.seeds = vec![s];
    }
    plan.validate()?;
    let dynamic = plan
        .configs
        .iter()
        .map(|c| c.parse::<ConfigLabel>())
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .any(needs_table);
    let table = match (&a.table, dynamic) {
        (Some(p), _) => Some(load_table(p, &ctx.cost)?),
        (None, true) => return Err(invalid("plan has dynamic configurations; pass --table")),
        (None, false) => None,
    };
    if !a.resume && a.out.exists() {
        for f in ["manifest.json", "cells.jsonl", "results.csv"] {
            let p = a.out.join(f);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
    }
    let sctx = SweepContext {
        cost: ctx.cost.clone(),
        table,
        parallelism: a.parallelism,
        command: Some(ctx.command.clone()),
    };
    let rs = run_sweep(&plan, &sctx, Some(&a.out))?;
    let failed = rs.failed().len();
    let ok: Vec<_> = rs.cells.iter().filter_map(|c| c.metrics.as_ref()).collect();
    println!(
        "sweep: {} cells, {} failed, results in {}",
        rs.cells.len(),
        failed,
        a.out.display()
    );
    if failed > 0 {
        for c in rs.failed() {
            eprintln!(
                "failed: {} {} qps={} seed={}: {}",
                c.cell.config,
                c.cell.workload_id,
                c.cell.qps,
                c.cell.seed,
                c.error.as_deref().unwrap_or("")
            );
        }
        return Err(Failure::Exit(EXIT_PARTIAL, format!("{failed} cells failed")));
    }
    if !ok.is_empty() && ok.iter().all(|m| m.degraded) {
        return Err(Failure::Exit(EXIT_DEGENERATE, "every cell is degraded".into()));
    }
    Ok(())
}

fn cmd_analyze(_ctx: &Ctx, a: AnalyzeArgs) -> Outcome {
    let rs = ResultSet::read(&a.results)?;
    let rows = rs.mean_rows();
    let out = a.out.clone().unwrap_or_else(|| a.results.clone());
    fs::create_dir_all(&out)?;
    let all = !a.winners && !a.pareto && a.compare.is_none();

    if a.winners || all {
        let table = winner_distribution(&cell_results(&rows)?)?;
        let csv = table.to_csv();
        fs::write(out.join("winners.csv"), with_manifest_comment(&rs.manifest, &csv))?;
        print!("{csv}");
        println!(
            "ttft/tpot winner disagreement: {:.1}%",
            100.0 * table.ttft_tpot_disagreement
        );
    }
    if a.pareto || all {
        let mut csv = String::from("workload_id,qps,config,ttft_p99,tps\n");
        let mut groups: std::collections::BTreeMap<(String, u64), Vec<ParetoPoint>> = Default::default();
        for r in &rows {
            if let (Some(t), false) = (r.metrics.ttft_t2_p99.or(r.metrics.ttft_t1_p99), r.metrics.degraded) {
                groups
                    .entry((r.workload_id.clone(), r.qps.to_bits()))
                    .or_default()
                    .push(ParetoPoint {
                        ttft_p99: t,
                        tps: r.metrics.tps,
                        label: r.config.clone(),
                    });
            }
        }
        for ((w, q), pts) in &groups {
            for p in pareto_frontier(pts) {
                csv.push_str(&format!(
                    "{w},{},{},{},{}\n",
                    f64::from_bits(*q),
                    p.label,
                    p.ttft_p99,
                    p.tps
                ));
            }
        }
        fs::write(out.join("pareto.csv"), with_manifest_comment(&rs.manifest, &csv))?;
        println!("pareto frontiers: {} groups", groups.len());
    }
    let compare = a.compare.clone().or_else(|| all.then(|| "0,1".to_string()));
    if let Some(spec) = compare {
        let (from, to) = spec
            .split_once(',')
            .ok_or_else(|| invalid(format!("--compare expects two modes, got {spec:?}")))?;
        let metric: Metric = serde_json::from_value(serde_json::Value::String(a.metric.clone()))
            .map_err(|_| invalid(format!("unknown metric {:?}", a.metric)))?;
        let mode = |m: &str| {
            let m = m.trim();
            if m == "dyn" || m.starts_with("x=") {
                m.to_string()
            } else {
                format!("x={m}")
            }
        };
        let table = compare_modes(&rows, &mode(from), &mode(to), metric);
        let csv = table.to_csv();
        fs::write(out.join("improvement.csv"), with_manifest_comment(&rs.manifest, &csv))?;
        print!("{csv}");
    }
    Ok(())
}

fn parse_weights(s: &str) -> Result<Vec<SloWeights>, Failure> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<SloWeights>().map_err(Failure::Lib))
        .collect()
}

fn cmd_weight_sweep(ctx: &Ctx, a: WeightSweepArgs) -> Outcome {
    let weights = parse_weights(&a.weights)?;
    if weights.is_empty() {
        return Err(invalid("--weights is empty"));
    }
    let table = match &a.table {
        Some(p) => load_table(p, &ctx.cost)?,
        None => {
            let mut opts = TableBuild::new(a.shape, SloWeights::BALANCED);
            opts.seeds = vec![ctx.seed()];
            Arc::new(build_table(&ctx.cost, &opts)?)
        }
    };
    let plan = WeightSweepPlan {
        shape: a.shape,
        qps_levels: a.qps,
        duration_s: a.duration_s,
        seeds: vec![ctx.seed()],
    };
    let rows = weight_sweep(&ctx.cost, &table, &weights, &plan)?;
    let csv = weight_sweep_csv(&rows);
    let header = format!(
        "# command: {}\n# seed: {} calibration_hash: {}\n",
        ctx.command,
        ctx.seed(),
        ctx.cost.calibration_hash()
    );
    fs::write(&a.out, header + &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_serve(ctx: &Ctx, a: ServeArgs) -> Outcome {
    let policy = match &a.table {
        Some(p) => RoutingPolicy::dynamic(load_table(p, &ctx.cost)?),
        None => RoutingPolicy::static_x(a.x)?,
    };
    let gateway = Arc::new(Gateway::with_ttl(policy, SystemClock::new(), a.ttl_s));
    let server = spawn_server(gateway, &a.bind, a.prune_interval_s)?;
    println!("gateway listening on {}", server.local_addr());
    server.wait();
    Ok(())
}

fn cmd_ingest(ctx: &Ctx, a: IngestArgs) -> Outcome {
    let filter = TraceFilter {
        min_turns: a.min_turns,
        prefill_heavy_only: a.prefill_heavy_only,
        sample: a.sample.map(|n| (n, ctx.seed())),
    };
    let convs = ingest_trace(BufReader::new(fs::File::open(&a.input)?), &filter)?;
    let mut w = BufWriter::new(fs::File::create(&a.output)?);
    writeln!(w, "# command: {}", ctx.command)?;
    writeln!(
        w,
        "# seed: {} calibration_hash: {}",
        ctx.seed(),
        ctx.cost.calibration_hash()
    )?;
    write_trace(&convs, &mut w)?;
    w.flush()?;
    println!("ingested {} conversations into {}", convs.len(), a.output.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let ctx = Ctx {
        seed: cli.common.seed,
        cost: load_cost(cli.common.calibration.as_deref())?,
        command: command_line(),
    };
    match cli.cmd {
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::BuildTable(a) => cmd_build_table(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Analyze(a) => cmd_analyze(&ctx, a),
        Command::WeightSweep(a) => cmd_weight_sweep(&ctx, a),
        Command::Serve(a) => cmd_serve(&ctx, a),
        Command::Ingest(a) => cmd_ingest(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Exit(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Json(_) => ExitCode::FAILURE,
                _ => ExitCode::from(EXIT_VALIDATION),
            }
        }
    }
}
