use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use swarmsync::batch::{run_batch, sweep_interarrival, BatchOptions, BatchSummary};
use swarmsync::burst::{predict_bounds, BurstScenario, DEFAULT_PERCENTILE};
use swarmsync::metrics::{self, SyncRule, PIECE_COUNT_TOLERANCE, SYNC_THRESHOLD};
use swarmsync::rate_model::{compute_interest_bounds, compute_rates, SwarmState};
use swarmsync::sim::{EventTrace, ScenarioConfig};
use swarmsync::validation::{random_protocols, validate, Protocol, ValidationReport, DEFAULT_TOLERANCE};

const EXIT_VALIDATION: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "swarmsync", version, about = "Rate model, burst bounds and swarm simulation for small BitTorrent swarms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Steady-state rate allocation for one swarm state.
    Rates(RatesArgs),
    /// Bounds on the number of leechers departing with a busy-period opener.
    BurstBounds(BurstArgs),
    /// Run a scenario config, with replications or an inter-arrival sweep.
    Simulate(SimulateArgs),
    /// Compare simulated download rates with the model.
    Validate(ValidateArgs),
    /// Recompute trace metrics from existing trace CSVs.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct RatesArgs {
    /// Seed upload capacity, kB/s.
    #[arg(long)]
    cs: Option<f64>,
    /// Leecher upload capacities, kB/s; a single value applies to everyone.
    #[arg(long, value_delimiter = ',')]
    cl: Vec<f64>,
    /// Piece counts per leecher.
    #[arg(long, value_delimiter = ',')]
    b: Vec<u64>,
    /// Evaluate with the seed disconnected.
    #[arg(long)]
    no_seed: bool,
    /// Read the state from a JSON file instead of flags.
    #[arg(long, conflicts_with_all = ["cs", "cl", "b"])]
    state: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BurstArgs {
    /// Leecher arrival rate, per second.
    #[arg(long, conflicts_with = "interarrival", required_unless_present = "interarrival")]
    lambda: Option<f64>,
    /// Mean inter-arrival time, seconds.
    #[arg(long)]
    interarrival: Option<f64>,
    #[arg(long)]
    cs: f64,
    #[arg(long)]
    cl: f64,
    /// Content size, kB.
    #[arg(long, default_value_t = 256_000.0)]
    size: f64,
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    percentile: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SyncArg {
    ForAll,
    Exists,
    PieceCount,
}

impl SyncArg {
    fn rule(self, threshold: Option<u32>) -> SyncRule {
        match self {
            SyncArg::ForAll => SyncRule::ForAll {
                threshold: threshold.unwrap_or(SYNC_THRESHOLD),
            },
            SyncArg::Exists => SyncRule::Exists {
                threshold: threshold.unwrap_or(SYNC_THRESHOLD),
            },
            SyncArg::PieceCount => SyncRule::PieceCount {
                tolerance: threshold.unwrap_or(PIECE_COUNT_TOLERANCE),
            },
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config (JSON).
    config: PathBuf,
    #[arg(long, default_value_t = 1)]
    replications: u32,
    /// Base RNG seed; replication r uses seed + r. Defaults to the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Mean inter-arrival times to sweep over (Poisson arrivals), seconds.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<f64>,
    #[arg(long, value_enum, default_value = "for-all")]
    sync: SyncArg,
    /// Threshold for the synchronization rule (pieces).
    #[arg(long)]
    sync_threshold: Option<u32>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Reference,
    Random,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, value_enum, default_value = "reference")]
    protocol: ProtocolArg,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Number of random states.
    #[arg(long, default_value_t = 20)]
    states: usize,
    #[arg(long, default_value_t = 6)]
    max_leechers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Piece size, kB; the content size stays at 256000 kB.
    #[arg(long)]
    piece_size: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Trace CSV files; metrics are pooled over all of them.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    warmup: f64,
    /// Directory for the metric CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

/// Failure category, mapped to the process exit code.
enum Failure {
    Usage(String),
    Validation(String),
}

impl From<swarmsync::Error> for Failure {
    fn from(e: swarmsync::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_rates(a: RatesArgs) -> Result<(), Failure> {
    let state = match &a.state {
        Some(path) => {
            let mut s: SwarmState = serde_json::from_str(&fs::read_to_string(path)?)?;
            if a.no_seed {
                s.seed_present = false;
            }
            s.validate()?;
            s
        }
        None => {
            let cs = a.cs.ok_or_else(|| Failure::Usage("--cs is required without --state".into()))?;
            if a.b.is_empty() {
                return Err(Failure::Usage("--b is required without --state".into()));
            }
            let cl = match a.cl.len() {
                1 => vec![a.cl[0]; a.b.len()],
                n if n == a.b.len() => a.cl.clone(),
                n => {
                    return Err(Failure::Usage(format!(
                        "--cl has {n} values but --b has {}; give one or one per leecher",
                        a.b.len()
                    )))
                }
            };
            SwarmState::new(a.b.clone(), cs, cl, !a.no_seed)?
        }
    };
    let u = compute_rates(&state)?;
    let g = compute_interest_bounds(&state, &u)?;
    let n = u.len();
    if a.json {
        let bounds: Vec<Vec<Option<f64>>> = (0..n).map(|i| (0..n).map(|j| g.get(i, j).finite()).collect()).collect();
        return print_json(&json!({
            "state": state,
            "seed_share": u.seed_share,
            "u": u.u,
            "g": bounds,
            "d": u.d,
        }));
    }
    let mut out = String::new();
    let _ = writeln!(out, "seed share: {}", u.seed_share);
    let _ = writeln!(out, "U (row uploads to column), kB/s:");
    for row in &u.u {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:>10.4}")).collect();
        let _ = writeln!(out, "  {}", cells.join(" "));
    }
    let _ = writeln!(out, "g (finite interest bounds; '-' unbounded), kB/s:");
    for i in 0..n {
        let cells: Vec<String> = (0..n)
            .map(|j| match g.get(i, j).finite() {
                Some(x) => format!("{x:>10.4}"),
                None => format!("{:>10}", "-"),
            })
            .collect();
        let _ = writeln!(out, "  {}", cells.join(" "));
    }
    let d: Vec<String> = u.d.iter().map(|x| format!("{x}")).collect();
    let _ = writeln!(out, "d: {}", d.join(","));
    print!("{out}");
    Ok(())
}

fn cmd_burst(a: BurstArgs) -> Result<(), Failure> {
    let lambda = match (a.lambda, a.interarrival) {
        (Some(l), _) => l,
        (None, Some(ia)) if ia > 0.0 => 1.0 / ia,
        (None, Some(ia)) => return Err(Failure::Usage(format!("--interarrival must be positive, got {ia}"))),
        (None, None) => return Err(Failure::Usage("--lambda or --interarrival is required".into())),
    };
    let mut sc = BurstScenario::new(lambda, a.cs, a.cl, a.size);
    sc.percentile = a.percentile;
    let b = predict_bounds(&sc)?;
    if a.json {
        return print_json(&json!({
            "scenario": sc,
            "bounds": b,
            "b_min_ratio": b.b_min_ratio(),
            "b_max_ratio": b.b_max_ratio(),
        }));
    }
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!("lambda={} c_s={} c_l={} S={}", sc.arrival_rate, sc.seed_capacity, sc.leecher_capacity, sc.content_size);
    println!("T={:.3} E[N]={:.3} n99={}", b.download_time, b.expected_arrivals, b.n99);
    println!("d_min={} d_max={} burst_possible={}", opt(b.d_min), opt(b.d_max), b.burst_possible);
    println!(
        "B_min={:.3} B_max={:.3} B_min/E[N]={:.3} B_max/E[N]={:.3}",
        b.b_min,
        b.b_max,
        b.b_min_ratio(),
        b.b_max_ratio()
    );
    Ok(())
}

fn batch_line(s: &BatchSummary) -> String {
    let mut line = format!("{}: {} replication(s)", s.scenario, s.replications.len());
    if let Some(d) = &s.download_times {
        let _ = write!(line, ", {} downloads, mean {:.1} s", d.count, d.mean);
    }
    if !s.interdeparture.is_empty() {
        let _ = write!(line, ", gaps<10s {:.3}", s.interdeparture.fraction_below(10.0));
    }
    if let (Some(n), Some(k)) = (s.avg_leechers, s.avg_synchronized) {
        let _ = write!(line, ", avg leechers {n:.3}, synchronized {k:.3}");
    }
    line
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Failure> {
    let bytes = fs::read(&a.config)?;
    let cfg = ScenarioConfig::from_json(std::str::from_utf8(&bytes).map_err(|e| Failure::Usage(e.to_string()))?)?;
    let opts = BatchOptions {
        replications: a.replications,
        base_seed: a.seed,
        threads: a.threads,
        out_dir: Some(a.out.clone()),
        sync_rule: a.sync.rule(a.sync_threshold),
    };
    let source = Some((a.config.as_path(), bytes.as_slice()));
    let summaries = if a.sweep.is_empty() {
        vec![run_batch(&cfg, source, &opts)?]
    } else {
        sweep_interarrival(&cfg, source, &a.sweep, &opts)?
    };
    if a.json {
        let brief: Vec<_> = summaries
            .iter()
            .map(|s| {
                json!({
                    "scenario": s.scenario,
                    "download_times": s.download_times,
                    "gaps_below_10s": s.interdeparture.fraction_below(10.0),
                    "arrival_order": s.arrival_order,
                    "avg_leechers": s.avg_leechers,
                    "avg_synchronized": s.avg_synchronized,
                    "manifest": s.manifest,
                })
            })
            .collect();
        return print_json(&brief);
    }
    for s in &summaries {
        println!("{}", batch_line(s));
    }
    println!("outputs under {}", a.out.display());
    Ok(())
}

fn print_report(name: &str, r: &ValidationReport) {
    println!("{name}: {} points, max relative error {:.4}", r.points.len(), r.max_rel_error);
    for p in &r.points {
        println!(
            "  {:>3} leecher {} [{:.2}, {:.2}] b={} measured={:.3} model={:.3} err={:.4}",
            p.label, p.leecher, p.start, p.end, p.pieces, p.measured, p.model, p.rel_error
        );
    }
}

fn cmd_validate(a: ValidateArgs) -> Result<(), Failure> {
    if !(a.tolerance >= 0.0) {
        return Err(Failure::Usage(format!("--tolerance must be non-negative, got {}", a.tolerance)));
    }
    let mut protocols = match a.protocol {
        ProtocolArg::Reference => vec![Protocol::reference()],
        ProtocolArg::Random => random_protocols(a.states, a.max_leechers, a.seed),
    };
    if let Some(ps) = a.piece_size {
        if !(ps > 0.0) {
            return Err(Failure::Usage(format!("--piece-size must be positive, got {ps}")));
        }
        for p in &mut protocols {
            p.num_pieces = (p.num_pieces as f64 * p.piece_size / ps).round() as u32;
            p.piece_size = ps;
        }
    }
    let mut reports = Vec::new();
    for p in &protocols {
        reports.push(validate(p)?);
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let pass = worst <= a.tolerance;
    if a.json {
        let states: Vec<_> = protocols
            .iter()
            .zip(&reports)
            .map(|(p, r)| json!({"protocol": p, "report": r}))
            .collect();
        print_json(&json!({"tolerance": a.tolerance, "max_rel_error": worst, "pass": pass, "states": states}))?;
    } else {
        for (k, (p, r)) in protocols.iter().zip(&reports).enumerate() {
            let arrivals: Vec<String> = p.arrivals.iter().map(|t| t.to_string()).collect();
            print_report(&format!("state {} (arrivals {})", k + 1, arrivals.join(",")), r);
        }
        println!(
            "max relative error {:.4} vs tolerance {}: {}",
            worst,
            a.tolerance,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Validation(format!("max relative error {worst:.4} exceeds {}", a.tolerance)))
    }
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), Failure> {
    let mut times = Vec::new();
    let mut gaps = Vec::new();
    let mut periods = 0usize;
    let mut pooled: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for path in &a.traces {
        let trace = EventTrace::read_csv(fs::File::open(path)?)?;
        let bps = metrics::busy_periods(&trace, a.warmup)?;
        periods += bps.len();
        gaps.extend(metrics::interdeparture_gaps(&bps));
        times.extend(metrics::download_times(&trace, a.warmup)?);
        for (k, v) in metrics::download_times_by_order(&trace, a.warmup)? {
            pooled.entry(k).or_default().extend(v);
        }
    }
    let stats = metrics::summarize(times);
    let ccdf = metrics::CcdfCurve::from_samples(gaps);
    let order = metrics::order_stats(&pooled);
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        ccdf.write_csv(fs::File::create(dir.join("interdeparture_ccdf.csv"))?)?;
        metrics::write_order_stats_csv(&order, fs::File::create(dir.join("arrival_order.csv"))?)?;
        fs::write(dir.join("download_times.json"), serde_json::to_string_pretty(&stats)?)?;
    }
    if a.json {
        return print_json(&json!({
            "traces": a.traces.len(),
            "busy_periods": periods,
            "download_times": stats,
            "interdeparture_samples": ccdf.len(),
            "gaps_below_10s": ccdf.fraction_below(10.0),
            "arrival_order": order,
        }));
    }
    println!("traces: {}, busy periods: {periods}", a.traces.len());
    match &stats {
        Some(s) => println!(
            "download time: n={} mean={:.2} var={:.2} min={:.2} max={:.2}",
            s.count, s.mean, s.variance, s.min, s.max
        ),
        None => println!("download time: no completed downloads"),
    }
    println!("inter-departure gaps: n={}, below 10 s: {:.3}", ccdf.len(), ccdf.fraction_below(10.0));
    for o in &order {
        println!("  index {}: n={} mean={:.2} sd={:.2}", o.index, o.count, o.mean, o.stddev);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Rates(a) => cmd_rates(a),
        Command::BurstBounds(a) => cmd_burst(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Metrics(a) => cmd_metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Validation(msg)) => {
            eprintln!("validation failed: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}
