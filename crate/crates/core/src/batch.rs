//! Replicated runs, parameter sweeps and their on-disk outputs.
//!
//! Layout under the output root:
//!
//! ```text
//! <scenario>/manifest.json              batch manifest
//! <scenario>/download_times.csv         pooled download-time statistics
//! <scenario>/interdeparture_ccdf.csv    pooled inter-departure CCDF
//! <scenario>/arrival_order.csv          pooled per-occupancy statistics
//! <scenario>/sync.csv                   per-replication synchronization
//! <scenario>/<rep>/trace.csv            event trace
//! <scenario>/<rep>/summary.csv          one row per leecher
//! <scenario>/<rep>/manifest.json        run metadata
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{self, csv_err, CcdfCurve, DownloadTimeStats, OrderStats, SyncRule, SyncStats};
use crate::sim::{run, ArrivalProcess, LeecherSummary, RunMetadata, ScenarioConfig, SimRun};

#[derive(Clone, Debug)]
pub struct BatchOptions {
    pub replications: u32,
    /// Replication `r` uses `base_seed + r`; defaults to the config's seed.
    pub base_seed: Option<u64>,
    /// Worker threads; `None` uses every core.
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub sync_rule: SyncRule,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            replications: 1,
            base_seed: None,
            threads: None,
            out_dir: None,
            sync_rule: SyncRule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationEntry {
    pub index: u32,
    pub seed: u64,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub tool_version: String,
    pub config_path: Option<String>,
    /// SHA-256 of the config bytes (the file as read, or its canonical JSON).
    pub config_sha256: String,
    pub config: ScenarioConfig,
    pub replications: Vec<ReplicationEntry>,
    pub outputs: Vec<String>,
}

/// Metrics of one replication; the trace itself is not kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub index: u32,
    pub seed: u64,
    pub metadata: RunMetadata,
    pub download_times: Vec<f64>,
    pub gaps: Vec<f64>,
    pub by_order: BTreeMap<usize, Vec<f64>>,
    pub sync: Option<SyncStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub scenario: String,
    pub replications: Vec<ReplicationMetrics>,
    pub download_times: Option<DownloadTimeStats>,
    pub interdeparture: CcdfCurve,
    pub arrival_order: Vec<OrderStats>,
    /// Means over replications.
    pub avg_leechers: Option<f64>,
    pub avg_synchronized: Option<f64>,
    pub manifest: Option<RunManifest>,
}

pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Metrics of a finished run, all honoring the config's warmup.
pub fn replication_metrics(index: u32, run: &SimRun, rule: SyncRule) -> Result<ReplicationMetrics> {
    let warmup = run.metadata.config.warmup;
    let trace = &run.trace;
    let sync = if trace.snapshots.is_empty() || !run.metadata.config.snapshot_bitmaps {
        None
    } else {
        Some(metrics::sync_stats(trace, rule, warmup)?)
    };
    Ok(ReplicationMetrics {
        index,
        seed: run.metadata.rng_seed,
        metadata: run.metadata.clone(),
        download_times: metrics::download_times(trace, warmup)?,
        gaps: metrics::interdeparture_gaps(&metrics::busy_periods(trace, warmup)?),
        by_order: metrics::download_times_by_order(trace, warmup)?,
        sync: sync.map(|mut s| {
            s.samples.clear();
            s
        }),
    })
}

pub fn write_summary_csv(leechers: &[LeecherSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record([
        "id",
        "arrival",
        "capacity",
        "leechers_at_arrival",
        "download_complete",
        "departure",
        "download_time",
        "received",
        "uploaded",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for l in leechers {
        w.write_record([
            l.id.to_string(),
            l.arrival.to_string(),
            l.capacity.to_string(),
            l.leechers_at_arrival.to_string(),
            opt(l.download_complete),
            opt(l.departure),
            opt(l.download_time()),
            l.received.to_string(),
            l.uploaded.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn write_download_table(stats: Option<&DownloadTimeStats>, scenario: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["scenario", "count", "mean", "variance", "min", "max", "p50", "p90", "p99"])
        .map_err(csv_err)?;
    if let Some(s) = stats {
        w.write_record([
            scenario.to_string(),
            s.count.to_string(),
            s.mean.to_string(),
            s.variance.to_string(),
            s.min.to_string(),
            s.max.to_string(),
            s.p50.to_string(),
            s.p90.to_string(),
            s.p99.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_sync_table(reps: &[ReplicationMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["replication", "seed", "avg_leechers", "avg_synchronized", "time_covered"])
        .map_err(csv_err)?;
    for r in reps {
        if let Some(s) = &r.sync {
            w.write_record([
                r.index.to_string(),
                r.seed.to_string(),
                s.avg_leechers.to_string(),
                s.avg_synchronized.to_string(),
                s.time_covered.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_one(cfg: &ScenarioConfig, index: u32, seed: u64, opts: &BatchOptions) -> Result<(ReplicationMetrics, Vec<String>)> {
    let mut cfg = cfg.clone();
    cfg.rng_seed = seed;
    let sim = run(cfg)?;
    let metrics = replication_metrics(index, &sim, opts.sync_rule)?;
    let mut outputs = Vec::new();
    if let Some(root) = &opts.out_dir {
        let dir = root.join(&sim.metadata.config.name).join(index.to_string());
        fs::create_dir_all(&dir)?;
        let trace = dir.join("trace.csv");
        sim.trace.write_csv(BufWriter::new(File::create(&trace)?))?;
        let summary = dir.join("summary.csv");
        write_summary_csv(&sim.leechers, &summary)?;
        let manifest = dir.join("manifest.json");
        write_json(&sim.metadata, &manifest)?;
        outputs.extend([trace, summary, manifest].iter().map(|p| p.display().to_string()));
    }
    Ok((metrics, outputs))
}

/// Runs `opts.replications` independent replications of `cfg`, in parallel,
/// and aggregates their metrics. A failing replication aborts the batch.
pub fn run_batch(cfg: &ScenarioConfig, config_bytes: Option<(&Path, &[u8])>, opts: &BatchOptions) -> Result<BatchSummary> {
    cfg.validate()?;
    if opts.replications == 0 {
        return Err(Error::InvalidArgument("at least one replication is required".into()));
    }
    let base = opts.base_seed.unwrap_or(cfg.rng_seed);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = opts.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let results: Vec<Result<(ReplicationMetrics, Vec<String>)>> = pool.install(|| {
        (0..opts.replications)
            .into_par_iter()
            .map(|r| {
                let seed = base.wrapping_add(r as u64);
                run_one(cfg, r, seed, opts)
                    .map_err(|e| Error::Simulation(format!("replication {r} (seed {seed}) failed: {e}")))
            })
            .collect()
    });
    let mut reps = Vec::with_capacity(results.len());
    let mut entries = Vec::with_capacity(results.len());
    for res in results {
        let (m, outputs) = res?;
        entries.push(ReplicationEntry {
            index: m.index,
            seed: m.seed,
            outputs,
        });
        reps.push(m);
    }

    let all_times: Vec<f64> = reps.iter().flat_map(|r| r.download_times.iter().copied()).collect();
    let download_times = metrics::summarize(all_times);
    let interdeparture = CcdfCurve::from_samples(reps.iter().flat_map(|r| r.gaps.iter().copied()).collect());
    let mut pooled: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &reps {
        for (k, v) in &r.by_order {
            pooled.entry(*k).or_default().extend(v);
        }
    }
    let arrival_order = metrics::order_stats(&pooled);
    let syncs: Vec<&SyncStats> = reps.iter().filter_map(|r| r.sync.as_ref()).collect();
    let mean_of = |f: fn(&SyncStats) -> f64| {
        let xs: Vec<f64> = syncs.iter().map(|s| f(s)).filter(|x| x.is_finite()).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    let avg_leechers = mean_of(|s| s.avg_leechers);
    let avg_synchronized = mean_of(|s| s.avg_synchronized);

    let manifest = match &opts.out_dir {
        None => None,
        Some(root) => {
            let dir = root.join(&cfg.name);
            fs::create_dir_all(&dir)?;
            let path = |name: &str| dir.join(name);
            write_download_table(download_times.as_ref(), &cfg.name, &path("download_times.csv"))?;
            interdeparture.write_csv(BufWriter::new(File::create(path("interdeparture_ccdf.csv"))?))?;
            metrics::write_order_stats_csv(&arrival_order, BufWriter::new(File::create(path("arrival_order.csv"))?))?;
            write_sync_table(&reps, &path("sync.csv"))?;
            let outputs = ["download_times.csv", "interdeparture_ccdf.csv", "arrival_order.csv", "sync.csv"]
                .iter()
                .map(|n| path(n).display().to_string())
                .collect();
            let (config_path, hash) = match config_bytes {
                Some((path, bytes)) => (Some(path.display().to_string()), config_hash(bytes)),
                None => (None, config_hash(serde_json::to_string(cfg)?.as_bytes())),
            };
            let manifest = RunManifest {
                scenario: cfg.name.clone(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_path,
                config_sha256: hash,
                config: cfg.clone(),
                replications: entries,
                outputs,
            };
            write_json(&manifest, &dir.join("manifest.json"))?;
            Some(manifest)
        }
    };

    Ok(BatchSummary {
        scenario: cfg.name.clone(),
        replications: reps,
        download_times,
        interdeparture,
        arrival_order,
        avg_leechers,
        avg_synchronized,
        manifest,
    })
}

/// One batch per mean inter-arrival time; each gets its own scenario name
/// `<name>/ia<value>`.
pub fn sweep_interarrival(
    cfg: &ScenarioConfig,
    config_bytes: Option<(&Path, &[u8])>,
    interarrivals: &[f64],
    opts: &BatchOptions,
) -> Result<Vec<BatchSummary>> {
    interarrivals
        .iter()
        .map(|&ia| {
            if !(ia.is_finite() && ia > 0.0) {
                return Err(Error::InvalidArgument(format!("inter-arrival time must be positive, got {ia}")));
            }
            let mut c = cfg.clone();
            let horizon = match &cfg.arrivals {
                ArrivalProcess::Poisson { horizon, .. } => *horizon,
                ArrivalProcess::Explicit(_) => None,
            };
            c.arrivals = ArrivalProcess::Poisson { rate: 1.0 / ia, horizon };
            c.name = format!("{}/ia{}", cfg.name, ia);
            run_batch(&c, config_bytes, opts)
        })
        .collect()
}
