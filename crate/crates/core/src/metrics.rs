//! Statistics computed from simulation traces.
//!
//! A leecher is counted in the swarm from its `Arrival` until its
//! `DownloadComplete`; time spent seeding afterwards does not count.
//! Download time is `DownloadComplete - Arrival`. Every metric ignores
//! leechers arriving (or snapshots taken) before `warmup`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Bitmap, EventKind, EventTrace, Source};

/// Default synchronization threshold, in pieces.
pub const SYNC_THRESHOLD: u32 = 50;
/// Pairwise mode: leechers whose piece counts differ by less than this.
pub const PIECE_COUNT_TOLERANCE: u32 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub arrival: f64,
    pub download_complete: Option<f64>,
    pub departure: Option<f64>,
}

impl Timeline {
    pub fn download_time(&self) -> Option<f64> {
        self.download_complete.map(|t| t - self.arrival)
    }

    /// Whether the leecher is downloading at `t`.
    pub fn present_at(&self, t: f64) -> bool {
        self.arrival <= t && self.download_complete.is_none_or(|c| t < c)
    }
}

/// Per-leecher arrival, completion and departure times, checked for
/// consistency.
pub fn timelines(trace: &EventTrace) -> Result<BTreeMap<u32, Timeline>> {
    let mut out: BTreeMap<u32, Timeline> = BTreeMap::new();
    let mut last = f64::NEG_INFINITY;
    for (i, r) in trace.records.iter().enumerate() {
        if !(r.time >= last) {
            return Err(Error::MalformedTrace(format!("record {i}: time {} goes backwards", r.time)));
        }
        last = r.time;
        let id = match (r.kind, r.peer) {
            (EventKind::SeedOn | EventKind::SeedOff, _) | (EventKind::PieceComplete, _) => continue,
            (_, Source::Leecher(id)) => id,
            (kind, Source::Seed) => {
                return Err(Error::MalformedTrace(format!("record {i}: {} attributed to the seed", kind.as_str())));
            }
        };
        match r.kind {
            EventKind::Arrival => {
                if out.contains_key(&id) {
                    return Err(Error::MalformedTrace(format!("leecher {id} arrives twice")));
                }
                out.insert(
                    id,
                    Timeline {
                        arrival: r.time,
                        ..Default::default()
                    },
                );
            }
            EventKind::DownloadComplete => {
                let tl = out
                    .get_mut(&id)
                    .ok_or_else(|| Error::MalformedTrace(format!("leecher {id} completes before arriving")))?;
                if tl.download_complete.replace(r.time).is_some() {
                    return Err(Error::MalformedTrace(format!("leecher {id} completes twice")));
                }
            }
            EventKind::Departure => {
                let tl = out
                    .get_mut(&id)
                    .ok_or_else(|| Error::MalformedTrace(format!("leecher {id} departs before arriving")))?;
                if tl.download_complete.is_none() {
                    return Err(Error::MalformedTrace(format!("leecher {id} departs without completing")));
                }
                if tl.departure.replace(r.time).is_some() {
                    return Err(Error::MalformedTrace(format!("leecher {id} departs twice")));
                }
            }
            _ => unreachable!(),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusyPeriod {
    pub start: f64,
    /// `None` if leechers were still downloading when the trace ended.
    pub end: Option<f64>,
    /// Member leechers in arrival order.
    pub members: Vec<u32>,
    /// Completion times of the members, ascending.
    pub completions: Vec<f64>,
}

/// Maximal intervals during which at least one leecher is downloading.
/// Busy periods that start before `warmup` are dropped.
pub fn busy_periods(trace: &EventTrace, warmup: f64) -> Result<Vec<BusyPeriod>> {
    timelines(trace)?;
    let mut periods: Vec<BusyPeriod> = Vec::new();
    let mut current: Option<BusyPeriod> = None;
    let mut active = 0usize;
    for r in &trace.records {
        match (r.kind, r.peer) {
            (EventKind::Arrival, Source::Leecher(id)) => {
                let bp = current.get_or_insert_with(|| BusyPeriod {
                    start: r.time,
                    end: None,
                    members: Vec::new(),
                    completions: Vec::new(),
                });
                bp.members.push(id);
                active += 1;
            }
            (EventKind::DownloadComplete, Source::Leecher(_)) => {
                active -= 1;
                let bp = current.as_mut().expect("validated trace");
                bp.completions.push(r.time);
                if active == 0 {
                    let mut bp = current.take().unwrap();
                    bp.end = Some(r.time);
                    periods.push(bp);
                }
            }
            _ => {}
        }
    }
    periods.extend(current);
    periods.retain(|bp| bp.start >= warmup);
    Ok(periods)
}

/// Empirical complementary CDF, `P(X > x)` at each distinct sample value.
///
/// With distinct samples the curve starts at `1 - 1/n` for the smallest
/// value and ends at 0 for the largest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CcdfCurve {
    pub samples: Vec<f64>,
    pub values: Vec<f64>,
    pub ccdf: Vec<f64>,
}

impl CcdfCurve {
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        let n = samples.len() as f64;
        let mut values = Vec::new();
        let mut ccdf = Vec::new();
        let mut i = 0;
        while i < samples.len() {
            let x = samples[i];
            while i < samples.len() && samples[i] == x {
                i += 1;
            }
            values.push(x);
            ccdf.push((samples.len() - i) as f64 / n);
        }
        Self { samples, values, ccdf }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fraction of samples strictly below `x`.
    pub fn fraction_below(&self, x: f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.partition_point(|&s| s < x) as f64 / self.samples.len() as f64
    }

    /// Nearest-rank percentile, `p` in (0, 1].
    pub fn quantile(&self, p: f64) -> Option<f64> {
        nearest_rank(&self.samples, p)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["value", "ccdf"]).map_err(csv_err)?;
        for (v, c) in self.values.iter().zip(&self.ccdf) {
            w.write_record([v.to_string(), c.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Nearest-rank percentile of already sorted data.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() || !(p > 0.0 && p <= 1.0) {
        return None;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Gaps between consecutive completions within each busy period; the gap
/// between two busy periods is never counted.
pub fn interdeparture_gaps(periods: &[BusyPeriod]) -> Vec<f64> {
    periods
        .iter()
        .flat_map(|bp| bp.completions.windows(2).map(|w| w[1] - w[0]))
        .collect()
}

pub fn interdeparture_ccdf(trace: &EventTrace, warmup: f64) -> Result<CcdfCurve> {
    Ok(CcdfCurve::from_samples(interdeparture_gaps(&busy_periods(trace, warmup)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderStats {
    /// Number of leechers downloading when the leecher arrived.
    pub index: usize,
    pub count: usize,
    pub mean: f64,
    pub stddev: f64,
}

/// Download-time samples grouped by occupancy at arrival.
pub fn download_times_by_order(trace: &EventTrace, warmup: f64) -> Result<BTreeMap<usize, Vec<f64>>> {
    let tl = timelines(trace)?;
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&id, me) in &tl {
        let (Some(dt), true) = (me.download_time(), me.arrival >= warmup) else {
            continue;
        };
        let index = tl
            .iter()
            .filter(|&(&other, o)| {
                other != id && o.present_at(me.arrival) && (o.arrival < me.arrival || other < id)
            })
            .count();
        out.entry(index).or_default().push(dt);
    }
    Ok(out)
}

pub fn arrival_order_stats(trace: &EventTrace, warmup: f64) -> Result<Vec<OrderStats>> {
    Ok(order_stats(&download_times_by_order(trace, warmup)?))
}

pub fn order_stats(groups: &BTreeMap<usize, Vec<f64>>) -> Vec<OrderStats> {
    groups
        .iter()
        .map(|(&index, xs)| {
            let (mean, var) = mean_variance(xs);
            OrderStats {
                index,
                count: xs.len(),
                mean,
                stddev: var.sqrt(),
            }
        })
        .collect()
}

/// Mean and sample variance (zero for fewer than two samples).
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, ss / (n - 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownloadTimeStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

pub fn download_times(trace: &EventTrace, warmup: f64) -> Result<Vec<f64>> {
    Ok(timelines(trace)?
        .values()
        .filter(|t| t.arrival >= warmup)
        .filter_map(Timeline::download_time)
        .collect())
}

pub fn download_time_stats(trace: &EventTrace, warmup: f64) -> Result<Option<DownloadTimeStats>> {
    Ok(summarize(download_times(trace, warmup)?))
}

pub fn summarize(mut xs: Vec<f64>) -> Option<DownloadTimeStats> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let (mean, variance) = mean_variance(&xs);
    Some(DownloadTimeStats {
        count: xs.len(),
        mean,
        variance,
        min: xs[0],
        max: xs[xs.len() - 1],
        p50: nearest_rank(&xs, 0.5)?,
        p90: nearest_rank(&xs, 0.9)?,
        p99: nearest_rank(&xs, 0.99)?,
    })
}

/// When a leecher counts as synchronized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncRule {
    /// Interested in at most `threshold` pieces of every other leecher.
    ForAll { threshold: u32 },
    /// Some other leecher with at most `threshold` pieces of mutual interest
    /// in each direction.
    Exists { threshold: u32 },
    /// Some other leecher whose piece count differs by less than `tolerance`.
    PieceCount { tolerance: u32 },
}

impl Default for SyncRule {
    fn default() -> Self {
        SyncRule::ForAll {
            threshold: SYNC_THRESHOLD,
        }
    }
}

impl SyncRule {
    /// Number of synchronized leechers among `bitmaps`.
    pub fn count(&self, bitmaps: &[&Bitmap]) -> usize {
        let n = bitmaps.len();
        if n < 2 {
            return 0;
        }
        (0..n)
            .filter(|&i| {
                let mine = bitmaps[i];
                let mut others = (0..n).filter(|&j| j != i).map(|j| bitmaps[j]);
                match *self {
                    SyncRule::ForAll { threshold } => others.all(|o| mine.missing_from(o) <= threshold),
                    SyncRule::Exists { threshold } => {
                        others.any(|o| mine.missing_from(o) <= threshold && o.missing_from(mine) <= threshold)
                    }
                    SyncRule::PieceCount { tolerance } => others.any(|o| o.count().abs_diff(mine.count()) < tolerance),
                }
            })
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncSample {
    pub time: f64,
    pub leechers: usize,
    pub synchronized: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncStats {
    /// Time-average number of leechers while more than one is present.
    pub avg_leechers: f64,
    /// Time-average number of synchronized leechers under the same condition.
    pub avg_synchronized: f64,
    /// Total time with more than one leecher.
    pub time_covered: f64,
    pub samples: Vec<SyncSample>,
}

/// Synchronization statistics from the bitmap snapshots of a trace. Each
/// snapshot stands for the interval up to the next one (or the trace end).
pub fn sync_stats(trace: &EventTrace, rule: SyncRule, warmup: f64) -> Result<SyncStats> {
    if trace.snapshots.is_empty() {
        return Err(Error::MissingSnapshots);
    }
    let mut samples = Vec::with_capacity(trace.snapshots.len());
    for snap in &trace.snapshots {
        let mut bitmaps = Vec::new();
        for p in snap.downloading() {
            bitmaps.push(p.bitmap.as_ref().ok_or(Error::MissingSnapshots)?);
        }
        samples.push(SyncSample {
            time: snap.time,
            leechers: bitmaps.len(),
            synchronized: rule.count(&bitmaps),
        });
    }
    let (mut wt, mut wn, mut ws) = (0.0, 0.0, 0.0);
    for (k, s) in samples.iter().enumerate() {
        let next = samples.get(k + 1).map_or(trace.end_time, |n| n.time);
        let lo = s.time.max(warmup);
        let dt = next - lo;
        if s.leechers > 1 && dt > 0.0 {
            wt += dt;
            wn += dt * s.leechers as f64;
            ws += dt * s.synchronized as f64;
        }
    }
    let avg = |x: f64| if wt > 0.0 { x / wt } else { f64::NAN };
    Ok(SyncStats {
        avg_leechers: avg(wn),
        avg_synchronized: avg(ws),
        time_covered: wt,
        samples,
    })
}

/// Bytes received by `leecher` at `t`, read from snapshots.
///
/// Snapshot byte counts include partial pieces. Between two snapshots the
/// count is interpolated linearly; without snapshots of the leecher,
/// completed pieces in the trace are counted instead.
pub fn received_at(trace: &EventTrace, leecher: u32, t: f64) -> Result<f64> {
    let points: Vec<(f64, f64)> = trace
        .snapshots
        .iter()
        .filter_map(|s| s.peer(leecher).map(|p| (s.time, p.received)))
        .collect();
    if points.is_empty() {
        let pieces = trace
            .records
            .iter()
            .filter(|r| r.kind == EventKind::PieceComplete && r.peer == Source::Leecher(leecher) && r.time <= t)
            .count();
        return Ok(pieces as f64 * trace.piece_size);
    }
    let after = points.partition_point(|&(time, _)| time < t);
    if let Some(&(time, bytes)) = points.get(after) {
        if time == t {
            return Ok(bytes);
        }
        if after > 0 {
            let (t0, b0) = points[after - 1];
            return Ok(b0 + (bytes - b0) * (t - t0) / (time - t0));
        }
    }
    Err(Error::OutOfRange {
        time: t,
        start: points[0].0,
        end: points[points.len() - 1].0,
    })
}

/// Average download rate of `leecher` over `[t0, t1]`, kB/s.
pub fn measured_rate(trace: &EventTrace, leecher: u32, t0: f64, t1: f64) -> Result<f64> {
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!("empty window [{t0}, {t1}]")));
    }
    let tl = timelines(trace)?;
    let me = tl
        .get(&leecher)
        .ok_or_else(|| Error::InvalidArgument(format!("leecher {leecher} never arrives")))?;
    let end = me.download_complete.unwrap_or(trace.end_time);
    if t0 < me.arrival || t1 > end {
        return Err(Error::OutOfRange {
            time: if t0 < me.arrival { t0 } else { t1 },
            start: me.arrival,
            end,
        });
    }
    Ok((received_at(trace, leecher, t1)? - received_at(trace, leecher, t0)?) / (t1 - t0))
}

pub fn write_order_stats_csv<W: Write>(rows: &[OrderStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "count", "mean", "stddev"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.index.to_string(), r.count.to_string(), r.mean.to_string(), r.stddev.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::MalformedTrace(format!("{other:?}")),
    }
}
