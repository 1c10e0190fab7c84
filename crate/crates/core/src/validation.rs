//! Model-versus-simulation comparison.
//!
//! A deterministic scenario is simulated once to find its labeled instants:
//! every arrival and every time two downloading leechers synchronize (their
//! piece counts, having differed by at least `sync_tolerance`, come closer
//! than that). Labels after the first download completion are dropped. For
//! each window between consecutive labels, the rate a leecher actually
//! received is compared with the model rate computed from the swarm state at
//! the window start, with synchronized groups snapped to a common piece count.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PIECE_COUNT_TOLERANCE;
use crate::rate_model::{compute_rates, SwarmState};
use crate::sim::{PeerStatus, ScenarioConfig, Simulator};

pub const DEFAULT_TOLERANCE: f64 = 0.10;
pub const REFERENCE_ARRIVALS: [f64; 5] = [0.0, 30.0, 40.0, 50.0, 60.0];
/// Piece size used by the validation protocols, kB.
///
/// Windows between labels are as short as 10 s. With 256 kB pieces a piece
/// relayed from the seed takes longer than that to become forwardable, so
/// the harness uses 16 kB pieces, the block size of the wire protocol, on
/// the same 256000 kB content.
pub const VALIDATION_PIECE_SIZE: f64 = 16.0;
pub const CONTENT_SIZE: f64 = 256_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub arrivals: Vec<f64>,
    pub seed_capacity: f64,
    pub leecher_capacity: f64,
    pub num_pieces: u32,
    pub piece_size: f64,
    pub sync_tolerance: u32,
    pub rng_seed: u64,
}

impl Protocol {
    pub fn reference() -> Self {
        Self::with_arrivals(REFERENCE_ARRIVALS.to_vec(), 64.0, 64.0)
    }

    pub fn with_arrivals(arrivals: Vec<f64>, seed_capacity: f64, leecher_capacity: f64) -> Self {
        Self {
            arrivals,
            seed_capacity,
            leecher_capacity,
            num_pieces: (CONTENT_SIZE / VALIDATION_PIECE_SIZE) as u32,
            piece_size: VALIDATION_PIECE_SIZE,
            sync_tolerance: PIECE_COUNT_TOLERANCE,
            rng_seed: 0,
        }
    }

    fn config(&self) -> ScenarioConfig {
        let horizon = self.arrivals.last().copied().unwrap_or(0.0)
            + 4.0 * self.num_pieces as f64 * self.piece_size / self.seed_capacity.min(self.leecher_capacity).max(1e-9);
        let mut cfg = ScenarioConfig::explicit(
            self.num_pieces,
            self.piece_size,
            self.seed_capacity,
            self.leecher_capacity,
            self.arrivals.clone(),
            horizon,
        );
        cfg.rng_seed = self.rng_seed;
        cfg.record_pieces = false;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    /// 1-based, numbered by window then by leecher arrival order.
    pub label: usize,
    pub leecher: u32,
    pub start: f64,
    pub end: f64,
    pub pieces: u64,
    /// kB/s.
    pub measured: f64,
    pub model: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub label_times: Vec<f64>,
    /// Time the first leecher completes; the last window ends here.
    pub end: f64,
    pub points: Vec<ValidationPoint>,
    pub max_rel_error: f64,
}

impl ValidationReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    pub fn worst(&self) -> Option<&ValidationPoint> {
        self.points.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Pairs of leechers whose piece counts came within tolerance, in order.
#[derive(Clone, Debug, PartialEq)]
struct SyncEvent {
    time: f64,
    pair: (u32, u32),
}

struct Labels {
    times: Vec<f64>,
    syncs: Vec<SyncEvent>,
    end: f64,
}

fn find_labels(p: &Protocol) -> Result<Labels> {
    let mut sim = Simulator::new(p.config())?;
    let tol = p.sync_tolerance as u64;
    let mut apart: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut synced: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut syncs = Vec::new();
    let mut times: Vec<f64> = p.arrivals.clone();
    while sim.step()? {
        let ids = sim.downloading();
        let any_done = (0..p.arrivals.len() as u32).any(|id| {
            matches!(sim.status(id), Some(PeerStatus::Seeding | PeerStatus::Departed))
        });
        if any_done {
            times.retain(|&t| t < sim.now());
            times.sort_by(f64::total_cmp);
            times.dedup();
            return Ok(Labels {
                times,
                syncs,
                end: sim.now(),
            });
        }
        for (k, &i) in ids.iter().enumerate() {
            for &j in &ids[k + 1..] {
                let bi = sim.bitmap(i).map_or(0, |b| b.count()) as u64;
                let bj = sim.bitmap(j).map_or(0, |b| b.count()) as u64;
                let pair = (i, j);
                if synced.contains(&pair) {
                    continue;
                }
                if bi.abs_diff(bj) >= tol {
                    apart.insert(pair);
                } else if apart.contains(&pair) {
                    synced.insert(pair);
                    syncs.push(SyncEvent { time: sim.now(), pair });
                    times.push(sim.now());
                }
            }
        }
    }
    Err(Error::Simulation("no leecher completed within the horizon".into()))
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    parent[x] = r;
    r
}

pub fn validate(p: &Protocol) -> Result<ValidationReport> {
    if p.arrivals.is_empty() {
        return Err(Error::InvalidArgument("validation needs at least one arrival".into()));
    }
    let labels = find_labels(p)?;
    let mut sim = Simulator::new(p.config())?;
    let n = p.arrivals.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut points = Vec::new();
    let mut bounds = labels.times.clone();
    bounds.push(labels.end);
    for w in bounds.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 <= t0 {
            continue;
        }
        sim.advance_to(t0)?;
        for s in labels.syncs.iter().filter(|s| s.time <= t0) {
            let (a, b) = (find(&mut parent, s.pair.0 as usize), find(&mut parent, s.pair.1 as usize));
            parent[b.max(a)] = a.min(b);
        }
        let ids = sim.downloading();
        let raw: Vec<u64> = ids.iter().map(|&id| sim.bitmap(id).map_or(0, |b| b.count()) as u64).collect();
        let roots: Vec<usize> = ids.iter().map(|&id| find(&mut parent, id as usize)).collect();
        let counts: Vec<u64> = roots
            .iter()
            .map(|r| {
                roots
                    .iter()
                    .zip(&raw)
                    .filter(|(q, _)| *q == r)
                    .map(|(_, &c)| c)
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let state = SwarmState::new(counts.clone(), p.seed_capacity, vec![p.leecher_capacity; ids.len()], sim.seed_on())?;
        let rates = compute_rates(&state)?;
        let before: Vec<f64> = ids.iter().map(|&id| sim.received(id)).collect();
        sim.advance_to(t1)?;
        for (k, &id) in ids.iter().enumerate() {
            let measured = (sim.received(id) - before[k]) / (t1 - t0);
            let model = rates.d[k];
            let rel_error = if model > 0.0 {
                (measured - model).abs() / model
            } else if measured == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            points.push(ValidationPoint {
                label: points.len() + 1,
                leecher: id,
                start: t0,
                end: t1,
                pieces: counts[k],
                measured,
                model,
                rel_error,
            });
        }
    }
    let max_rel_error = points.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(ValidationReport {
        label_times: labels.times,
        end: labels.end,
        points,
        max_rel_error,
    })
}

/// `count` random protocols with 2 to `max_leechers` leechers, arriving
/// within the first fifth of a lone leecher's download time.
pub fn random_protocols(count: usize, max_leechers: usize, seed: u64) -> Vec<Protocol> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let n = rng.random_range(2..=max_leechers.max(2));
            let span = 0.2 * CONTENT_SIZE / 64.0;
            let mut arrivals: Vec<f64> = (1..n).map(|_| (rng.random::<f64>() * span).round()).collect();
            arrivals.push(0.0);
            arrivals.sort_by(f64::total_cmp);
            let mut p = Protocol::with_arrivals(arrivals, 64.0, 64.0);
            p.rng_seed = seed.wrapping_add(k as u64);
            p
        })
        .collect()
}
