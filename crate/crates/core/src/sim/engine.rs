use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::bitmap::Bitmap;
use super::config::{ArrivalProcess, CapacitySpec, PieceSelection, ScenarioConfig, SeedMode};
use super::trace::{Detail, EventKind, EventTrace, PeerSnapshot, Snapshot, Source, TraceRecord};
use crate::error::{Error, Result};
use crate::rate_model::SwarmState;

/// Flows whose remaining bytes fall below this fraction of a piece are done.
const COMPLETION_EPS: f64 = 1e-9;
/// Slack allowed by the rate audit.
pub const CAPACITY_TOLERANCE: f64 = 1e-6;

// RNG streams, one per source of randomness, so that e.g. changing the piece
// picker never perturbs the arrival sequence.
const STREAM_ARRIVALS: u64 = 1;
const STREAM_CAPACITIES: u64 = 2;
const STREAM_SEED_TOGGLES: u64 = 3;
const STREAM_PIECES: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeerStatus {
    Downloading,
    /// Holds the whole content and keeps uploading until its departure.
    Seeding,
    Departed,
}

#[derive(Clone, Debug)]
struct Peer {
    arrival: f64,
    capacity: f64,
    bitmap: Bitmap,
    /// Pieces currently being delivered to this peer.
    inflight: Bitmap,
    status: PeerStatus,
    leechers_at_arrival: u32,
    completed_at: Option<f64>,
    departed_at: Option<f64>,
    received: f64,
    uploaded: f64,
}

/// Head-of-line transfer of one piece over one uploader→downloader link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub from: Source,
    pub to: u32,
    pub piece: u32,
    pub remaining: f64,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EventClass {
    // Declaration order is the tie-break order at equal timestamps.
    Arrival,
    Completion,
    Departure,
    SeedToggle,
    Snapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeecherSummary {
    pub id: u32,
    pub arrival: f64,
    pub capacity: f64,
    /// Leechers still downloading when this one arrived.
    pub leechers_at_arrival: u32,
    pub download_complete: Option<f64>,
    pub departure: Option<f64>,
    pub received: f64,
    pub uploaded: f64,
}

impl LeecherSummary {
    pub fn download_time(&self) -> Option<f64> {
        self.download_complete.map(|t| t - self.arrival)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub arrivals: u64,
    pub completions: u64,
    pub departures: u64,
    pub pieces_delivered: u64,
    pub events: u64,
    pub seed_uploaded: f64,
    /// Partial piece bytes thrown away when a flow was cancelled.
    pub discarded: f64,
    pub end_time: f64,
}

/// Config echo plus totals, written next to each trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub rng_seed: u64,
    pub config: ScenarioConfig,
    pub totals: RunTotals,
}

#[derive(Clone, Debug)]
pub struct SimRun {
    pub trace: EventTrace,
    pub leechers: Vec<LeecherSummary>,
    pub metadata: RunMetadata,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Event-driven piece-level swarm simulator.
///
/// Every uploader splits its capacity equally over the links on which it is
/// currently transferring a piece. A link carries one piece at a time, chosen
/// rarest-first among pieces the uploader has, the downloader lacks and no
/// other link is already delivering to that downloader. Rates are recomputed
/// after every event and flows progress linearly in between.
pub struct Simulator {
    cfg: ScenarioConfig,
    now: f64,
    finished: bool,
    peers: Vec<Peer>,
    /// Ids of peers in the swarm (downloading or seeding), ascending.
    present: Vec<u32>,
    flows: Vec<Flow>,
    /// Replica count of each piece among connected leechers, counting copies
    /// still in flight so that two uploaders rarely inject the same fresh
    /// piece at once. The seed adds the same one to every piece while
    /// connected, which never changes the rarest-first order, so it is kept
    /// out of the array.
    replicas: Vec<u32>,
    seed_on: bool,
    seed_bitmap: Bitmap,
    arrivals: Vec<f64>,
    next_arrival: usize,
    departures: VecDeque<(f64, u32)>,
    next_toggle: Option<f64>,
    next_periodic_snapshot: Option<f64>,
    probes: Vec<f64>,
    next_probe: usize,
    rng_caps: ChaCha8Rng,
    rng_toggles: ChaCha8Rng,
    rng_pieces: ChaCha8Rng,
    trace: EventTrace,
    totals: RunTotals,
    // Scratch buffers reused across events.
    uploader_load: Vec<u32>,
    seed_load: u32,
    inbound: Vec<f64>,
    ties: Vec<u32>,
}

impl Simulator {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng_arrivals = stream(cfg.rng_seed, STREAM_ARRIVALS);
        let arrivals = match &cfg.arrivals {
            ArrivalProcess::Explicit(times) => times.clone(),
            ArrivalProcess::Poisson { rate, horizon } => {
                let horizon = horizon.unwrap_or(cfg.sim_end);
                let gap = Exp::new(*rate).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                let mut times = Vec::new();
                let mut t = gap.sample(&mut rng_arrivals);
                while t <= horizon {
                    times.push(t);
                    t += gap.sample(&mut rng_arrivals);
                }
                times
            }
        };
        let mut rng_toggles = stream(cfg.rng_seed, STREAM_SEED_TOGGLES);
        let next_toggle = match cfg.seed_mode {
            SeedMode::OnOff { mean_on, availability } if availability < 1.0 => {
                Some(Exp::new(1.0 / mean_on).unwrap().sample(&mut rng_toggles))
            }
            _ => None,
        };
        let mut probes = cfg.probe_times.clone();
        probes.sort_by(f64::total_cmp);
        let n = cfg.num_pieces;
        let trace = EventTrace::new(n, cfg.piece_size);
        Ok(Self {
            now: 0.0,
            finished: false,
            peers: Vec::new(),
            present: Vec::new(),
            flows: Vec::new(),
            replicas: vec![0; n as usize],
            seed_on: true,
            seed_bitmap: Bitmap::full(n),
            arrivals,
            next_arrival: 0,
            departures: VecDeque::new(),
            next_toggle,
            next_periodic_snapshot: cfg.snapshot_interval.map(|_| 0.0),
            probes,
            next_probe: 0,
            rng_caps: stream(cfg.rng_seed, STREAM_CAPACITIES),
            rng_toggles,
            rng_pieces: stream(cfg.rng_seed, STREAM_PIECES),
            trace,
            totals: RunTotals::default(),
            uploader_load: Vec::new(),
            seed_load: 0,
            inbound: Vec::new(),
            ties: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn seed_on(&self) -> bool {
        self.seed_on
    }

    pub fn flows(&self) -> &[Flow] {
        &self.flows
    }

    pub fn trace(&self) -> &EventTrace {
        &self.trace
    }

    /// Ids of leechers still downloading, in arrival order.
    pub fn downloading(&self) -> Vec<u32> {
        self.present
            .iter()
            .copied()
            .filter(|&id| self.peers[id as usize].status == PeerStatus::Downloading)
            .collect()
    }

    pub fn bitmap(&self, id: u32) -> Option<&Bitmap> {
        self.peers.get(id as usize).map(|p| &p.bitmap)
    }

    pub fn status(&self, id: u32) -> Option<PeerStatus> {
        self.peers.get(id as usize).map(|p| p.status)
    }

    /// Bytes received by `id`, counting partial progress on in-flight pieces.
    pub fn received(&self, id: u32) -> f64 {
        let Some(peer) = self.peers.get(id as usize) else {
            return 0.0;
        };
        let partial: f64 = self
            .flows
            .iter()
            .filter(|f| f.to == id)
            .map(|f| self.cfg.piece_size - f.remaining)
            .sum();
        peer.received + partial
    }

    /// Fluid-model view of the leechers currently downloading, plus their
    /// bitmaps. Post-download seeders are not part of the state.
    pub fn swarm_state(&self) -> Result<(SwarmState, Vec<Bitmap>)> {
        let ids = self.downloading();
        if ids.is_empty() {
            return Err(Error::InvalidState(format!("no leechers in the swarm at t = {}", self.now)));
        }
        let peers: Vec<&Peer> = ids.iter().map(|&id| &self.peers[id as usize]).collect();
        let state = SwarmState::new(
            peers.iter().map(|p| p.bitmap.count() as u64).collect(),
            self.cfg.seed_capacity,
            peers.iter().map(|p| p.capacity).collect(),
            self.seed_on,
        )?;
        Ok((state, peers.iter().map(|p| p.bitmap.clone()).collect()))
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            time: self.now,
            seed_on: self.seed_on,
            peers: self
                .present
                .iter()
                .map(|&id| {
                    let p = &self.peers[id as usize];
                    PeerSnapshot {
                        id,
                        pieces: p.bitmap.count(),
                        received: self.received(id),
                        capacity: p.capacity,
                        downloading: p.status == PeerStatus::Downloading,
                        bitmap: self.cfg.snapshot_bitmaps.then(|| p.bitmap.clone()),
                    }
                })
                .collect(),
        }
    }

    /// Processes every event with time `<= t`, then lets flows progress to `t`.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        if !(t.is_finite() && t >= self.now) {
            return Err(Error::OutOfRange {
                time: t,
                start: self.now,
                end: self.cfg.sim_end,
            });
        }
        if t > self.cfg.sim_end {
            return Err(Error::OutOfRange {
                time: t,
                start: 0.0,
                end: self.cfg.sim_end,
            });
        }
        while !self.finished {
            match self.next_event() {
                Some((time, _)) if time <= t => {
                    self.step()?;
                }
                _ => break,
            }
        }
        if !self.finished || t <= self.now {
            self.progress(t.max(self.now));
        }
        Ok(())
    }

    pub fn run_to_end(mut self) -> Result<SimRun> {
        while self.step()? {}
        Ok(self.into_run())
    }

    pub fn into_run(self) -> SimRun {
        let leechers = self
            .peers
            .iter()
            .enumerate()
            .map(|(id, p)| LeecherSummary {
                id: id as u32,
                arrival: p.arrival,
                capacity: p.capacity,
                leechers_at_arrival: p.leechers_at_arrival,
                download_complete: p.completed_at,
                departure: p.departed_at,
                received: p.received,
                uploaded: p.uploaded,
            })
            .collect();
        let mut trace = self.trace;
        trace.end_time = self.now;
        let mut totals = self.totals;
        totals.end_time = self.now;
        SimRun {
            trace,
            leechers,
            metadata: RunMetadata {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                rng_seed: self.cfg.rng_seed,
                config: self.cfg,
                totals,
            },
        }
    }

    fn next_completion(&self) -> Option<f64> {
        self.flows
            .iter()
            .filter(|f| f.rate > 0.0)
            .map(|f| self.now + f.remaining / f.rate)
            .min_by(f64::total_cmp)
    }

    fn next_snapshot_time(&self) -> Option<f64> {
        let probe = self.probes.get(self.next_probe).copied();
        match (self.next_periodic_snapshot, probe) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn next_event(&self) -> Option<(f64, EventClass)> {
        let candidates = [
            (self.arrivals.get(self.next_arrival).copied(), EventClass::Arrival),
            (self.next_completion(), EventClass::Completion),
            (self.departures.front().map(|d| d.0), EventClass::Departure),
            (self.next_toggle, EventClass::SeedToggle),
            (self.next_snapshot_time(), EventClass::Snapshot),
        ];
        candidates
            .into_iter()
            .filter_map(|(t, c)| t.map(|t| (t, c)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
    }

    fn idle_forever(&self) -> bool {
        self.next_arrival >= self.arrivals.len() && self.present.is_empty()
    }

    /// Processes the next event. Returns `false` once the run is over.
    pub fn step(&mut self) -> Result<bool> {
        if self.finished {
            return Ok(false);
        }
        if self.idle_forever() {
            self.finished = true;
            return Ok(false);
        }
        let Some((t, class)) = self.next_event() else {
            // Nothing can ever happen again: stalled until the horizon.
            self.progress(self.cfg.sim_end.max(self.now));
            self.finished = true;
            return Ok(false);
        };
        if t > self.cfg.sim_end {
            self.progress(self.cfg.sim_end);
            self.finished = true;
            return Ok(false);
        }
        if t < self.now {
            return Err(Error::Simulation(format!("event at {t} precedes current time {}", self.now)));
        }
        self.progress(t);
        self.totals.events += 1;
        match class {
            EventClass::Arrival => self.on_arrival()?,
            EventClass::Completion => self.on_completions()?,
            EventClass::Departure => {
                let (_, id) = self
                    .departures
                    .pop_front()
                    .ok_or_else(|| Error::Simulation("departure queue underflow".into()))?;
                self.depart(id)?;
            }
            EventClass::SeedToggle => self.on_seed_toggle()?,
            EventClass::Snapshot => self.on_snapshot(),
        }
        self.assign_rates();
        Ok(true)
    }

    fn progress(&mut self, t: f64) {
        let dt = t - self.now;
        if dt > 0.0 {
            for f in &mut self.flows {
                f.remaining -= f.rate * dt;
            }
        }
        self.now = t;
    }

    fn record(&mut self, kind: EventKind, peer: Source, detail: Detail) {
        if kind == EventKind::PieceComplete && !self.cfg.record_pieces {
            return;
        }
        self.trace.records.push(TraceRecord {
            time: self.now,
            kind,
            peer,
            detail,
        });
    }

    fn draw_capacity(&mut self) -> f64 {
        match self.cfg.leecher_capacity {
            CapacitySpec::Constant(c) => c,
            CapacitySpec::Uniform { center, epsilon } => {
                if epsilon == 0.0 {
                    center
                } else {
                    self.rng_caps.random_range(center * (1.0 - epsilon)..=center * (1.0 + epsilon))
                }
            }
        }
    }

    fn on_arrival(&mut self) -> Result<()> {
        self.next_arrival += 1;
        let id = self.peers.len() as u32;
        let capacity = self.draw_capacity();
        let leechers_at_arrival = self.downloading().len() as u32;
        let n = self.cfg.num_pieces;
        self.peers.push(Peer {
            arrival: self.now,
            capacity,
            bitmap: Bitmap::empty(n),
            inflight: Bitmap::empty(n),
            status: PeerStatus::Downloading,
            leechers_at_arrival,
            completed_at: None,
            departed_at: None,
            received: 0.0,
            uploaded: 0.0,
        });
        self.present.push(id);
        self.totals.arrivals += 1;
        self.record(EventKind::Arrival, Source::Leecher(id), Detail::Capacity(capacity));
        self.refill(&[], &[id], &[]);
        Ok(())
    }

    fn on_completions(&mut self) -> Result<()> {
        let threshold = COMPLETION_EPS * self.cfg.piece_size;
        let mut done: Vec<Flow> = Vec::new();
        let mut i = 0;
        while i < self.flows.len() {
            if self.flows[i].rate > 0.0 && self.flows[i].remaining <= threshold {
                done.push(self.flows.swap_remove(i));
            } else {
                i += 1;
            }
        }
        if done.is_empty() {
            return Err(Error::Simulation(format!("no flow completes at t = {}", self.now)));
        }
        done.sort_by_key(|f| (f.to, f.from));
        let mut links = Vec::with_capacity(done.len());
        let mut uploaders = Vec::with_capacity(done.len());
        for f in done {
            self.deliver(&f)?;
            links.push((f.from, f.to));
            uploaders.push(Source::Leecher(f.to));
        }
        self.refill(&uploaders, &[], &links);
        Ok(())
    }

    fn deliver(&mut self, f: &Flow) -> Result<()> {
        let piece_size = self.cfg.piece_size;
        let peer = &mut self.peers[f.to as usize];
        if !peer.inflight.remove(f.piece) {
            return Err(Error::Simulation(format!("piece {} to {} was not in flight", f.piece, f.to)));
        }
        if !peer.bitmap.insert(f.piece) {
            return Err(Error::Simulation(format!("leecher {} received duplicate piece {}", f.to, f.piece)));
        }
        peer.received += piece_size;
        let complete = peer.bitmap.is_complete();
        self.totals.pieces_delivered += 1;
        match f.from {
            Source::Seed => self.totals.seed_uploaded += piece_size,
            Source::Leecher(u) => self.peers[u as usize].uploaded += piece_size,
        }
        self.record(
            EventKind::PieceComplete,
            Source::Leecher(f.to),
            Detail::Piece {
                piece: f.piece,
                from: f.from,
            },
        );
        if complete {
            let received = self.peers[f.to as usize].received;
            let peer = &mut self.peers[f.to as usize];
            peer.status = PeerStatus::Seeding;
            peer.completed_at = Some(self.now);
            self.totals.completions += 1;
            self.record(EventKind::DownloadComplete, Source::Leecher(f.to), Detail::Bytes(received));
            if self.cfg.seeding_time > 0.0 {
                self.departures.push_back((self.now + self.cfg.seeding_time, f.to));
            } else {
                self.depart(f.to)?;
            }
        }
        Ok(())
    }

    fn depart(&mut self, id: u32) -> Result<()> {
        let pos = self
            .present
            .iter()
            .position(|&p| p == id)
            .ok_or_else(|| Error::Simulation(format!("leecher {id} departs but is not present")))?;
        self.present.remove(pos);
        let peer = &mut self.peers[id as usize];
        peer.status = PeerStatus::Departed;
        peer.departed_at = Some(self.now);
        for piece in peer.bitmap.iter() {
            self.replicas[piece as usize] -= 1;
        }
        self.totals.departures += 1;
        self.record(EventKind::Departure, Source::Leecher(id), Detail::None);
        let affected = self.cancel_flows(|f| f.from == Source::Leecher(id) || f.to == id);
        self.refill(&[], &affected, &[]);
        Ok(())
    }

    /// Drops matching flows and returns the downloaders that lost a piece.
    fn cancel_flows(&mut self, mut pred: impl FnMut(&Flow) -> bool) -> Vec<u32> {
        let mut affected = Vec::new();
        let piece_size = self.cfg.piece_size;
        let mut i = 0;
        while i < self.flows.len() {
            if pred(&self.flows[i]) {
                let f = self.flows.swap_remove(i);
                self.totals.discarded += piece_size - f.remaining;
                self.peers[f.to as usize].inflight.remove(f.piece);
                self.replicas[f.piece as usize] -= 1;
                affected.push(f.to);
            } else {
                i += 1;
            }
        }
        affected.sort_unstable();
        affected.dedup();
        affected
    }

    fn on_seed_toggle(&mut self) -> Result<()> {
        let SeedMode::OnOff { mean_on, .. } = self.cfg.seed_mode else {
            return Err(Error::Simulation("seed toggle without ON-OFF mode".into()));
        };
        let mean_off = self.cfg.seed_mode.mean_off().unwrap_or(0.0);
        if self.seed_on {
            self.seed_on = false;
            self.record(EventKind::SeedOff, Source::Seed, Detail::None);
            let affected = self.cancel_flows(|f| f.from == Source::Seed);
            self.refill(&[], &affected, &[]);
            self.next_toggle = Some(self.now + Exp::new(1.0 / mean_off).unwrap().sample(&mut self.rng_toggles));
        } else {
            self.seed_on = true;
            self.record(EventKind::SeedOn, Source::Seed, Detail::None);
            self.refill(&[Source::Seed], &[], &[]);
            self.next_toggle = Some(self.now + Exp::new(1.0 / mean_on).unwrap().sample(&mut self.rng_toggles));
        }
        Ok(())
    }

    fn on_snapshot(&mut self) {
        let t = self.now;
        if let (Some(next), Some(dt)) = (self.next_periodic_snapshot, self.cfg.snapshot_interval) {
            if next <= t {
                self.next_periodic_snapshot = Some(next + dt);
            }
        }
        while self.probes.get(self.next_probe).is_some_and(|&p| p <= t) {
            self.next_probe += 1;
        }
        let snap = self.snapshot();
        self.trace.snapshots.push(snap);
    }

    fn uploader_active(&self, src: Source) -> bool {
        match src {
            Source::Seed => self.seed_on,
            Source::Leecher(id) => self.peers[id as usize].status != PeerStatus::Departed,
        }
    }

    /// Starts flows on idle links that may have become eligible: every link
    /// out of `uploaders`, every link into `downloaders`, and `links`.
    fn refill(&mut self, uploaders: &[Source], downloaders: &[u32], links: &[(Source, u32)]) {
        let mut candidates: Vec<(Source, u32)> = links.to_vec();
        let targets: Vec<u32> = self.downloading();
        for &u in uploaders {
            for &d in &targets {
                candidates.push((u, d));
            }
        }
        for &d in downloaders {
            candidates.push((Source::Seed, d));
            for &u in &self.present {
                candidates.push((Source::Leecher(u), d));
            }
        }
        candidates.sort_unstable_by_key(|&(u, d)| (d, u));
        candidates.dedup();
        for (from, to) in candidates {
            self.try_start(from, to);
        }
    }

    fn try_start(&mut self, from: Source, to: u32) {
        if from == Source::Leecher(to) || !self.uploader_active(from) {
            return;
        }
        if self.peers[to as usize].status != PeerStatus::Downloading {
            return;
        }
        if self.flows.iter().any(|f| f.from == from && f.to == to) {
            return;
        }
        if let Some(piece) = self.pick_piece(from, to) {
            self.peers[to as usize].inflight.insert(piece);
            self.replicas[piece as usize] += 1;
            self.flows.push(Flow {
                from,
                to,
                piece,
                remaining: self.cfg.piece_size,
                rate: 0.0,
            });
        }
    }

    /// Piece the uploader has and the downloader neither owns nor is already
    /// receiving: the rarest one (ties broken uniformly at random) or, under
    /// random selection, any of them.
    fn pick_piece(&mut self, from: Source, to: u32) -> Option<u32> {
        let rarest = self.cfg.piece_selection == PieceSelection::RarestFirst;
        let have = match from {
            Source::Seed => self.seed_bitmap.words(),
            Source::Leecher(u) => self.peers[u as usize].bitmap.words(),
        };
        let want = &self.peers[to as usize];
        let mut best = u32::MAX;
        self.ties.clear();
        for (wi, ((&h, &own), &busy)) in have
            .iter()
            .zip(want.bitmap.words())
            .zip(want.inflight.words())
            .enumerate()
        {
            let mut bits = h & !own & !busy;
            while bits != 0 {
                let piece = wi as u32 * 64 + bits.trailing_zeros();
                bits &= bits - 1;
                let r = if rarest { self.replicas[piece as usize] } else { 0 };
                if r < best {
                    best = r;
                    self.ties.clear();
                    self.ties.push(piece);
                } else if r == best {
                    self.ties.push(piece);
                }
            }
        }
        match self.ties.len() {
            0 => None,
            1 => Some(self.ties[0]),
            n => Some(self.ties[self.rng_pieces.random_range(0..n)]),
        }
    }

    /// Equal split of each uploader's capacity over its flows, then
    /// proportional scaling of any downloader over its inbound cap.
    fn assign_rates(&mut self) {
        let n = self.peers.len();
        if self.uploader_load.len() < n {
            self.uploader_load.resize(n, 0);
            self.inbound.resize(n, 0.0);
        }
        self.seed_load = 0;
        for f in &self.flows {
            match f.from {
                Source::Seed => self.seed_load += 1,
                Source::Leecher(u) => self.uploader_load[u as usize] += 1,
            }
        }
        for f in &mut self.flows {
            f.rate = match f.from {
                Source::Seed => self.cfg.seed_capacity / self.seed_load as f64,
                Source::Leecher(u) => self.peers[u as usize].capacity / self.uploader_load[u as usize] as f64,
            };
        }
        for f in &self.flows {
            if let Source::Leecher(u) = f.from {
                self.uploader_load[u as usize] = 0;
            }
        }
        if let Some(cap) = self.cfg.download_cap {
            for f in &self.flows {
                self.inbound[f.to as usize] += f.rate;
            }
            for f in &mut self.flows {
                let total = self.inbound[f.to as usize];
                if total > cap {
                    f.rate *= cap / total;
                }
            }
            for f in &self.flows {
                self.inbound[f.to as usize] = 0.0;
            }
        }
    }

    /// Audits the current allocation and piece bookkeeping.
    pub fn check_invariants(&self) -> Result<()> {
        let mut out = vec![0.0; self.peers.len()];
        let mut inbound = vec![0.0; self.peers.len()];
        let mut seed_out = 0.0;
        for f in &self.flows {
            if f.rate < 0.0 || f.remaining < -COMPLETION_EPS * self.cfg.piece_size || f.remaining > self.cfg.piece_size
            {
                return Err(Error::Simulation(format!("flow out of range: {f:?}")));
            }
            match f.from {
                Source::Seed => seed_out += f.rate,
                Source::Leecher(u) => out[u as usize] += f.rate,
            }
            inbound[f.to as usize] += f.rate;
            let to = &self.peers[f.to as usize];
            if to.bitmap.contains(f.piece) {
                return Err(Error::Simulation(format!("flow delivers owned piece: {f:?}")));
            }
            if !to.inflight.contains(f.piece) {
                return Err(Error::Simulation(format!("flow piece not marked in flight: {f:?}")));
            }
            if let Source::Leecher(u) = f.from {
                if !self.peers[u as usize].bitmap.contains(f.piece) {
                    return Err(Error::Simulation(format!("uploader lacks piece: {f:?}")));
                }
            }
        }
        if seed_out > self.cfg.seed_capacity + CAPACITY_TOLERANCE {
            return Err(Error::Simulation(format!("seed uploads {seed_out} kB/s")));
        }
        for (id, peer) in self.peers.iter().enumerate() {
            if out[id] > peer.capacity + CAPACITY_TOLERANCE {
                return Err(Error::Simulation(format!("leecher {id} uploads {} kB/s", out[id])));
            }
            if let Some(cap) = self.cfg.download_cap {
                if inbound[id] > cap + CAPACITY_TOLERANCE {
                    return Err(Error::Simulation(format!("leecher {id} downloads {} kB/s", inbound[id])));
                }
            }
            let flows_in = self.flows.iter().filter(|f| f.to == id as u32).count() as u32;
            if flows_in != peer.inflight.count() {
                return Err(Error::Simulation(format!("leecher {id} in-flight set out of sync")));
            }
        }
        let mut pairs: Vec<(u32, u32)> = self.flows.iter().map(|f| (f.to, f.piece)).collect();
        pairs.sort_unstable();
        if pairs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Simulation("two flows deliver the same piece to one leecher".into()));
        }
        Ok(())
    }
}

/// Runs `config` to completion.
pub fn run(config: ScenarioConfig) -> Result<SimRun> {
    Simulator::new(config)?.run_to_end()
}

/// Swarm state and bitmaps at time `at`, replaying `config` from the start.
pub fn snapshot_state(config: ScenarioConfig, at: f64) -> Result<(SwarmState, Vec<Bitmap>)> {
    let mut sim = Simulator::new(config)?;
    sim.advance_to(at)?;
    sim.swarm_state()
}
