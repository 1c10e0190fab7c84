use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PIECE_SIZE: f64 = 256.0;

/// Declarative description of one simulation run. Times in seconds, rates in
/// kB/s, sizes in kB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub num_pieces: u32,
    #[serde(default = "default_piece_size")]
    pub piece_size: f64,
    pub seed_capacity: f64,
    pub leecher_capacity: CapacitySpec,
    /// Cap on each leecher's aggregate inbound rate; `None` is unlimited.
    #[serde(default)]
    pub download_cap: Option<f64>,
    pub arrivals: ArrivalProcess,
    #[serde(default)]
    pub seed_mode: SeedMode,
    #[serde(default)]
    pub piece_selection: PieceSelection,
    /// How long a leecher keeps uploading after completing its download.
    #[serde(default)]
    pub seeding_time: f64,
    pub sim_end: f64,
    /// Leading interval the metrics stage ignores.
    #[serde(default)]
    pub warmup: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Cadence of bitmap snapshots; `None` disables periodic snapshots.
    #[serde(default)]
    pub snapshot_interval: Option<f64>,
    /// Extra instants at which a snapshot is taken.
    #[serde(default)]
    pub probe_times: Vec<f64>,
    /// Whether snapshots carry full bitmaps (needed by synchronization metrics).
    #[serde(default = "default_true")]
    pub snapshot_bitmaps: bool,
    /// Whether every piece completion is written to the trace.
    #[serde(default = "default_true")]
    pub record_pieces: bool,
}

fn default_name() -> String {
    "scenario".to_string()
}

fn default_piece_size() -> f64 {
    DEFAULT_PIECE_SIZE
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacitySpec {
    Constant(f64),
    /// Drawn per leecher from `[center (1 - epsilon), center (1 + epsilon)]`.
    Uniform { center: f64, epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    Explicit(Vec<f64>),
    /// Arrivals until `horizon` (defaults to `sim_end`).
    Poisson {
        rate: f64,
        #[serde(default)]
        horizon: Option<f64>,
    },
}

/// How a downloader picks the next piece on an idle link.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PieceSelection {
    /// Fewest replicas in the swarm, ties broken uniformly at random.
    #[default]
    RarestFirst,
    /// Uniformly at random among the eligible pieces.
    Random,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    #[default]
    AlwaysOn,
    /// Exponential ON and OFF periods; the OFF mean follows from the target
    /// availability `mean_on / (mean_on + mean_off)`.
    OnOff { mean_on: f64, availability: f64 },
}

impl SeedMode {
    pub fn mean_off(&self) -> Option<f64> {
        match *self {
            SeedMode::AlwaysOn => None,
            SeedMode::OnOff { mean_on, availability } => Some(mean_on * (1.0 - availability) / availability),
        }
    }
}

impl ScenarioConfig {
    /// Baseline: one always-on seed, constant leecher capacity, explicit arrivals.
    pub fn explicit(
        num_pieces: u32,
        piece_size: f64,
        seed_capacity: f64,
        leecher_capacity: f64,
        arrivals: Vec<f64>,
        sim_end: f64,
    ) -> Self {
        Self {
            name: default_name(),
            num_pieces,
            piece_size,
            seed_capacity,
            leecher_capacity: CapacitySpec::Constant(leecher_capacity),
            download_cap: None,
            arrivals: ArrivalProcess::Explicit(arrivals),
            seed_mode: SeedMode::AlwaysOn,
            piece_selection: PieceSelection::RarestFirst,
            seeding_time: 0.0,
            sim_end,
            warmup: 0.0,
            rng_seed: 0,
            snapshot_interval: None,
            probe_times: Vec::new(),
            snapshot_bitmaps: true,
            record_pieces: true,
        }
    }

    /// Poisson arrivals at `rate` until `sim_end`.
    pub fn poisson(num_pieces: u32, seed_capacity: f64, leecher_capacity: f64, rate: f64, sim_end: f64) -> Self {
        Self {
            arrivals: ArrivalProcess::Poisson { rate, horizon: None },
            ..Self::explicit(num_pieces, DEFAULT_PIECE_SIZE, seed_capacity, leecher_capacity, Vec::new(), sim_end)
        }
    }

    pub fn content_size(&self) -> f64 {
        self.num_pieces as f64 * self.piece_size
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if self.num_pieces == 0 {
            return bad("num_pieces must be at least 1".into());
        }
        if !(self.piece_size.is_finite() && self.piece_size > 0.0) {
            return bad(format!("piece_size must be positive, got {}", self.piece_size));
        }
        if !non_negative(self.seed_capacity) {
            return bad(format!("seed_capacity must be non-negative, got {}", self.seed_capacity));
        }
        match self.leecher_capacity {
            CapacitySpec::Constant(c) if !non_negative(c) => {
                return bad(format!("leecher capacity must be non-negative, got {c}"));
            }
            CapacitySpec::Uniform { center, epsilon } => {
                if !non_negative(center) {
                    return bad(format!("capacity center must be non-negative, got {center}"));
                }
                if !(0.0..1.0).contains(&epsilon) {
                    return bad(format!("capacity epsilon must lie in [0, 1), got {epsilon}"));
                }
            }
            _ => {}
        }
        if let Some(cap) = self.download_cap {
            if !(cap.is_finite() && cap > 0.0) {
                return bad(format!("download_cap must be positive, got {cap}"));
            }
        }
        match &self.arrivals {
            ArrivalProcess::Explicit(times) => {
                if times.iter().any(|t| !non_negative(*t)) {
                    return bad("arrival times must be finite and non-negative".into());
                }
                if times.windows(2).any(|w| w[1] < w[0]) {
                    return bad("explicit arrival times must be sorted".into());
                }
            }
            ArrivalProcess::Poisson { rate, horizon } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return bad(format!("Poisson rate must be positive, got {rate}"));
                }
                if let Some(h) = horizon {
                    if !non_negative(*h) {
                        return bad(format!("Poisson horizon must be non-negative, got {h}"));
                    }
                }
            }
        }
        if let SeedMode::OnOff { mean_on, availability } = self.seed_mode {
            if !(mean_on.is_finite() && mean_on > 0.0) {
                return bad(format!("mean ON duration must be positive, got {mean_on}"));
            }
            if !(availability > 0.0 && availability <= 1.0) {
                return bad(format!("seed availability must lie in (0, 1], got {availability}"));
            }
        }
        if !non_negative(self.seeding_time) {
            return bad(format!("seeding_time must be non-negative, got {}", self.seeding_time));
        }
        if !(self.sim_end.is_finite() && self.sim_end > 0.0) {
            return bad(format!("sim_end must be positive, got {}", self.sim_end));
        }
        if !non_negative(self.warmup) || self.warmup >= self.sim_end {
            return bad(format!("warmup must lie in [0, sim_end), got {}", self.warmup));
        }
        if let Some(dt) = self.snapshot_interval {
            if !(dt.is_finite() && dt > 0.0) {
                return bad(format!("snapshot_interval must be positive, got {dt}"));
            }
        }
        if self.probe_times.iter().any(|t| !non_negative(*t)) {
            return bad("probe times must be finite and non-negative".into());
        }
        Ok(())
    }
}
