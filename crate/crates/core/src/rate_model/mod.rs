//! Instantaneous upload/download rates of an unpopular swarm.
//!
//! Leechers are described only by how many pieces they own. A leecher with
//! more pieces than a neighbor always has something the neighbor wants, so
//! that link is limited only by capacity. A leecher with at most as many
//! pieces can only forward what it is itself receiving from the seed and
//! from peers strictly ahead of the neighbor. Each uploader then splits its
//! capacity by progressive filling over those per-target bounds.
//!
//! Rates are in kB/s throughout.

mod oracle;

pub use oracle::progressive_fill_oracle;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used when comparing rates.
pub const RATE_TOLERANCE: f64 = 1e-9;

/// Snapshot of a swarm as seen by the fluid model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwarmState {
    /// Pieces owned by each leecher.
    pub piece_counts: Vec<u64>,
    pub seed_capacity: f64,
    pub leecher_capacities: Vec<f64>,
    #[serde(default = "default_true")]
    pub seed_present: bool,
}

fn default_true() -> bool {
    true
}

impl SwarmState {
    pub fn new(
        piece_counts: Vec<u64>,
        seed_capacity: f64,
        leecher_capacities: Vec<f64>,
        seed_present: bool,
    ) -> Result<Self> {
        let state = Self {
            piece_counts,
            seed_capacity,
            leecher_capacities,
            seed_present,
        };
        state.validate()?;
        Ok(state)
    }

    /// All leechers share one upload capacity.
    pub fn homogeneous(piece_counts: Vec<u64>, seed_capacity: f64, leecher_capacity: f64) -> Result<Self> {
        let n = piece_counts.len();
        Self::new(piece_counts, seed_capacity, vec![leecher_capacity; n], true)
    }

    pub fn num_leechers(&self) -> usize {
        self.piece_counts.len()
    }

    /// Rate at which each leecher downloads from the seed.
    pub fn seed_share(&self) -> f64 {
        if self.seed_present && !self.piece_counts.is_empty() {
            self.seed_capacity / self.piece_counts.len() as f64
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.piece_counts.len();
        if n == 0 {
            return Err(Error::InvalidState("swarm must contain at least one leecher".into()));
        }
        if self.leecher_capacities.len() != n {
            return Err(Error::InvalidState(format!(
                "{} piece counts but {} leecher capacities",
                n,
                self.leecher_capacities.len()
            )));
        }
        if !(self.seed_capacity.is_finite() && self.seed_capacity >= 0.0) {
            return Err(Error::InvalidState(format!(
                "seed capacity must be finite and non-negative, got {}",
                self.seed_capacity
            )));
        }
        if let Some((i, c)) = self
            .leecher_capacities
            .iter()
            .enumerate()
            .find(|(_, c)| !(c.is_finite() && **c >= 0.0))
        {
            return Err(Error::InvalidState(format!(
                "capacity of leecher {i} must be finite and non-negative, got {c}"
            )));
        }
        Ok(())
    }

    /// Leecher indices grouped by piece count, most pieces first.
    pub(crate) fn classes(&self) -> Vec<Vec<usize>> {
        let mut by_count: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, &b) in self.piece_counts.iter().enumerate() {
            by_count.entry(b).or_default().push(i);
        }
        by_count.into_values().rev().collect()
    }
}

/// Upload rate matrix and the resulting download rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    /// `u[i][j]` is the rate from leecher `i` to leecher `j`.
    pub u: Vec<Vec<f64>>,
    pub seed_share: f64,
    pub d: Vec<f64>,
}

impl RateMatrix {
    pub fn zeros(n: usize, seed_share: f64) -> Self {
        Self {
            u: vec![vec![0.0; n]; n],
            seed_share,
            d: vec![seed_share; n],
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.u[i].iter().sum()
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        self.u.iter().map(|row| row[j]).sum()
    }

    /// Recomputes `d` from the seed share and the column sums of `u`.
    pub fn refresh_downloads(&mut self) {
        self.d = (0..self.u.len())
            .map(|j| self.seed_share + self.column_sum(j))
            .collect();
    }

    /// Largest absolute entry-wise difference in `u` and `d`.
    pub fn max_abs_diff(&self, other: &RateMatrix) -> f64 {
        let mut gap: f64 = 0.0;
        for (ra, rb) in self.u.iter().zip(&other.u) {
            for (a, b) in ra.iter().zip(rb) {
                gap = gap.max((a - b).abs());
            }
        }
        for (a, b) in self.d.iter().zip(&other.d) {
            gap = gap.max((a - b).abs());
        }
        gap
    }
}

/// Upper bound on the rate one leecher can sustain towards another.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterestBound {
    Finite(f64),
    /// The uploader holds pieces the target lacks; only capacity limits the link.
    Unbounded,
}

impl InterestBound {
    pub fn is_unbounded(&self) -> bool {
        matches!(self, InterestBound::Unbounded)
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            InterestBound::Finite(v) => Some(v),
            InterestBound::Unbounded => None,
        }
    }

    pub fn clamp(&self, share: f64) -> f64 {
        match *self {
            InterestBound::Finite(v) => v.min(share),
            InterestBound::Unbounded => share,
        }
    }

    /// `rate <= bound + tol`.
    pub fn admits(&self, rate: f64, tol: f64) -> bool {
        match *self {
            InterestBound::Finite(v) => rate <= v + tol,
            InterestBound::Unbounded => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterestBoundMatrix {
    pub g: Vec<Vec<InterestBound>>,
}

impl InterestBoundMatrix {
    pub fn get(&self, i: usize, j: usize) -> InterestBound {
        self.g[i][j]
    }
}

fn bound_for(state: &SwarmState, u: &[Vec<f64>], seed_share: f64, i: usize, j: usize) -> InterestBound {
    let b = &state.piece_counts;
    if b[i] > b[j] {
        return InterestBound::Unbounded;
    }
    let forwarded: f64 = (0..b.len()).filter(|&k| b[k] > b[j]).map(|k| u[k][i]).sum();
    InterestBound::Finite(seed_share + forwarded)
}

/// Interest bounds `g[i][j]` evaluated against the given (possibly partial)
/// upload matrix. Only entries `u[k][i]` with `b[k] > b[j]` are read, so a
/// matrix whose rows are complete for every class older than `j` suffices.
/// The diagonal is `Finite(0)`.
pub fn compute_interest_bounds(state: &SwarmState, u_partial: &RateMatrix) -> Result<InterestBoundMatrix> {
    state.validate()?;
    let n = state.num_leechers();
    if u_partial.u.len() != n || u_partial.u.iter().any(|row| row.len() != n) {
        return Err(Error::InvalidArgument(format!(
            "rate matrix must be {n}x{n} to match the swarm state"
        )));
    }
    let seed_share = state.seed_share();
    let g = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        InterestBound::Finite(0.0)
                    } else {
                        bound_for(state, &u_partial.u, seed_share, i, j)
                    }
                })
                .collect()
        })
        .collect();
    Ok(InterestBoundMatrix { g })
}

/// Per-row progress of the sequential fill: capacity not yet handed out and
/// number of targets still waiting for a share.
struct RowCursor {
    remaining: f64,
    waiting: usize,
}

/// Allocates row `i` to the given target class (all members share one bound).
fn fill_class(
    state: &SwarmState,
    u: &mut [Vec<f64>],
    seed_share: f64,
    cursor: &mut RowCursor,
    i: usize,
    class: &[usize],
) {
    let targets: Vec<usize> = class.iter().copied().filter(|&j| j != i).collect();
    if targets.is_empty() {
        return;
    }
    let share = if cursor.waiting > 0 {
        cursor.remaining / cursor.waiting as f64
    } else {
        0.0
    };
    // Every member of a class has the same piece count, hence the same bound.
    let bound = bound_for(state, u, seed_share, i, targets[0]);
    let rate = bound.clamp(share).max(0.0);
    for &j in &targets {
        u[i][j] = rate;
    }
    cursor.remaining = (cursor.remaining - rate * targets.len() as f64).max(0.0);
    cursor.waiting -= targets.len();
}

/// Max-min fair allocation of every leecher's upload capacity.
///
/// Classes of equal piece count are processed from most to fewest pieces.
/// Within a class, each member first serves targets with at least as many
/// pieces as itself, then the strictly younger classes. Any bound needed for
/// a target only depends on rows of classes strictly ahead of that target,
/// which are complete by then.
pub fn compute_rates(state: &SwarmState) -> Result<RateMatrix> {
    state.validate()?;
    let n = state.num_leechers();
    let seed_share = state.seed_share();
    let classes = state.classes();
    let mut u = vec![vec![0.0; n]; n];
    let mut cursors: Vec<RowCursor> = state
        .leecher_capacities
        .iter()
        .map(|&c| RowCursor {
            remaining: c,
            waiting: n - 1,
        })
        .collect();

    for (rank, class) in classes.iter().enumerate() {
        for &i in class {
            for target_class in &classes[..=rank] {
                fill_class(state, &mut u, seed_share, &mut cursors[i], i, target_class);
            }
        }
        for &i in class {
            for target_class in &classes[rank + 1..] {
                fill_class(state, &mut u, seed_share, &mut cursors[i], i, target_class);
            }
        }
    }

    let mut rates = RateMatrix {
        u,
        seed_share,
        d: Vec::new(),
    };
    rates.refresh_downloads();
    Ok(rates)
}

/// Closed-form download rate of the single leecher behind `n - 1`
/// synchronized ones, the largest rate any leecher can see in a swarm of
/// `n` homogeneous leechers.
pub fn max_download_rate(n: usize, seed_capacity: f64, leecher_capacity: f64) -> Result<f64> {
    if n <= 1 {
        return Err(Error::InvalidArgument(format!(
            "maximum download rate needs at least two leechers, got {n}"
        )));
    }
    let nf = n as f64;
    let cs = seed_capacity;
    let cl = leecher_capacity;
    if cl <= cs * (nf - 1.0) / nf {
        Ok(cl + cs / nf)
    } else {
        Ok((cl - cs) * (nf - 1.0) + 2.0 * cs - cs / nf)
    }
}
