//! Water-filling reference for the sequential allocation.
//!
//! Every round grants at most `step` kB/s to each flow that is neither capped
//! by its interest bound nor starved by its uploader's capacity. Bounds are
//! re-derived from the current matrix before every round, so flows towards
//! older peers keep growing while the rates feeding them grow.

use super::{RateMatrix, SwarmState};
use crate::error::{Error, Result};

const GRANT_EPS: f64 = 1e-12;

/// `None` stands for an unbounded link.
fn bounds(state: &SwarmState, u: &[Vec<f64>], seed_share: f64) -> Vec<Vec<Option<f64>>> {
    let b = &state.piece_counts;
    let n = b.len();
    let mut g = vec![vec![Some(0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            g[i][j] = if b[i] > b[j] {
                None
            } else {
                let mut total = seed_share;
                for k in 0..n {
                    if b[k] > b[j] {
                        total += u[k][i];
                    }
                }
                Some(total)
            };
        }
    }
    g
}

pub fn progressive_fill_oracle(state: &SwarmState, step: f64) -> Result<RateMatrix> {
    state.validate()?;
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let n = state.num_leechers();
    let seed_share = state.seed_share();
    let max_capacity = state.leecher_capacities.iter().cloned().fold(0.0, f64::max);
    let max_rounds = (10.0 * max_capacity / step).ceil() as usize + 100_000;

    let mut u = vec![vec![0.0; n]; n];
    let mut active = Vec::with_capacity(n);
    for _round in 0..max_rounds {
        let g = bounds(state, &u, seed_share);
        let mut granted = 0.0;
        for i in 0..n {
            let used: f64 = u[i].iter().sum();
            let remaining = state.leecher_capacities[i] - used;
            if remaining <= GRANT_EPS {
                continue;
            }
            active.clear();
            active.extend((0..n).filter(|&j| {
                j != i
                    && match g[i][j] {
                        None => true,
                        Some(limit) => u[i][j] < limit - GRANT_EPS,
                    }
            }));
            if active.is_empty() {
                continue;
            }
            let per_flow = step.min(remaining / active.len() as f64);
            for &j in &active {
                let headroom = g[i][j].map_or(f64::INFINITY, |limit| limit - u[i][j]);
                let delta = per_flow.min(headroom);
                u[i][j] += delta;
                granted += delta;
            }
        }
        if granted <= GRANT_EPS {
            let mut rates = RateMatrix {
                u,
                seed_share,
                d: Vec::new(),
            };
            rates.refresh_downloads();
            return Ok(rates);
        }
    }
    Err(Error::OracleDiverged(max_rounds))
}

#[cfg(test)]
mod tests {
    use super::super::compute_rates;
    use super::*;

    #[test]
    fn worked_example_within_hundredth() {
        let s = SwarmState::homogeneous(vec![30, 20, 10], 60.0, 96.0).unwrap();
        let oracle = progressive_fill_oracle(&s, 0.001).unwrap();
        let exact = compute_rates(&s).unwrap();
        assert!(oracle.max_abs_diff(&exact) <= 0.01, "gap {}", oracle.max_abs_diff(&exact));
    }

    #[test]
    fn synchronized_swarm_matches_exactly() {
        let s = SwarmState::homogeneous(vec![9; 5], 64.0, 64.0).unwrap();
        let oracle = progressive_fill_oracle(&s, 0.01).unwrap();
        let exact = compute_rates(&s).unwrap();
        assert!(oracle.max_abs_diff(&exact) < 1e-9);
    }

    #[test]
    fn rejects_bad_step() {
        let s = SwarmState::homogeneous(vec![1], 1.0, 1.0).unwrap();
        assert!(progressive_fill_oracle(&s, 0.0).is_err());
        assert!(progressive_fill_oracle(&s, -1.0).is_err());
        assert!(progressive_fill_oracle(&s, f64::NAN).is_err());
    }
}
