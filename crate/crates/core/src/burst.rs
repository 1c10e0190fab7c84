//! Bounds on how many leechers leave together with the leecher that opened
//! a busy period.
//!
//! The opener downloads at the seed rate for `T = S / c_s` seconds. Using a
//! high percentile of the number of arrivals during `T`, the fluid model gives
//! the slowest and fastest possible catch-up rates; everyone arriving early
//! enough to catch up at those rates departs in the same burst.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rate_model::{compute_rates, SwarmState};

pub const DEFAULT_PERCENTILE: f64 = 0.99;

/// Beyond this mean the summation loop is out of the intended scale.
pub const MAX_POISSON_MEAN: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstScenario {
    /// Leecher arrivals per second.
    pub arrival_rate: f64,
    pub seed_capacity: f64,
    pub leecher_capacity: f64,
    /// Content size in kB.
    pub content_size: f64,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
}

fn default_percentile() -> f64 {
    DEFAULT_PERCENTILE
}

impl BurstScenario {
    pub fn new(arrival_rate: f64, seed_capacity: f64, leecher_capacity: f64, content_size: f64) -> Self {
        Self {
            arrival_rate,
            seed_capacity,
            leecher_capacity,
            content_size,
            percentile: DEFAULT_PERCENTILE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.arrival_rate) {
            return Err(Error::InvalidArgument(format!("arrival rate must be positive, got {}", self.arrival_rate)));
        }
        if !positive(self.seed_capacity) {
            return Err(Error::InvalidArgument(format!("seed capacity must be positive, got {}", self.seed_capacity)));
        }
        if !(self.leecher_capacity.is_finite() && self.leecher_capacity >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "leecher capacity must be non-negative, got {}",
                self.leecher_capacity
            )));
        }
        if !positive(self.content_size) {
            return Err(Error::InvalidArgument(format!("content size must be positive, got {}", self.content_size)));
        }
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(Error::InvalidArgument(format!("percentile must lie in (0, 1), got {}", self.percentile)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstBounds {
    /// Download time of the busy-period opener, seconds.
    pub download_time: f64,
    pub expected_arrivals: f64,
    pub n99: u64,
    /// `None` when no other leecher is expected (`n99 == 0`).
    pub d_min: Option<f64>,
    pub d_max: Option<f64>,
    pub b_min: f64,
    pub b_max: f64,
    pub burst_possible: bool,
}

impl BurstBounds {
    pub fn b_min_ratio(&self) -> f64 {
        self.b_min / self.expected_arrivals
    }

    pub fn b_max_ratio(&self) -> f64 {
        self.b_max / self.expected_arrivals
    }
}

/// Smallest `k` with `P[X <= k] >= p` for `X ~ Poisson(mean)`.
///
/// The pmf is advanced in log space so large means do not underflow the
/// first term; the CDF is accumulated with compensated summation.
pub fn poisson_quantile(mean: f64, p: f64) -> Result<u64> {
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::InvalidArgument(format!("Poisson mean must be positive, got {mean}")));
    }
    if mean > MAX_POISSON_MEAN {
        return Err(Error::InvalidArgument(format!(
            "Poisson mean {mean} exceeds supported maximum {MAX_POISSON_MEAN}"
        )));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("probability must lie in (0, 1), got {p}")));
    }
    let ln_mean = mean.ln();
    let mut ln_pmf = -mean;
    let mut cdf = 0.0_f64;
    let mut carry = 0.0_f64;
    // Past this point the remaining tail mass is far below f64 resolution.
    let cutoff = (mean + 40.0 * mean.sqrt() + 100.0) as u64;
    let mut k: u64 = 0;
    loop {
        let term = ln_pmf.exp();
        let y = term - carry;
        let t = cdf + y;
        carry = (t - cdf) - y;
        cdf = t;
        if cdf >= p || k >= cutoff {
            return Ok(k);
        }
        k += 1;
        ln_pmf += ln_mean - (k as f64).ln();
    }
}

/// Slowest and fastest download rates a late arrival can see when the
/// swarm holds `n99 + 1` leechers.
///
/// The slowest case puts only the opener ahead and everyone else strictly
/// staggered behind it; the fastest case has `n99` leechers synchronized
/// with the opener and a single one behind.
pub fn extreme_rates(n99: u64, seed_capacity: f64, leecher_capacity: f64) -> Result<(f64, f64)> {
    if n99 == 0 {
        return Err(Error::InvalidArgument("extreme rates need at least one arrival".into()));
    }
    let n = n99 as usize + 1;
    let staggered: Vec<u64> = (0..n).map(|i| (n - i) as u64).collect();
    let slow = compute_rates(&SwarmState::homogeneous(staggered, seed_capacity, leecher_capacity)?)?;
    let d_min = slow.d[1..].iter().cloned().fold(f64::INFINITY, f64::min);

    let mut one_behind = vec![2u64; n];
    one_behind[n - 1] = 1;
    let fast = compute_rates(&SwarmState::homogeneous(one_behind, seed_capacity, leecher_capacity)?)?;
    let d_max = fast.d[n - 1];
    Ok((d_min, d_max))
}

pub fn predict_bounds(sc: &BurstScenario) -> Result<BurstBounds> {
    sc.validate()?;
    let download_time = sc.content_size / sc.seed_capacity;
    let expected_arrivals = sc.arrival_rate * download_time;
    let n99 = poisson_quantile(expected_arrivals, sc.percentile)?;
    let burst_possible = sc.leecher_capacity >= sc.seed_capacity * n99 as f64 / (n99 as f64 + 1.0);

    let (d_min, d_max) = if n99 >= 1 {
        let (lo, hi) = extreme_rates(n99, sc.seed_capacity, sc.leecher_capacity)?;
        (Some(lo), Some(hi))
    } else {
        (None, None)
    };

    let arrivals_before = |rate: Option<f64>| match rate {
        Some(d) if burst_possible && d > 0.0 => (sc.arrival_rate * (download_time - sc.content_size / d)).max(0.0),
        _ => 0.0,
    };
    Ok(BurstBounds {
        download_time,
        expected_arrivals,
        n99,
        d_min,
        d_max,
        b_min: arrivals_before(d_min),
        b_max: arrivals_before(d_max),
        burst_possible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Plain pmf-product summation, independent of the log-space loop.
    fn quantile_by_summation(mean: f64, p: f64) -> u64 {
        let mut pmf = (-mean).exp();
        let mut cdf = pmf;
        let mut k = 0;
        while cdf < p {
            k += 1;
            pmf *= mean / k as f64;
            cdf += pmf;
        }
        k
    }

    #[test]
    fn quantiles_match_direct_summation() {
        assert_eq!(quantile_by_summation(4.0, 0.99), 9);
        assert_eq!(quantile_by_summation(16.0 / 3.0, 0.99), 11);
        for &mean in &[0.001, 0.5, 1.0, 2.0, 4.0, 16.0 / 3.0, 7.3, 25.0, 120.0] {
            for &p in &[0.5, 0.9, 0.99, 0.999] {
                assert_eq!(poisson_quantile(mean, p).unwrap(), quantile_by_summation(mean, p), "mean {mean} p {p}");
            }
        }
    }

    #[test]
    fn quantile_edge_cases() {
        assert_eq!(poisson_quantile(4.0, 0.99).unwrap(), 9);
        assert_eq!(poisson_quantile(5.333, 0.99).unwrap(), 11);
        assert_eq!(poisson_quantile(0.001, 0.99).unwrap(), 0);
        assert!(poisson_quantile(2e6, 0.99).is_err());
        assert!(poisson_quantile(0.0, 0.5).is_err());
        assert!(poisson_quantile(1.0, 1.0).is_err());
        // Large means stay finite where exp(-mean) underflows.
        let q = poisson_quantile(5000.0, 0.5).unwrap();
        assert!((4995..=5005).contains(&q), "{q}");
    }

    #[test]
    fn extreme_rates_at_table_points() {
        let (lo, hi) = extreme_rates(9, 64.0, 64.0).unwrap();
        assert_abs_diff_eq!(lo, 640.0 / 9.0, epsilon = 1e-9);
        assert_abs_diff_eq!(hi, 121.6, epsilon = 1e-9);
        let (lo, hi) = extreme_rates(11, 48.0, 64.0).unwrap();
        assert_abs_diff_eq!(lo, 69.818, epsilon = 5e-4);
        assert_abs_diff_eq!(hi, 268.0, epsilon = 1e-9);
        let (lo, hi) = extreme_rates(1, 30.0, 70.0).unwrap();
        assert_eq!(lo, hi);
        assert!(extreme_rates(0, 1.0, 1.0).is_err());
    }

    #[test]
    fn no_burst_with_fast_seed() {
        let b = predict_bounds(&BurstScenario::new(1e-3, 128.0, 64.0, 256_000.0)).unwrap();
        assert!(!b.burst_possible);
        assert_eq!(b.b_min, 0.0);
        assert_eq!(b.b_max, 0.0);
        assert_eq!(b.download_time, 2000.0);
    }

    #[test]
    fn rejects_invalid_scenarios() {
        let mut sc = BurstScenario::new(1e-3, 64.0, 64.0, 256_000.0);
        sc.percentile = 1.0;
        assert!(predict_bounds(&sc).is_err());
        assert!(predict_bounds(&BurstScenario::new(0.0, 64.0, 64.0, 1.0)).is_err());
        assert!(predict_bounds(&BurstScenario::new(1.0, 0.0, 64.0, 1.0)).is_err());
        assert!(predict_bounds(&BurstScenario::new(1.0, 1.0, -1.0, 1.0)).is_err());
        assert!(predict_bounds(&BurstScenario::new(1.0, 1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn tiny_arrival_rate_has_no_partner() {
        let b = predict_bounds(&BurstScenario::new(1e-9, 64.0, 64.0, 256_000.0)).unwrap();
        assert_eq!(b.n99, 0);
        assert_eq!(b.d_min, None);
        assert_eq!((b.b_min, b.b_max), (0.0, 0.0));
    }
}
