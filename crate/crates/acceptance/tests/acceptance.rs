//! Acceptance gates. Runs every criterion, prints one PASS/FAIL line per
//! criterion (with detail lines above it) and exits non-zero if any failed.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swarmsync::batch::{run_batch, BatchOptions};
use swarmsync::burst::{predict_bounds, BurstScenario};
use swarmsync::metrics::{self, SyncRule};
use swarmsync::rate_model::{
    compute_interest_bounds, compute_rates, max_download_rate, progressive_fill_oracle, InterestBound, SwarmState,
};
use swarmsync::sim::{self, EventKind, PeerStatus, ScenarioConfig, SeedMode, Simulator};
use swarmsync::validation::{validate, Protocol};

type Outcome = Result<Vec<String>, Vec<String>>;

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    ScenarioConfig::from_json(&text).unwrap()
}

fn verdict(ok: bool, lines: Vec<String>) -> Outcome {
    if ok {
        Ok(lines)
    } else {
        Err(lines)
    }
}

fn worked_example() -> Outcome {
    let state = SwarmState::homogeneous(vec![300, 200, 100], 60.0, 96.0).unwrap();
    let d = compute_rates(&state).unwrap().d;
    let want = [60.0, 136.0, 144.0];
    verdict(d == want, vec![format!("d = {d:?}, expected {want:?} exactly")])
}

fn closed_form_max_rate() -> Outcome {
    let formula = max_download_rate(5, 64.0, 64.0).unwrap();
    let state = SwarmState::homogeneous(vec![500, 500, 500, 500, 100], 64.0, 64.0).unwrap();
    let allocated = compute_rates(&state).unwrap().d[4];
    let literal = formula == 140.8;
    let consistent = (formula - allocated).abs() <= 1e-9;
    verdict(
        literal && consistent,
        vec![
            format!("max_download_rate(5, 64, 64) = {formula}, expected 140.8: {}", pass_word(literal)),
            format!("allocation for the lagging leecher = {allocated}, |diff| = {:.3e}: {}", (formula - allocated).abs(), pass_word(consistent)),
        ],
    )
}

fn burst_table() -> Outcome {
    let rows = [(48.0, 5.333, 1.667, 4.378), (64.0, 4.000, 0.400, 1.895)];
    let mut ok = true;
    let mut lines = Vec::new();
    for (cs, en, bmin, bmax) in rows {
        let b = predict_bounds(&BurstScenario::new(1.0 / 1000.0, cs, 64.0, 256_000.0)).unwrap();
        let row_ok = (b.expected_arrivals - en).abs() <= 0.005 && (b.b_min - bmin).abs() <= 0.005 && (b.b_max - bmax).abs() <= 0.005;
        ok &= row_ok;
        lines.push(format!(
            "c_s={cs}: E[N]={:.4} B_min={:.4} B_max={:.4} (expected {en}/{bmin}/{bmax}) {}",
            b.expected_arrivals,
            b.b_min,
            b.b_max,
            pass_word(row_ok)
        ));
    }
    verdict(ok, lines)
}

fn model_validation() -> Outcome {
    let t = Instant::now();
    let report = validate(&Protocol::reference()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = report.worst().unwrap();
    let ok = report.passes(0.10) && secs < 30.0;
    verdict(
        ok,
        vec![format!(
            "{} points, max relative error {:.4} at point {} (leecher {}, [{:.1}, {:.1}] s), {:.1} s wall",
            report.points.len(),
            report.max_rel_error,
            worst.label,
            worst.leecher,
            worst.start,
            worst.end,
            secs
        )],
    )
}

fn burst_reproduction() -> Outcome {
    let run = sim::run(scenario("staggered_burst.json")).unwrap();
    let deps: Vec<f64> = run.leechers.iter().filter_map(|l| l.departure).collect();
    if deps.len() != 5 {
        return Err(vec![format!("{} of 5 leechers departed", deps.len())]);
    }
    let first = run.leechers[0].download_time().unwrap();
    let window = deps.iter().cloned().fold(f64::MIN, f64::max) - deps.iter().cloned().fold(f64::MAX, f64::min);
    let window_ok = window <= 0.05 * first;
    let time_ok = (first - 4000.0).abs() <= 0.02 * 4000.0;
    verdict(
        window_ok && time_ok,
        vec![
            format!("departures {deps:?}"),
            format!("departure window {window:.2} s vs 5% of {first:.2} s: {}", pass_word(window_ok)),
            format!("first download time {first:.2} s vs 4000 s +/- 2%: {}", pass_word(time_ok)),
        ],
    )
}

/// Piece counts drawn from a few levels so that ties are common.
fn random_state(rng: &mut ChaCha8Rng, max_n: usize) -> SwarmState {
    let n = rng.random_range(1..=max_n);
    let levels: Vec<u64> = (0..rng.random_range(1..=n)).map(|_| rng.random_range(0..1000)).collect();
    let b = (0..n).map(|_| levels[rng.random_range(0..levels.len())]).collect();
    let cs = rng.random_range(0.0..128.0);
    let cl = (0..n).map(|_| rng.random_range(8.0..128.0)).collect();
    SwarmState::new(b, cs, cl, rng.random_bool(0.85)).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    let mut ties = 0;
    for _ in 0..100 {
        let s = random_state(&mut rng, 8);
        let mut sorted = s.piece_counts.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() < s.piece_counts.len() {
            ties += 1;
        }
        let exact = compute_rates(&s).unwrap();
        let fill = progressive_fill_oracle(&s, 0.001).unwrap();
        worst = worst.max(exact.max_abs_diff(&fill));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst <= 0.05 && secs < 60.0,
        vec![format!("100 states ({ties} with ties), max entry-wise gap {worst:.5} kB/s, {secs:.1} s wall")],
    )
}

const SYNC_REFERENCE: [(f64, &str, f64, f64); 3] = [
    (48.0, "poisson_cs48.json", 4.45, 2.40),
    (64.0, "poisson_cs64.json", 3.86, 1.44),
    (96.0, "poisson_cs96.json", 3.57, 0.87),
];

fn stochastic() -> Outcome {
    let t = Instant::now();
    let opts = BatchOptions {
        replications: 10,
        sync_rule: SyncRule::default(),
        ..BatchOptions::default()
    };
    let mut lines = Vec::new();
    let mut ok_a = true;
    let mut ok_b = true;
    let mut ok_c = true;
    for (cs, file, n_ref, k_ref) in SYNC_REFERENCE {
        let cfg = scenario(file);
        assert_eq!(cfg.seed_capacity, cs);
        assert!(cfg.sim_end == 400_000.0 && cfg.warmup == 100_000.0);
        let s = run_batch(&cfg, None, &opts).unwrap();
        let n = s.avg_leechers.unwrap();
        let k = s.avg_synchronized.unwrap();
        let a = (n - n_ref).abs() <= 0.2 * n_ref && (k - k_ref).abs() <= 0.2 * k_ref;
        ok_a &= a;
        lines.push(format!(
            "(a) c_s={cs}: avg leechers {n:.3} (ref {n_ref}, {:+.1}%), synchronized {k:.3} (ref {k_ref}, {:+.1}%): {}",
            100.0 * (n / n_ref - 1.0),
            100.0 * (k / k_ref - 1.0),
            pass_word(a)
        ));
        if cs == 64.0 {
            let f = s.interdeparture.fraction_below(10.0);
            ok_b = f >= 0.25;
            lines.push(format!(
                "(b) c_s=64: {:.1}% of {} inter-departure gaps below 10 s (need >= 25%): {}",
                100.0 * f,
                s.interdeparture.len(),
                pass_word(ok_b)
            ));
        }
        let means: Vec<f64> = (0..3)
            .map(|i| s.arrival_order.iter().find(|o| o.index == i).map_or(f64::NAN, |o| o.mean))
            .collect();
        let c = match cs as u32 {
            48 => Some(means[0] > means[1] && means[1] > means[2]),
            96 => Some(means[0] < means[1] && means[1] < means[2]),
            _ => None,
        };
        if let Some(c) = c {
            ok_c &= c;
        }
        lines.push(format!(
            "(c) c_s={cs}: mean download time by occupancy index 0..2 = {:.0} / {:.0} / {:.0}{}",
            means[0],
            means[1],
            means[2],
            c.map_or(String::new(), |c| format!(": {}", pass_word(c)))
        ));
    }
    lines.push(format!("{:.1} s wall", t.elapsed().as_secs_f64()));
    verdict(ok_a && ok_b && ok_c, lines)
}

fn rate_invariants(s: &SwarmState) -> Result<(), String> {
    let r = compute_rates(s).map_err(|e| e.to_string())?;
    let g = compute_interest_bounds(s, &r).map_err(|e| e.to_string())?;
    let n = s.num_leechers();
    for i in 0..n {
        if r.row_sum(i) > s.leecher_capacities[i] + 1e-9 {
            return Err(format!("row {i} exceeds capacity in {s:?}"));
        }
        for j in 0..n {
            if i == j {
                continue;
            }
            if !g.get(i, j).admits(r.u[i][j], 1e-9) {
                return Err(format!("u[{i}][{j}] exceeds its interest bound in {s:?}"));
            }
            let unsaturated = match g.get(i, j) {
                InterestBound::Unbounded => true,
                InterestBound::Finite(x) => r.u[i][j] < x - 1e-9,
            };
            if unsaturated {
                for k in (0..n).filter(|&k| k != i) {
                    if r.u[i][j] < r.u[i][k] - 1e-9 {
                        return Err(format!("max-min violated in row {i} ({j} vs {k}) in {s:?}"));
                    }
                }
            }
        }
        if r.d[i] != r.seed_share + r.column_sum(i) {
            return Err(format!("d[{i}] differs from seed share plus column sum in {s:?}"));
        }
    }
    let mut without = s.clone();
    without.seed_present = false;
    let mut zero = s.clone();
    zero.seed_present = true;
    zero.seed_capacity = 0.0;
    let (a, b) = (compute_rates(&without).unwrap(), compute_rates(&zero).unwrap());
    if a.max_abs_diff(&b) > 1e-9 {
        return Err(format!("seed-absent state differs from zero seed capacity in {s:?}"));
    }
    Ok(())
}

fn two_level_and_closed_form(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.random_range(2..=8usize);
    let c = rng.random_range(8.0..128.0);
    let hi = rng.random_range(1..=999u64);
    let lo = rng.random_range(0..hi);
    let b: Vec<u64> = (0..n).map(|i| if i == 0 || rng.random_bool(0.5) { hi } else { lo }).collect();
    let r = compute_rates(&SwarmState::homogeneous(b.clone(), c, c).unwrap()).unwrap();
    let low: Vec<f64> = b.iter().zip(&r.d).filter(|(x, _)| **x == lo).map(|(_, d)| *d).collect();
    for (x, d) in b.iter().zip(&r.d) {
        if *x == hi && (d - c).abs() > 1e-9 {
            return Err(format!("max-count leecher at {d}, expected {c}, b={b:?}"));
        }
    }
    if low.iter().any(|d| (d - low[0]).abs() > 1e-9 || *d < c - 1e-9) {
        return Err(format!("lower-count leechers not at a common rate >= c_s: {low:?}, b={b:?}"));
    }
    let (cs, cl) = (rng.random_range(1.0..128.0), rng.random_range(0.0..128.0));
    let mut b = vec![500u64; n];
    b[n - 1] = 100;
    let d = compute_rates(&SwarmState::homogeneous(b, cs, cl).unwrap()).unwrap().d[n - 1];
    let f = max_download_rate(n, cs, cl).unwrap();
    if (d - f).abs() > 1e-9 {
        return Err(format!("closed form {f} vs allocation {d} at n={n} c_s={cs} c_l={cl}"));
    }
    Ok(())
}

fn sim_invariants(cfg: ScenarioConfig) -> Result<usize, String> {
    let size = cfg.num_pieces as f64 * cfg.piece_size;
    let mut sim = Simulator::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut owned: Vec<u32> = Vec::new();
    let mut checked = 0;
    while sim.step().map_err(|e| e.to_string())? {
        sim.check_invariants().map_err(|e| format!("t={}: {e}", sim.now()))?;
        for id in 0..owned.len().max(sim.trace().of_kind(EventKind::Arrival).count()) as u32 {
            let c = sim.bitmap(id).map_or(0, |b| b.count());
            if (id as usize) >= owned.len() {
                owned.push(c);
            }
            if c < owned[id as usize] && sim.status(id) != Some(PeerStatus::Departed) {
                return Err(format!("bitmap of {id} shrank at t={}", sim.now()));
            }
            owned[id as usize] = c;
        }
        checked += 1;
    }
    let trace = sim.into_run().trace;
    let mut seen = std::collections::HashSet::new();
    for r in trace.of_kind(EventKind::PieceComplete) {
        if let swarmsync::sim::Detail::Piece { piece, .. } = r.detail {
            if !seen.insert((r.leecher(), piece)) {
                return Err(format!("piece {piece} delivered twice to {:?}", r.leecher()));
            }
        }
    }
    for r in trace.of_kind(EventKind::DownloadComplete) {
        match r.detail {
            swarmsync::sim::Detail::Bytes(b) if b == size => {}
            other => return Err(format!("leecher {:?} completed with {other:?}, expected {size}", r.leecher())),
        }
    }
    let again = sim::run(cfg.clone()).map_err(|e| e.to_string())?;
    if again.trace != trace {
        return Err("rerun with the same seed produced a different trace".into());
    }
    Ok(checked)
}

fn invariant_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut lines = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, r: Result<String, String>| {
        match r {
            Ok(msg) => lines.push(format!("{name}: {msg}")),
            Err(e) => {
                ok = false;
                lines.push(format!("{name}: FAIL {e}"));
            }
        }
    };
    let rates = (0..500).try_for_each(|_| rate_invariants(&random_state(&mut rng, 8)));
    check("rate model (capacity, interest bounds, max-min, column sums, seed absence) on 500 states", rates.map(|_| "ok".into()));
    let structural = (0..200).try_for_each(|_| two_level_and_closed_form(&mut rng));
    check("two-level partition and closed form on 200 states", structural.map(|_| "ok".into()));

    let mut small = ScenarioConfig::poisson(40, 64.0, 64.0, 1.0 / 80.0, 3000.0);
    small.rng_seed = 11;
    small.snapshot_interval = Some(50.0);
    let mut onoff = small.clone();
    onoff.seed_mode = SeedMode::OnOff { mean_on: 100.0, availability: 0.5 };
    onoff.seeding_time = 60.0;
    onoff.download_cap = Some(70.0);
    let mut burst = scenario("staggered_burst.json");
    burst.record_pieces = true;
    for (name, cfg) in [("poisson", small), ("on-off seed, seeding, download cap", onoff), ("staggered burst", burst)] {
        check(
            &format!("simulator ({name}): capacity, no duplicates, monotone bitmaps, conservation, determinism"),
            sim_invariants(cfg).map(|steps| format!("ok over {steps} events")),
        );
    }

    let run = sim::run(scenario("staggered_fifo.json")).unwrap();
    let bps = metrics::busy_periods(&run.trace, 0.0).unwrap();
    let members: usize = bps.iter().map(|b| b.members.len()).sum();
    let dl_ok = metrics::download_times(&run.trace, 0.0)
        .unwrap()
        .iter()
        .zip(&run.leechers)
        .all(|(t, l)| *t == l.departure.unwrap() - l.arrival);
    check(
        "metrics: busy-period members sum to arrivals, download time = departure - arrival",
        if members == run.leechers.len() && dl_ok { Ok("ok".into()) } else { Err(format!("{members} members, times match: {dl_ok}")) },
    );
    verdict(ok, lines)
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("worked example exactness", worked_example),
        ("closed-form maximum download rate", closed_form_max_rate),
        ("burst-size bounds table", burst_table),
        ("model vs simulation validation", model_validation),
        ("staggered-arrival burst reproduction", burst_reproduction),
        ("oracle equivalence", oracle_equivalence),
        ("stochastic characterization", stochastic),
        ("invariant suite", invariant_suite),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let (ok, lines) = match f() {
            Ok(l) => (true, l),
            Err(l) => (false, l),
        };
        for l in lines {
            println!("    {l}");
        }
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
