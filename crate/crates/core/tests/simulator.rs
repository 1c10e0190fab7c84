use std::collections::HashSet;
use std::path::PathBuf;

use approx::assert_abs_diff_eq;

use swarmsync::metrics;
use swarmsync::sim::{
    self, ArrivalProcess, CapacitySpec, Detail, EventKind, EventTrace, PeerStatus, PieceSelection, ScenarioConfig,
    SeedMode, Simulator, Source,
};

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    ScenarioConfig::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn explicit(arrivals: Vec<f64>, sim_end: f64) -> ScenarioConfig {
    ScenarioConfig::explicit(1000, 256.0, 64.0, 64.0, arrivals, sim_end)
}

fn step_checked(cfg: ScenarioConfig) -> Simulator {
    let mut sim = Simulator::new(cfg).unwrap();
    while sim.step().unwrap() {
        sim.check_invariants().unwrap();
    }
    sim
}

#[test]
fn lone_leecher_takes_content_over_seed_rate() {
    let run = sim::run(explicit(vec![0.0], 10_000.0)).unwrap();
    let t = run.leechers[0].download_time().unwrap();
    assert_abs_diff_eq!(t, 4000.0, epsilon = 1e-6);
    assert_eq!(run.leechers[0].departure, Some(t));
}

#[test]
fn staggered_arrivals_leave_in_order() {
    let run = sim::run(scenario("staggered_fifo.json")).unwrap();
    let deps: Vec<f64> = run.leechers.iter().map(|l| l.departure.unwrap()).collect();
    assert!(deps.windows(2).all(|w| w[0] <= w[1]), "{deps:?}");
    let departed: Vec<u32> = run.trace.of_kind(EventKind::Departure).filter_map(|r| r.leecher()).collect();
    assert_eq!(departed, vec![0, 1, 2, 3, 4]);
}

#[test]
fn clustered_arrivals_depart_together() {
    let run = sim::run(scenario("staggered_burst.json")).unwrap();
    let deps: Vec<f64> = run.leechers.iter().map(|l| l.departure.unwrap()).collect();
    let first = run.leechers[0].download_time().unwrap();
    let spread = deps.iter().cloned().fold(f64::MIN, f64::max) - deps.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 0.05 * first, "{deps:?}");
    assert!((first - 4000.0).abs() <= 80.0, "{first}");
}

#[test]
fn oldest_leecher_progresses_at_seed_rate() {
    let mut cfg = scenario("staggered_burst.json");
    cfg.snapshot_interval = Some(100.0);
    let run = sim::run(cfg).unwrap();
    for s in run.trace.snapshots.iter().filter(|s| s.time > 0.0 && s.time < 3900.0) {
        // bytes, so in-flight pieces count; each arrival costs the leader
        // a fraction of a piece while the newcomer has nothing to forward
        let p = s.peer(0).unwrap();
        let expected = s.time * 64.0;
        assert!((p.received - expected).abs() <= 0.02 * expected + 512.0, "t={} received={}", s.time, p.received);
    }
}

#[test]
fn snapshot_after_fifth_arrival() {
    let cfg = ScenarioConfig::explicit(16_000, 16.0, 64.0, 64.0, vec![0.0, 30.0, 40.0, 50.0, 60.0], 10_000.0);
    let (state, bitmaps) = sim::snapshot_state(cfg, 61.0).unwrap();
    assert_eq!(state.num_leechers(), 5);
    assert!(state.piece_counts.windows(2).all(|w| w[0] > w[1]), "{:?}", state.piece_counts);
    for (b, bm) in state.piece_counts.iter().zip(&bitmaps) {
        assert_eq!(*b, bm.count() as u64);
    }
}

#[test]
fn snapshot_of_empty_swarm_is_an_error() {
    assert!(sim::snapshot_state(explicit(vec![10.0], 10_000.0), 0.0).is_err());
    assert!(sim::snapshot_state(explicit(vec![0.0], 100.0), 200.0).is_err());
}

#[test]
fn synchronized_tail_shares_piece_count() {
    let cfg = scenario("staggered_burst.json");
    let (state, _) = sim::snapshot_state(cfg, 3500.0).unwrap();
    let b = &state.piece_counts;
    assert_eq!(b.len(), 5);
    assert!(b.iter().max().unwrap() - b.iter().min().unwrap() <= 2, "{b:?}");
}

#[test]
fn stepping_keeps_invariants_with_every_option() {
    let mut cfg = ScenarioConfig::poisson(60, 48.0, 64.0, 1.0 / 120.0, 6000.0);
    cfg.leecher_capacity = CapacitySpec::Uniform { center: 64.0, epsilon: 0.5 };
    cfg.download_cap = Some(60.0);
    cfg.seed_mode = SeedMode::OnOff { mean_on: 300.0, availability: 0.5 };
    cfg.seeding_time = 100.0;
    cfg.rng_seed = 3;
    let sim = step_checked(cfg.clone());
    let run = sim.into_run();
    assert!(run.metadata.totals.completions > 5);
    cfg.piece_selection = PieceSelection::Random;
    step_checked(cfg);
}

#[test]
fn every_piece_arrives_once_and_totals_add_up() {
    let mut cfg = ScenarioConfig::poisson(80, 64.0, 64.0, 1.0 / 200.0, 8000.0);
    cfg.rng_seed = 9;
    let run = sim::run(cfg.clone()).unwrap();
    let mut seen = HashSet::new();
    for r in run.trace.of_kind(EventKind::PieceComplete) {
        let Detail::Piece { piece, from } = r.detail else { panic!("{r:?}") };
        assert!(piece < cfg.num_pieces);
        assert_ne!(from, r.peer);
        assert!(seen.insert((r.leecher(), piece)));
    }
    for l in &run.leechers {
        if l.download_complete.is_some() {
            assert_eq!(l.received, 80.0 * 256.0);
            let pieces = seen.iter().filter(|(id, _)| *id == Some(l.id)).count();
            assert_eq!(pieces, 80);
        }
    }
    let delivered = run.trace.of_kind(EventKind::PieceComplete).count() as u64;
    assert_eq!(run.metadata.totals.pieces_delivered, delivered);
    let uploaded: f64 = run.leechers.iter().map(|l| l.uploaded).sum::<f64>() + run.metadata.totals.seed_uploaded;
    let received: f64 = run.leechers.iter().map(|l| l.received).sum();
    assert_eq!(uploaded, received);
    assert!(run.metadata.totals.discarded >= 0.0);
}

#[test]
fn bitmaps_only_grow() {
    let mut cfg = ScenarioConfig::poisson(50, 64.0, 64.0, 1.0 / 100.0, 3000.0);
    cfg.rng_seed = 4;
    let mut sim = Simulator::new(cfg).unwrap();
    let mut prev: Vec<Option<swarmsync::sim::Bitmap>> = Vec::new();
    while sim.step().unwrap() {
        for id in 0..(prev.len() as u32 + 2) {
            let cur = sim.bitmap(id).cloned();
            if id as usize >= prev.len() {
                prev.push(cur);
                continue;
            }
            if let (Some(old), Some(new)) = (&prev[id as usize], &cur) {
                assert_eq!(old.missing_from(new), new.count() - old.count().min(new.count()));
                assert!(new.count() >= old.count());
            }
            if cur.is_some() {
                prev[id as usize] = cur;
            }
        }
    }
}

#[test]
fn same_seed_same_trace_other_seed_differs() {
    let mut cfg = ScenarioConfig::poisson(100, 64.0, 64.0, 1.0 / 300.0, 20_000.0);
    cfg.rng_seed = 42;
    let a = sim::run(cfg.clone()).unwrap();
    let b = sim::run(cfg.clone()).unwrap();
    assert_eq!(a.trace, b.trace);
    cfg.rng_seed = 43;
    let c = sim::run(cfg).unwrap();
    assert_ne!(a.trace.records, c.trace.records);
}

#[test]
fn trace_csv_round_trip() {
    let run = sim::run(scenario("staggered_burst.json")).unwrap();
    let mut buf = Vec::new();
    run.trace.write_csv(&mut buf).unwrap();
    let back = EventTrace::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.records, run.trace.records);
    assert_eq!(
        metrics::download_times(&back, 0.0).unwrap(),
        metrics::download_times(&run.trace, 0.0).unwrap()
    );
}

#[test]
fn seeding_time_delays_departure() {
    let mut cfg = explicit(vec![0.0, 100.0], 20_000.0);
    cfg.seeding_time = 500.0;
    let run = sim::run(cfg).unwrap();
    for l in &run.leechers {
        assert_abs_diff_eq!(l.departure.unwrap() - l.download_complete.unwrap(), 500.0, epsilon = 1e-9);
    }
    let mut sim = Simulator::new(explicit(vec![0.0], 20_000.0)).unwrap();
    sim.advance_to(4000.0).unwrap();
    assert_eq!(sim.status(0), Some(PeerStatus::Departed));
}

#[test]
fn seed_availability_matches_target() {
    let mut cfg = ScenarioConfig::explicit(10, 256.0, 64.0, 64.0, vec![], 2_000_000.0);
    cfg.arrivals = ArrivalProcess::Explicit(vec![1_999_999.0]);
    cfg.seed_mode = SeedMode::OnOff { mean_on: 1000.0, availability: 0.25 };
    cfg.rng_seed = 5;
    let run = sim::run(cfg).unwrap();
    let mut on_time = 0.0;
    let mut since = Some(0.0);
    for r in &run.trace.records {
        match r.kind {
            EventKind::SeedOff => on_time += r.time - since.take().unwrap(),
            EventKind::SeedOn => since = Some(r.time),
            _ => {}
        }
    }
    if let Some(s) = since {
        on_time += run.trace.end_time - s;
    }
    let a = on_time / run.trace.end_time;
    assert!((a - 0.25).abs() < 0.03, "availability {a}");
}

#[test]
fn lone_leecher_stalls_while_seed_is_off() {
    let mut cfg = explicit(vec![0.0], 200_000.0);
    cfg.seed_mode = SeedMode::OnOff { mean_on: 500.0, availability: 0.5 };
    cfg.rng_seed = 8;
    let run = sim::run(cfg).unwrap();
    let off = run.trace.of_kind(EventKind::SeedOff).next().unwrap().time;
    let on = run.trace.of_kind(EventKind::SeedOn).find(|r| r.time > off).unwrap().time;
    let rate = metrics::measured_rate(&run.trace, 0, off, on).unwrap();
    assert_eq!(rate, 0.0);
    assert!(run.trace.records.iter().all(|r| r.kind != EventKind::SeedOn || r.peer == Source::Seed));
}

#[test]
fn first_leecher_rate_before_first_departure() {
    let run = sim::run(scenario("staggered_burst.json")).unwrap();
    let rate = metrics::measured_rate(&run.trace, 0, 100.0, 3000.0).unwrap();
    assert!((rate - 64.0).abs() <= 2.0, "{rate}");
}

#[test]
fn download_cap_limits_inbound_rate() {
    let mut cfg = explicit(vec![0.0, 0.0, 0.0], 20_000.0);
    cfg.seed_capacity = 192.0;
    cfg.download_cap = Some(70.0);
    let sim = step_checked(cfg);
    let run = sim.into_run();
    for l in &run.leechers {
        assert!(l.download_time().unwrap() >= 256_000.0 / 70.0 - 1e-6);
    }
}

#[test]
fn advance_rejects_going_back_or_past_the_horizon() {
    let mut sim = Simulator::new(explicit(vec![0.0], 1000.0)).unwrap();
    sim.advance_to(500.0).unwrap();
    assert!(sim.advance_to(100.0).is_err());
    assert!(sim.advance_to(2000.0).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = explicit(vec![0.0], 1000.0);
    cfg.num_pieces = 0;
    assert!(Simulator::new(cfg).is_err());
    let mut cfg = explicit(vec![0.0], 1000.0);
    cfg.seed_capacity = -1.0;
    assert!(Simulator::new(cfg).is_err());
    let mut cfg = explicit(vec![0.0], 1000.0);
    cfg.seed_mode = SeedMode::OnOff { mean_on: 10.0, availability: 0.0 };
    assert!(Simulator::new(cfg).is_err());
    assert!(ScenarioConfig::from_json(r#"{"num_pieces": 1, "bogus": 2}"#).is_err());
}

#[test]
fn shipped_scenarios_parse() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ScenarioConfig::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
        cfg.validate().unwrap();
        n += 1;
    }
    assert!(n >= 10);
}
