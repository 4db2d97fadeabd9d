//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p migrasim --test acceptance -- --nocapture` to see
//! the report.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use migrasim::algorithms::{AlgorithmVariant, BufferLocation};
use migrasim::decision::{amortization_time, migration_benefit, migration_cost, select_host};
use migrasim::protocol::MigrationStatus;
use migrasim::scenario::{experiment, CheckpointSpec, DecisionScenario, MigrationSpec, Scenario};
use migrasim::simnet::{NodeId, SimTime};
use migrasim::statemgmt::{extract_incremental, extract_state, load_state, Checkpoint};
use migrasim::streamcore::{OperatorSpec, Processed, QueryId, QueryInstance, StreamId, Tuple, WindowKind};
use migrasim::workload::{Arrivals, KeyDistribution, Segment, StreamSpec, WorkloadSpec};

const USE_CASE: &str = include_str!("../scenarios/use_case_decision.json");

struct Verdicts {
    rows: Vec<(u32, bool)>,
}

impl Verdicts {
    fn record(&mut self, n: u32, title: &str, pass: bool, detail: String) {
        println!("{} [{n}] {title}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.rows.push((n, pass));
    }
}

fn run(s: &Scenario) -> migrasim::algorithms::MigrationReport {
    s.run().unwrap_or_else(|e| panic!("{}: {e}", s.name)).report.expect("scenario migrates")
}

fn set_links(s: &mut Scenario, f: impl Fn(&str, &str) -> Option<(f64, f64)>) {
    for l in &mut s.topology.links {
        if let Some((bw, lat)) = f(&l.a, &l.b) {
            l.bandwidth_mbps = bw;
            l.latency_ms = lat;
        }
    }
}

fn is_source_link(a: &str, b: &str) -> bool {
    a == "US" || b == "US"
}

// ----- 1 -----

fn use_case(v: &mut Verdicts) {
    let expected_b = [[1.5, 0.85, 1.35], [1.6, 1.36, 1.25], [1.4, 2.125, 1.2], [1.7, 2.38, 1.3]];
    let expected_cm = ["C", "C", "D", "D"];
    let expected_ncm = ["E", "E", "E", "E"];
    let table = DecisionScenario::parse(USE_CASE).and_then(|d| d.decide()).expect("use case decides");
    let mut worst = 0.0f64;
    for (row, exp) in table.rows.iter().zip(expected_b) {
        for (b, e) in row.benefit.iter().zip(exp) {
            worst = worst.max((b - e).abs());
        }
    }
    let cm: Vec<&str> = table.rows.iter().map(|r| r.with_cost.as_str()).collect();
    let ncm: Vec<&str> = table.rows.iter().map(|r| r.without_cost.as_str()).collect();
    let pass = table.rows.len() == 4 && worst <= 0.005 && cm == expected_cm && ncm == expected_ncm;
    v.record(
        1,
        "decision table",
        pass,
        format!("max |dB| = {worst:.4} (tol 0.005); CM = {cm:?} (want {expected_cm:?}); NCM = {ncm:?} (want {expected_ncm:?})"),
    );
}

// ----- 2 -----

fn reference_schedule(variant: AlgorithmVariant, n: u64, rate: f64) -> Scenario {
    let last = (n - 1) as f64 / rate;
    experiment(variant, n, rate, last + 0.25)
}

fn correctness(v: &mut Verdicts) {
    let mut failures = Vec::new();
    let mut runs = 0;
    for (n, rate) in [(1_000u64, 1_000.0), (100_000, 10_000.0)] {
        for variant in AlgorithmVariant::ALL {
            let s = reference_schedule(variant, n, rate);
            let r = run(&s);
            runs += 1;
            let m = &r.metrics;
            let ok = r.status == MigrationStatus::Completed && m.sink_outputs == n && m.tuples_lost == 0 && m.duplicate_outputs_accepted == 0;
            if !ok {
                failures.push(format!(
                    "{variant} N={n}: status {:?}, outputs {}, lost {}, dup accepted {}",
                    r.status, m.sink_outputs, m.tuples_lost, m.duplicate_outputs_accepted
                ));
            }
        }
    }
    let detail = if failures.is_empty() { format!("{runs} runs exact") } else { format!("{} of {runs} runs wrong: {}", failures.len(), failures.join("; ")) };
    v.record(2, "migration correctness", failures.is_empty(), detail);
}

// ----- 3 -----

const MB: u32 = 1 << 20;

fn freeze_trend_scenario(variant: AlgorithmVariant) -> Scenario {
    let mut s = experiment(variant, 0, 1.0, 0.0);
    set_links(&mut s, |a, b| is_source_link(a, b).then_some((10_000.0, 1.0)));
    let keys = KeyDistribution::AllSameSeller { key: 1 };
    s.workload = WorkloadSpec {
        seed: 1,
        streams: vec![
            StreamSpec {
                stream: StreamId(1),
                payload_bytes: MB,
                keys: keys.clone(),
                arrivals: Arrivals::Uniform,
                segments: vec![
                    // 1 GiB present when the migration starts.
                    Segment { start: Some(0.0), count: 1024, rate: 100.0 },
                    // 100 MiB more while the state is on the move.
                    Segment { start: Some(11.0), count: 100, rate: 2.5 },
                ],
            },
            StreamSpec { stream: StreamId(0), payload_bytes: 0, keys, arrivals: Arrivals::Uniform, segments: vec![Segment { start: Some(120.0), count: 1, rate: 1.0 }] },
        ],
    };
    let m = s.migration.as_mut().unwrap();
    m.trigger = Some(10.5);
    s
}

fn freeze_trend(v: &mut Verdicts) {
    let aao = run(&freeze_trend_scenario(AlgorithmVariant::SingleTrackAllAtOnce));
    let partial = run(&freeze_trend_scenario(AlgorithmVariant::SingleTrackPartial));
    let wr = run(&freeze_trend_scenario(AlgorithmVariant::WindowRecreation));
    let (fa, fp, fw) = (aao.metrics.freeze_time, partial.metrics.freeze_time, wr.metrics.freeze_time);
    let pass = fp <= 0.2 * fa && fw == 0.0 && aao.is_correct() && partial.is_correct() && wr.is_correct();
    v.record(
        3,
        "freeze-time trend",
        pass,
        format!("all-at-once {fa:.3} s, partial {fp:.3} s (ratio {:.3}, limit 0.2), window-recreation {fw} s", fp / fa),
    );
}

// ----- 4 -----

fn per_tuple_join(variant: AlgorithmVariant, rng: &mut ChaCha8Rng) -> Scenario {
    let auctions: u64 = rng.gen_range(4_000..12_000);
    let auction_rate: f64 = rng.gen_range(2_000.0..6_000.0);
    let payload: u32 = rng.gen_range(512..4096);
    let person_rate: f64 = rng.gen_range(1_000.0..3_000.0);
    let bw: f64 = rng.gen_range(100.0..400.0);
    let lat: f64 = rng.gen_range(0.5..3.0);
    let trigger = auctions as f64 / auction_rate * rng.gen_range(0.4..0.7);
    // Both streams keep flowing well past the freeze so arrivals stay uniform across it.
    let freeze_estimate = auctions as f64 * payload as f64 * 8.0 / (bw * 1e6) + 0.1;
    let duration = trigger + 3.0 * freeze_estimate;
    let keys = (auctions / 8).max(1);
    let mut s = experiment(variant, 0, 1.0, 0.0);
    s.name = format!("c4-{variant}");
    s.query.operator = OperatorSpec::Join { person: StreamId(0), auction: StreamId(1), output: StreamId(2), output_payload_bytes: 16 };
    s.workload = WorkloadSpec {
        seed: rng.gen(),
        streams: vec![
            StreamSpec {
                stream: StreamId(1),
                payload_bytes: payload,
                keys: KeyDistribution::Uniform { low: 0, high: keys - 1 },
                arrivals: Arrivals::Uniform,
                segments: vec![Segment { start: Some(0.0), count: (duration * auction_rate) as u64, rate: auction_rate }],
            },
            StreamSpec {
                stream: StreamId(0),
                payload_bytes: 0,
                keys: KeyDistribution::Uniform { low: 0, high: keys - 1 },
                arrivals: Arrivals::Uniform,
                segments: vec![Segment { start: Some(0.0), count: (duration * person_rate) as u64, rate: person_rate }],
            },
        ],
    };
    set_links(&mut s, |a, b| (!is_source_link(a, b)).then_some((bw, lat)));
    s.migration.as_mut().unwrap().trigger = Some(trigger);
    if variant.taxonomy().checkpoint_assisted {
        s.checkpoint = CheckpointSpec { bootstrap_at: Some(0.0), interval: trigger / 3.0 };
    }
    s
}

fn cost_invariants(v: &mut Verdicts) {
    let pool = [AlgorithmVariant::SingleTrackAllAtOnce, AlgorithmVariant::CheckpointAssistedSingleTrack];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut order_bad = Vec::new();
    let mut latency_bad = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..50 {
        let variant = pool[i % pool.len()];
        let s = per_tuple_join(variant, &mut rng);
        let r = run(&s);
        let m = &r.metrics;
        if !(m.freeze_time >= m.state_movement_time) || !r.is_correct() {
            order_bad.push(format!("#{i} {variant}: freeze {:.6} < movement {:.6}", m.freeze_time, m.state_movement_time));
        }
        let half = m.freeze_time / 2.0;
        let dev = (m.mean_added_latency - half).abs() / half;
        worst = worst.max(dev);
        if !(dev <= 0.10) {
            latency_bad.push(format!("#{i} {variant}: mean {:.6} vs half-freeze {half:.6}", m.mean_added_latency));
        }
    }
    let pass = order_bad.is_empty() && latency_bad.is_empty();
    let mut detail = format!(
        "freeze >= movement in {}/50 runs; mean added latency within 10% of freeze/2 in {}/50 runs (worst {:.1}%)",
        50 - order_bad.len(),
        50 - latency_bad.len(),
        worst * 100.0
    );
    for e in order_bad.iter().chain(&latency_bad).take(5) {
        detail.push_str("; ");
        detail.push_str(e);
    }
    v.record(4, "cost-metric invariants", pass, detail);
    println!("INFO [4] single-track-partial is outside the pool: its immutable transfer overlaps processing, so movement may exceed freeze");
}

// ----- 5 -----

fn random_scenario(variant: AlgorithmVariant, seed: u64, rng: &mut ChaCha8Rng) -> Scenario {
    let mut s = experiment(variant, 0, 1.0, 0.0);
    s.name = format!("c5-{variant}-{seed}");
    let n: u64 = rng.gen_range(500..3_000);
    let rate: f64 = rng.gen_range(500.0..3_000.0);
    let duration = n as f64 / rate;
    let stream = |id: u32, count: u64, rate: f64, keys: u64, payload: u32| StreamSpec {
        stream: StreamId(id),
        payload_bytes: payload,
        keys: KeyDistribution::Uniform { low: 0, high: keys },
        arrivals: Arrivals::Poisson,
        segments: vec![Segment { start: Some(0.0), count, rate }],
    };
    let query = if variant == AlgorithmVariant::PauseDrainResume { 0 } else { rng.gen_range(1..3) };
    match query {
        0 => {
            s.query.operator = OperatorSpec::Filter { input: StreamId(1), output: StreamId(2), modulus: 3, remainder: 1 };
            s.workload = WorkloadSpec { seed, streams: vec![stream(1, n, rate, 1_000, 256)] };
        }
        1 => {
            let keys = rng.gen_range(5..50);
            s.workload = WorkloadSpec { seed, streams: vec![stream(1, n, rate, keys, 1024), stream(0, n / 10, rate / 10.0, keys, 0)] };
        }
        _ => {
            let extent = SimTime::from_millis(rng.gen_range(50..400));
            let window = if rng.gen_bool(0.5) {
                WindowKind::Tumbling { extent }
            } else {
                WindowKind::Sliding { extent, slide: SimTime::from_nanos(extent.as_nanos() / rng.gen_range(2..5)) }
            };
            s.query.operator = OperatorSpec::Aggregate { input: StreamId(1), output: StreamId(2), window, output_payload_bytes: 16 };
            s.workload = WorkloadSpec { seed, streams: vec![stream(1, n, rate, rng.gen_range(3..30), 512)] };
        }
    }
    let m: &mut MigrationSpec = s.migration.as_mut().unwrap();
    m.trigger = Some(duration * rng.gen_range(0.1..0.8));
    if rng.gen_bool(0.3) && variant.taxonomy().track == migrasim::algorithms::Track::Single {
        m.buffer_location = BufferLocation::Upstream;
    }
    if variant.taxonomy().checkpoint_assisted {
        s.checkpoint = CheckpointSpec { bootstrap_at: Some(0.0), interval: duration / 5.0 };
    }
    s
}

fn baseline_equivalence(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = Vec::new();
    for _ in 0..25 {
        let variant = AlgorithmVariant::ALL[rng.gen_range(0..AlgorithmVariant::ALL.len())];
        let seed = rng.gen();
        let s = random_scenario(variant, seed, &mut rng);
        let r = run(&s);
        let out = r.outputs.as_ref().unwrap();
        if !(out.is_equal() && r.status == MigrationStatus::Completed) {
            bad.push(format!("{} ({:?}, {} missing, {} unexpected)", s.name, r.status, out.missing, out.unexpected));
        }
    }
    let detail = if bad.is_empty() { "25/25 triples match the twin run".into() } else { format!("{} mismatches: {}", bad.len(), bad.join("; ")) };
    v.record(5, "baseline equivalence", bad.is_empty(), detail);
}

// ----- 6 -----

fn decision_properties(v: &mut Verdicts) {
    let mut fails = Vec::new();
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let bounds = runner.run(&(0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0), |(a, b, r1, r2)| {
        let (min, max) = (a.min(b), a.max(b));
        let (lo, hi) = (r1.min(r2), r1.max(r2));
        let at_lo = amortization_time(lo, min, max);
        let at_hi = amortization_time(hi, min, max);
        prop_assert!(at_lo >= min - 1e-9 && at_lo <= max + 1e-9);
        prop_assert!(at_hi <= at_lo + 1e-9);
        Ok(())
    });
    if let Err(e) = bounds {
        fails.push(format!("amortization bounds: {e}"));
    }

    let scores = prop::collection::vec(0.01f64..10.0, 1..8);
    let costs = prop::collection::vec(0.0f64..2.0, 8);
    let scale = runner.run(&(scores, costs, 0.01f64..100.0), |(p, c, k)| {
        let current = NodeId(0);
        let bench = |mult: f64| -> Result<NodeId, TestCaseError> {
            let b: Vec<(NodeId, f64)> =
                p.iter().enumerate().map(|(i, &pi)| (NodeId(i as u32), migration_benefit(pi * mult, if i == 0 { 0.0 } else { c[i] }))).collect();
            select_host(current, &b).map_err(|e| TestCaseError::fail(e.to_string()))
        };
        let a = bench(1.0)?;
        let b = bench(k)?;
        // Only a numerical near-tie may flip under scaling.
        if a != b {
            let val = |h: NodeId, m: f64| migration_benefit(p[h.0 as usize] * m, if h.0 == 0 { 0.0 } else { c[h.0 as usize] });
            prop_assert!((val(a, 1.0) - val(b, 1.0)).abs() <= 1e-12 * val(a, 1.0).abs().max(1.0));
        }
        Ok(())
    });
    if let Err(e) = scale {
        fails.push(format!("scale invariance: {e}"));
    }

    let cands = prop::collection::vec((0.0f64..10.0, 0.0f64..1e6, 1.0f64..1e6, 0.0f64..3.0), 1..10);
    let dominance = runner.run(&(0.0f64..10.0, cands), |(p_current, others)| {
        let mut b = vec![(NodeId(0), migration_benefit(p_current, migration_cost(0.0, 1.0, 1.0, true).unwrap()))];
        for (i, (p, mt, at, w)) in others.iter().enumerate() {
            let p = p.min(p_current);
            let cost = migration_cost(*mt, *at, *w, false).map_err(|e| TestCaseError::fail(e.to_string()))?;
            b.push((NodeId(i as u32 + 1), migration_benefit(p, cost)));
        }
        prop_assert_eq!(select_host(NodeId(0), &b).unwrap(), NodeId(0));
        Ok(())
    });
    if let Err(e) = dominance {
        fails.push(format!("current-host dominance: {e}"));
    }
    let detail = if fails.is_empty() { "3 properties x 1000 cases hold".into() } else { fails.join("; ") };
    v.record(6, "decision-model properties", fails.is_empty(), detail);
}

// ----- 7 -----

fn random_tuples(rng: &mut ChaCha8Rng, streams: &[u32], n: usize, keys: u64, ordered: bool) -> Vec<Tuple> {
    let mut seqs: HashMap<u32, u64> = HashMap::new();
    let mut t = 0u64;
    (0..n)
        .map(|_| {
            let s = streams[rng.gen_range(0..streams.len())];
            let seq = seqs.entry(s).or_default();
            *seq += 1;
            t += rng.gen_range(0..5_000_000);
            let ts = if ordered { t } else { t.saturating_sub(rng.gen_range(0..20_000_000)) };
            Tuple::new(StreamId(s), rng.gen_range(0..keys), SimTime::from_nanos(ts), *seq, rng.gen_range(0..64))
        })
        .collect()
}

fn feed(inst: &mut QueryInstance, input: &[Tuple]) -> Vec<Tuple> {
    let mut out = Vec::new();
    for t in input {
        if let Processed::Outputs(o) = inst.process(t).unwrap() {
            out.extend(o);
        }
    }
    out
}

/// (key, value) per output, order-free.
fn bag(out: &[Tuple]) -> BTreeMap<(u64, u64, SimTime), u64> {
    let mut m = BTreeMap::new();
    for t in out {
        *m.entry((t.key, t.value, t.timestamp)).or_default() += 1;
    }
    m
}

/// Every (person, earlier auction with the same key) pair.
fn join_oracle(input: &[Tuple]) -> BTreeMap<(u64, u64, SimTime), u64> {
    let mut m = BTreeMap::new();
    for (i, p) in input.iter().enumerate().filter(|(_, t)| t.stream == StreamId(0)) {
        for a in input[..i].iter().filter(|a| a.stream == StreamId(1) && a.key == p.key) {
            *m.entry((p.key, a.seq, p.timestamp)).or_default() += 1;
        }
    }
    m
}

/// Per window and key, the count of on-time tuples inside it. A tuple is
/// late when every window containing it was already emitted when it arrived.
fn window_oracle(input: &[Tuple], extent: u64, slide: u64) -> BTreeMap<(u64, u64, SimTime), u64> {
    let mut accepted = Vec::new();
    let mut wm = 0u64;
    for t in input {
        let ts = t.timestamp.as_nanos();
        wm = wm.max(ts);
        let emitted_below = if wm < extent { 0 } else { (wm - extent) / slide + 1 };
        if ts / slide >= emitted_below {
            accepted.push((t, emitted_below));
        }
    }
    let mut counts: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    for (t, emitted_below) in &accepted {
        let ts = t.timestamp.as_nanos();
        let first = if ts < extent { 0 } else { (ts - extent) / slide + 1 };
        for k in first.max(*emitted_below)..=ts / slide {
            if k * slide + extent <= wm {
                *counts.entry((k, t.key)).or_default() += 1;
            }
        }
    }
    counts.into_iter().map(|((k, key), c)| ((key, c, SimTime::from_nanos(k * slide + extent)), 1)).fold(BTreeMap::new(), |mut m, (e, n)| {
        *m.entry(e).or_default() += n;
        m
    })
}

fn oracles(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    for i in 0..200 {
        let n = rng.gen_range(1..=1000);
        if i % 2 == 0 {
            let spec = OperatorSpec::Join { person: StreamId(0), auction: StreamId(1), output: StreamId(2), output_payload_bytes: 8 };
            let keys = rng.gen_range(1..20);
            let input = random_tuples(&mut rng, &[0, 1, 1, 1], n, keys, true);
            let got = bag(&feed(&mut QueryInstance::new(QueryId(0), &spec), &input));
            if got != join_oracle(&input) {
                bad.push(format!("join workload {i}"));
            }
        } else {
            let extent = rng.gen_range(1..20) * 5_000_000u64;
            let slide = if rng.gen_bool(0.5) { extent } else { extent / rng.gen_range(1..5) };
            let window = WindowKind::Sliding { extent: SimTime::from_nanos(extent), slide: SimTime::from_nanos(slide) };
            let spec = OperatorSpec::Aggregate { input: StreamId(1), output: StreamId(2), window, output_payload_bytes: 8 };
            let (keys, ordered) = (rng.gen_range(1..10), rng.gen_bool(0.5));
            let input = random_tuples(&mut rng, &[1], n, keys, ordered);
            let got = bag(&feed(&mut QueryInstance::new(QueryId(0), &spec), &input));
            if got != window_oracle(&input, extent, slide) {
                bad.push(format!("window workload {i}"));
            }
        }
    }
    let mut state_bad = Vec::new();
    for i in 0..100 {
        let spec = if i % 2 == 0 {
            OperatorSpec::Join { person: StreamId(0), auction: StreamId(1), output: StreamId(2), output_payload_bytes: 8 }
        } else {
            let extent = SimTime::from_millis(rng.gen_range(10..200));
            OperatorSpec::Aggregate { input: StreamId(1), output: StreamId(2), window: WindowKind::Tumbling { extent }, output_payload_bytes: 8 }
        };
        let streams: &[u32] = if i % 2 == 0 { &[0, 1, 1] } else { &[1] };
        let len = rng.gen_range(2..1000);
        let input = random_tuples(&mut rng, streams, len, 10, true);
        let cut = rng.gen_range(0..input.len());
        let mut live = QueryInstance::new(QueryId(0), &spec);
        feed(&mut live, &input[..cut]);
        let base = extract_state(&live);
        feed(&mut live, &input[cut..]);
        let inc = extract_incremental(&live, Some(&Checkpoint::new(base.clone()))).unwrap();
        let mut rebuilt = QueryInstance::new(QueryId(0), &spec);
        load_state(&mut rebuilt, &[base, inc]).unwrap();
        let (a, b) = (extract_state(&live), extract_state(&rebuilt));
        if a.records != b.records || a.meta != b.meta || live.marks() != rebuilt.marks() {
            state_bad.push(format!("checkpoint {i} (cut {cut}/{})", input.len()));
        }
    }
    let pass = bad.is_empty() && state_bad.is_empty();
    let mut detail = format!("{}/200 workloads match brute force; {}/100 checkpoints rebuild exactly", 200 - bad.len(), 100 - state_bad.len());
    for e in bad.iter().chain(&state_bad).take(5) {
        detail.push_str("; ");
        detail.push_str(e);
    }
    v.record(7, "oracle equivalence", pass, detail);
}

#[test]
fn acceptance() {
    let started = Instant::now();
    let mut v = Verdicts { rows: Vec::new() };
    use_case(&mut v);
    correctness(&mut v);
    freeze_trend(&mut v);
    cost_invariants(&mut v);
    baseline_equivalence(&mut v);
    decision_properties(&mut v);
    oracles(&mut v);
    let failed: Vec<u32> = v.rows.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    println!("acceptance: {}/{} criteria pass in {:.1} s", v.rows.len() - failed.len(), v.rows.len(), started.elapsed().as_secs_f64());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
