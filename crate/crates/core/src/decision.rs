//! Cost/benefit migration decisions: amortization time, predicted output
//! tuples, migration cost and benefit, and host selection.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{build_program, AlgorithmVariant, VariantOptions};
use crate::protocol::{Decision, MigrationPlan, MigrationPlanner, PlannerView};
use crate::simnet::{transmission_time, Link, Network, NodeId, SimError, SimTime, DEFAULT_CONTROL_MESSAGE_BYTES};

pub const DEFAULT_HISTORY_LEN: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecisionError {
    #[error("placement score {0} is not a finite non-negative number")]
    InvalidScore(f64),
    #[error("cost undefined: {numerator} output tuples during migration but none in the amortization window")]
    UndefinedCost { numerator: f64 },
    #[error("no candidate hosts")]
    NoCandidates,
    #[error("amortization bounds must satisfy 0 < min_at <= max_at (got {min_at}, {max_at})")]
    InvalidBounds { min_at: f64, max_at: f64 },
    #[error("negative cost weight {0}")]
    NegativeWeight(f64),
    #[error(transparent)]
    Link(#[from] SimError),
}

/// Recent placement scores of each host.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacementHistory {
    capacity: usize,
    samples: BTreeMap<NodeId, VecDeque<(SimTime, f64)>>,
}

impl Default for PlacementHistory {
    fn default() -> Self {
        Self::new(DEFAULT_HISTORY_LEN)
    }
}

impl PlacementHistory {
    pub fn new(capacity: usize) -> Self {
        PlacementHistory { capacity: capacity.max(2), samples: BTreeMap::new() }
    }

    pub fn push(&mut self, host: NodeId, time: SimTime, score: f64) -> Result<(), DecisionError> {
        if !score.is_finite() || score < 0.0 {
            return Err(DecisionError::InvalidScore(score));
        }
        let q = self.samples.entry(host).or_default();
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back((time, score));
        Ok(())
    }

    pub fn latest(&self, host: NodeId) -> Option<f64> {
        self.samples.get(&host).and_then(|q| q.back()).map(|s| s.1)
    }

    pub fn len(&self, host: NodeId) -> usize {
        self.samples.get(&host).map_or(0, VecDeque::len)
    }

    /// Relative standard deviation in percent, clamped to `[0, 100]`.
    /// Fewer than two samples or a zero mean count as 100.
    pub fn rsd(&self, host: NodeId) -> f64 {
        let Some(q) = self.samples.get(&host).filter(|q| q.len() >= 2) else {
            return 100.0;
        };
        let n = q.len() as f64;
        let mean = q.iter().map(|s| s.1).sum::<f64>() / n;
        if mean <= 0.0 {
            return 100.0;
        }
        let var = q.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (100.0 * var.sqrt() / mean).clamp(0.0, 100.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionConfig {
    pub min_at: f64,
    pub max_at: f64,
    pub w_c: f64,
    /// Per-host cost weights overriding `w_c`.
    #[serde(skip)]
    pub w_c_per_host: BTreeMap<NodeId, f64>,
    pub check_period: f64,
    pub history_len: usize,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig {
            min_at: 5.0,
            max_at: 15.0,
            w_c: 1.0,
            w_c_per_host: BTreeMap::new(),
            check_period: 1.0,
            history_len: DEFAULT_HISTORY_LEN,
        }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<(), DecisionError> {
        if !(self.min_at > 0.0 && self.min_at <= self.max_at) {
            return Err(DecisionError::InvalidBounds { min_at: self.min_at, max_at: self.max_at });
        }
        if let Some(w) = std::iter::once(self.w_c).chain(self.w_c_per_host.values().copied()).find(|w| !(*w >= 0.0)) {
            return Err(DecisionError::NegativeWeight(w));
        }
        Ok(())
    }

    pub fn weight(&self, host: NodeId) -> f64 {
        self.w_c_per_host.get(&host).copied().unwrap_or(self.w_c)
    }
}

/// `min_at + (max_at - min_at) / 100 * (100 - rsd)`, in seconds.
pub fn amortization_time(rsd: f64, min_at: f64, max_at: f64) -> f64 {
    let rsd = rsd.clamp(0.0, 100.0);
    min_at + (max_at - min_at) / 100.0 * (100.0 - rsd)
}

pub fn predicted_output_tuples(pt_in: f64, selectivity: f64) -> f64 {
    pt_in * selectivity
}

/// `w_c * pt_out_mt / pt_out_at`; zero for the current host and when no
/// tuples are expected at all.
pub fn migration_cost(pt_out_mt: f64, pt_out_at: f64, w_c: f64, is_current: bool) -> Result<f64, DecisionError> {
    if is_current {
        return Ok(0.0);
    }
    if pt_out_at == 0.0 {
        if pt_out_mt == 0.0 {
            return Ok(0.0);
        }
        return Err(DecisionError::UndefinedCost { numerator: pt_out_mt });
    }
    Ok(w_c * pt_out_mt / pt_out_at)
}

pub fn migration_benefit(placement: f64, cost: f64) -> f64 {
    placement * (1.0 - cost)
}

/// Host with the largest benefit; ties keep the current host, then the
/// lowest node id wins.
pub fn select_host(current: NodeId, benefits: &[(NodeId, f64)]) -> Result<NodeId, DecisionError> {
    let best = benefits.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
    if benefits.is_empty() {
        return Err(DecisionError::NoCandidates);
    }
    if benefits.iter().any(|&(h, b)| h == current && b == best) {
        return Ok(current);
    }
    Ok(benefits.iter().filter(|b| b.1 == best).map(|b| b.0).min().expect("non-empty"))
}

/// Seconds to move `state_bytes` over `link` plus the program's control
/// messages.
pub fn estimate_migration_time(state_bytes: u64, link: &Link, control_messages: u64, control_bytes: u64) -> f64 {
    let lat = link.latency.as_secs_f64();
    let state = state_bytes as f64 * 8.0 / link.bandwidth_bps as f64 + lat;
    let control = control_bytes as f64 * 8.0 / link.bandwidth_bps as f64 + lat;
    state + control_messages as f64 * control
}

/// Predicts input tuples over a horizon.
pub trait Predictor {
    fn observe(&mut self, now: SimTime, total_arrivals: u64);
    fn predict(&self, now: SimTime, horizon: f64) -> f64;
}

/// Exponentially weighted input rate.
#[derive(Clone, Debug, PartialEq)]
pub struct EwmaPredictor {
    half_life: f64,
    rate: Option<f64>,
    last: Option<(SimTime, u64)>,
}

impl EwmaPredictor {
    pub const DEFAULT_HALF_LIFE: f64 = 10.0;

    pub fn new(half_life: f64) -> Self {
        EwmaPredictor { half_life, rate: None, last: None }
    }

    pub fn rate(&self) -> Option<f64> {
        self.rate
    }
}

impl Default for EwmaPredictor {
    fn default() -> Self {
        Self::new(Self::DEFAULT_HALF_LIFE)
    }
}

impl Predictor for EwmaPredictor {
    fn observe(&mut self, now: SimTime, total: u64) {
        if let Some((t, n)) = self.last {
            let dt = now.saturating_sub(t).as_secs_f64();
            if dt > 0.0 {
                let sample = total.saturating_sub(n) as f64 / dt;
                let alpha = 1.0 - 0.5f64.powf(dt / self.half_life);
                self.rate = Some(match self.rate {
                    Some(r) => r + alpha * (sample - r),
                    None => sample,
                });
            }
        }
        self.last = Some((now, total));
    }

    fn predict(&self, _now: SimTime, horizon: f64) -> f64 {
        self.rate.unwrap_or(0.0) * horizon
    }
}

/// Knows the input schedule exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OraclePredictor {
    arrivals: Vec<SimTime>,
}

impl OraclePredictor {
    pub fn new(mut arrivals: Vec<SimTime>) -> Self {
        arrivals.sort();
        OraclePredictor { arrivals }
    }
}

impl Predictor for OraclePredictor {
    fn observe(&mut self, _now: SimTime, _total: u64) {}

    fn predict(&self, now: SimTime, horizon: f64) -> f64 {
        let end = now.saturating_add(SimTime::from_secs_f64(horizon));
        let lo = self.arrivals.partition_point(|t| *t < now);
        let hi = self.arrivals.partition_point(|t| *t < end);
        (hi - lo) as f64
    }
}

/// Placement score of a host; higher is better.
pub trait Scorer {
    fn score(&mut self, host: NodeId, check: usize, now: SimTime) -> f64;
}

/// Scores given per check, the last row repeating.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleScorer {
    pub rows: Vec<BTreeMap<NodeId, f64>>,
}

impl Scorer for OracleScorer {
    fn score(&mut self, host: NodeId, check: usize, _now: SimTime) -> f64 {
        let row = self.rows.get(check).or(self.rows.last());
        row.and_then(|r| r.get(&host)).copied().unwrap_or(0.0)
    }
}

/// `1 / (latency(source -> host) + latency(host -> sink))` in seconds.
#[derive(Clone, Debug)]
pub struct InverseLatencyScorer {
    pub network: Network,
    pub sources: Vec<NodeId>,
    pub sink: NodeId,
}

impl Scorer for InverseLatencyScorer {
    fn score(&mut self, host: NodeId, _check: usize, _now: SimTime) -> f64 {
        let to_sink = self.network.link(host, self.sink).map(|l| l.latency.as_secs_f64());
        let from = self.sources.iter().map(|s| self.network.link(*s, host).map(|l| l.latency.as_secs_f64())).try_fold(0.0f64, |m, l| l.map(|l| m.max(l)));
        match (from, to_sink) {
            (Ok(a), Ok(b)) if a + b > 0.0 => 1.0 / (a + b),
            _ => 0.0,
        }
    }
}

/// Outcome for one candidate at one check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateEval {
    pub host: NodeId,
    pub placement: f64,
    pub rsd: f64,
    pub amortization: f64,
    pub migration_time: f64,
    pub pt_out_at: f64,
    pub pt_out_mt: f64,
    pub cost: f64,
    pub benefit: f64,
}

/// Evaluates every candidate for the current host.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    current: NodeId,
    candidates: &[NodeId],
    placement: &BTreeMap<NodeId, f64>,
    history: &PlacementHistory,
    migration_time: &BTreeMap<NodeId, f64>,
    predictor: &dyn Predictor,
    selectivity: f64,
    now: SimTime,
    cfg: &DecisionConfig,
) -> Result<Vec<CandidateEval>, DecisionError> {
    if candidates.is_empty() {
        return Err(DecisionError::NoCandidates);
    }
    candidates
        .iter()
        .map(|&h| {
            let p = placement.get(&h).copied().unwrap_or(0.0);
            let rsd = history.rsd(h);
            let at = amortization_time(rsd, cfg.min_at, cfg.max_at);
            let mt = if h == current { 0.0 } else { migration_time.get(&h).copied().unwrap_or(0.0) };
            let pt_out_at = predicted_output_tuples(predictor.predict(now, at), selectivity);
            let pt_out_mt = predicted_output_tuples(predictor.predict(now, mt), selectivity);
            let cost = migration_cost(pt_out_mt, pt_out_at, cfg.weight(h), h == current)?;
            Ok(CandidateEval {
                host: h,
                placement: p,
                rsd,
                amortization: at,
                migration_time: mt,
                pt_out_at,
                pt_out_mt,
                cost,
                benefit: migration_benefit(p, cost),
            })
        })
        .collect()
}

/// Periodic decision checks inside a simulation.
pub struct DecisionEngine {
    pub config: DecisionConfig,
    pub candidates: Vec<NodeId>,
    pub variant: AlgorithmVariant,
    pub options: VariantOptions,
    pub stateful: bool,
    /// Control messages the variant sends when migrating to each candidate.
    pub control_messages: BTreeMap<NodeId, u64>,
    pub control_bytes: u64,
    pub history: PlacementHistory,
    pub predictor: Box<dyn Predictor>,
    pub scorer: Box<dyn Scorer>,
    pub selectivity: Option<f64>,
    pub checks: usize,
    pub evaluations: Vec<(SimTime, Vec<CandidateEval>)>,
    pub errors: Vec<DecisionError>,
}

impl DecisionEngine {
    pub fn new(config: DecisionConfig, candidates: Vec<NodeId>, variant: AlgorithmVariant, predictor: Box<dyn Predictor>, scorer: Box<dyn Scorer>) -> Self {
        let history = PlacementHistory::new(config.history_len);
        DecisionEngine {
            config,
            candidates,
            variant,
            options: VariantOptions::default(),
            stateful: true,
            control_messages: BTreeMap::new(),
            control_bytes: DEFAULT_CONTROL_MESSAGE_BYTES,
            history,
            predictor,
            scorer,
            selectivity: None,
            checks: 0,
            evaluations: Vec::new(),
            errors: Vec::new(),
        }
    }

    fn try_check(&mut self, view: &PlannerView<'_>) -> Result<Option<Decision>, DecisionError> {
        let check = self.checks;
        self.checks += 1;
        self.predictor.observe(view.now, view.input_arrivals);
        let mut placement = BTreeMap::new();
        for &h in &self.candidates {
            let s = self.scorer.score(h, check, view.now);
            self.history.push(h, view.now, s)?;
            placement.insert(h, s);
        }
        let mut mts = BTreeMap::new();
        for &h in &self.candidates {
            if h != view.current_host {
                let link = view.network.link(view.current_host, h)?;
                let n = self.control_messages.get(&h).copied().unwrap_or(0);
                mts.insert(h, estimate_migration_time(view.state_bytes, link, n, self.control_bytes));
            }
        }
        let sel = self.selectivity.or(view.selectivity).unwrap_or(1.0);
        let evals = evaluate(view.current_host, &self.candidates, &placement, &self.history, &mts, self.predictor.as_ref(), sel, view.now, &self.config)?;
        let benefits: Vec<(NodeId, f64)> = evals.iter().map(|e| (e.host, e.benefit)).collect();
        let chosen = select_host(view.current_host, &benefits)?;
        self.evaluations.push((view.now, evals));
        let plan = if chosen != view.current_host {
            let programs = build_program(self.variant, &self.options, self.stateful).ok();
            programs.map(|p| MigrationPlan {
                at: view.now,
                old_host: view.current_host,
                new_host: chosen,
                program: p.migration,
                label: p.label,
                bootstrap: false,
            })
        } else {
            None
        };
        Ok(Some(Decision { chosen, benefits, plan }))
    }
}

impl MigrationPlanner for DecisionEngine {
    fn check_period(&self) -> SimTime {
        SimTime::from_secs_f64(self.config.check_period)
    }

    fn check(&mut self, view: &PlannerView<'_>) -> Option<Decision> {
        match self.try_check(view) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("decision check failed: {e}");
                self.errors.push(e);
                None
            }
        }
    }
}

/// Control-message overhead alone, for a given link.
pub fn control_overhead(link: &Link, control_messages: u64, control_bytes: u64) -> f64 {
    control_messages as f64 * (transmission_time(control_bytes, link.bandwidth_bps).as_secs_f64() + link.latency.as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amortization_examples() {
        assert_eq!(amortization_time(0.0, 5.0, 15.0), 15.0);
        assert_eq!(amortization_time(100.0, 5.0, 15.0), 5.0);
        assert_eq!(amortization_time(50.0, 5.0, 15.0), 10.0);
        assert_eq!(amortization_time(250.0, 5.0, 15.0), 5.0);
    }

    #[test]
    fn cost_edge_cases() {
        assert_eq!(migration_cost(5.0, 10.0, 1.0, true), Ok(0.0));
        assert_eq!(migration_cost(0.0, 0.0, 1.0, false), Ok(0.0));
        assert!(matches!(migration_cost(1.0, 0.0, 1.0, false), Err(DecisionError::UndefinedCost { .. })));
        assert!((migration_cost(100.0, 1000.0, 1.5, false).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn selection_prefers_current_then_lowest() {
        let c = NodeId(5);
        assert_eq!(select_host(c, &[(NodeId(1), 2.0), (c, 2.0)]), Ok(c));
        assert_eq!(select_host(c, &[(NodeId(3), 2.0), (NodeId(1), 2.0), (c, 1.0)]), Ok(NodeId(1)));
        assert_eq!(select_host(c, &[]), Err(DecisionError::NoCandidates));
    }

    #[test]
    fn rsd_needs_two_samples() {
        let mut h = PlacementHistory::new(3);
        h.push(NodeId(0), SimTime::ZERO, 2.0).unwrap();
        assert_eq!(h.rsd(NodeId(0)), 100.0);
        h.push(NodeId(0), SimTime::ZERO, 2.0).unwrap();
        assert_eq!(h.rsd(NodeId(0)), 0.0);
        for s in [1.0, 2.0, 3.0] {
            h.push(NodeId(0), SimTime::ZERO, s).unwrap();
        }
        assert_eq!(h.len(NodeId(0)), 3);
        assert!((h.rsd(NodeId(0)) - 50.0).abs() < 1e-9);
        assert!(h.push(NodeId(0), SimTime::ZERO, f64::NAN).is_err());
    }

    #[test]
    fn migration_time_of_one_gigabyte() {
        let l = Link::new(NodeId(0), NodeId(1), 200_000_000, SimTime::from_millis(1));
        assert!((estimate_migration_time(1_000_000_000, &l, 0, 168) - 40.001).abs() < 1e-9);
        let zero = estimate_migration_time(0, &l, 3, 168);
        assert!((zero - 0.001 - control_overhead(&l, 3, 168)).abs() < 1e-6);
    }

    #[test]
    fn ewma_tracks_constant_rate() {
        let mut p = EwmaPredictor::default();
        for s in 0..=20u64 {
            p.observe(SimTime::from_millis(s * 1000), s * 100);
        }
        assert!((p.predict(SimTime::ZERO, 5.0) - 500.0).abs() < 1e-6);
    }

    #[test]
    fn oracle_counts_window() {
        let p = OraclePredictor::new((0..10).map(|i| SimTime::from_millis(i * 100)).collect());
        assert_eq!(p.predict(SimTime::from_millis(200), 0.5), 5.0);
    }
}
