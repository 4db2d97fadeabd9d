//! JSON scenarios: topology, query, workload, migration and decision
//! settings, and the runners behind the command line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{run_migration, AlgorithmError, AlgorithmVariant, BufferLocation, MigrationReport, MigrationRequest, VariantOptions};
use crate::decision::{
    amortization_time, evaluate, select_host, DecisionConfig, DecisionEngine, DecisionError, EwmaPredictor, InverseLatencyScorer, OraclePredictor,
    OracleScorer, PlacementHistory, Predictor, Scorer,
};
use crate::metrics::{compare_outputs, measure, secs, MetricsRecord};
use crate::protocol::{EngineConfig, MigrationStatus, NodeInfo, NodeKind, ProgramAnalysis, QueryDef, SimSetup, Simulation, SourceDef};
use crate::simnet::{Link, Network, NodeId, SimTime};
use crate::streamcore::{OperatorSpec, QueryId, StreamId};
use crate::workload::WorkloadSpec;

pub const SCENARIO_SCHEMA: &str = "migrasim/scenario/v1";
pub const DECISION_SCHEMA: &str = "migrasim/decision/v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Invalid(Diagnostics),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostics(pub Vec<Diagnostic>);

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl ScenarioError {
    /// Schema and validation problems, as opposed to failures while running.
    pub fn is_invalid_input(&self) -> bool {
        matches!(self, ScenarioError::Invalid(_) | ScenarioError::Io { .. })
    }

    fn single(path: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Invalid(Diagnostics(vec![Diagnostic { path: path.into(), message: message.into() }]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    Source,
    Host,
    Sink,
    Coordinator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeRole,
    /// Streams a source node produces.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub streams: Vec<StreamId>,
}

/// A full-duplex link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub bandwidth_mbps: f64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub coordinator: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    #[serde(default)]
    pub id: u32,
    pub host: String,
    pub sink: String,
    pub operator: OperatorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigrationSpec {
    pub variant: AlgorithmVariant,
    /// Defaults to the query's host.
    #[serde(default)]
    pub old_host: Option<String>,
    /// Required unless a decision section picks the target.
    #[serde(default)]
    pub new_host: Option<String>,
    /// Seconds; absent means the decision engine triggers the migration.
    #[serde(default)]
    pub trigger: Option<f64>,
    #[serde(default)]
    pub buffer_location: BufferLocation,
    #[serde(default)]
    pub consistency_waiver: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSpec {
    /// Seconds at which replication to the new host starts.
    #[serde(default)]
    pub bootstrap_at: Option<f64>,
    #[serde(default = "default_checkpoint_interval")]
    pub interval: f64,
}

fn default_checkpoint_interval() -> f64 {
    10.0
}

impl Default for CheckpointSpec {
    fn default() -> Self {
        CheckpointSpec { bootstrap_at: None, interval: default_checkpoint_interval() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSpec {
    pub control_bytes: u64,
    /// State extraction throughput, MB/s.
    pub extract_mbytes_per_s: f64,
    /// State loading throughput, MB/s.
    pub load_mbytes_per_s: f64,
    pub max_chunk_bytes: Option<u64>,
    pub takeover_margin_ms: Option<f64>,
    pub max_events: u64,
}

impl Default for EngineSpec {
    fn default() -> Self {
        let d = EngineConfig::default();
        EngineSpec {
            control_bytes: d.control_bytes,
            extract_mbytes_per_s: d.extract_bytes_per_s / 1e6,
            load_mbytes_per_s: d.load_bytes_per_s / 1e6,
            max_chunk_bytes: None,
            takeover_margin_ms: None,
            max_events: d.max_events,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScorerSpec {
    /// Placement scores per check, by host name; the last row repeats.
    Oracle { rows: Vec<BTreeMap<String, f64>> },
    InverseLatency,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    #[default]
    Ewma,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionConfigSpec {
    #[serde(default = "default_min_at")]
    pub min_at: f64,
    #[serde(default = "default_max_at")]
    pub max_at: f64,
    #[serde(default = "default_w_c")]
    pub w_c: f64,
    #[serde(default)]
    pub w_c_per_host: BTreeMap<String, f64>,
    #[serde(default = "default_check_period")]
    pub check_period: f64,
    #[serde(default = "default_history_len")]
    pub history_len: usize,
}

fn default_min_at() -> f64 {
    DecisionConfig::default().min_at
}
fn default_max_at() -> f64 {
    DecisionConfig::default().max_at
}
fn default_w_c() -> f64 {
    1.0
}
fn default_check_period() -> f64 {
    1.0
}
fn default_history_len() -> usize {
    crate::decision::DEFAULT_HISTORY_LEN
}

impl Default for DecisionConfigSpec {
    fn default() -> Self {
        DecisionConfigSpec {
            min_at: default_min_at(),
            max_at: default_max_at(),
            w_c: default_w_c(),
            w_c_per_host: BTreeMap::new(),
            check_period: default_check_period(),
            history_len: default_history_len(),
        }
    }
}

impl DecisionConfigSpec {
    fn resolve(&self, names: &BTreeMap<String, NodeId>, path: &str, diags: &mut Vec<Diagnostic>) -> DecisionConfig {
        let mut per_host = BTreeMap::new();
        for (name, w) in &self.w_c_per_host {
            match names.get(name) {
                Some(id) => {
                    per_host.insert(*id, *w);
                }
                None => diags.push(Diagnostic { path: format!("{path}.w_c_per_host.{name}"), message: format!("unknown node '{name}'") }),
            }
        }
        let cfg = DecisionConfig {
            min_at: self.min_at,
            max_at: self.max_at,
            w_c: self.w_c,
            w_c_per_host: per_host,
            check_period: self.check_period,
            history_len: self.history_len,
        };
        if let Err(e) = cfg.validate() {
            diags.push(Diagnostic { path: path.to_string(), message: e.to_string() });
        }
        if !(self.check_period > 0.0) {
            diags.push(Diagnostic { path: format!("{path}.check_period"), message: "must be positive".into() });
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionSpec {
    pub candidates: Vec<String>,
    #[serde(default)]
    pub config: DecisionConfigSpec,
    #[serde(default)]
    pub predictor: PredictorKind,
    pub scorer: ScorerSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    /// Overrides the workload seed.
    #[serde(default)]
    pub seed: Option<u64>,
    pub topology: TopologySpec,
    pub query: QuerySpec,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub migration: Option<MigrationSpec>,
    #[serde(default)]
    pub checkpoint: CheckpointSpec,
    #[serde(default)]
    pub decision: Option<DecisionSpec>,
    #[serde(default)]
    pub engine: EngineSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

/// Deserializes JSON, reporting the path of the offending field.
pub fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ScenarioError::single(if path.is_empty() { ".".to_string() } else { path }, e.into_inner().to_string())
    })
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}

/// A scenario resolved into a simulation setup.
#[derive(Clone, Debug)]
pub struct Built {
    pub setup: SimSetup,
    pub names: BTreeMap<String, NodeId>,
    pub request: Option<MigrationRequest>,
    pub decision: Option<(DecisionSpec, DecisionConfig, Vec<NodeId>)>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        Self::parse(&read(path)?)
    }

    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = from_json(text)?;
        s.build()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Every problem found while resolving names and parameters.
    pub fn validate(&self) -> Vec<Diagnostic> {
        match self.build() {
            Ok(_) => Vec::new(),
            Err(ScenarioError::Invalid(d)) => d.0,
            Err(e) => vec![Diagnostic { path: ".".into(), message: e.to_string() }],
        }
    }

    pub fn build(&self) -> Result<Built, ScenarioError> {
        let mut d = Vec::new();
        let mut push = |path: String, message: String| d.push(Diagnostic { path, message });
        if self.schema != SCENARIO_SCHEMA {
            push("schema".into(), format!("expected '{SCENARIO_SCHEMA}', found '{}'", self.schema));
        }
        let mut names = BTreeMap::new();
        let mut nodes = Vec::new();
        for (i, n) in self.topology.nodes.iter().enumerate() {
            if names.insert(n.name.clone(), NodeId(i as u32)).is_some() {
                push(format!("topology.nodes[{i}].name"), format!("duplicate node '{}'", n.name));
            }
            if !n.streams.is_empty() && n.kind != NodeRole::Source {
                push(format!("topology.nodes[{i}].streams"), "only source nodes produce streams".into());
            }
            let kind = match n.kind {
                NodeRole::Source => NodeKind::Source,
                NodeRole::Host => NodeKind::Host,
                NodeRole::Sink => NodeKind::Sink,
                NodeRole::Coordinator => NodeKind::Coordinator,
            };
            nodes.push(NodeInfo { name: n.name.clone(), kind });
        }
        let lookup = |name: &str, path: String, d: &mut Vec<Diagnostic>| -> NodeId {
            names.get(name).copied().unwrap_or_else(|| {
                d.push(Diagnostic { path, message: format!("unknown node '{name}'") });
                NodeId(0)
            })
        };
        let mut network = Network::new();
        for (i, l) in self.topology.links.iter().enumerate() {
            let a = lookup(&l.a, format!("topology.links[{i}].a"), &mut d);
            let b = lookup(&l.b, format!("topology.links[{i}].b"), &mut d);
            if !(l.bandwidth_mbps > 0.0) || !(l.latency_ms >= 0.0) {
                d.push(Diagnostic { path: format!("topology.links[{i}]"), message: "bandwidth must be positive and latency non-negative".into() });
                continue;
            }
            let link = Link::new(a, b, (l.bandwidth_mbps * 1e6).round() as u64, SimTime::from_secs_f64(l.latency_ms / 1e3));
            if let Err(e) = network.add_duplex(link) {
                d.push(Diagnostic { path: format!("topology.links[{i}]"), message: e.to_string() });
            }
        }
        let coordinator = lookup(&self.topology.coordinator, "topology.coordinator".into(), &mut d);
        let host = lookup(&self.query.host, "query.host".into(), &mut d);
        let sink = lookup(&self.query.sink, "query.sink".into(), &mut d);

        let mut workload = self.workload.clone();
        if let Some(seed) = self.seed {
            workload.seed = seed;
        }
        let mut producer: BTreeMap<StreamId, NodeId> = BTreeMap::new();
        for (i, n) in self.topology.nodes.iter().enumerate() {
            for s in &n.streams {
                if producer.insert(*s, NodeId(i as u32)).is_some() {
                    d.push(Diagnostic { path: format!("topology.nodes[{i}].streams"), message: format!("stream {s} has two producers") });
                }
            }
        }
        let sources: Vec<NodeId> = self
            .topology
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeRole::Source)
            .map(|(i, _)| NodeId(i as u32))
            .collect();
        for (i, s) in workload.streams.iter().enumerate() {
            if !producer.contains_key(&s.stream) {
                if sources.len() == 1 {
                    producer.insert(s.stream, sources[0]);
                } else {
                    d.push(Diagnostic { path: format!("workload.streams[{i}].stream"), message: format!("no source node produces stream {}", s.stream) });
                }
            }
            for (j, seg) in s.segments.iter().enumerate() {
                if !(seg.rate > 0.0) {
                    d.push(Diagnostic { path: format!("workload.streams[{i}].segments[{j}].rate"), message: "must be positive".into() });
                }
            }
        }
        for input in self.query.operator.inputs() {
            if !workload.streams.iter().any(|s| s.stream == input) {
                d.push(Diagnostic { path: "query.operator".into(), message: format!("input stream {input} is not in the workload") });
            }
        }
        let e = &self.engine;
        if !(e.extract_mbytes_per_s > 0.0 && e.load_mbytes_per_s > 0.0) {
            d.push(Diagnostic { path: "engine".into(), message: "extraction and load throughput must be positive".into() });
        }
        if !(self.checkpoint.interval > 0.0) {
            d.push(Diagnostic { path: "checkpoint.interval".into(), message: "must be positive".into() });
        }
        let config = EngineConfig {
            control_bytes: e.control_bytes,
            extract_bytes_per_s: e.extract_mbytes_per_s * 1e6,
            load_bytes_per_s: e.load_mbytes_per_s * 1e6,
            max_chunk_bytes: e.max_chunk_bytes,
            takeover_margin: e.takeover_margin_ms.map(|m| SimTime::from_secs_f64(m / 1e3)),
            checkpoint_interval: SimTime::from_secs_f64(self.checkpoint.interval),
            sink_dedup: false,
            max_events: e.max_events,
        };

        let mut request = None;
        let mut decision = None;
        match (&self.migration, &self.decision) {
            (Some(m), dec) => {
                let old = m.old_host.as_deref().map_or(host, |n| lookup(n, "migration.old_host".into(), &mut d));
                let options = VariantOptions {
                    buffer_location: m.buffer_location,
                    consistency_waiver: m.consistency_waiver,
                    bootstrap_at: self.checkpoint.bootstrap_at.map(SimTime::from_secs_f64),
                };
                if self.query.operator.is_stateful() && m.variant == AlgorithmVariant::PauseDrainResume && !m.consistency_waiver {
                    d.push(Diagnostic { path: "migration.variant".into(), message: AlgorithmError::StatefulPauseDrainResume.to_string() });
                }
                match (m.trigger, dec) {
                    (Some(trigger), _) => {
                        let Some(new_name) = &m.new_host else {
                            d.push(Diagnostic { path: "migration.new_host".into(), message: "required with a trigger time".into() });
                            return Err(ScenarioError::Invalid(Diagnostics(d)));
                        };
                        let new = lookup(new_name, "migration.new_host".into(), &mut d);
                        if new == old {
                            d.push(Diagnostic { path: "migration.new_host".into(), message: "equals the old host".into() });
                        }
                        if !(trigger >= 0.0) {
                            d.push(Diagnostic { path: "migration.trigger".into(), message: "must be non-negative".into() });
                        }
                        if let Some(b) = self.checkpoint.bootstrap_at {
                            if b > trigger {
                                d.push(Diagnostic { path: "checkpoint.bootstrap_at".into(), message: "after the migration trigger".into() });
                            }
                        }
                        request = Some(MigrationRequest {
                            old_host: old,
                            new_host: new,
                            variant: m.variant,
                            trigger: SimTime::from_secs_f64(trigger.max(0.0)),
                            options,
                        });
                    }
                    (None, Some(spec)) => {
                        let cfg = spec.config.resolve(&names, "decision.config", &mut d);
                        let cands: Vec<NodeId> =
                            spec.candidates.iter().enumerate().map(|(i, c)| lookup(c, format!("decision.candidates[{i}]"), &mut d)).collect();
                        if cands.is_empty() {
                            d.push(Diagnostic { path: "decision.candidates".into(), message: "no candidate hosts".into() });
                        }
                        if !cands.contains(&host) {
                            d.push(Diagnostic { path: "decision.candidates".into(), message: "must include the query's host".into() });
                        }
                        if let ScorerSpec::Oracle { rows } = &spec.scorer {
                            for (i, r) in rows.iter().enumerate() {
                                for k in r.keys() {
                                    lookup(k, format!("decision.scorer.rows[{i}].{k}"), &mut d);
                                }
                            }
                        }
                        decision = Some((spec.clone(), cfg, cands));
                    }
                    (None, None) => d.push(Diagnostic { path: "migration.trigger".into(), message: "needs a trigger time or a decision section".into() }),
                }
            }
            (None, Some(_)) => d.push(Diagnostic { path: "migration".into(), message: "a decision section needs a migration variant".into() }),
            (None, None) => {}
        }
        if !d.is_empty() {
            return Err(ScenarioError::Invalid(Diagnostics(d)));
        }

        let tuples = workload.generate();
        let mut per_source: BTreeMap<NodeId, Vec<_>> = BTreeMap::new();
        for t in tuples {
            per_source.entry(producer[&t.stream]).or_default().push(t);
        }
        let sources = per_source.into_iter().map(|(node, tuples)| SourceDef { node, tuples }).collect();
        let setup = SimSetup {
            nodes,
            network,
            coordinator,
            query: QueryDef { id: QueryId(self.query.id), spec: self.query.operator.clone(), host, sink },
            sources,
            config,
            plans: Vec::new(),
        };
        let mut problems = Vec::new();
        let mut need = |a: NodeId, b: NodeId, what: &str| {
            if !setup.network.has_link(a, b) {
                problems.push(Diagnostic {
                    path: "topology.links".into(),
                    message: format!("{what} needs a link {} <-> {}", setup.nodes[a.0 as usize].name, setup.nodes[b.0 as usize].name),
                });
            }
        };
        let hosts: BTreeSet<NodeId> = std::iter::once(host)
            .chain(request.iter().flat_map(|r| [r.old_host, r.new_host]))
            .chain(decision.iter().flat_map(|d| d.2.iter().copied()))
            .collect();
        for &h in &hosts {
            for u in setup.upstreams() {
                need(u, h, "the query's input");
            }
            need(h, sink, "the query's output");
            need(coordinator, h, "control");
            for &o in &hosts {
                if o < h {
                    need(o, h, "migration");
                }
            }
        }
        for u in setup.upstreams() {
            need(coordinator, u, "control");
        }
        if !problems.is_empty() {
            return Err(ScenarioError::Invalid(Diagnostics(problems)));
        }
        Ok(Built { setup, names, request, decision })
    }
}

/// The five-node experiment topology: source `US`, hosts `C` and `D`,
/// `Sink` and coordinator `Leader`, fully linked at 200 Mbit/s and 1 ms.
/// The query joins one person (stream 0) with `auctions` auctions
/// (stream 1) on host `C`; the migration moves it to `D` at `trigger`.
pub fn experiment(variant: AlgorithmVariant, auctions: u64, rate: f64, trigger: f64) -> Scenario {
    let names = ["US", "C", "D", "Sink", "Leader"];
    let kinds = [NodeRole::Source, NodeRole::Host, NodeRole::Host, NodeRole::Sink, NodeRole::Coordinator];
    let nodes = names
        .iter()
        .zip(kinds)
        .map(|(n, kind)| NodeSpec {
            name: n.to_string(),
            kind,
            streams: if kind == NodeRole::Source { vec![StreamId(0), StreamId(1)] } else { Vec::new() },
        })
        .collect();
    let mut links = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            links.push(LinkSpec { a: a.to_string(), b: b.to_string(), bandwidth_mbps: 200.0, latency_ms: 1.0 });
        }
    }
    Scenario {
        schema: SCENARIO_SCHEMA.into(),
        name: format!("experiment-{}", variant.name()),
        seed: None,
        topology: TopologySpec { nodes, links, coordinator: "Leader".into() },
        query: QuerySpec {
            id: 0,
            host: "C".into(),
            sink: "Sink".into(),
            operator: OperatorSpec::Join {
                person: StreamId(0),
                auction: StreamId(1),
                output: StreamId(2),
                output_payload_bytes: crate::workload::AUCTION_PAYLOAD_BYTES,
            },
        },
        workload: WorkloadSpec::experiment(StreamId(0), StreamId(1), auctions, rate, 1.0),
        migration: Some(MigrationSpec {
            variant,
            old_host: None,
            new_host: Some("D".into()),
            trigger: Some(trigger),
            buffer_location: BufferLocation::NewHost,
            consistency_waiver: variant == AlgorithmVariant::PauseDrainResume,
        }),
        checkpoint: CheckpointSpec {
            bootstrap_at: variant.taxonomy().checkpoint_assisted.then_some(0.0),
            interval: default_checkpoint_interval(),
        },
        decision: None,
        engine: EngineSpec::default(),
        output: OutputSpec::default(),
    }
}

/// Result of one scenario run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub report: Option<MigrationReport>,
    pub decision_log: Vec<String>,
}

impl RunResult {
    pub fn is_correct(&self) -> bool {
        self.report.as_ref().map_or(true, MigrationReport::is_correct)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<AlgorithmVariant>,
}

impl Scenario {
    pub fn with_overrides(&self, o: &Overrides) -> Scenario {
        let mut s = self.clone();
        if o.seed.is_some() {
            s.seed = o.seed;
        }
        if let (Some(v), Some(m)) = (o.variant, s.migration.as_mut()) {
            m.variant = v;
        }
        s
    }

    /// Runs the migration, or just the workload when none is configured.
    pub fn run(&self) -> Result<RunResult, ScenarioError> {
        let built = self.build()?;
        if let Some(req) = &built.request {
            let report = run_migration(&built.setup, req, true)?;
            return Ok(RunResult { report: Some(report), decision_log: Vec::new() });
        }
        if let Some((spec, cfg, cands)) = &built.decision {
            return self.run_decided(&built, spec, cfg, cands);
        }
        Simulation::new(&built.setup).map_err(AlgorithmError::from)?.run().map_err(AlgorithmError::from)?;
        Ok(RunResult { report: None, decision_log: Vec::new() })
    }

    fn run_decided(&self, built: &Built, spec: &DecisionSpec, cfg: &DecisionConfig, cands: &[NodeId]) -> Result<RunResult, ScenarioError> {
        let m = self.migration.as_ref().expect("validated");
        let setup = &built.setup;
        let predictor: Box<dyn Predictor> = match spec.predictor {
            PredictorKind::Ewma => Box::new(EwmaPredictor::default()),
            PredictorKind::Oracle => {
                let inputs = setup.query.spec.inputs();
                let arrivals = setup.sources.iter().flat_map(|s| s.tuples.iter()).filter(|t| inputs.contains(&t.stream)).map(|t| t.timestamp).collect();
                Box::new(OraclePredictor::new(arrivals))
            }
        };
        let scorer: Box<dyn Scorer> = match &spec.scorer {
            ScorerSpec::Oracle { rows } => Box::new(OracleScorer {
                rows: rows.iter().map(|r| r.iter().map(|(k, v)| (built.names[k], *v)).collect()).collect(),
            }),
            ScorerSpec::InverseLatency => {
                Box::new(InverseLatencyScorer { network: setup.network.clone(), sources: setup.upstreams(), sink: setup.query.sink })
            }
        };
        let options = VariantOptions { buffer_location: m.buffer_location, consistency_waiver: m.consistency_waiver, bootstrap_at: None };
        let mut engine = DecisionEngine::new(cfg.clone(), cands.to_vec(), m.variant, predictor, scorer);
        engine.options = options;
        engine.stateful = setup.query.spec.is_stateful();
        engine.control_bytes = setup.config.control_bytes;
        if let Ok(p) = crate::algorithms::build_program(m.variant, &options, engine.stateful) {
            for &c in cands {
                if c != setup.query.host {
                    let a = ProgramAnalysis::new(&p.migration, &setup.roles(setup.query.host, c)).map_err(|e| ScenarioError::single("decision", e.to_string()))?;
                    engine.control_messages.insert(c, a.control_messages);
                }
            }
        }
        let mut run_setup = setup.clone();
        run_setup.config.sink_dedup |= m.variant.is_parallel();
        let run = Simulation::new(&run_setup).map_err(AlgorithmError::from)?.with_planner(&mut engine).run().map_err(AlgorithmError::from)?;
        let mut decision_log = Vec::new();
        for (t, evals) in &engine.evaluations {
            let cells: Vec<String> = evals.iter().map(|e| format!("{}:P={:.3},C={:.3},B={:.3}", setup.nodes[e.host.0 as usize].name, e.placement, e.cost, e.benefit)).collect();
            decision_log.push(format!("{t} {}", cells.join(" ")));
        }
        if let Some(e) = engine.errors.first() {
            return Err(e.clone().into());
        }
        let Some(summary) = run.migrations.iter().find(|s| !s.bootstrap) else {
            return Ok(RunResult { report: None, decision_log });
        };
        let mut twin = run_setup.clone();
        twin.plans.clear();
        let baseline = Simulation::new(&twin).map_err(AlgorithmError::from)?.run().map_err(AlgorithmError::from)?;
        let metrics = measure(&run.log, summary.mid, Some(&baseline.log)).map_err(AlgorithmError::from)?;
        let outputs = Some(compare_outputs(&run.log, &baseline.log));
        let status = summary.status;
        let report = MigrationReport { metrics, status, outputs, run, baseline: Some(baseline) };
        Ok(RunResult { report: Some(report), decision_log })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub seed: u64,
    pub variant: AlgorithmVariant,
    pub correct: bool,
    pub metrics: MetricsRecord,
}

/// Runs `variants` on the same workload for each seed.
pub fn compare(scenario: &Scenario, variants: &[AlgorithmVariant], seeds: &[u64]) -> Result<Vec<CompareRow>, ScenarioError> {
    if scenario.migration.as_ref().and_then(|m| m.trigger).is_none() {
        return Err(ScenarioError::single("migration.trigger", "compare needs a fixed trigger time"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let s = scenario.with_overrides(&Overrides { seed: Some(seed), variant: Some(variant) });
            let result = s.run()?;
            let report = result.report.expect("fixed trigger always migrates");
            rows.push(CompareRow { seed, variant, correct: report.is_correct(), metrics: report.metrics });
        }
    }
    Ok(rows)
}

pub fn write_compare_csv<W: std::io::Write>(out: W, rows: &[CompareRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["seed", "variant", "correct"];
    header.extend(MetricsRecord::CSV_HEADER);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.seed.to_string(), r.variant.name().to_string(), r.correct.to_string()];
        rec.extend(r.metrics.csv_row());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    /// Predicted input tuples during the current host's amortization time.
    pub pt: f64,
    /// Placement score of each host.
    pub qos: BTreeMap<String, f64>,
}

/// Link-based migration time estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionNetworkSpec {
    pub links: Vec<LinkSpec>,
    pub state_bytes: u64,
    #[serde(default)]
    pub control_messages: u64,
    #[serde(default = "default_control_bytes")]
    pub control_bytes: u64,
}

fn default_control_bytes() -> u64 {
    crate::simnet::DEFAULT_CONTROL_MESSAGE_BYTES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionScenario {
    pub schema: String,
    pub current_host: String,
    pub hosts: Vec<String>,
    #[serde(default = "default_selectivity")]
    pub selectivity: f64,
    #[serde(default)]
    pub config: DecisionConfigSpec,
    /// Seconds per host; hosts missing here use `network` when given.
    #[serde(default)]
    pub migration_time: BTreeMap<String, f64>,
    #[serde(default)]
    pub network: Option<DecisionNetworkSpec>,
    pub checks: Vec<CheckSpec>,
    /// Carry the chosen host into the next check.
    #[serde(default)]
    pub chain: bool,
}

fn default_selectivity() -> f64 {
    1.0
}

/// One row of the decision table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecisionRow {
    pub pt: f64,
    pub current: String,
    pub qos: Vec<f64>,
    pub benefit: Vec<f64>,
    pub with_cost: String,
    pub without_cost: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecisionTable {
    pub hosts: Vec<String>,
    pub rows: Vec<DecisionRow>,
}

/// Predicts a constant input rate.
struct RatePredictor(f64);

impl Predictor for RatePredictor {
    fn observe(&mut self, _now: SimTime, _total: u64) {}
    fn predict(&self, _now: SimTime, horizon: f64) -> f64 {
        self.0 * horizon
    }
}

impl DecisionScenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&read(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: DecisionScenario = from_json(text)?;
        s.validate_all()?;
        Ok(s)
    }

    fn ids(&self) -> BTreeMap<String, NodeId> {
        self.hosts.iter().enumerate().map(|(i, h)| (h.clone(), NodeId(i as u32))).collect()
    }

    fn validate_all(&self) -> Result<(DecisionConfig, BTreeMap<NodeId, f64>), ScenarioError> {
        let mut d = Vec::new();
        if self.schema != DECISION_SCHEMA {
            d.push(Diagnostic { path: "schema".into(), message: format!("expected '{DECISION_SCHEMA}', found '{}'", self.schema) });
        }
        let ids = self.ids();
        if ids.len() != self.hosts.len() {
            d.push(Diagnostic { path: "hosts".into(), message: "duplicate host".into() });
        }
        if self.hosts.is_empty() {
            d.push(Diagnostic { path: "hosts".into(), message: "no candidate hosts".into() });
        }
        if !ids.contains_key(&self.current_host) {
            d.push(Diagnostic { path: "current_host".into(), message: format!("'{}' is not among the hosts", self.current_host) });
        }
        let cfg = self.config.resolve(&ids, "config", &mut d);
        for (i, c) in self.checks.iter().enumerate() {
            if !(c.pt >= 0.0) {
                d.push(Diagnostic { path: format!("checks[{i}].pt"), message: "must be non-negative".into() });
            }
            for h in c.qos.keys() {
                if !ids.contains_key(h) {
                    d.push(Diagnostic { path: format!("checks[{i}].qos.{h}"), message: format!("unknown host '{h}'") });
                }
            }
            for h in &self.hosts {
                if !c.qos.contains_key(h) {
                    d.push(Diagnostic { path: format!("checks[{i}].qos"), message: format!("missing score for '{h}'") });
                }
            }
        }
        let mut mts = BTreeMap::new();
        let mut net = None;
        if let Some(n) = &self.network {
            let mut network = Network::new();
            for (i, l) in n.links.iter().enumerate() {
                match (ids.get(&l.a), ids.get(&l.b)) {
                    (Some(a), Some(b)) if l.bandwidth_mbps > 0.0 && l.latency_ms >= 0.0 => {
                        let link = Link::new(*a, *b, (l.bandwidth_mbps * 1e6).round() as u64, SimTime::from_secs_f64(l.latency_ms / 1e3));
                        if let Err(e) = network.add_duplex(link) {
                            d.push(Diagnostic { path: format!("network.links[{i}]"), message: e.to_string() });
                        }
                    }
                    _ => d.push(Diagnostic { path: format!("network.links[{i}]"), message: "unknown host or invalid link parameters".into() }),
                }
            }
            net = Some((network, n));
        }
        for (h, id) in &ids {
            if *h == self.current_host {
                continue;
            }
            if let Some(mt) = self.migration_time.get(h) {
                mts.insert(*id, *mt);
            } else if let Some((network, n)) = &net {
                match network.link(ids[&self.current_host], *id) {
                    Ok(l) => {
                        mts.insert(*id, crate::decision::estimate_migration_time(n.state_bytes, l, n.control_messages, n.control_bytes));
                    }
                    Err(e) => d.push(Diagnostic { path: "network.links".into(), message: e.to_string() }),
                }
            } else {
                d.push(Diagnostic { path: "migration_time".into(), message: format!("no migration time for '{h}'") });
            }
        }
        for k in self.migration_time.keys() {
            if !ids.contains_key(k) {
                d.push(Diagnostic { path: format!("migration_time.{k}"), message: format!("unknown host '{k}'") });
            }
        }
        if !d.is_empty() {
            return Err(ScenarioError::Invalid(Diagnostics(d)));
        }
        Ok((cfg, mts))
    }

    /// Evaluates every check with and without the cost model.
    pub fn decide(&self) -> Result<DecisionTable, ScenarioError> {
        let (cfg, mts) = self.validate_all()?;
        let ids = self.ids();
        let hosts: Vec<NodeId> = self.hosts.iter().map(|h| ids[h]).collect();
        let name = |id: NodeId| self.hosts[id.0 as usize].clone();
        let mut history = PlacementHistory::new(cfg.history_len);
        let mut current = ids[&self.current_host];
        let mut rows = Vec::new();
        let no_cost = DecisionConfig { w_c: 0.0, w_c_per_host: BTreeMap::new(), ..cfg.clone() };
        for (i, c) in self.checks.iter().enumerate() {
            let now = SimTime::from_secs_f64(i as f64 * cfg.check_period);
            let placement: BTreeMap<NodeId, f64> = c.qos.iter().map(|(k, v)| (ids[k], *v)).collect();
            for (&h, &p) in &placement {
                history.push(h, now, p)?;
            }
            let at_current = amortization_time(history.rsd(current), cfg.min_at, cfg.max_at);
            let predictor = RatePredictor(c.pt / at_current);
            let mut mt = mts.clone();
            if self.chain {
                mt = self.times_from(current, &ids, &mts);
            }
            let with = evaluate(current, &hosts, &placement, &history, &mt, &predictor, self.selectivity, now, &cfg)?;
            let without = evaluate(current, &hosts, &placement, &history, &mt, &predictor, self.selectivity, now, &no_cost)?;
            let b: Vec<(NodeId, f64)> = with.iter().map(|e| (e.host, e.benefit)).collect();
            let nb: Vec<(NodeId, f64)> = without.iter().map(|e| (e.host, e.benefit)).collect();
            let cm = select_host(current, &b)?;
            let ncm = select_host(current, &nb)?;
            rows.push(DecisionRow {
                pt: c.pt,
                current: name(current),
                qos: with.iter().map(|e| e.placement).collect(),
                benefit: with.iter().map(|e| e.benefit).collect(),
                with_cost: name(cm),
                without_cost: name(ncm),
            });
            if self.chain {
                current = cm;
            }
        }
        Ok(DecisionTable { hosts: self.hosts.clone(), rows })
    }

    fn times_from(&self, current: NodeId, ids: &BTreeMap<String, NodeId>, fixed: &BTreeMap<NodeId, f64>) -> BTreeMap<NodeId, f64> {
        if current == ids[&self.current_host] {
            return fixed.clone();
        }
        let Some(n) = &self.network else {
            return fixed.clone();
        };
        let mut network = Network::new();
        for l in &n.links {
            let link = Link::new(ids[&l.a], ids[&l.b], (l.bandwidth_mbps * 1e6).round() as u64, SimTime::from_secs_f64(l.latency_ms / 1e3));
            let _ = network.add_duplex(link);
        }
        ids.values()
            .filter(|h| **h != current)
            .filter_map(|h| {
                network
                    .link(current, *h)
                    .ok()
                    .map(|l| (*h, crate::decision::estimate_migration_time(n.state_bytes, l, n.control_messages, n.control_bytes)))
            })
            .collect()
    }
}

impl DecisionTable {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["pt".to_string(), "current".to_string()];
        for h in &self.hosts {
            header.push(format!("qos_{h}"));
            header.push(format!("b_{h}"));
        }
        header.push("p_cm".into());
        header.push("p_ncm".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![format!("{}", r.pt), r.current.clone()];
            for (q, b) in r.qos.iter().zip(&r.benefit) {
                rec.push(secs(*q));
                rec.push(secs(*b));
            }
            rec.push(r.with_cost.clone());
            rec.push(r.without_cost.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scenario statuses that make the run count as a correctness failure.
pub fn failed(status: MigrationStatus) -> bool {
    status != MigrationStatus::Completed
}
