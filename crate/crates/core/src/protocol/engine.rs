//! Simulation of sources, hosts and a sink exchanging tuples, control
//! messages, markers and state over simulated links. Every node runs the
//! migration task programs it receives.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use thiserror::Error;

use super::analysis::{placement, Placement, ProgramAnalysis, RoleError, RoleMap};
use super::task::{ControlTask, MoveKind, Role, StreamSel, TimeRef};
use crate::metrics::{EventLog, LogEvent, MigrationId};
use crate::simnet::{transmission_time, Event, EventQueue, Network, NodeId, SimError, SimTime, DEFAULT_CONTROL_MESSAGE_BYTES};
use crate::statemgmt::{extract_state, partition, BlobKind, InstallProgress, ReplicationLog, StateBlob, StateLoader, BLOB_HEADER_BYTES};
use crate::streamcore::{OperatorSpec, Processed, QueryId, QueryInstance, StreamId, StreamRoute, Tuple};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Role(#[from] RoleError),
    #[error("invalid setup: {0}")]
    Setup(String),
    #[error("cannot inject an empty program")]
    EmptyProgram,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Source,
    Host,
    Sink,
    Coordinator,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryDef {
    pub id: QueryId,
    pub spec: OperatorSpec,
    pub host: NodeId,
    pub sink: NodeId,
}

/// Tuples a source node emits, each at its timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceDef {
    pub node: NodeId,
    pub tuples: Vec<Tuple>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub control_bytes: u64,
    pub extract_bytes_per_s: f64,
    pub load_bytes_per_s: f64,
    pub max_chunk_bytes: Option<u64>,
    /// Safety margin added to takeover times; defaults to twice the
    /// control round trip between old and new host.
    pub takeover_margin: Option<SimTime>,
    pub checkpoint_interval: SimTime,
    /// Drop repeated `(stream, seq)` outputs at the sink.
    pub sink_dedup: bool,
    pub max_events: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            control_bytes: DEFAULT_CONTROL_MESSAGE_BYTES,
            extract_bytes_per_s: 300e6,
            load_bytes_per_s: 100e6,
            max_chunk_bytes: None,
            takeover_margin: None,
            checkpoint_interval: SimTime::from_millis(10_000),
            sink_dedup: false,
            max_events: EventQueue::<()>::DEFAULT_EVENT_LIMIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MigrationPlan {
    pub at: SimTime,
    pub old_host: NodeId,
    pub new_host: NodeId,
    pub program: Vec<ControlTask>,
    pub label: String,
    /// Completes once its program is acknowledged, regardless of hosts.
    pub bootstrap: bool,
}

#[derive(Clone, Debug)]
pub struct SimSetup {
    pub nodes: Vec<NodeInfo>,
    pub network: Network,
    pub coordinator: NodeId,
    pub query: QueryDef,
    pub sources: Vec<SourceDef>,
    pub config: EngineConfig,
    pub plans: Vec<MigrationPlan>,
}

impl SimSetup {
    pub fn node_names(&self) -> BTreeMap<String, NodeId> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.name.clone(), NodeId(i as u32))).collect()
    }

    /// Producer node of every stream.
    pub fn producers(&self) -> BTreeMap<StreamId, NodeId> {
        let mut m = BTreeMap::new();
        for s in &self.sources {
            for t in &s.tuples {
                m.entry(t.stream).or_insert(s.node);
            }
        }
        m
    }

    pub fn upstreams(&self) -> Vec<NodeId> {
        let producers = self.producers();
        let mut v: Vec<NodeId> = self.query.spec.inputs().iter().filter_map(|s| producers.get(s).copied()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn roles(&self, old_host: NodeId, new_host: NodeId) -> RoleMap {
        RoleMap {
            old_host,
            new_host,
            upstreams: self.upstreams(),
            downstreams: vec![self.query.sink],
            coordinator: self.coordinator,
            names: self.node_names(),
        }
    }

    fn validate(&self) -> Result<(), EngineError> {
        let n = self.nodes.len() as u32;
        let check = |id: NodeId, what: &str| {
            if id.0 >= n {
                Err(EngineError::Setup(format!("{what} refers to missing node {id}")))
            } else {
                Ok(())
            }
        };
        check(self.coordinator, "coordinator")?;
        check(self.query.host, "query host")?;
        check(self.query.sink, "query sink")?;
        let mut producer: BTreeMap<StreamId, NodeId> = BTreeMap::new();
        for s in &self.sources {
            check(s.node, "source")?;
            let mut last: BTreeMap<StreamId, u64> = BTreeMap::new();
            for w in s.tuples.windows(2) {
                if w[1].timestamp < w[0].timestamp {
                    return Err(EngineError::Setup(format!("tuples of source {} are not time-ordered", s.node)));
                }
            }
            for t in &s.tuples {
                if *producer.entry(t.stream).or_insert(s.node) != s.node {
                    return Err(EngineError::Setup(format!("stream {} has more than one producer", t.stream)));
                }
                let prev = last.insert(t.stream, t.seq).unwrap_or(0);
                if t.seq <= prev {
                    return Err(EngineError::Setup(format!("stream {} seq not strictly increasing", t.stream)));
                }
            }
        }
        for p in &self.plans {
            check(p.old_host, "migration old host")?;
            check(p.new_host, "migration new host")?;
        }
        Ok(())
    }
}

/// Snapshot offered to a planner at each decision check.
#[derive(Clone, Debug)]
pub struct PlannerView<'a> {
    pub now: SimTime,
    pub current_host: NodeId,
    pub state_bytes: u64,
    /// Input tuples that have arrived at the current host so far.
    pub input_arrivals: u64,
    pub selectivity: Option<f64>,
    pub network: &'a Network,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub chosen: NodeId,
    pub benefits: Vec<(NodeId, f64)>,
    pub plan: Option<MigrationPlan>,
}

/// Decides at periodic checks whether to migrate the query.
pub trait MigrationPlanner {
    fn check_period(&self) -> SimTime;
    fn first_check(&self) -> SimTime {
        self.check_period()
    }
    fn check(&mut self, view: &PlannerView<'_>) -> Option<Decision>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MigrationStatus {
    Completed,
    Aborted,
    Incomplete,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MigrationSummary {
    pub mid: MigrationId,
    pub label: String,
    pub old_host: NodeId,
    pub new_host: NodeId,
    pub bootstrap: bool,
    pub planned_control_messages: u64,
    pub parallel: bool,
    pub pausing: bool,
    pub status: MigrationStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub log: EventLog,
    pub end_time: SimTime,
    pub migrations: Vec<MigrationSummary>,
}

type Token = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Purpose {
    Replica,
    Move { token: Token, is_final: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RouteChange {
    /// The receiver no longer gets the stream; it has every tuple with
    /// timestamp below `hint`.
    Removed { hint: SimTime },
    /// The receiver gets every tuple with timestamp above `hint` from now on.
    Joined { hint: SimTime },
    /// Another hop was added next to the receiver.
    Added,
}

#[derive(Clone, Debug)]
enum Msg {
    Data(Tuple),
    Eos(StreamId),
    Control { mid: MigrationId, tasks: Vec<ControlTask>, token: Token },
    Ack { token: Token },
    Marker { mid: MigrationId, stream: StreamId, change: RouteChange },
    State { mid: MigrationId, blob: StateBlob, purpose: Purpose },
}

#[derive(Clone, Debug)]
enum Ev {
    Emit,
    Arrive { from: NodeId, msg: Msg },
    Inject(Box<MigrationPlan>),
    SendState { mid: MigrationId, to: NodeId, blob: StateBlob, purpose: Purpose },
    LoadDone { mid: MigrationId, from: NodeId, blob: StateBlob, purpose: Purpose, duration: SimTime },
    ReplicaTick { mid: MigrationId, dst: NodeId },
    Timer,
    DecisionCheck,
}

#[derive(Clone, Debug)]
enum Input {
    Tuple(Tuple),
    Eos(StreamId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    /// Holds replicated state, not processing.
    Standby,
    /// Migration target waiting for state or a start signal.
    Awaiting,
    Running,
    /// Processing paused while state is extracted and moved.
    Paused,
    Stopped,
}

#[derive(Debug)]
struct Host {
    inst: QueryInstance,
    status: Status,
    loader: StateLoader,
    migration: Option<MigrationId>,
    input_stopped: bool,
    input_buffering: bool,
    output_stopped: bool,
    awaiting_final: bool,
    resume_on_install: bool,
    loads_in_flight: u32,
    buffer: VecDeque<Input>,
    draining: bool,
    forward_to: Vec<NodeId>,
    /// Only emit outputs whose inputs all arrived after duplication began.
    coverage_gate: bool,
    joined_from: BTreeMap<StreamId, SimTime>,
    markers: BTreeMap<MigrationId, BTreeSet<NodeId>>,
    closed: BTreeMap<StreamId, SimTime>,
    ended: BTreeSet<StreamId>,
    exhausted: bool,
    arrivals: u64,
}

impl Host {
    fn new(inst: QueryInstance, status: Status) -> Self {
        Host {
            inst,
            status,
            loader: StateLoader::default(),
            migration: None,
            input_stopped: false,
            input_buffering: false,
            output_stopped: false,
            awaiting_final: false,
            resume_on_install: false,
            loads_in_flight: 0,
            buffer: VecDeque::new(),
            draining: false,
            forward_to: Vec::new(),
            coverage_gate: false,
            joined_from: BTreeMap::new(),
            markers: BTreeMap::new(),
            closed: BTreeMap::new(),
            ended: BTreeSet::new(),
            exhausted: false,
            arrivals: 0,
        }
    }

    fn holds_input(&self) -> bool {
        self.status != Status::Running || self.input_stopped || self.input_buffering
    }

    fn coverage_from(&self, inputs: &[StreamId]) -> SimTime {
        inputs
            .iter()
            .map(|s| self.joined_from.get(s).map_or(SimTime::NEVER, |h| h.saturating_add(SimTime::from_nanos(1))))
            .max()
            .unwrap_or(SimTime::ZERO)
    }
}

#[derive(Debug, Default)]
struct OutCtl {
    buffering: bool,
    stopped: bool,
    queue: VecDeque<Tuple>,
    eos_pending: bool,
}

#[derive(Debug)]
struct Scheduled {
    at: SimTime,
    task: ControlTask,
    mid: MigrationId,
}

#[derive(Debug, Default)]
struct Node {
    routes: StreamRoute,
    out: BTreeMap<StreamId, OutCtl>,
    /// Largest timestamp this node has emitted as a source.
    watermark: SimTime,
    cursor: usize,
    source: Option<usize>,
    ended: bool,
    host: Option<Host>,
    loader_free: SimTime,
    extractor_free: SimTime,
    replication: ReplicationLog,
    replicating_to: BTreeMap<NodeId, MigrationId>,
    scheduled: Vec<Scheduled>,
}

#[derive(Debug)]
struct MigCtx {
    plan: MigrationPlan,
    roles: RoleMap,
    analysis: ProgramAnalysis,
    takeover: Option<SimTime>,
    pending_schedules: u32,
    program_done: bool,
    completed: bool,
    aborted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Program,
    Message { reply_to: NodeId, token: Token },
    Scheduled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Wait {
    Acks { token: Token, remaining: u32 },
    Markers,
}

#[derive(Debug)]
struct Exec {
    node: NodeId,
    mid: MigrationId,
    tasks: VecDeque<ControlTask>,
    origin: Origin,
    wait: Option<Wait>,
    /// Event time at which a scheduled task fired.
    fired_at: Option<SimTime>,
    stop_after_ack: bool,
}

enum Flow {
    Continue,
    Wait(Wait),
    /// Re-run the same task when markers arrive.
    WaitMarkers(ControlTask),
}

pub struct Simulation<'a> {
    setup: &'a SimSetup,
    queue: EventQueue<Ev>,
    net: Network,
    nodes: Vec<Node>,
    migs: Vec<MigCtx>,
    execs: BTreeMap<u64, Exec>,
    next_exec: u64,
    ack_waiters: BTreeMap<Token, u64>,
    next_token: Token,
    next_group: u64,
    seen_at_sink: HashSet<(StreamId, u64)>,
    log: EventLog,
    planner: Option<&'a mut dyn MigrationPlanner>,
    current_host: NodeId,
    planned: bool,
    inputs: Vec<StreamId>,
    producers: BTreeMap<StreamId, NodeId>,
}

impl<'a> Simulation<'a> {
    pub fn new(setup: &'a SimSetup) -> Result<Self, EngineError> {
        setup.validate()?;
        let mut nodes: Vec<Node> = (0..setup.nodes.len()).map(|_| Node::default()).collect();
        let producers = setup.producers();
        let inputs = setup.query.spec.inputs();
        for (i, s) in setup.sources.iter().enumerate() {
            let node = &mut nodes[s.node.0 as usize];
            node.source = Some(i);
        }
        for (stream, producer) in &producers {
            let node = &mut nodes[producer.0 as usize];
            node.out.entry(*stream).or_default();
            if inputs.contains(stream) {
                node.routes.add_next_hop(*stream, setup.query.host);
            } else {
                node.routes.declare(*stream);
            }
        }
        let host_node = &mut nodes[setup.query.host.0 as usize];
        host_node.host = Some(Host::new(QueryInstance::new(setup.query.id, &setup.query.spec), Status::Running));
        host_node.routes.add_next_hop(setup.query.spec.output(), setup.query.sink);
        Ok(Simulation {
            setup,
            queue: EventQueue::with_limit(setup.config.max_events),
            net: setup.network.clone(),
            nodes,
            migs: Vec::new(),
            execs: BTreeMap::new(),
            next_exec: 0,
            ack_waiters: BTreeMap::new(),
            next_token: 0,
            next_group: 1,
            seen_at_sink: HashSet::new(),
            log: EventLog::new(),
            planner: None,
            current_host: setup.query.host,
            planned: false,
            inputs,
            producers,
        })
    }

    pub fn with_planner(mut self, planner: &'a mut dyn MigrationPlanner) -> Self {
        self.planner = Some(planner);
        self
    }

    pub fn run(mut self) -> Result<RunOutput, EngineError> {
        for p in &self.setup.plans {
            self.queue.schedule(p.at, self.setup.coordinator, Ev::Inject(Box::new(p.clone())))?;
        }
        for s in &self.setup.sources {
            let at = s.tuples.first().map_or(SimTime::ZERO, |t| t.timestamp);
            self.queue.schedule(at, s.node, Ev::Emit)?;
        }
        if let Some(p) = &self.planner {
            let first = p.first_check();
            self.queue.schedule(first, self.setup.coordinator, Ev::DecisionCheck)?;
        }
        while let Some(ev) = self.queue.pop()? {
            self.handle(ev)?;
        }
        let end_time = self.queue.now();
        let migrations = self
            .migs
            .iter()
            .enumerate()
            .map(|(i, m)| MigrationSummary {
                mid: MigrationId(i as u32),
                label: m.plan.label.clone(),
                old_host: m.plan.old_host,
                new_host: m.plan.new_host,
                bootstrap: m.plan.bootstrap,
                planned_control_messages: m.analysis.control_messages,
                parallel: m.analysis.parallel,
                pausing: m.analysis.has_pausing_move(),
                status: if m.completed {
                    MigrationStatus::Completed
                } else if m.aborted {
                    MigrationStatus::Aborted
                } else {
                    MigrationStatus::Incomplete
                },
            })
            .collect();
        Ok(RunOutput { log: self.log, end_time, migrations })
    }

    fn now(&self) -> SimTime {
        self.queue.now()
    }

    fn emit_log(&mut self, event: LogEvent) {
        let now = self.now();
        self.log.push(now, event);
    }

    fn warn(&mut self, mid: MigrationId, node: NodeId, message: String) {
        log::warn!("{}: {message}", self.setup.nodes[node.0 as usize].name);
        self.emit_log(LogEvent::ProtocolWarning { mid, node, message });
    }

    fn host(&self, n: NodeId) -> Option<&Host> {
        self.nodes[n.0 as usize].host.as_ref()
    }

    fn host_mut(&mut self, n: NodeId) -> Option<&mut Host> {
        self.nodes[n.0 as usize].host.as_mut()
    }

    fn send(&mut self, from: NodeId, to: NodeId, size: u64, msg: Msg) -> Result<(), EngineError> {
        let arrival = if from == to { self.now() } else { self.net.transmit(from, to, size, self.now())?.arrival };
        self.queue.schedule(arrival, to, Ev::Arrive { from, msg })?;
        Ok(())
    }

    fn handle(&mut self, ev: Event<Ev>) -> Result<(), EngineError> {
        let node = ev.target;
        match ev.payload {
            Ev::Emit => self.on_emit(node),
            Ev::Arrive { from, msg } => self.on_arrive(node, from, msg),
            Ev::Inject(plan) => self.inject(*plan).map(|_| ()),
            Ev::SendState { mid, to, blob, purpose } => {
                let (bytes, kind, chunk, of) = (blob.bytes, blob.kind, blob.chunk.index, blob.chunk.of);
                let replica = purpose == Purpose::Replica;
                let arrival = match self.net.transmit(node, to, bytes, self.now()) {
                    Ok(t) => t.arrival,
                    Err(e) if replica => {
                        self.emit_log(LogEvent::ReplicationFailed { mid, node, message: e.to_string() });
                        return Ok(());
                    }
                    Err(e) => return Err(e.into()),
                };
                self.emit_log(LogEvent::StateSent { mid, from: node, to, bytes, kind, replica, chunk, of });
                self.queue.schedule(arrival, to, Ev::Arrive { from: node, msg: Msg::State { mid, blob, purpose } })?;
                Ok(())
            }
            Ev::LoadDone { mid, from, blob, purpose, duration } => self.on_load_done(node, mid, from, blob, purpose, duration),
            Ev::ReplicaTick { mid, dst } => self.on_replica_tick(node, mid, dst),
            Ev::Timer => self.fire_schedules(node, self.now(), false),
            Ev::DecisionCheck => self.on_decision_check(),
        }
    }

    // ----- sources -----

    fn on_emit(&mut self, n: NodeId) -> Result<(), EngineError> {
        let Some(si) = self.nodes[n.0 as usize].source else {
            return Ok(());
        };
        let tuples = &self.setup.sources[si].tuples;
        let cursor = self.nodes[n.0 as usize].cursor;
        if cursor >= tuples.len() {
            return self.source_end(n);
        }
        let t = tuples[cursor].clone();
        self.fire_schedules(n, t.timestamp, false)?;
        let node = &mut self.nodes[n.0 as usize];
        node.watermark = node.watermark.max(t.timestamp);
        node.cursor += 1;
        let next = tuples.get(node.cursor).map(|t| t.timestamp);
        self.source_send(n, t)?;
        match next {
            Some(at) => {
                self.queue.schedule(at, n, Ev::Emit)?;
                Ok(())
            }
            None => self.source_end(n),
        }
    }

    fn source_send(&mut self, n: NodeId, t: Tuple) -> Result<(), EngineError> {
        let ctl = self.nodes[n.0 as usize].out.entry(t.stream).or_default();
        if ctl.buffering {
            ctl.queue.push_back(t);
            return Ok(());
        }
        if ctl.stopped {
            self.emit_log(LogEvent::TupleLost { node: n, stream: t.stream, seq: t.seq });
            return Ok(());
        }
        self.dispatch(n, t)
    }

    fn dispatch(&mut self, n: NodeId, t: Tuple) -> Result<(), EngineError> {
        let hops = self.nodes[n.0 as usize].routes.next_hops(t.stream).to_vec();
        if hops.is_empty() {
            self.emit_log(LogEvent::TupleUnroutable { node: n, stream: t.stream, seq: t.seq });
            return Ok(());
        }
        let size = t.record_bytes();
        if hops.len() > 1 {
            let extra_bytes = size * (hops.len() as u64 - 1);
            self.emit_log(LogEvent::InputDuplicated { node: n, stream: t.stream, seq: t.seq, extra_bytes });
        }
        for h in hops {
            self.send(n, h, size, Msg::Data(t.clone()))?;
        }
        Ok(())
    }

    fn source_end(&mut self, n: NodeId) -> Result<(), EngineError> {
        if self.nodes[n.0 as usize].ended {
            return Ok(());
        }
        self.nodes[n.0 as usize].ended = true;
        self.fire_schedules(n, SimTime::NEVER, true)?;
        let streams: Vec<StreamId> = self.nodes[n.0 as usize].out.keys().copied().collect();
        for s in streams {
            let ctl = self.nodes[n.0 as usize].out.get_mut(&s).expect("stream listed");
            if ctl.buffering {
                ctl.eos_pending = true;
            } else {
                self.send_eos(n, s)?;
            }
        }
        Ok(())
    }

    fn send_eos(&mut self, n: NodeId, s: StreamId) -> Result<(), EngineError> {
        let hops = self.nodes[n.0 as usize].routes.next_hops(s).to_vec();
        let bytes = self.setup.config.control_bytes;
        for h in hops {
            self.send(n, h, bytes, Msg::Eos(s))?;
        }
        Ok(())
    }

    /// Releases the buffered tuples of `streams` in their emission order.
    fn flush_source_queues(&mut self, n: NodeId, streams: &[StreamId]) -> Result<(), EngineError> {
        let mut queued = Vec::new();
        let mut eos = Vec::new();
        for s in streams {
            let Some(ctl) = self.nodes[n.0 as usize].out.get_mut(s) else {
                continue;
            };
            ctl.buffering = false;
            ctl.stopped = false;
            queued.extend(ctl.queue.drain(..));
            if std::mem::take(&mut ctl.eos_pending) {
                eos.push(*s);
            }
        }
        queued.sort_by_key(|t| (t.timestamp, t.stream, t.seq));
        for t in queued {
            self.dispatch(n, t)?;
        }
        for s in eos {
            self.send_eos(n, s)?;
        }
        Ok(())
    }

    // ----- message arrival -----

    fn on_arrive(&mut self, n: NodeId, from: NodeId, msg: Msg) -> Result<(), EngineError> {
        match msg {
            Msg::Data(t) => {
                if n == self.setup.query.sink && t.stream == self.setup.query.spec.output() {
                    self.sink_receive(t);
                    Ok(())
                } else {
                    self.host_receive(n, Input::Tuple(t))
                }
            }
            Msg::Eos(s) => self.host_receive(n, Input::Eos(s)),
            Msg::Control { mid, tasks, token } => {
                self.spawn(n, mid, tasks, Origin::Message { reply_to: from, token }, None)
            }
            Msg::Ack { token } => self.on_ack(token),
            Msg::Marker { mid, stream, change } => self.on_marker(n, from, mid, stream, change),
            Msg::State { mid, blob, purpose } => self.on_state(n, from, mid, blob, purpose),
        }
    }

    fn sink_receive(&mut self, t: Tuple) {
        let fresh = self.seen_at_sink.insert((t.stream, t.seq));
        if !fresh {
            let dropped = self.setup.config.sink_dedup;
            self.emit_log(LogEvent::SinkDuplicate { stream: t.stream, seq: t.seq, dropped });
            if dropped {
                return;
            }
        }
        self.emit_log(LogEvent::SinkAccepted { stream: t.stream, seq: t.seq, key: t.key, value: t.value, cause: t.origin() });
    }

    fn active_migration_to(&self, n: NodeId) -> Option<MigrationId> {
        self.migs
            .iter()
            .enumerate()
            .rev()
            .find(|(_, m)| m.plan.new_host == n && !m.plan.bootstrap && !m.completed && !m.aborted)
            .map(|(i, _)| MigrationId(i as u32))
    }

    fn host_receive(&mut self, n: NodeId, input: Input) -> Result<(), EngineError> {
        if let Input::Tuple(t) = &input {
            let (stream, seq) = (t.stream, t.seq);
            self.emit_log(LogEvent::TupleArrived { node: n, stream, seq });
        }
        if self.host(n).is_none() {
            match self.active_migration_to(n) {
                Some(mid) => {
                    self.host_for_migration(n, mid);
                }
                None => {
                    if let Input::Tuple(t) = input {
                        self.emit_log(LogEvent::TupleUnroutable { node: n, stream: t.stream, seq: t.seq });
                    }
                    return Ok(());
                }
            }
        }
        let host = self.host_mut(n).expect("host ensured");
        if let Input::Tuple(_) = input {
            host.arrivals += 1;
        }
        match host.status {
            Status::Stopped => self.forward(n, input),
            Status::Standby | Status::Awaiting | Status::Paused => {
                if host.status == Status::Standby {
                    host.status = Status::Awaiting;
                }
                host.buffer.push_back(input);
                Ok(())
            }
            Status::Running => {
                if host.holds_input() || host.draining || !host.buffer.is_empty() {
                    host.buffer.push_back(input);
                    Ok(())
                } else {
                    self.process_input(n, input)
                }
            }
        }
    }

    fn forward_target(&self, n: NodeId) -> Option<NodeId> {
        let host = self.host(n)?;
        if let Some(t) = host.forward_to.first() {
            return Some(*t);
        }
        let mid = host.migration?;
        let m = &self.migs[mid.0 as usize];
        (m.plan.old_host == n).then_some(m.plan.new_host)
    }

    fn forward(&mut self, n: NodeId, input: Input) -> Result<(), EngineError> {
        let Some(to) = self.forward_target(n) else {
            if let Input::Tuple(t) = input {
                self.emit_log(LogEvent::TupleLost { node: n, stream: t.stream, seq: t.seq });
            }
            return Ok(());
        };
        match input {
            Input::Tuple(t) => {
                self.emit_log(LogEvent::TupleForwarded { node: n, to, stream: t.stream, seq: t.seq });
                let size = t.record_bytes();
                self.send(n, to, size, Msg::Data(t))
            }
            Input::Eos(s) => {
                let bytes = self.setup.config.control_bytes;
                self.send(n, to, bytes, Msg::Eos(s))
            }
        }
    }

    fn drain(&mut self, n: NodeId) -> Result<(), EngineError> {
        let Some(host) = self.host_mut(n) else {
            return Ok(());
        };
        if host.draining {
            return Ok(());
        }
        host.draining = true;
        loop {
            let host = self.host_mut(n).expect("host present");
            if host.holds_input() {
                break;
            }
            let Some(input) = host.buffer.pop_front() else {
                break;
            };
            self.process_input(n, input)?;
        }
        self.host_mut(n).expect("host present").draining = false;
        Ok(())
    }

    fn process_input(&mut self, n: NodeId, input: Input) -> Result<(), EngineError> {
        match input {
            Input::Tuple(t) => {
                self.fire_schedules(n, t.timestamp, false)?;
                let host = self.host_mut(n).expect("host present");
                if host.holds_input() {
                    host.buffer.push_front(Input::Tuple(t));
                    return Ok(());
                }
                match host.inst.process(&t) {
                    Ok(Processed::Duplicate) => {
                        self.emit_log(LogEvent::InputSkipped { node: n, stream: t.stream, seq: t.seq });
                        Ok(())
                    }
                    Ok(Processed::Outputs(out)) => self.emit_outputs(n, out),
                    Err(e) => {
                        let mid = host.migration.unwrap_or(MigrationId(u32::MAX));
                        self.warn(mid, n, e.to_string());
                        Ok(())
                    }
                }
            }
            Input::Eos(s) => {
                self.host_mut(n).expect("host present").ended.insert(s);
                self.check_exhausted(n)
            }
        }
    }

    fn emit_outputs(&mut self, n: NodeId, out: Vec<Tuple>) -> Result<(), EngineError> {
        if out.is_empty() {
            return Ok(());
        }
        let inputs = self.inputs.clone();
        let host = self.host(n).expect("host present");
        let stopped = host.output_stopped;
        let coverage = host.coverage_gate.then(|| host.coverage_from(&inputs));
        for o in out {
            let suppress = stopped || coverage.is_some_and(|c| self.host(n).expect("host").inst.op.coverage_start(&o) < c);
            if suppress {
                self.emit_log(LogEvent::OutputSuppressed { node: n, stream: o.stream, seq: o.seq });
            } else {
                self.dispatch(n, o)?;
            }
        }
        Ok(())
    }

    /// Reacts to every input stream having ended or been routed away.
    fn check_exhausted(&mut self, n: NodeId) -> Result<(), EngineError> {
        let inputs = self.inputs.clone();
        let Some(host) = self.host(n) else {
            return Ok(());
        };
        if host.exhausted || !inputs.iter().all(|s| host.ended.contains(s) || host.closed.contains_key(s)) {
            return Ok(());
        }
        let by_eos = inputs.iter().all(|s| host.ended.contains(s));
        let hint = inputs
            .iter()
            .map(|s| if host.ended.contains(s) { SimTime::NEVER } else { host.closed[s] })
            .max()
            .unwrap_or(SimTime::NEVER);
        let running = host.status == Status::Running;
        let auto_stop = running && self.may_stop_when_drained(n);
        if !(auto_stop || (by_eos && running)) {
            return Ok(());
        }
        self.host_mut(n).expect("host").exhausted = true;
        if by_eos {
            self.fire_schedules(n, SimTime::NEVER, true)?;
        }
        let host = self.host_mut(n).expect("host");
        let wm = hint.max(host.inst.op.watermark());
        let out = match host.inst.op.advance_watermark(wm) {
            Ok(o) => o,
            Err(e) => {
                let mid = host.migration.unwrap_or(MigrationId(u32::MAX));
                self.warn(mid, n, e.to_string());
                Vec::new()
            }
        };
        self.emit_outputs(n, out)?;
        if auto_stop {
            self.stop_host(n)?;
        }
        Ok(())
    }

    /// An old host whose migration does not pause it for a state move stops
    /// once every upstream has routed away from it.
    fn may_stop_when_drained(&self, n: NodeId) -> bool {
        let Some(mid) = self.host(n).and_then(|h| h.migration) else {
            return false;
        };
        let m = &self.migs[mid.0 as usize];
        m.plan.old_host == n && !m.analysis.has_pausing_move()
    }

    fn stop_host(&mut self, n: NodeId) -> Result<(), EngineError> {
        let host = self.host_mut(n).expect("host present");
        if host.status == Status::Stopped {
            return Ok(());
        }
        let was_processing = matches!(host.status, Status::Running | Status::Paused);
        let paused_before = host.status == Status::Paused;
        host.status = Status::Stopped;
        let mid = host.migration;
        let pending: Vec<Input> = host.buffer.drain(..).collect();
        if let Some(mid) = mid {
            if was_processing && !paused_before {
                self.emit_log(LogEvent::OperatorStopped { mid, node: n });
            }
        }
        for i in pending {
            self.forward(n, i)?;
        }
        if let Some(mid) = mid {
            self.check_complete(mid);
        }
        Ok(())
    }

    fn pause_host(&mut self, n: NodeId, mid: MigrationId) {
        let host = self.host_mut(n).expect("host present");
        if host.status == Status::Running {
            host.status = Status::Paused;
            self.emit_log(LogEvent::OperatorStopped { mid, node: n });
        }
    }

    fn try_resume(&mut self, n: NodeId) -> Result<(), EngineError> {
        let Some(host) = self.host_mut(n) else {
            return Ok(());
        };
        if host.status == Status::Awaiting
            && !host.awaiting_final
            && host.loads_in_flight == 0
            && host.loader.is_idle()
            && !host.input_stopped
        {
            host.status = Status::Running;
            if let Some(mid) = host.migration {
                self.emit_log(LogEvent::OperatorStarted { mid, node: n });
                self.check_complete(mid);
            }
        }
        if self.host(n).is_some_and(|h| h.status == Status::Running) {
            self.drain(n)?;
            self.check_exhausted(n)?;
        }
        Ok(())
    }

    /// The new host's instance for migration `mid`, created if needed.
    fn host_for_migration(&mut self, n: NodeId, mid: MigrationId) -> &mut Host {
        let expects_state = self.migs[mid.0 as usize].analysis.moves_state_to(n);
        let output = self.setup.query.spec.output();
        let sink = self.setup.query.sink;
        let node = &mut self.nodes[n.0 as usize];
        match &mut node.host {
            None => {
                let mut h = Host::new(QueryInstance::new(self.setup.query.id, &self.setup.query.spec), Status::Awaiting);
                h.migration = Some(mid);
                h.awaiting_final = expects_state;
                node.routes.add_next_hop(output, sink);
                node.host = Some(h);
            }
            Some(h) if h.status == Status::Standby => {
                h.status = Status::Awaiting;
                h.migration = Some(mid);
                h.awaiting_final = expects_state;
            }
            Some(h) => {
                if h.migration.is_none() {
                    h.migration = Some(mid);
                }
            }
        }
        node.host.as_mut().expect("host created")
    }

    fn on_marker(&mut self, n: NodeId, from: NodeId, mid: MigrationId, stream: StreamId, change: RouteChange) -> Result<(), EngineError> {
        if self.host(n).is_none() {
            if self.active_migration_to(n) == Some(mid) {
                self.host_for_migration(n, mid);
            } else {
                return Ok(());
            }
        }
        let host = self.host_mut(n).expect("host present");
        host.markers.entry(mid).or_default().insert(from);
        match change {
            RouteChange::Removed { hint } => {
                host.closed.insert(stream, hint);
            }
            RouteChange::Joined { hint } => {
                host.joined_from.insert(stream, hint);
            }
            RouteChange::Added => {}
        }
        let waiting: Vec<u64> = self
            .execs
            .iter()
            .filter(|(_, e)| e.node == n && e.wait == Some(Wait::Markers))
            .map(|(id, _)| *id)
            .collect();
        for id in waiting {
            if let Some(e) = self.execs.get_mut(&id) {
                e.wait = None;
            }
            self.run_exec(id)?;
        }
        if matches!(change, RouteChange::Removed { .. }) {
            let status = self.host(n).map(|h| h.status);
            if status == Some(Status::Running) {
                // Tuples ahead of the marker in the buffer are still processed first.
                if self.host(n).is_some_and(|h| h.buffer.is_empty()) {
                    self.check_exhausted(n)?;
                }
            }
        }
        Ok(())
    }

    // ----- state movement -----

    fn on_state(&mut self, n: NodeId, from: NodeId, mid: MigrationId, blob: StateBlob, purpose: Purpose) -> Result<(), EngineError> {
        let replica = purpose == Purpose::Replica;
        self.emit_log(LogEvent::StateReceived { mid, node: n, bytes: blob.bytes, replica });
        if self.host(n).is_none() {
            if let Some(target) = self.active_migration_to(n) {
                self.host_for_migration(n, target);
            } else {
                let inst = QueryInstance::new(self.setup.query.id, &self.setup.query.spec);
                self.nodes[n.0 as usize].host = Some(Host::new(inst, Status::Standby));
                let (output, sink) = (self.setup.query.spec.output(), self.setup.query.sink);
                self.nodes[n.0 as usize].routes.add_next_hop(output, sink);
            }
        }
        let rate = self.setup.config.load_bytes_per_s;
        let duration = SimTime::from_secs_f64(blob.bytes as f64 / rate);
        let node = &mut self.nodes[n.0 as usize];
        let done = node.loader_free.max(self.queue.now()) + duration;
        node.loader_free = done;
        node.host.as_mut().expect("host present").loads_in_flight += 1;
        self.queue.schedule(done, n, Ev::LoadDone { mid, from, blob, purpose, duration })?;
        Ok(())
    }

    fn on_load_done(&mut self, n: NodeId, mid: MigrationId, from: NodeId, blob: StateBlob, purpose: Purpose, duration: SimTime) -> Result<(), EngineError> {
        let host = self.host_mut(n).expect("loading host");
        host.loads_in_flight -= 1;
        let result = host.loader.install(&mut host.inst, &blob);
        let replica = purpose == Purpose::Replica;
        match result {
            Err(e) => {
                if replica {
                    self.emit_log(LogEvent::ReplicationFailed { mid, node: n, message: e.to_string() });
                } else {
                    self.abort(mid, format!("state load failed: {e}"));
                }
                return Ok(());
            }
            Ok(progress) => {
                self.emit_log(LogEvent::StateLoaded { mid, node: n, bytes: blob.bytes, duration, replica });
                if let (InstallProgress::Complete, Purpose::Move { token, is_final }) = (progress, purpose) {
                    let host = self.host_mut(n).expect("loading host");
                    if is_final {
                        host.awaiting_final = false;
                        if host.resume_on_install {
                            host.input_stopped = false;
                            host.input_buffering = false;
                        }
                    }
                    self.send_ack(n, from, mid, token)?;
                }
            }
        }
        self.try_resume(n)
    }

    fn abort(&mut self, mid: MigrationId, reason: String) {
        let m = &mut self.migs[mid.0 as usize];
        if m.aborted || m.completed {
            return;
        }
        m.aborted = true;
        self.emit_log(LogEvent::MigrationAborted { mid, reason });
    }

    fn extraction_time(&self, bytes: u64) -> SimTime {
        SimTime::from_secs_f64(bytes as f64 / self.setup.config.extract_bytes_per_s)
    }

    fn ship(&mut self, n: NodeId, mid: MigrationId, dst: NodeId, blob: StateBlob, purpose: Purpose, chunk: Option<u64>) -> Result<(), EngineError> {
        let group = self.next_group;
        self.next_group += 1;
        let blob = blob.with_group(group);
        let chunks = match chunk {
            Some(max) => partition(&blob, max),
            None => vec![blob],
        };
        let total: u64 = chunks.iter().map(|c| c.bytes).sum();
        let start = self.nodes[n.0 as usize].extractor_free.max(self.now());
        let mut t = start;
        for c in chunks {
            t = t + self.extraction_time(c.bytes);
            self.queue.schedule(t, n, Ev::SendState { mid, to: dst, blob: c, purpose })?;
        }
        self.nodes[n.0 as usize].extractor_free = t;
        let duration = t - start;
        self.emit_log(LogEvent::StateExtracted { mid, node: n, bytes: total, duration, replica: purpose == Purpose::Replica });
        Ok(())
    }

    fn replicate_now(&mut self, n: NodeId, mid: MigrationId, dst: NodeId) -> Result<(), EngineError> {
        if !self.net.has_link(n, dst) {
            self.emit_log(LogEvent::ReplicationFailed { mid, node: n, message: format!("no link to {dst}") });
            return Ok(());
        }
        let node = &mut self.nodes[n.0 as usize];
        let host = node.host.as_ref().expect("replicating host");
        let blob = node.replication.next_replica(&host.inst, dst);
        self.ship(n, mid, dst, blob, Purpose::Replica, None)
    }

    fn on_replica_tick(&mut self, n: NodeId, mid: MigrationId, dst: NodeId) -> Result<(), EngineError> {
        if self.nodes[n.0 as usize].replicating_to.get(&dst) != Some(&mid) {
            return Ok(());
        }
        let Some(host) = self.host(n) else {
            return Ok(());
        };
        if host.status == Status::Stopped || host.exhausted {
            self.nodes[n.0 as usize].replicating_to.remove(&dst);
            return Ok(());
        }
        if host.status == Status::Running {
            self.replicate_now(n, mid, dst)?;
        }
        let at = self.now() + self.setup.config.checkpoint_interval;
        self.queue.schedule(at, n, Ev::ReplicaTick { mid, dst })?;
        Ok(())
    }

    // ----- control programs -----

    /// Registers a migration and starts its program at the coordinator.
    pub fn inject(&mut self, plan: MigrationPlan) -> Result<MigrationId, EngineError> {
        if plan.program.is_empty() {
            return Err(EngineError::EmptyProgram);
        }
        let roles = self.setup.roles(plan.old_host, plan.new_host);
        let analysis = ProgramAnalysis::new(&plan.program, &roles)?;
        let mid = MigrationId(self.migs.len() as u32);
        self.emit_log(LogEvent::MigrationInjected {
            mid,
            old_host: plan.old_host,
            new_host: plan.new_host,
            label: plan.label.clone(),
            planned_control_messages: analysis.control_messages,
        });
        let program = plan.program.clone();
        let bootstrap = plan.bootstrap;
        let old = plan.old_host;
        self.migs.push(MigCtx {
            plan,
            roles,
            analysis,
            takeover: None,
            pending_schedules: 0,
            program_done: false,
            completed: false,
            aborted: false,
        });
        if !bootstrap {
            if let Some(h) = self.host_mut(old) {
                h.migration = Some(mid);
            }
            let new = self.migs[mid.0 as usize].plan.new_host;
            if self.host(new).is_some_and(|h| h.status == Status::Standby) {
                self.host_for_migration(new, mid);
            }
        }
        self.spawn(self.setup.coordinator, mid, program, Origin::Program, None)?;
        Ok(mid)
    }

    fn spawn(&mut self, n: NodeId, mid: MigrationId, tasks: Vec<ControlTask>, origin: Origin, fired_at: Option<SimTime>) -> Result<(), EngineError> {
        let id = self.next_exec;
        self.next_exec += 1;
        self.execs.insert(
            id,
            Exec { node: n, mid, tasks: tasks.into(), origin, wait: None, fired_at, stop_after_ack: false },
        );
        self.run_exec(id)
    }

    fn run_exec(&mut self, id: u64) -> Result<(), EngineError> {
        loop {
            let Some(e) = self.execs.get_mut(&id) else {
                return Ok(());
            };
            if e.wait.is_some() {
                return Ok(());
            }
            let Some(task) = e.tasks.pop_front() else {
                return self.finish_exec(id);
            };
            let (n, mid) = (e.node, e.mid);
            if self.migs[mid.0 as usize].aborted {
                self.execs.remove(&id);
                return Ok(());
            }
            match self.exec_task(id, n, mid, task)? {
                Flow::Continue => {}
                Flow::Wait(w) => {
                    if let Wait::Acks { token, .. } = w {
                        self.ack_waiters.insert(token, id);
                    }
                    self.execs.get_mut(&id).expect("exec alive").wait = Some(w);
                }
                Flow::WaitMarkers(task) => {
                    let e = self.execs.get_mut(&id).expect("exec alive");
                    e.tasks.push_front(task);
                    e.wait = Some(Wait::Markers);
                }
            }
        }
    }

    fn finish_exec(&mut self, id: u64) -> Result<(), EngineError> {
        let e = self.execs.remove(&id).expect("exec alive");
        match e.origin {
            Origin::Message { reply_to, token } => self.send_ack(e.node, reply_to, e.mid, token),
            Origin::Program => {
                self.migs[e.mid.0 as usize].program_done = true;
                self.emit_log(LogEvent::ProgramCompleted { mid: e.mid });
                self.check_complete(e.mid);
                Ok(())
            }
            Origin::Scheduled => {
                self.migs[e.mid.0 as usize].pending_schedules -= 1;
                self.check_complete(e.mid);
                Ok(())
            }
        }
    }

    fn send_ack(&mut self, from: NodeId, to: NodeId, mid: MigrationId, token: Token) -> Result<(), EngineError> {
        self.emit_log(LogEvent::AckSent { mid, from, to });
        let bytes = self.setup.config.control_bytes;
        self.send(from, to, bytes, Msg::Ack { token })
    }

    fn on_ack(&mut self, token: Token) -> Result<(), EngineError> {
        let Some(&id) = self.ack_waiters.get(&token) else {
            return Ok(());
        };
        let Some(e) = self.execs.get_mut(&id) else {
            self.ack_waiters.remove(&token);
            return Ok(());
        };
        let Some(Wait::Acks { token: t, remaining }) = e.wait else {
            return Ok(());
        };
        debug_assert_eq!(t, token);
        if remaining > 1 {
            e.wait = Some(Wait::Acks { token, remaining: remaining - 1 });
            return Ok(());
        }
        e.wait = None;
        self.ack_waiters.remove(&token);
        if std::mem::take(&mut e.stop_after_ack) {
            let n = e.node;
            self.stop_host(n)?;
        }
        self.run_exec(id)
    }

    fn check_complete(&mut self, mid: MigrationId) {
        let m = &self.migs[mid.0 as usize];
        if m.completed || m.aborted || !m.program_done || m.pending_schedules > 0 {
            return;
        }
        if !m.plan.bootstrap {
            let old_done = self.host(m.plan.old_host).map_or(true, |h| h.status == Status::Stopped);
            let new_running = self.host(m.plan.new_host).is_some_and(|h| h.status == Status::Running);
            if !(old_done && new_running) {
                return;
            }
            self.current_host = m.plan.new_host;
        }
        self.migs[mid.0 as usize].completed = true;
        self.emit_log(LogEvent::MigrationCompleted { mid });
    }

    fn new_token(&mut self) -> Token {
        self.next_token += 1;
        self.next_token
    }

    fn streams_at(&self, n: NodeId, sel: StreamSel) -> Vec<StreamId> {
        match sel {
            StreamSel::Inputs => self.inputs.clone(),
            StreamSel::Outputs => vec![self.setup.query.spec.output()],
            StreamSel::UpstreamInputs => self.inputs.iter().copied().filter(|s| self.producers.get(s) == Some(&n)).collect(),
        }
    }

    fn produces(&self, n: NodeId, s: StreamId) -> bool {
        self.producers.get(&s) == Some(&n)
    }

    fn delegate(&mut self, n: NodeId, mid: MigrationId, target: Role, task: ControlTask) -> Result<Flow, EngineError> {
        self.exec_task_cm(n, mid, &target, vec![task])
    }

    fn exec_task_cm(&mut self, n: NodeId, mid: MigrationId, target: &Role, mut tasks: Vec<ControlTask>) -> Result<Flow, EngineError> {
        let targets = match self.migs[mid.0 as usize].roles.resolve(target) {
            Ok(t) => t,
            Err(e) => {
                self.warn(mid, n, e.to_string());
                return Ok(Flow::Continue);
            }
        };
        if tasks.iter().any(ControlTask::uses_takeover_time) && self.migs[mid.0 as usize].plan.old_host == n {
            if let Some(t) = self.takeover_time(n, mid) {
                tasks.iter_mut().for_each(|x| x.resolve_takeover(t));
            }
        }
        let token = self.new_token();
        let bytes = self.setup.config.control_bytes;
        for t in &targets {
            self.emit_log(LogEvent::ControlSent { mid, from: n, to: *t, bytes });
            self.send(n, *t, bytes, Msg::Control { mid, tasks: tasks.clone(), token })?;
        }
        Ok(Flow::Wait(Wait::Acks { token, remaining: targets.len() as u32 }))
    }

    /// Handover time for migration `mid`, fixed the first time it is needed.
    fn takeover_time(&mut self, n: NodeId, mid: MigrationId) -> Option<SimTime> {
        if let Some(t) = self.migs[mid.0 as usize].takeover {
            return Some(t);
        }
        let host = self.host(n)?;
        let now = self.now();
        let m = &self.migs[mid.0 as usize];
        let nh = m.plan.new_host;
        let link = self.net.link(n, nh).ok()?;
        let control = self.setup.config.control_bytes;
        let one_way = link.latency + transmission_time(control, link.bandwidth_bps);
        let margin = self.setup.config.takeover_margin.unwrap_or(one_way.saturating_mul(4));
        let base = now.max(host.inst.op.watermark());
        let t = if m.analysis.moves_state_to(nh) {
            let bytes = BLOB_HEADER_BYTES + host.inst.op.stored_bytes();
            let est = self.extraction_time(bytes)
                + link.transmission_time(bytes)
                + link.latency
                + SimTime::from_secs_f64(bytes as f64 / self.setup.config.load_bytes_per_s);
            base + est + margin
        } else {
            let op = &host.inst.op;
            op.recreation_handover(base + margin).saturating_add(op.recreation_extent())
        };
        self.migs[mid.0 as usize].takeover = Some(t);
        Some(t)
    }

    fn exec_task(&mut self, id: u64, n: NodeId, mid: MigrationId, task: ControlTask) -> Result<Flow, EngineError> {
        let roles = self.migs[mid.0 as usize].roles.clone();
        match &task {
            ControlTask::ControlMessage { target, tasks } => return self.exec_task_cm(n, mid, target, tasks.clone()),
            ControlTask::BufferStreams { at: Some(r), streams } | ControlTask::StopStreams { at: Some(r), streams } => {
                let targets = roles.resolve(r)?;
                if targets != [n] {
                    let inner = match task {
                        ControlTask::BufferStreams { .. } => ControlTask::BufferStreams { at: None, streams: *streams },
                        _ => ControlTask::StopStreams { at: None, streams: *streams },
                    };
                    return self.delegate(n, mid, r.clone(), inner);
                }
            }
            _ => {}
        }
        if let Placement::Delegate(target) = placement(&task, n, &roles) {
            return self.delegate(n, mid, target.role(), task);
        }
        match task {
            ControlTask::ControlMessage { .. } => unreachable!("handled above"),
            ControlTask::BufferStreams { streams, .. } => {
                for s in self.streams_at(n, streams) {
                    if self.produces(n, s) {
                        self.nodes[n.0 as usize].out.entry(s).or_default().buffering = true;
                    } else {
                        let h = self.host_for_migration(n, mid);
                        if streams == StreamSel::Outputs {
                            h.output_stopped = true;
                        } else {
                            h.input_buffering = true;
                        }
                    }
                }
            }
            ControlTask::StopStreams { streams, .. } => {
                for s in self.streams_at(n, streams) {
                    if self.produces(n, s) {
                        self.nodes[n.0 as usize].out.entry(s).or_default().stopped = true;
                    } else {
                        let h = self.host_for_migration(n, mid);
                        if streams == StreamSel::Outputs {
                            h.output_stopped = true;
                        } else {
                            h.input_stopped = true;
                        }
                    }
                }
            }
            ControlTask::StartStreams { streams } | ControlTask::Resume { streams } => {
                let mut host_touched = false;
                let mut produced = Vec::new();
                for s in self.streams_at(n, streams) {
                    if self.produces(n, s) {
                        produced.push(s);
                    } else {
                        host_touched = true;
                    }
                }
                self.flush_source_queues(n, &produced)?;
                if host_touched {
                    if let Some(h) = self.host_mut(n) {
                        h.input_stopped = false;
                        h.input_buffering = false;
                        h.output_stopped = false;
                    }
                    self.try_resume(n)?;
                }
            }
            ControlTask::Redirect { streams, from, to } => {
                let (from, to) = (roles.resolve_one(&from)?, roles.resolve_one(&to)?);
                let hint = self.nodes[n.0 as usize].watermark;
                for s in self.streams_at(n, streams) {
                    if !self.nodes[n.0 as usize].routes.redirect(s, from, to) {
                        self.warn(mid, n, format!("Redirect of {s}: {from} is not a next hop"));
                        continue;
                    }
                    self.send_marker(n, from, mid, s, RouteChange::Removed { hint })?;
                    self.send_marker(n, to, mid, s, RouteChange::Joined { hint })?;
                }
            }
            ControlTask::AddNextHop { streams, node } => {
                let target = roles.resolve_one(&node)?;
                if roles.is_upstream(n) {
                    let hint = self.nodes[n.0 as usize].watermark;
                    for s in self.streams_at(n, streams) {
                        let existing = self.nodes[n.0 as usize].routes.next_hops(s).to_vec();
                        if !self.nodes[n.0 as usize].routes.add_next_hop(s, target) {
                            continue;
                        }
                        for e in existing {
                            self.send_marker(n, e, mid, s, RouteChange::Added)?;
                        }
                        self.send_marker(n, target, mid, s, RouteChange::Joined { hint })?;
                    }
                } else if let Some(h) = self.host_mut(n) {
                    if !h.forward_to.contains(&target) {
                        h.forward_to.push(target);
                    }
                } else {
                    self.warn(mid, n, "AddNextHop at a node without the query".into());
                }
            }
            ControlTask::RemoveNextHop { streams, node } => {
                let target = roles.resolve_one(&node)?;
                let fired = self.execs.get(&id).and_then(|e| e.fired_at);
                let hint = fired.unwrap_or(self.nodes[n.0 as usize].watermark);
                for s in self.streams_at(n, streams) {
                    if self.nodes[n.0 as usize].routes.remove_next_hop(s, target) {
                        self.send_marker(n, target, mid, s, RouteChange::Removed { hint })?;
                    } else {
                        self.warn(mid, n, format!("RemoveNextHop of {s}: {target} is not a next hop"));
                    }
                }
            }
            ControlTask::Move { kind, dst } => {
                let again = ControlTask::Move { kind, dst: dst.clone() };
                return self.exec_move(id, n, mid, kind, &dst, again);
            }
            ControlTask::ReplicateCheckpoint { dst } => {
                let dst = roles.resolve_one(&dst)?;
                if self.host(n).is_none() {
                    self.warn(mid, n, "ReplicateCheckpoint without a running query".into());
                    return Ok(Flow::Continue);
                }
                self.nodes[n.0 as usize].replicating_to.insert(dst, mid);
                self.replicate_now(n, mid, dst)?;
                let at = self.now() + self.setup.config.checkpoint_interval;
                self.queue.schedule(at, n, Ev::ReplicaTick { mid, dst })?;
            }
            ControlTask::Schedule { task, time } => {
                let at = match time {
                    TimeRef::At(t) => t,
                    TimeRef::TakeoverTime => match self.takeover_time(n, mid) {
                        Some(t) => t,
                        None => {
                            self.warn(mid, n, "TakeoverTime unresolved; firing immediately".into());
                            self.now()
                        }
                    },
                };
                self.migs[mid.0 as usize].pending_schedules += 1;
                self.nodes[n.0 as usize].scheduled.push(Scheduled { at, task: *task, mid });
                let node = &self.nodes[n.0 as usize];
                let event_driven = node.source.is_some() || node.host.is_some();
                let finished = node.ended || node.host.as_ref().is_some_and(|h| h.exhausted);
                if finished {
                    self.fire_schedules(n, SimTime::NEVER, true)?;
                } else if !event_driven && !at.is_never() {
                    self.queue.schedule(at.max(self.now()), n, Ev::Timer)?;
                }
            }
            ControlTask::StartQuery => {
                let expects_state = self.migs[mid.0 as usize].analysis.moves_state_to(n);
                let parallel = self.migs[mid.0 as usize].analysis.parallel;
                let became_running = match self.host(n).map(|h| h.status) {
                    None if !expects_state => {
                        let h = self.host_for_migration(n, mid);
                        h.status = Status::Running;
                        h.coverage_gate = parallel;
                        true
                    }
                    Some(Status::Standby) if !expects_state => {
                        let h = self.host_for_migration(n, mid);
                        h.status = Status::Running;
                        true
                    }
                    None | Some(Status::Standby) => {
                        self.host_for_migration(n, mid);
                        false
                    }
                    _ => false,
                };
                if became_running {
                    self.emit_log(LogEvent::OperatorStarted { mid, node: n });
                    self.check_complete(mid);
                    self.drain(n)?;
                }
            }
            ControlTask::StopQuery => match self.host(n).map(|h| h.status) {
                Some(Status::Running | Status::Paused) => self.stop_host(n)?,
                Some(_) => {}
                None => self.warn(mid, n, "StopQuery at a node without the query".into()),
            },
            ControlTask::RequestMigration => {
                let h = self.host_for_migration(n, mid);
                h.resume_on_install = true;
            }
        }
        Ok(Flow::Continue)
    }

    fn exec_move(&mut self, id: u64, n: NodeId, mid: MigrationId, kind: MoveKind, dst: &Role, task: ControlTask) -> Result<Flow, EngineError> {
        let m = &self.migs[mid.0 as usize];
        let dst = m.roles.resolve_one(dst)?;
        let site = m.analysis.move_site(kind, dst).cloned();
        let (after_route_change, is_final) = site.map_or((false, true), |s| (s.after_route_change, s.is_final));
        let pauses = m.analysis.pauses(kind);
        let upstreams = m.roles.upstreams.clone();
        let Some(host) = self.host(n) else {
            self.warn(mid, n, "state move from a node without the query".into());
            return Ok(Flow::Continue);
        };
        if host.status == Status::Stopped {
            self.warn(mid, n, "state move from a stopped query".into());
            return Ok(Flow::Continue);
        }
        if after_route_change {
            let seen = host.markers.get(&mid);
            if !upstreams.iter().all(|u| seen.is_some_and(|s| s.contains(u))) {
                return Ok(Flow::WaitMarkers(task));
            }
        }
        if pauses {
            self.pause_host(n, mid);
        }
        let node = &mut self.nodes[n.0 as usize];
        let inst = &node.host.as_ref().expect("host present").inst;
        let blob = match kind {
            MoveKind::State => {
                let b = extract_state(inst);
                node.replication = ReplicationLog::default();
                node.replication.missing_state(inst, dst, BlobKind::Full);
                b
            }
            MoveKind::Immutable => node.replication.missing_state(inst, dst, BlobKind::Immutable),
            MoveKind::Incremental => match node.replication.increment_for(inst, dst) {
                Ok(b) => b,
                Err(e) => {
                    self.abort(mid, format!("incremental move: {e}"));
                    return Ok(Flow::Continue);
                }
            },
        };
        let token = self.new_token();
        let chunk = self.setup.config.max_chunk_bytes;
        self.ship(n, mid, dst, blob, Purpose::Move { token, is_final }, chunk)?;
        if pauses && is_final {
            self.execs.get_mut(&id).expect("exec alive").stop_after_ack = true;
        }
        Ok(Flow::Wait(Wait::Acks { token, remaining: 1 }))
    }

    fn send_marker(&mut self, from: NodeId, to: NodeId, mid: MigrationId, stream: StreamId, change: RouteChange) -> Result<(), EngineError> {
        self.emit_log(LogEvent::MarkerSent { mid, from, to, stream });
        let bytes = self.setup.config.control_bytes;
        self.send(from, to, bytes, Msg::Marker { mid, stream, change })
    }

    /// Runs scheduled tasks due before event time `bound`. Route removals
    /// fired here tell the removed hop it has every tuple below the
    /// scheduled time, or everything once the stream has ended.
    fn fire_schedules(&mut self, n: NodeId, bound: SimTime, at_end: bool) -> Result<(), EngineError> {
        loop {
            let node = &mut self.nodes[n.0 as usize];
            let due = node
                .scheduled
                .iter()
                .enumerate()
                .filter(|(_, s)| at_end || s.at <= bound)
                .min_by_key(|(i, s)| (s.at, *i))
                .map(|(i, _)| i);
            let Some(i) = due else {
                return Ok(());
            };
            let s = node.scheduled.remove(i);
            self.emit_log(LogEvent::ScheduleFired { mid: s.mid, node: n, at: s.at });
            let fired_at = if at_end { SimTime::NEVER } else { s.at };
            self.spawn(n, s.mid, vec![s.task], Origin::Scheduled, Some(fired_at))?;
        }
    }

    // ----- decisions -----

    fn on_decision_check(&mut self) -> Result<(), EngineError> {
        if self.planned {
            return Ok(());
        }
        let sources_active = self.nodes.iter().any(|n| n.source.is_some() && !n.ended);
        let current = self.current_host;
        let Some(host) = self.host(current) else {
            return Ok(());
        };
        let view = PlannerView {
            now: self.now(),
            current_host: current,
            state_bytes: BLOB_HEADER_BYTES + host.inst.op.stored_bytes(),
            input_arrivals: host.arrivals,
            selectivity: host.inst.op.selectivity(),
            network: &self.net,
        };
        let planner = self.planner.as_mut().expect("decision check without planner");
        let decision = planner.check(&view);
        let period = planner.check_period();
        if let Some(d) = decision {
            self.emit_log(LogEvent::DecisionMade { current, chosen: d.chosen, benefits: d.benefits });
            if let Some(mut plan) = d.plan {
                plan.at = self.now();
                self.planned = true;
                self.inject(plan)?;
                return Ok(());
            }
        }
        if sources_active {
            let at = self.now() + period;
            self.queue.schedule(at, self.setup.coordinator, Ev::DecisionCheck)?;
        }
        Ok(())
    }
}
