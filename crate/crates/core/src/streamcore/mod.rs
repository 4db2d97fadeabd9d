//! A small stream-processing engine: tuples, routing tables and the
//! operators that can be hosted and migrated.

mod filter;
mod join;
mod window;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::{MessageKind, NetMessage, NodeId, SimTime};

pub use filter::FilterOperator;
pub use join::JoinOperator;
pub use window::{WindowAggregate, WindowKind};

/// Bytes added to every tuple on the wire and in serialized state.
pub const RECORD_HEADER_BYTES: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub u32);

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub u32);

/// Identifies the input tuple that caused an output tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cause {
    pub stream: StreamId,
    pub seq: u64,
    pub timestamp: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tuple {
    pub stream: StreamId,
    pub key: u64,
    /// Event time, assigned by the producing source.
    pub timestamp: SimTime,
    /// Per-stream sequence number, strictly increasing per producer.
    pub seq: u64,
    pub payload_bytes: u32,
    /// Operator-defined content: the matched auction for join results, the
    /// count for aggregates, zero for source tuples.
    pub value: u64,
    pub cause: Option<Cause>,
}

impl Tuple {
    pub fn new(stream: StreamId, key: u64, timestamp: SimTime, seq: u64, payload_bytes: u32) -> Self {
        Tuple { stream, key, timestamp, seq, payload_bytes, value: 0, cause: None }
    }

    /// Size on the wire and in serialized state.
    pub fn record_bytes(&self) -> u64 {
        self.payload_bytes as u64 + RECORD_HEADER_BYTES
    }

    /// The input this tuple traces back to (itself for source tuples).
    pub fn origin(&self) -> Cause {
        self.cause.unwrap_or(Cause { stream: self.stream, seq: self.seq, timestamp: self.timestamp })
    }

    fn caused_output(&self, stream: StreamId, key: u64, seq: u64, payload_bytes: u32, value: u64) -> Tuple {
        Tuple {
            stream,
            key,
            timestamp: self.timestamp,
            seq,
            payload_bytes,
            value,
            cause: Some(self.origin()),
        }
    }
}

/// Highest processed sequence number per input stream.
pub type SeqMarks = BTreeMap<StreamId, u64>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StreamError {
    #[error("stream {0} is not an input of this operator")]
    UnknownStream(StreamId),
    #[error("watermark regressed from {from} to {to}")]
    WatermarkRegression { from: SimTime, to: SimTime },
    #[error("sequence number {0} too large to derive output identifiers")]
    SeqOverflow(u64),
}

/// Next hops per stream.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StreamRoute {
    hops: BTreeMap<StreamId, Vec<NodeId>>,
}

impl StreamRoute {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_hops(&self, stream: StreamId) -> &[NodeId] {
        self.hops.get(&stream).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains_stream(&self, stream: StreamId) -> bool {
        self.hops.contains_key(&stream)
    }

    pub fn declare(&mut self, stream: StreamId) {
        self.hops.entry(stream).or_default();
    }

    /// Returns false if `node` was already a next hop.
    pub fn add_next_hop(&mut self, stream: StreamId, node: NodeId) -> bool {
        let hops = self.hops.entry(stream).or_default();
        if hops.contains(&node) {
            return false;
        }
        hops.push(node);
        true
    }

    /// Returns false if `node` was not a next hop.
    pub fn remove_next_hop(&mut self, stream: StreamId, node: NodeId) -> bool {
        let Some(hops) = self.hops.get_mut(&stream) else {
            return false;
        };
        let before = hops.len();
        hops.retain(|n| *n != node);
        hops.len() != before
    }

    /// Replaces `from` with `to` in place. Returns false (and changes
    /// nothing) when `from` is not a next hop.
    pub fn redirect(&mut self, stream: StreamId, from: NodeId, to: NodeId) -> bool {
        let Some(hops) = self.hops.get_mut(&stream) else {
            return false;
        };
        let Some(pos) = hops.iter().position(|n| *n == from) else {
            return false;
        };
        if hops.contains(&to) {
            hops.remove(pos);
        } else {
            hops[pos] = to;
        }
        true
    }

    pub fn streams(&self) -> impl Iterator<Item = StreamId> + '_ {
        self.hops.keys().copied()
    }
}

/// One data message per next hop of the tuple's stream. An empty result
/// means the tuple is unroutable.
pub fn route(tuple: &Tuple, routes: &StreamRoute) -> Vec<(NodeId, NetMessage<Tuple>)> {
    routes
        .next_hops(tuple.stream)
        .iter()
        .map(|n| (*n, NetMessage::new(MessageKind::DataTuple, tuple.record_bytes(), tuple.clone())))
        .collect()
}

/// Bookkeeping carried with serialized state besides the stored records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorMeta {
    pub watermark: SimTime,
    /// First window index not yet emitted (aggregates only).
    pub next_window: u64,
}

/// Operator configuration with resolved stream ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorSpec {
    Join {
        person: StreamId,
        auction: StreamId,
        output: StreamId,
        output_payload_bytes: u32,
    },
    Aggregate {
        input: StreamId,
        output: StreamId,
        window: WindowKind,
        output_payload_bytes: u32,
    },
    Filter {
        input: StreamId,
        output: StreamId,
        modulus: u64,
        remainder: u64,
    },
}

impl OperatorSpec {
    pub fn build(&self) -> Operator {
        match *self {
            OperatorSpec::Join { person, auction, output, output_payload_bytes } => {
                Operator::Join(JoinOperator::new(person, auction, output, output_payload_bytes))
            }
            OperatorSpec::Aggregate { input, output, window, output_payload_bytes } => {
                Operator::Aggregate(WindowAggregate::new(input, output, window, output_payload_bytes))
            }
            OperatorSpec::Filter { input, output, modulus, remainder } => {
                Operator::Filter(FilterOperator::new(input, output, modulus, remainder))
            }
        }
    }

    pub fn inputs(&self) -> Vec<StreamId> {
        match *self {
            OperatorSpec::Join { person, auction, .. } => vec![person, auction],
            OperatorSpec::Aggregate { input, .. } | OperatorSpec::Filter { input, .. } => vec![input],
        }
    }

    pub fn output(&self) -> StreamId {
        match *self {
            OperatorSpec::Join { output, .. }
            | OperatorSpec::Aggregate { output, .. }
            | OperatorSpec::Filter { output, .. } => output,
        }
    }

    pub fn is_stateful(&self) -> bool {
        !matches!(self, OperatorSpec::Filter { .. })
    }

    /// Expected output tuples per input tuple, when known from configuration.
    pub fn nominal_selectivity(&self) -> Option<f64> {
        match *self {
            OperatorSpec::Filter { modulus, .. } => Some(1.0 / modulus.max(1) as f64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Operator {
    Join(JoinOperator),
    Aggregate(WindowAggregate),
    Filter(FilterOperator),
}

impl Operator {
    pub fn process(&mut self, t: &Tuple) -> Result<Vec<Tuple>, StreamError> {
        match self {
            Operator::Join(op) => op.process(t),
            Operator::Aggregate(op) => op.process(t),
            Operator::Filter(op) => op.process(t),
        }
    }

    /// Advances event time; only aggregates emit in response.
    pub fn advance_watermark(&mut self, watermark: SimTime) -> Result<Vec<Tuple>, StreamError> {
        match self {
            Operator::Aggregate(op) => op.advance_window(watermark),
            _ => Ok(Vec::new()),
        }
    }

    pub fn watermark(&self) -> SimTime {
        self.meta().watermark
    }

    pub fn is_stateful(&self) -> bool {
        !matches!(self, Operator::Filter(_))
    }

    /// Stored records in canonical order.
    pub fn records(&self) -> Vec<Tuple> {
        match self {
            Operator::Join(op) => op.records(),
            Operator::Aggregate(op) => op.records(),
            Operator::Filter(_) => Vec::new(),
        }
    }

    /// Stored records with a sequence number above the mark of their stream.
    pub fn records_after(&self, marks: &SeqMarks) -> Vec<Tuple> {
        if let Operator::Join(op) = self {
            return op.records_after_seq(marks.get(&op.auction_stream()).copied().unwrap_or(0));
        }
        let mut out = self.records();
        out.retain(|t| t.seq > marks.get(&t.stream).copied().unwrap_or(0));
        out
    }

    pub fn stored_records(&self) -> usize {
        match self {
            Operator::Join(op) => op.stored(),
            Operator::Aggregate(op) => op.stored(),
            Operator::Filter(_) => 0,
        }
    }

    /// Sum of `record_bytes` over stored records.
    pub fn stored_bytes(&self) -> u64 {
        match self {
            Operator::Join(op) => op.stored_bytes(),
            Operator::Aggregate(op) => op.stored_bytes(),
            Operator::Filter(_) => 0,
        }
    }

    pub fn install_records(&mut self, records: &[Tuple]) {
        match self {
            Operator::Join(op) => op.install(records),
            Operator::Aggregate(op) => op.install(records),
            Operator::Filter(_) => {}
        }
    }

    pub fn meta(&self) -> OperatorMeta {
        match self {
            Operator::Join(op) => OperatorMeta { watermark: op.watermark(), next_window: 0 },
            Operator::Aggregate(op) => op.meta(),
            Operator::Filter(op) => OperatorMeta { watermark: op.watermark(), next_window: 0 },
        }
    }

    pub fn apply_meta(&mut self, meta: OperatorMeta) {
        match self {
            Operator::Join(op) => op.set_watermark(meta.watermark),
            Operator::Aggregate(op) => op.apply_meta(meta),
            Operator::Filter(op) => op.set_watermark(meta.watermark),
        }
    }

    /// Earliest input event time an output depends on. An instance that has
    /// seen input only from time `t` can reproduce an output exactly iff its
    /// coverage start is at least `t`.
    pub fn coverage_start(&self, out: &Tuple) -> SimTime {
        match self {
            // Auctions are retained forever, so any match may involve
            // arbitrarily old input.
            Operator::Join(_) => SimTime::ZERO,
            Operator::Aggregate(op) => op.window_start_of_output(out),
            Operator::Filter(_) => out.timestamp,
        }
    }

    /// Handover time for a recreated instance that starts receiving input
    /// at `ready`: the earliest time from which its outputs are complete.
    /// `NEVER` when state is never fully recreated from live input.
    pub fn recreation_handover(&self, ready: SimTime) -> SimTime {
        match self {
            Operator::Join(_) => SimTime::NEVER,
            Operator::Aggregate(op) => op.first_window_start_at_or_after(ready),
            Operator::Filter(_) => ready,
        }
    }

    /// Time until outputs are complete when input starts at `handover`.
    pub fn recreation_extent(&self) -> SimTime {
        match self {
            Operator::Join(_) => SimTime::NEVER,
            Operator::Aggregate(op) => op.extent(),
            Operator::Filter(_) => SimTime::ZERO,
        }
    }

    pub fn selectivity(&self) -> Option<f64> {
        let (inputs, outputs) = match self {
            Operator::Join(op) => op.counts(),
            Operator::Aggregate(op) => op.counts(),
            Operator::Filter(op) => op.counts(),
        };
        (inputs > 0).then(|| outputs as f64 / inputs as f64)
    }
}

/// Outcome of offering one tuple to a query instance.
#[derive(Clone, Debug, PartialEq)]
pub enum Processed {
    /// Already reflected in this instance's state.
    Duplicate,
    Outputs(Vec<Tuple>),
}

/// An operator together with the sequence marks of the input it reflects.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryInstance {
    pub query: QueryId,
    pub spec: OperatorSpec,
    pub op: Operator,
    marks: SeqMarks,
}

impl QueryInstance {
    pub fn new(query: QueryId, spec: &OperatorSpec) -> Self {
        let marks = spec.inputs().into_iter().map(|s| (s, 0)).collect();
        QueryInstance { query, spec: spec.clone(), op: spec.build(), marks }
    }

    /// Discards all state.
    pub fn reset(&mut self) {
        *self = QueryInstance::new(self.query, &self.spec);
    }

    pub fn marks(&self) -> &SeqMarks {
        &self.marks
    }

    pub fn set_marks(&mut self, marks: SeqMarks) {
        self.marks = marks;
    }

    pub fn is_fresh(&self) -> bool {
        self.marks.values().all(|m| *m == 0) && self.op.stored_records() == 0
    }

    pub fn process(&mut self, t: &Tuple) -> Result<Processed, StreamError> {
        let Some(mark) = self.marks.get_mut(&t.stream) else {
            return Err(StreamError::UnknownStream(t.stream));
        };
        if t.seq <= *mark {
            return Ok(Processed::Duplicate);
        }
        let out = self.op.process(t)?;
        *self.marks.get_mut(&t.stream).expect("checked above") = t.seq;
        Ok(Processed::Outputs(out))
    }
}
