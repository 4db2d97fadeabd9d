//! Discrete-event kernel: simulated time, links with bandwidth and latency,
//! and an event queue with a total `(time, seq)` order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default size of a control message on the wire.
pub const DEFAULT_CONTROL_MESSAGE_BYTES: u64 = 168;

const NANOS_PER_SEC: u64 = 1_000_000_000;

/// Simulated time in integer nanoseconds. `SimTime::NEVER` doubles as the
/// end-of-stream watermark.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const NEVER: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    /// Rounds to the nearest nanosecond. Negative and NaN inputs map to zero,
    /// values beyond the representable range saturate to `NEVER`.
    pub fn from_secs_f64(secs: f64) -> Self {
        if secs.is_nan() || secs <= 0.0 {
            return SimTime::ZERO;
        }
        let ns = (secs * NANOS_PER_SEC as f64).round();
        if ns >= u64::MAX as f64 {
            SimTime::NEVER
        } else {
            SimTime(ns as u64)
        }
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        if self == SimTime::NEVER {
            return f64::INFINITY;
        }
        self.0 as f64 / NANOS_PER_SEC as f64
    }

    pub fn is_never(self) -> bool {
        self == SimTime::NEVER
    }

    pub fn saturating_add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn saturating_mul(self, k: u64) -> SimTime {
        SimTime(self.0.saturating_mul(k))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        self.saturating_add(rhs)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        self.saturating_sub(rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_never() {
            write!(f, "inf")
        } else {
            write!(f, "{:.9}s", self.as_secs_f64())
        }
    }
}

/// Index of a node in a topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("no link from {src} to {dst}")]
    UnknownLink { src: NodeId, dst: NodeId },
    #[error("invalid link {src}->{dst}: {reason}")]
    InvalidLink { src: NodeId, dst: NodeId, reason: &'static str },
    #[error("cannot schedule at {at} before current time {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
    #[error("event limit of {limit} exceeded at {now}; probable livelock")]
    Livelock { limit: u64, now: SimTime },
}

/// One direction of a point-to-point link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub src: NodeId,
    pub dst: NodeId,
    /// Bits per second, strictly positive.
    pub bandwidth_bps: u64,
    pub latency: SimTime,
}

impl Link {
    pub fn new(src: NodeId, dst: NodeId, bandwidth_bps: u64, latency: SimTime) -> Self {
        Link { src, dst, bandwidth_bps, latency }
    }

    pub fn reversed(&self) -> Link {
        Link { src: self.dst, dst: self.src, ..*self }
    }

    /// Serialization delay of `bytes` on this link, rounded up to whole nanoseconds.
    pub fn transmission_time(&self, bytes: u64) -> SimTime {
        transmission_time(bytes, self.bandwidth_bps)
    }

    /// Arrival time of a message sent on an idle link.
    pub fn idle_arrival(&self, bytes: u64, send_time: SimTime) -> SimTime {
        send_time + self.transmission_time(bytes) + self.latency
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.bandwidth_bps == 0 {
            return Err(SimError::InvalidLink {
                src: self.src,
                dst: self.dst,
                reason: "bandwidth must be positive",
            });
        }
        if self.src == self.dst {
            return Err(SimError::InvalidLink { src: self.src, dst: self.dst, reason: "self loop" });
        }
        Ok(())
    }
}

pub fn transmission_time(bytes: u64, bandwidth_bps: u64) -> SimTime {
    let bits = bytes as u128 * 8 * NANOS_PER_SEC as u128;
    let bw = bandwidth_bps.max(1) as u128;
    let ns = bits.div_ceil(bw);
    SimTime(u64::try_from(ns).unwrap_or(u64::MAX))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    DataTuple,
    Control,
    StateChunk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetMessage<P> {
    pub kind: MessageKind,
    pub size: u64,
    pub payload: P,
}

impl<P> NetMessage<P> {
    pub fn new(kind: MessageKind, size: u64, payload: P) -> Self {
        NetMessage { kind, size, payload }
    }

    pub fn control(payload: P) -> Self {
        NetMessage::new(MessageKind::Control, DEFAULT_CONTROL_MESSAGE_BYTES, payload)
    }
}

/// Timing of one transfer across a link.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transfer {
    pub start: SimTime,
    pub finish: SimTime,
    pub arrival: SimTime,
}

#[derive(Clone, Debug)]
struct LinkState {
    link: Link,
    busy_until: SimTime,
}

/// Directed links with per-direction FIFO serialization.
#[derive(Clone, Debug, Default)]
pub struct Network {
    links: BTreeMap<(NodeId, NodeId), LinkState>,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_link(&mut self, link: Link) -> Result<(), SimError> {
        link.validate()?;
        self.links.insert((link.src, link.dst), LinkState { link, busy_until: SimTime::ZERO });
        Ok(())
    }

    /// Adds both directions; each direction serializes independently.
    pub fn add_duplex(&mut self, link: Link) -> Result<(), SimError> {
        self.add_link(link)?;
        self.add_link(link.reversed())
    }

    pub fn link(&self, src: NodeId, dst: NodeId) -> Result<&Link, SimError> {
        self.links
            .get(&(src, dst))
            .map(|s| &s.link)
            .ok_or(SimError::UnknownLink { src, dst })
    }

    pub fn has_link(&self, src: NodeId, dst: NodeId) -> bool {
        self.links.contains_key(&(src, dst))
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values().map(|s| &s.link)
    }

    /// Puts a message of `size` bytes on the link `src -> dst` at `send_time`.
    /// Transmission starts when the link finishes its previous message.
    pub fn transmit(&mut self, src: NodeId, dst: NodeId, size: u64, send_time: SimTime) -> Result<Transfer, SimError> {
        let state = self.links.get_mut(&(src, dst)).ok_or(SimError::UnknownLink { src, dst })?;
        let start = send_time.max(state.busy_until);
        let finish = start + state.link.transmission_time(size);
        state.busy_until = finish;
        Ok(Transfer { start, finish, arrival: finish + state.link.latency })
    }

    pub fn deliver<P>(&mut self, msg: &NetMessage<P>, src: NodeId, dst: NodeId, send_time: SimTime) -> Result<SimTime, SimError> {
        self.transmit(src, dst, msg.size, send_time).map(|t| t.arrival)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(pub u64);

#[derive(Clone, Debug)]
pub struct Event<P> {
    pub id: EventId,
    pub time: SimTime,
    pub target: NodeId,
    pub payload: P,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.id == other.0.id
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.time, other.0.id).cmp(&(self.0.time, self.0.id))
    }
}

/// Pending events in `(time, seq)` order.
pub struct EventQueue<P> {
    heap: BinaryHeap<Queued<P>>,
    now: SimTime,
    next_seq: u64,
    processed: u64,
    limit: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub const DEFAULT_EVENT_LIMIT: u64 = 500_000_000;

    pub fn new() -> Self {
        Self::with_limit(Self::DEFAULT_EVENT_LIMIT)
    }

    pub fn with_limit(limit: u64) -> Self {
        EventQueue { heap: BinaryHeap::new(), now: SimTime::ZERO, next_seq: 0, processed: 0, limit }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn schedule(&mut self, time: SimTime, target: NodeId, payload: P) -> Result<EventId, SimError> {
        if time < self.now {
            return Err(SimError::SchedulingInPast { at: time, now: self.now });
        }
        let id = EventId(self.next_seq);
        self.next_seq += 1;
        self.heap.push(Queued(Event { id, time, target, payload }));
        Ok(id)
    }

    /// Removes the next event and advances the clock to its time.
    pub fn pop(&mut self) -> Result<Option<Event<P>>, SimError> {
        let Some(Queued(ev)) = self.heap.pop() else {
            return Ok(None);
        };
        self.processed += 1;
        if self.processed > self.limit {
            return Err(SimError::Livelock { limit: self.limit, now: ev.time });
        }
        self.now = ev.time;
        Ok(Some(ev))
    }

    /// Drains the queue, handing each event to `handler`, and returns the time
    /// of the last processed event.
    pub fn run_until_quiescent<E, F>(&mut self, mut handler: F) -> Result<SimTime, E>
    where
        E: From<SimError>,
        F: FnMut(&mut Self, Event<P>) -> Result<(), E>,
    {
        while let Some(ev) = self.pop()? {
            handler(self, ev)?;
        }
        Ok(self.now)
    }
}
