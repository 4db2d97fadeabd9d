//! The simulation event log and every migration cost metric derived from it.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::{NodeId, SimTime};
use crate::statemgmt::BlobKind;
use crate::streamcore::{Cause, StreamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MigrationId(pub u32);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    MigrationInjected { mid: MigrationId, old_host: NodeId, new_host: NodeId, label: String, planned_control_messages: u64 },
    TupleArrived { node: NodeId, stream: StreamId, seq: u64 },
    TupleForwarded { node: NodeId, to: NodeId, stream: StreamId, seq: u64 },
    TupleLost { node: NodeId, stream: StreamId, seq: u64 },
    TupleUnroutable { node: NodeId, stream: StreamId, seq: u64 },
    /// A source sent one tuple to more than one next hop.
    InputDuplicated { node: NodeId, stream: StreamId, seq: u64, extra_bytes: u64 },
    /// An input already reflected in the receiving instance's state.
    InputSkipped { node: NodeId, stream: StreamId, seq: u64 },
    OutputSuppressed { node: NodeId, stream: StreamId, seq: u64 },
    SinkAccepted { stream: StreamId, seq: u64, key: u64, value: u64, cause: Cause },
    SinkDuplicate { stream: StreamId, seq: u64, dropped: bool },
    ControlSent { mid: MigrationId, from: NodeId, to: NodeId, bytes: u64 },
    AckSent { mid: MigrationId, from: NodeId, to: NodeId },
    MarkerSent { mid: MigrationId, from: NodeId, to: NodeId, stream: StreamId },
    StateExtracted { mid: MigrationId, node: NodeId, bytes: u64, duration: SimTime, replica: bool },
    StateSent { mid: MigrationId, from: NodeId, to: NodeId, bytes: u64, kind: BlobKind, replica: bool, chunk: u32, of: u32 },
    StateReceived { mid: MigrationId, node: NodeId, bytes: u64, replica: bool },
    StateLoaded { mid: MigrationId, node: NodeId, bytes: u64, duration: SimTime, replica: bool },
    OperatorStopped { mid: MigrationId, node: NodeId },
    OperatorStarted { mid: MigrationId, node: NodeId },
    ScheduleFired { mid: MigrationId, node: NodeId, at: SimTime },
    ProgramCompleted { mid: MigrationId },
    MigrationCompleted { mid: MigrationId },
    MigrationAborted { mid: MigrationId, reason: String },
    ProtocolWarning { mid: MigrationId, node: NodeId, message: String },
    ReplicationFailed { mid: MigrationId, node: NodeId, message: String },
    DecisionMade { current: NodeId, chosen: NodeId, benefits: Vec<(NodeId, f64)> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time: SimTime,
    #[serde(flatten)]
    pub event: LogEvent,
}

/// Append-only, time-ordered record of everything a run did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventLog {
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: SimTime, event: LogEvent) {
        self.records.push(LogRecord { time, event });
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SimTime, &LogEvent)> {
        self.records.iter().map(|r| (r.time, &r.event))
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("migration {0:?} stopped the old host but never started the new one")]
    IncompleteMigration(MigrationId),
    #[error("migration {0:?} not found in log")]
    UnknownMigration(MigrationId),
}

/// Every cost metric of one migration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub label: String,
    pub completed: bool,
    pub freeze_time: f64,
    pub state_movement_time: f64,
    pub extraction_time: f64,
    pub loading_time: f64,
    pub bytes_state_moved: u64,
    pub bytes_replicated: u64,
    pub bytes_duplicated_upstream: u64,
    pub control_messages: u64,
    pub planned_control_messages: u64,
    pub acks: u64,
    pub markers: u64,
    pub affected_tuples: u64,
    pub duplicate_outputs_dropped: u64,
    pub duplicate_outputs_accepted: u64,
    pub tuples_lost: u64,
    pub max_added_latency: f64,
    pub mean_added_latency: f64,
    pub migration_span: f64,
    pub sink_outputs: u64,
}

impl MetricsRecord {
    pub const CSV_HEADER: [&'static str; 21] = [
        "label",
        "completed",
        "freeze_time_s",
        "state_movement_time_s",
        "extraction_time_s",
        "loading_time_s",
        "bytes_state_moved",
        "bytes_replicated",
        "bytes_duplicated_upstream",
        "control_messages",
        "planned_control_messages",
        "acks",
        "markers",
        "affected_tuples",
        "duplicate_outputs_dropped",
        "duplicate_outputs_accepted",
        "tuples_lost",
        "max_added_latency_s",
        "mean_added_latency_s",
        "migration_span_s",
        "sink_outputs",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.label.clone(),
            self.completed.to_string(),
            secs(self.freeze_time),
            secs(self.state_movement_time),
            secs(self.extraction_time),
            secs(self.loading_time),
            self.bytes_state_moved.to_string(),
            self.bytes_replicated.to_string(),
            self.bytes_duplicated_upstream.to_string(),
            self.control_messages.to_string(),
            self.planned_control_messages.to_string(),
            self.acks.to_string(),
            self.markers.to_string(),
            self.affected_tuples.to_string(),
            self.duplicate_outputs_dropped.to_string(),
            self.duplicate_outputs_accepted.to_string(),
            self.tuples_lost.to_string(),
            secs(self.max_added_latency),
            secs(self.mean_added_latency),
            secs(self.migration_span),
            self.sink_outputs.to_string(),
        ]
    }
}

/// Fixed-point seconds with six decimals.
pub fn secs(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_csv<W: std::io::Write>(out: W, rows: &[MetricsRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MetricsRecord::CSV_HEADER)?;
    for r in rows {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Hosts {
    old: NodeId,
    new: NodeId,
}

fn hosts_of(log: &EventLog, mid: MigrationId) -> Result<Hosts, MetricsError> {
    log.iter()
        .find_map(|(_, e)| match e {
            LogEvent::MigrationInjected { mid: m, old_host, new_host, .. } if *m == mid => Some(Hosts { old: *old_host, new: *new_host }),
            _ => None,
        })
        .ok_or(MetricsError::UnknownMigration(mid))
}

/// Stop of the old host and start of the new one, when logged.
pub fn stop_start(log: &EventLog, mid: MigrationId) -> Result<(Option<SimTime>, Option<SimTime>), MetricsError> {
    let h = hosts_of(log, mid)?;
    let stop = log.iter().find_map(|(t, e)| match e {
        LogEvent::OperatorStopped { mid: m, node } if *m == mid && *node == h.old => Some(t),
        _ => None,
    });
    let start = log.iter().find_map(|(t, e)| match e {
        LogEvent::OperatorStarted { mid: m, node } if *m == mid && *node == h.new => Some(t),
        _ => None,
    });
    Ok((stop, start))
}

/// `t_start - t_stop`, zero when processing never stopped or the new host
/// was already running when the old one stopped.
pub fn freeze_time(log: &EventLog, mid: MigrationId) -> Result<SimTime, MetricsError> {
    match stop_start(log, mid)? {
        (None, _) => Ok(SimTime::ZERO),
        (Some(_), None) => Err(MetricsError::IncompleteMigration(mid)),
        (Some(stop), Some(start)) => Ok(start.saturating_sub(stop)),
    }
}

/// From the first state blob sent to the last one received, replicas
/// excluded.
pub fn state_movement_time(log: &EventLog, mid: MigrationId) -> SimTime {
    let first = log.iter().find_map(|(t, e)| match e {
        LogEvent::StateSent { mid: m, replica: false, .. } if *m == mid => Some(t),
        _ => None,
    });
    let last = log
        .iter()
        .filter_map(|(t, e)| match e {
            LogEvent::StateReceived { mid: m, replica: false, .. } if *m == mid => Some(t),
            _ => None,
        })
        .last();
    match (first, last) {
        (Some(a), Some(b)) => b.saturating_sub(a),
        _ => SimTime::ZERO,
    }
}

/// Input tuples arriving at either host while the query was frozen.
pub fn affected_tuples(log: &EventLog, mid: MigrationId) -> Result<HashSet<(StreamId, u64)>, MetricsError> {
    let h = hosts_of(log, mid)?;
    let (Some(stop), Some(start)) = stop_start(log, mid)? else {
        return Ok(HashSet::new());
    };
    Ok(log
        .iter()
        .filter_map(|(t, e)| match e {
            LogEvent::TupleArrived { node, stream, seq } if (*node == h.old || *node == h.new) && t >= stop && t < start => {
                Some((*stream, *seq))
            }
            _ => None,
        })
        .collect())
}

/// Arrival time at the sink of each accepted output.
pub fn sink_times(log: &EventLog) -> HashMap<(StreamId, u64), (SimTime, Cause)> {
    let mut m = HashMap::new();
    for (t, e) in log.iter() {
        if let LogEvent::SinkAccepted { stream, seq, cause, .. } = e {
            m.entry((*stream, *seq)).or_insert((t, *cause));
        }
    }
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencySpike {
    pub max: f64,
    /// Mean over outputs caused by affected input tuples.
    pub mean_affected: f64,
    pub affected_outputs: u64,
}

/// Added sink latency of every output relative to a run without migration.
pub fn latency_spike_stats(log: &EventLog, baseline: &EventLog, affected: &HashSet<(StreamId, u64)>) -> LatencySpike {
    let base = sink_times(baseline);
    let mut out = LatencySpike::default();
    let mut sum = 0.0;
    for (key, (t, cause)) in sink_times(log) {
        let Some((tb, _)) = base.get(&key) else {
            continue;
        };
        let delta = t.as_secs_f64() - tb.as_secs_f64();
        out.max = out.max.max(delta);
        if affected.contains(&(cause.stream, cause.seq)) {
            sum += delta;
            out.affected_outputs += 1;
        }
    }
    if out.affected_outputs > 0 {
        out.mean_affected = sum / out.affected_outputs as f64;
    }
    out
}

/// Sink output multiset keyed by `(stream, seq, key, value)`.
pub fn output_multiset(log: &EventLog) -> BTreeMap<(StreamId, u64, u64, u64), u64> {
    let mut m = BTreeMap::new();
    for (_, e) in log.iter() {
        if let LogEvent::SinkAccepted { stream, seq, key, value, .. } = e {
            *m.entry((*stream, *seq, *key, *value)).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OutputCheck {
    pub expected: u64,
    pub received: u64,
    pub missing: u64,
    pub unexpected: u64,
}

impl OutputCheck {
    pub fn is_equal(&self) -> bool {
        self.missing == 0 && self.unexpected == 0
    }
}

pub fn compare_outputs(log: &EventLog, baseline: &EventLog) -> OutputCheck {
    let got = output_multiset(log);
    let want = output_multiset(baseline);
    let mut c = OutputCheck {
        expected: want.values().sum(),
        received: got.values().sum(),
        ..OutputCheck::default()
    };
    let keys: BTreeSet<_> = got.keys().chain(want.keys()).collect();
    for k in keys {
        let (g, w) = (got.get(k).copied().unwrap_or(0), want.get(k).copied().unwrap_or(0));
        if g > w {
            c.unexpected += g - w;
        } else {
            c.missing += w - g;
        }
    }
    c
}

/// Computes the record for migration `mid`; latency figures need the log
/// of a run without migration.
pub fn measure(log: &EventLog, mid: MigrationId, baseline: Option<&EventLog>) -> Result<MetricsRecord, MetricsError> {
    hosts_of(log, mid)?;
    let mut r = MetricsRecord {
        label: String::new(),
        completed: false,
        freeze_time: 0.0,
        state_movement_time: state_movement_time(log, mid).as_secs_f64(),
        extraction_time: 0.0,
        loading_time: 0.0,
        bytes_state_moved: 0,
        bytes_replicated: 0,
        bytes_duplicated_upstream: 0,
        control_messages: 0,
        planned_control_messages: 0,
        acks: 0,
        markers: 0,
        affected_tuples: 0,
        duplicate_outputs_dropped: 0,
        duplicate_outputs_accepted: 0,
        tuples_lost: 0,
        max_added_latency: 0.0,
        mean_added_latency: 0.0,
        migration_span: 0.0,
        sink_outputs: 0,
    };
    let mut injected = SimTime::ZERO;
    for (t, e) in log.iter() {
        match e {
            LogEvent::MigrationInjected { mid: m, label, planned_control_messages, .. } if *m == mid => {
                r.label = label.clone();
                r.planned_control_messages = *planned_control_messages;
                injected = t;
            }
            LogEvent::MigrationCompleted { mid: m } if *m == mid => {
                r.completed = true;
                r.migration_span = t.saturating_sub(injected).as_secs_f64();
            }
            LogEvent::ControlSent { mid: m, .. } if *m == mid => r.control_messages += 1,
            LogEvent::AckSent { mid: m, .. } if *m == mid => r.acks += 1,
            LogEvent::MarkerSent { mid: m, .. } if *m == mid => r.markers += 1,
            LogEvent::StateExtracted { mid: m, duration, replica: false, .. } if *m == mid => {
                r.extraction_time += duration.as_secs_f64();
            }
            LogEvent::StateLoaded { mid: m, duration, replica: false, .. } if *m == mid => r.loading_time += duration.as_secs_f64(),
            LogEvent::StateSent { mid: m, bytes, replica, .. } if *m == mid => {
                if *replica {
                    r.bytes_replicated += bytes;
                } else {
                    r.bytes_state_moved += bytes;
                }
            }
            LogEvent::StateSent { replica: true, bytes, .. } => r.bytes_replicated += bytes,
            LogEvent::InputDuplicated { extra_bytes, .. } => r.bytes_duplicated_upstream += extra_bytes,
            LogEvent::SinkDuplicate { dropped, .. } => {
                if *dropped {
                    r.duplicate_outputs_dropped += 1;
                } else {
                    r.duplicate_outputs_accepted += 1;
                }
            }
            LogEvent::TupleLost { .. } => r.tuples_lost += 1,
            LogEvent::SinkAccepted { .. } => r.sink_outputs += 1,
            _ => {}
        }
    }
    if r.completed {
        r.freeze_time = freeze_time(log, mid)?.as_secs_f64();
    } else {
        r.freeze_time = freeze_time(log, mid).map_or(f64::NAN, |f| f.as_secs_f64());
    }
    let affected = affected_tuples(log, mid)?;
    r.affected_tuples = affected.len() as u64;
    if let Some(b) = baseline {
        let s = latency_spike_stats(log, b, &affected);
        r.max_added_latency = s.max;
        r.mean_added_latency = s.mean_affected;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    fn injected(log: &mut EventLog) {
        log.push(SimTime::ZERO, LogEvent::MigrationInjected {
            mid: MigrationId(0),
            old_host: NodeId(1),
            new_host: NodeId(2),
            label: "x".into(),
            planned_control_messages: 0,
        });
    }

    #[test]
    fn freeze_is_marker_difference() {
        let mut log = EventLog::new();
        injected(&mut log);
        log.push(t(10.0), LogEvent::OperatorStopped { mid: MigrationId(0), node: NodeId(1) });
        log.push(t(13.6), LogEvent::OperatorStarted { mid: MigrationId(0), node: NodeId(2) });
        let f = freeze_time(&log, MigrationId(0)).unwrap();
        assert!((f.as_secs_f64() - 3.6).abs() < 1e-9);
    }

    #[test]
    fn stop_without_start_is_incomplete() {
        let mut log = EventLog::new();
        injected(&mut log);
        log.push(t(1.0), LogEvent::OperatorStopped { mid: MigrationId(0), node: NodeId(1) });
        assert_eq!(freeze_time(&log, MigrationId(0)), Err(MetricsError::IncompleteMigration(MigrationId(0))));
    }

    #[test]
    fn no_markers_no_freeze() {
        let mut log = EventLog::new();
        injected(&mut log);
        assert_eq!(freeze_time(&log, MigrationId(0)), Ok(SimTime::ZERO));
        assert_eq!(state_movement_time(&log, MigrationId(0)), SimTime::ZERO);
    }

    #[test]
    fn movement_spans_first_send_to_last_receive() {
        let mut log = EventLog::new();
        injected(&mut log);
        let mid = MigrationId(0);
        for i in 0..10u32 {
            let s = 1.0 + i as f64;
            log.push(t(s), LogEvent::StateSent { mid, from: NodeId(1), to: NodeId(2), bytes: 10, kind: BlobKind::Full, replica: false, chunk: i, of: 10 });
            log.push(t(s + 0.5), LogEvent::StateReceived { mid, node: NodeId(2), bytes: 10, replica: false });
        }
        log.push(t(20.0), LogEvent::StateReceived { mid, node: NodeId(2), bytes: 10, replica: true });
        assert!((state_movement_time(&log, mid).as_secs_f64() - 9.5).abs() < 1e-9);
    }

    #[test]
    fn csv_uses_six_decimals() {
        assert_eq!(secs(1.5), "1.500000");
        assert_eq!(secs(0.0), "0.000000");
    }
}
