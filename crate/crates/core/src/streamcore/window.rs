use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{OperatorMeta, StreamError, StreamId, Tuple};
use crate::simnet::SimTime;

/// Window `k` covers event times `[k * slide, k * slide + extent)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WindowKind {
    Tumbling { extent: SimTime },
    Sliding { extent: SimTime, slide: SimTime },
}

impl WindowKind {
    pub fn extent(&self) -> SimTime {
        match *self {
            WindowKind::Tumbling { extent } | WindowKind::Sliding { extent, .. } => extent,
        }
    }

    pub fn slide(&self) -> SimTime {
        match *self {
            WindowKind::Tumbling { extent } => extent,
            WindowKind::Sliding { slide, .. } => slide,
        }
    }
}

/// Per-key count over tumbling or sliding event-time windows. A window is
/// emitted once the watermark reaches its end; the watermark is the largest
/// timestamp seen.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowAggregate {
    input: StreamId,
    output: StreamId,
    extent: u64,
    slide: u64,
    output_payload_bytes: u32,
    /// Tuples of windows not yet emitted, in timestamp order.
    retained: VecDeque<Tuple>,
    stored_bytes: u64,
    watermark: SimTime,
    next_window: u64,
    inputs: u64,
    outputs: u64,
    late: u64,
}

impl WindowAggregate {
    pub fn new(input: StreamId, output: StreamId, window: WindowKind, output_payload_bytes: u32) -> Self {
        WindowAggregate {
            input,
            output,
            extent: window.extent().as_nanos().max(1),
            slide: window.slide().as_nanos().max(1),
            output_payload_bytes,
            retained: VecDeque::new(),
            stored_bytes: 0,
            watermark: SimTime::ZERO,
            next_window: 0,
            inputs: 0,
            outputs: 0,
            late: 0,
        }
    }

    fn window_end(&self, k: u64) -> u128 {
        k as u128 * self.slide as u128 + self.extent as u128
    }

    /// First window index whose end lies strictly after `t`.
    fn first_open_window(&self, t: u64) -> u64 {
        if t < self.extent {
            0
        } else {
            (t - self.extent) / self.slide + 1
        }
    }

    pub fn process(&mut self, t: &Tuple) -> Result<Vec<Tuple>, StreamError> {
        if t.stream != self.input {
            return Err(StreamError::UnknownStream(t.stream));
        }
        self.inputs += 1;
        let out = if t.timestamp > self.watermark { self.advance_window(t.timestamp)? } else { Vec::new() };
        let last_window = t.timestamp.as_nanos() / self.slide;
        if last_window < self.next_window {
            self.late += 1;
            return Ok(out);
        }
        self.insert(t.clone());
        Ok(out)
    }

    fn insert(&mut self, t: Tuple) {
        self.stored_bytes += t.record_bytes();
        let key = (t.timestamp, t.seq);
        if self.retained.back().map_or(true, |b| (b.timestamp, b.seq) <= key) {
            self.retained.push_back(t);
        } else {
            let pos = self.retained.partition_point(|r| (r.timestamp, r.seq) <= key);
            self.retained.insert(pos, t);
        }
    }

    /// Emits every window with end ≤ `watermark`, one count per key present.
    pub fn advance_window(&mut self, watermark: SimTime) -> Result<Vec<Tuple>, StreamError> {
        if watermark < self.watermark {
            return Err(StreamError::WatermarkRegression { from: self.watermark, to: watermark });
        }
        self.watermark = watermark;
        let wm = watermark.as_nanos() as u128;
        let mut out = Vec::new();
        let mut k = self.next_window;
        if self.window_end(k) <= wm {
            while let Some(front) = self.retained.front() {
                k = k.max(self.first_open_window(front.timestamp.as_nanos()));
                if self.window_end(k) > wm {
                    break;
                }
                self.emit_window(k, &mut out)?;
                k += 1;
                self.evict_before(k);
            }
            k = k.max(self.first_open_window(watermark.as_nanos()));
        }
        self.next_window = k;
        self.outputs += out.len() as u64;
        Ok(out)
    }

    fn emit_window(&self, k: u64, out: &mut Vec<Tuple>) -> Result<(), StreamError> {
        if k >= 1 << 32 {
            return Err(StreamError::SeqOverflow(k));
        }
        let start = k as u128 * self.slide as u128;
        let end = self.window_end(k);
        let mut per_key: BTreeMap<u64, (u64, &Tuple)> = BTreeMap::new();
        for t in &self.retained {
            let ts = t.timestamp.as_nanos() as u128;
            if ts >= end {
                break;
            }
            if ts >= start {
                let e = per_key.entry(t.key).or_insert((0, t));
                e.0 += 1;
                e.1 = t;
            }
        }
        let end_time = SimTime::from_nanos(u64::try_from(end).unwrap_or(u64::MAX));
        for (key, (count, last)) in per_key {
            if key >= 1 << 32 {
                return Err(StreamError::SeqOverflow(key));
            }
            let mut o = last.caused_output(self.output, key, (k << 32) | key, self.output_payload_bytes, count);
            o.timestamp = end_time;
            out.push(o);
        }
        Ok(())
    }

    fn evict_before(&mut self, k: u64) {
        let start = k as u128 * self.slide as u128;
        while let Some(front) = self.retained.front() {
            if front.timestamp.as_nanos() as u128 >= start {
                break;
            }
            self.stored_bytes -= front.record_bytes();
            self.retained.pop_front();
        }
    }

    pub fn window_start_of_output(&self, out: &Tuple) -> SimTime {
        out.timestamp.saturating_sub(SimTime::from_nanos(self.extent))
    }

    pub fn first_window_start_at_or_after(&self, t: SimTime) -> SimTime {
        if t.is_never() {
            return t;
        }
        SimTime::from_nanos(t.as_nanos().div_ceil(self.slide).saturating_mul(self.slide))
    }

    pub fn extent(&self) -> SimTime {
        SimTime::from_nanos(self.extent)
    }

    pub fn records(&self) -> Vec<Tuple> {
        self.retained.iter().cloned().collect()
    }

    pub fn install(&mut self, records: &[Tuple]) {
        for r in records {
            self.insert(r.clone());
        }
    }

    pub fn meta(&self) -> OperatorMeta {
        OperatorMeta { watermark: self.watermark, next_window: self.next_window }
    }

    pub fn apply_meta(&mut self, meta: OperatorMeta) {
        self.watermark = self.watermark.max(meta.watermark);
        self.next_window = self.next_window.max(meta.next_window);
        self.evict_before(self.next_window);
    }

    pub fn stored(&self) -> usize {
        self.retained.len()
    }

    pub fn stored_bytes(&self) -> u64 {
        self.stored_bytes
    }

    pub fn late_tuples(&self) -> u64 {
        self.late
    }

    pub fn counts(&self) -> (u64, u64) {
        (self.inputs, self.outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IN: StreamId = StreamId(0);
    const OUT: StreamId = StreamId(1);

    fn secs(s: u64) -> SimTime {
        SimTime::from_nanos(s * 1_000_000_000)
    }

    fn tup(key: u64, at: SimTime, seq: u64) -> Tuple {
        Tuple::new(IN, key, at, seq, 8)
    }

    #[test]
    fn tumbling_window_emits_on_watermark() {
        let mut w = WindowAggregate::new(IN, OUT, WindowKind::Tumbling { extent: secs(10) }, 8);
        w.process(&tup(1, secs(1), 1)).unwrap();
        w.process(&tup(1, secs(2), 2)).unwrap();
        assert!(w.advance_window(secs(9)).unwrap().is_empty());
        let out = w.advance_window(secs(10)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].value, 2);
        assert_eq!(out[0].timestamp, secs(10));
        assert_eq!(w.stored(), 0);
    }

    #[test]
    fn regression_rejected() {
        let mut w = WindowAggregate::new(IN, OUT, WindowKind::Tumbling { extent: secs(10) }, 8);
        w.advance_window(secs(5)).unwrap();
        assert!(matches!(w.advance_window(secs(4)), Err(StreamError::WatermarkRegression { .. })));
    }

    #[test]
    fn sliding_counts_tuple_in_each_overlapping_window() {
        let mut w = WindowAggregate::new(IN, OUT, WindowKind::Sliding { extent: secs(10), slide: secs(5) }, 8);
        w.process(&tup(3, secs(7), 1)).unwrap();
        let out = w.advance_window(SimTime::NEVER).unwrap();
        // Windows [0,10) and [5,15) both contain t=7.
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|o| o.value == 1));
        assert_eq!(out[0].timestamp, secs(10));
        assert_eq!(out[1].timestamp, secs(15));
    }

    #[test]
    fn late_tuple_is_dropped() {
        let mut w = WindowAggregate::new(IN, OUT, WindowKind::Tumbling { extent: secs(10) }, 8);
        w.process(&tup(1, secs(12), 1)).unwrap();
        w.process(&tup(1, secs(3), 2)).unwrap();
        assert_eq!(w.late_tuples(), 1);
    }

    #[test]
    fn recreation_alignment() {
        let w = WindowAggregate::new(IN, OUT, WindowKind::Sliding { extent: secs(10), slide: secs(4) }, 8);
        assert_eq!(w.first_window_start_at_or_after(secs(5)), secs(8));
        assert_eq!(w.first_window_start_at_or_after(secs(8)), secs(8));
    }
}
