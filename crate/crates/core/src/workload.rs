//! Deterministic person/auction workloads.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::simnet::SimTime;
use crate::streamcore::{StreamId, Tuple};

pub const AUCTION_PAYLOAD_BYTES: u32 = 1024;

/// How tuple keys are drawn. For auctions the key is the seller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KeyDistribution {
    /// `start, start + 1, ...`
    Sequential { #[serde(default)] start: u64 },
    /// Every tuple has the same key, e.g. one seller for all auctions.
    AllSameSeller { key: u64 },
    /// Uniform over `low..=high`.
    Uniform { low: u64, high: u64 },
}

impl Default for KeyDistribution {
    fn default() -> Self {
        KeyDistribution::Sequential { start: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arrivals {
    /// Evenly spaced at the segment rate.
    #[default]
    Uniform,
    /// Exponential gaps with the segment rate as mean.
    Poisson,
}

/// `count` tuples at `rate` per second, starting at `start` seconds or
/// right after the previous segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    #[serde(default)]
    pub start: Option<f64>,
    pub count: u64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub stream: StreamId,
    #[serde(default)]
    pub payload_bytes: u32,
    #[serde(default)]
    pub keys: KeyDistribution,
    #[serde(default)]
    pub arrivals: Arrivals,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default)]
    pub seed: u64,
    pub streams: Vec<StreamSpec>,
}

impl StreamSpec {
    pub fn count(&self) -> u64 {
        self.segments.iter().map(|s| s.count).sum()
    }

    fn generate(&self, seed: u64) -> Vec<Tuple> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(self.stream.0) << 32));
        let mut out = Vec::with_capacity(self.count() as usize);
        let mut clock = 0.0f64;
        let mut seq = 0u64;
        for seg in &self.segments {
            if let Some(s) = seg.start {
                clock = clock.max(s);
            }
            let gap = 1.0 / seg.rate;
            let mut t = clock;
            for i in 0..seg.count {
                t = match self.arrivals {
                    Arrivals::Uniform => clock + i as f64 * gap,
                    Arrivals::Poisson if i == 0 => clock,
                    Arrivals::Poisson => t - gap * (1.0 - rng.gen::<f64>()).ln(),
                };
                seq += 1;
                let key = match &self.keys {
                    KeyDistribution::Sequential { start } => start + seq - 1,
                    KeyDistribution::AllSameSeller { key } => *key,
                    KeyDistribution::Uniform { low, high } => Uniform::new_inclusive(*low, *high).sample(&mut rng),
                };
                let mut tuple = Tuple::new(self.stream, key, SimTime::from_secs_f64(t), seq, self.payload_bytes);
                tuple.value = key;
                out.push(tuple);
            }
            if seg.count > 0 {
                clock = t + gap;
            }
        }
        out
    }
}

impl WorkloadSpec {
    pub fn total_tuples(&self) -> u64 {
        self.streams.iter().map(StreamSpec::count).sum()
    }

    /// Every tuple in emission order; a tuple's timestamp is its emit time.
    pub fn generate(&self) -> Vec<Tuple> {
        let mut all: Vec<Tuple> = self.streams.iter().flat_map(|s| s.generate(self.seed)).collect();
        all.sort_by_key(|t| (t.timestamp, t.stream, t.seq));
        all
    }

    /// `auctions` auctions by one seller at `rate`, then a single person
    /// with that seller's id `person_delay` seconds after the last one.
    pub fn experiment(person: StreamId, auction: StreamId, auctions: u64, rate: f64, person_delay: f64) -> WorkloadSpec {
        let last = if auctions == 0 { 0.0 } else { (auctions - 1) as f64 / rate };
        WorkloadSpec {
            seed: 0,
            streams: vec![
                StreamSpec {
                    stream: auction,
                    payload_bytes: AUCTION_PAYLOAD_BYTES,
                    keys: KeyDistribution::AllSameSeller { key: 1 },
                    arrivals: Arrivals::Uniform,
                    segments: vec![Segment { start: Some(0.0), count: auctions, rate }],
                },
                StreamSpec {
                    stream: person,
                    payload_bytes: 0,
                    keys: KeyDistribution::AllSameSeller { key: 1 },
                    arrivals: Arrivals::Uniform,
                    segments: vec![Segment { start: Some(last + person_delay), count: 1, rate: 1.0 }],
                },
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_has_one_extra_tuple() {
        let w = WorkloadSpec::experiment(StreamId(0), StreamId(1), 100_000, 10_000.0, 5.0);
        let g = w.generate();
        assert_eq!(g.len(), 100_001);
        let person = g.last().unwrap();
        assert_eq!(person.stream, StreamId(0));
        assert!(g.iter().filter(|t| t.stream == StreamId(1)).all(|t| t.key == person.key));
    }

    #[test]
    fn uniform_rate_spacing() {
        let s = StreamSpec {
            stream: StreamId(3),
            payload_bytes: 0,
            keys: KeyDistribution::default(),
            arrivals: Arrivals::Uniform,
            segments: vec![Segment { start: None, count: 10_000, rate: 1000.0 }],
        };
        let g = WorkloadSpec { seed: 1, streams: vec![s] }.generate();
        assert_eq!(g.len(), 10_000);
        assert_eq!(g[1].timestamp, SimTime::from_millis(1));
        assert_eq!(g[9_999].timestamp, SimTime::from_millis(9_999));
    }

    #[test]
    fn segments_follow_each_other() {
        let s = StreamSpec {
            stream: StreamId(0),
            payload_bytes: 8,
            keys: KeyDistribution::Uniform { low: 0, high: 9 },
            arrivals: Arrivals::Poisson,
            segments: vec![Segment { start: None, count: 5, rate: 10.0 }, Segment { start: Some(100.0), count: 5, rate: 1.0 }],
        };
        let spec = WorkloadSpec { seed: 9, streams: vec![s] };
        let a = spec.generate();
        assert_eq!(a, spec.generate());
        assert!(a[4].timestamp < SimTime::from_secs_f64(100.0));
        assert_eq!(a[5].timestamp, SimTime::from_secs_f64(100.0));
        assert!(a.windows(2).all(|w| w[0].seq < w[1].seq));
    }
}
