use std::collections::BTreeMap;

use super::{StreamError, StreamId, Tuple};
use crate::simnet::SimTime;

/// Person ⋈ Auction on `person.id = auction.seller`. Auctions are retained
/// indefinitely; each person tuple probes the stored auctions of its key.
#[derive(Clone, Debug, PartialEq)]
pub struct JoinOperator {
    person: StreamId,
    auction: StreamId,
    output: StreamId,
    output_payload_bytes: u32,
    /// Stored auctions ordered by seq.
    auctions: Vec<Tuple>,
    /// Positions in `auctions`, per seller.
    by_seller: BTreeMap<u64, Vec<u32>>,
    stored_bytes: u64,
    watermark: SimTime,
    inputs: u64,
    outputs: u64,
}

impl JoinOperator {
    pub fn new(person: StreamId, auction: StreamId, output: StreamId, output_payload_bytes: u32) -> Self {
        JoinOperator {
            person,
            auction,
            output,
            output_payload_bytes,
            auctions: Vec::new(),
            by_seller: BTreeMap::new(),
            stored_bytes: 0,
            watermark: SimTime::ZERO,
            inputs: 0,
            outputs: 0,
        }
    }

    /// Auctions are stored; a person emits one output per stored auction of
    /// the same seller, in storage order. Output seq is
    /// `person.seq << 32 | match index`, so it is identical on any host that
    /// holds the same state.
    pub fn process(&mut self, t: &Tuple) -> Result<Vec<Tuple>, StreamError> {
        if t.stream == self.auction {
            self.inputs += 1;
            self.watermark = self.watermark.max(t.timestamp);
            self.store(t.clone());
            Ok(Vec::new())
        } else if t.stream == self.person {
            if t.seq >= 1 << 32 {
                return Err(StreamError::SeqOverflow(t.seq));
            }
            self.inputs += 1;
            self.watermark = self.watermark.max(t.timestamp);
            let Some(matches) = self.by_seller.get(&t.key) else {
                return Ok(Vec::new());
            };
            let out: Vec<Tuple> = matches
                .iter()
                .enumerate()
                .map(|(i, &pos)| {
                    let a = &self.auctions[pos as usize];
                    t.caused_output(self.output, t.key, (t.seq << 32) | i as u64, self.output_payload_bytes, a.seq)
                })
                .collect();
            self.outputs += out.len() as u64;
            Ok(out)
        } else {
            Err(StreamError::UnknownStream(t.stream))
        }
    }

    fn store(&mut self, t: Tuple) {
        let pos = u32::try_from(self.auctions.len()).expect("join state exceeds u32 records");
        self.stored_bytes += t.record_bytes();
        self.by_seller.entry(t.key).or_default().push(pos);
        self.auctions.push(t);
    }

    pub fn records(&self) -> Vec<Tuple> {
        self.auctions.clone()
    }

    /// Stored auctions with `seq > after`.
    pub fn records_after_seq(&self, after: u64) -> Vec<Tuple> {
        let start = self.auctions.partition_point(|t| t.seq <= after);
        self.auctions[start..].to_vec()
    }

    pub fn auction_stream(&self) -> StreamId {
        self.auction
    }

    /// Adds records; storage stays ordered by auction seq whatever order
    /// the records are installed in.
    pub fn install(&mut self, records: &[Tuple]) {
        let in_order = match (self.auctions.last(), records.first()) {
            (Some(last), Some(first)) => last.seq < first.seq,
            _ => true,
        } && records.windows(2).all(|w| w[0].seq < w[1].seq);
        for r in records {
            self.store(r.clone());
        }
        if !in_order {
            self.auctions.sort_by_key(|t| t.seq);
            self.by_seller.clear();
            for (pos, t) in self.auctions.iter().enumerate() {
                self.by_seller.entry(t.key).or_default().push(pos as u32);
            }
        }
    }

    pub fn stored(&self) -> usize {
        self.auctions.len()
    }

    pub fn stored_bytes(&self) -> u64 {
        self.stored_bytes
    }

    pub fn watermark(&self) -> SimTime {
        self.watermark
    }

    pub fn set_watermark(&mut self, wm: SimTime) {
        self.watermark = self.watermark.max(wm);
    }

    pub fn counts(&self) -> (u64, u64) {
        (self.inputs, self.outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: StreamId = StreamId(0);
    const A: StreamId = StreamId(1);
    const O: StreamId = StreamId(2);

    fn join() -> JoinOperator {
        JoinOperator::new(P, A, O, 16)
    }

    fn tup(stream: StreamId, key: u64, seq: u64) -> Tuple {
        Tuple::new(stream, key, SimTime::from_millis(seq), seq, 1024)
    }

    #[test]
    fn person_matches_stored_auctions_in_order() {
        let mut j = join();
        for seq in 1..=3 {
            assert!(j.process(&tup(A, 5, seq)).unwrap().is_empty());
        }
        j.process(&tup(A, 6, 4)).unwrap();
        let out = j.process(&tup(P, 5, 1)).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.iter().map(|o| o.value).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(out.windows(2).all(|w| w[0].seq < w[1].seq));
        assert_eq!(out[0].cause.unwrap().stream, P);
    }

    #[test]
    fn person_without_auctions() {
        let mut j = join();
        j.process(&tup(A, 5, 1)).unwrap();
        assert!(j.process(&tup(P, 9, 1)).unwrap().is_empty());
    }

    #[test]
    fn one_person_matches_all_auctions() {
        let mut j = join();
        for seq in 1..=100_000 {
            j.process(&tup(A, 7, seq)).unwrap();
        }
        assert_eq!(j.process(&tup(P, 7, 1)).unwrap().len(), 100_000);
        assert_eq!(j.stored_bytes(), 100_000 * 1056);
    }

    #[test]
    fn foreign_stream_rejected() {
        assert_eq!(join().process(&tup(StreamId(9), 1, 1)), Err(StreamError::UnknownStream(StreamId(9))));
    }

    #[test]
    fn suffix_by_seq() {
        let mut j = join();
        for seq in 1..=10 {
            j.process(&tup(A, seq % 3, seq)).unwrap();
        }
        let tail = j.records_after_seq(7);
        assert_eq!(tail.iter().map(|t| t.seq).collect::<Vec<_>>(), [8, 9, 10]);
    }
}
