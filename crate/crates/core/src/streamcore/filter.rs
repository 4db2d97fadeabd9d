use super::{StreamError, StreamId, Tuple};
use crate::simnet::SimTime;

/// Stateless selection `key % modulus == remainder`. Outputs keep the input
/// sequence number.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterOperator {
    input: StreamId,
    output: StreamId,
    modulus: u64,
    remainder: u64,
    watermark: SimTime,
    inputs: u64,
    outputs: u64,
}

impl FilterOperator {
    pub fn new(input: StreamId, output: StreamId, modulus: u64, remainder: u64) -> Self {
        FilterOperator {
            input,
            output,
            modulus: modulus.max(1),
            remainder,
            watermark: SimTime::ZERO,
            inputs: 0,
            outputs: 0,
        }
    }

    pub fn process(&mut self, t: &Tuple) -> Result<Vec<Tuple>, StreamError> {
        if t.stream != self.input {
            return Err(StreamError::UnknownStream(t.stream));
        }
        self.inputs += 1;
        self.watermark = self.watermark.max(t.timestamp);
        if t.key % self.modulus != self.remainder % self.modulus {
            return Ok(Vec::new());
        }
        self.outputs += 1;
        Ok(vec![t.caused_output(self.output, t.key, t.seq, t.payload_bytes, t.value)])
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

    #[test]
    fn keeps_matching_keys() {
        let mut f = FilterOperator::new(StreamId(0), StreamId(1), 2, 0);
        let even = Tuple::new(StreamId(0), 4, SimTime::ZERO, 1, 10);
        let odd = Tuple::new(StreamId(0), 5, SimTime::ZERO, 2, 10);
        assert_eq!(f.process(&even).unwrap()[0].seq, 1);
        assert!(f.process(&odd).unwrap().is_empty());
        assert_eq!(f.counts(), (2, 1));
    }
}
