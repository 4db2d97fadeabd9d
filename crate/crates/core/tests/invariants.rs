use migrasim::simnet::{EventQueue, Link, Network, NodeId, SimTime};
use migrasim::streamcore::StreamId;
use migrasim::workload::{Arrivals, KeyDistribution, Segment, StreamSpec, WorkloadSpec};
use proptest::prelude::*;

proptest! {
    #[test]
    fn link_is_fifo_and_never_early(
        bw in 1_000u64..10_000_000_000,
        lat in 0u64..50_000_000,
        sends in prop::collection::vec((0u64..1_000_000_000, 1u64..10_000_000), 1..50),
    ) {
        let (a, b) = (NodeId(0), NodeId(1));
        let link = Link::new(a, b, bw, SimTime::from_nanos(lat));
        let mut net = Network::new();
        net.add_duplex(link).unwrap();
        let mut sends = sends;
        sends.sort();
        let mut last = SimTime::ZERO;
        for (at, size) in sends {
            let t = net.transmit(a, b, size, SimTime::from_nanos(at)).unwrap();
            prop_assert!(t.arrival >= SimTime::from_nanos(at) + link.transmission_time(size) + link.latency);
            prop_assert!(t.arrival >= last);
            last = t.arrival;
        }
        // The reverse direction is untouched.
        let back = net.transmit(b, a, 1, SimTime::ZERO).unwrap();
        prop_assert_eq!(back.start, SimTime::ZERO);
    }

    #[test]
    fn queue_pops_in_time_then_insertion_order(times in prop::collection::vec(0u64..1_000, 0..200)) {
        let mut q = EventQueue::new();
        for (i, t) in times.iter().enumerate() {
            q.schedule(SimTime::from_nanos(*t), NodeId(0), i).unwrap();
        }
        let mut popped = Vec::new();
        while let Some(ev) = q.pop().unwrap() {
            popped.push((ev.time, ev.payload));
        }
        let mut want: Vec<_> = times.iter().enumerate().map(|(i, t)| (SimTime::from_nanos(*t), i)).collect();
        want.sort();
        prop_assert_eq!(popped, want);
    }

    #[test]
    fn workload_counts_order_and_keys(
        seed in any::<u64>(),
        poisson in any::<bool>(),
        segs in prop::collection::vec((0u64..300, 1.0f64..5_000.0), 1..4),
        low in 0u64..100,
        span in 0u64..100,
    ) {
        let stream = |id: u32| StreamSpec {
            stream: StreamId(id),
            payload_bytes: 64,
            keys: KeyDistribution::Uniform { low, high: low + span },
            arrivals: if poisson { Arrivals::Poisson } else { Arrivals::Uniform },
            segments: segs.iter().map(|&(count, rate)| Segment { start: None, count, rate }).collect(),
        };
        let spec = WorkloadSpec { seed, streams: vec![stream(0), stream(1)] };
        let g = spec.generate();
        prop_assert_eq!(g.len() as u64, spec.total_tuples());
        prop_assert!(g.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        prop_assert!(g.iter().all(|t| (low..=low + span).contains(&t.key)));
        for s in [StreamId(0), StreamId(1)] {
            let seqs: Vec<u64> = g.iter().filter(|t| t.stream == s).map(|t| t.seq).collect();
            prop_assert!(seqs.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert_eq!(g, spec.generate());
    }

    #[test]
    fn seconds_round_trip(ns in 0u64..1_000_000_000_000_000) {
        let t = SimTime::from_nanos(ns);
        let back = SimTime::from_secs_f64(t.as_secs_f64());
        prop_assert!(back.as_nanos().abs_diff(ns) <= 1 + ns / 1_000_000_000_000);
    }
}
