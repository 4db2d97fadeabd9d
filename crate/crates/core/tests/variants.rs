use migrasim::algorithms::AlgorithmVariant;
use migrasim::protocol::MigrationStatus;
use migrasim::scenario::experiment;

#[test]
fn every_variant_completes_on_the_join() {
    for v in AlgorithmVariant::ALL {
        let s = experiment(v, 1000, 1000.0, 0.5);
        let r = s.run().unwrap_or_else(|e| panic!("{v}: {e}"));
        let rep = r.report.unwrap();
        let out = rep.outputs.as_ref().unwrap();
        eprintln!(
            "{v}: status={:?} freeze={:.6} move={:.6} outputs={}/{} missing={} unexpected={} cms={}",
            rep.status, rep.metrics.freeze_time, rep.metrics.state_movement_time, out.received, out.expected, out.missing, out.unexpected, rep.metrics.control_messages
        );
        assert_eq!(rep.status, MigrationStatus::Completed, "{v}");
        if v != AlgorithmVariant::PauseDrainResume {
            assert!(rep.is_correct(), "{v}: {out:?}");
        }
    }
}
