mod common;

use proptest::prelude::*;

const OP_TOL: f64 = 1e-4;
const PIPELINE_TOL: f64 = 1e-3;

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        let (worst, failed) = common::check_ops(seed, OP_TOL);
        prop_assert!(failed.is_empty(), "seed {}: {:?} (worst {:.2e})", seed, failed, worst);
    }
}

#[test]
fn full_pipeline_matches_finite_differences() {
    for seed in 0..3 {
        let err = common::full_pipeline_check(seed, PIPELINE_TOL);
        assert!(err <= PIPELINE_TOL, "seed {seed}: {err:.3e}");
    }
}
