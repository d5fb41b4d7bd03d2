mod common;

use common::{all_checks, TOL};

#[test]
fn every_operation_matches_finite_differences() {
    for seed in 1..=40 {
        let mut failed = Vec::new();
        for (name, err) in all_checks(seed) {
            if err > TOL || err.is_nan() {
                failed.push(format!("{name}: {err:.2e}"));
            }
        }
        assert!(failed.is_empty(), "seed {seed}: {failed:?}");
    }
}
