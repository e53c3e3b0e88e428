use isarlab_core::autodiff::gradcheck::{check_all, Tolerance};

#[test]
fn every_op_matches_finite_differences() {
    let reports = check_all(100, 2024, Tolerance::default()).unwrap();
    let mut failed = Vec::new();
    for r in &reports {
        if !r.passed() {
            failed.push(format!("{}: {} failures, first: {}", r.op, r.failures.len(), r.failures[0]));
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(reports.len() >= 16);
}

#[test]
fn suite_detects_tight_tolerance_violations() {
    // FD noise is far above 1e-15, so the comparisons must actually be exercised.
    let tight = Tolerance { first_rel: 1e-15, first_abs: 0.0, second_rel: 1e-15, second_abs: 0.0 };
    let reports = check_all(3, 7, tight).unwrap();
    assert!(reports.iter().any(|r| !r.passed()));
    assert!(reports.iter().all(|r| r.worst_first < 1e-4 && r.worst_second < 1e-3));
}
