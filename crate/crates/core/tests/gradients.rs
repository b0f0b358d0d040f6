use std::time::Instant;

use salguide_core::ModelConfig;
use salguide_oracles::gradcheck::{model_case, operator_cases, CaseReport};

fn assert_all_pass(reports: &[CaseReport]) {
    for r in reports {
        assert!(
            r.passed(),
            "{}: max relative error {:.3e} over {} of {} smooth coordinates, {} kinks",
            r.name,
            r.max_rel_error,
            r.checked(),
            r.required,
            r.kinks
        );
    }
}

#[test]
fn operators_match_central_differences() {
    let start = Instant::now();
    let reports: Vec<CaseReport> = operator_cases(7, 20).iter().map(|c| c.check()).collect();
    assert!(reports.len() >= 20 * 7);
    assert_all_pass(&reports);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn full_model_matches_central_differences() {
    let reports = vec![
        model_case(ModelConfig::default_for(10, 0), 4),
        model_case(ModelConfig::with_channels([3, 32, 32], &[16, 32, 64, 64], 10, 1), 6),
    ];
    assert_all_pass(&reports);
}

#[test]
fn every_operator_is_covered() {
    let names: Vec<String> = operator_cases(1, 1).into_iter().map(|c| c.name).collect();
    for op in ["conv2d", "relu", "maxpool2d", "global_avg_pool", "dense", "softmax_cross_entropy", "spatial_mask"] {
        assert!(names.iter().any(|n| n.starts_with(op)), "{op} missing");
    }
}
