use losh::gradcheck::{run, TOLERANCE};

#[test]
fn every_suite_passes_on_a_second_seed() {
    let rep = run(7, 20, None).unwrap();
    for s in &rep.suites {
        assert!(s.instances >= 20, "{}", s.suite);
        assert!(s.worst_rel_err <= TOLERANCE, "{} worst {:e} at {}", s.suite, s.worst_rel_err, s.worst_at);
    }
}

#[test]
fn broken_weight_gradient_is_reported() {
    let rep = run(3, 2, Some("conv1.weight")).unwrap();
    assert!(!rep.passed());
    assert!(rep.worst().worst_at.starts_with("conv1.weight"));
}
