use apaseg_core::gradsuite::run_suite;

#[test]
fn every_check_passes() {
    let results = run_suite().unwrap();
    assert!(results.len() > 50);
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| (&r.name, r.report.max_rel_error)).collect();
    for r in results.iter().filter(|r| !r.passed()) { eprintln!("{:?}", r); }
    assert!(failed.is_empty(), "{failed:?}");
}
