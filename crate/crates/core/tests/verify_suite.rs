use fairgp::oracles::run_verification_suite;

#[test]
fn every_check_passes() {
    let records = run_verification_suite(fairgp::DEFAULT_SEED);
    for r in &records {
        println!("{}", r.to_csv_row());
    }
    assert!(records.iter().all(|r| r.pass));
}

#[test]
fn suite_is_deterministic() {
    assert_eq!(run_verification_suite(3), run_verification_suite(3));
}
