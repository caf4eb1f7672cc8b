use std::fs;
use std::path::PathBuf;

use wrapless::harness::suites::{liquidation_scenarios, multiparty_scenarios, payoff_base, payoff_scenarios};
use wrapless::harness::{
    premise_holds, rationality, run_scenario, run_suite, verify_report, HarnessError, Report, Scenario, Strategy,
    SUITES,
};

fn scenario_files() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .expect("scenarios directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
}

#[test]
fn shipped_scenarios_parse_and_pass() {
    let files = scenario_files();
    assert!(files.len() >= 5);
    for f in files {
        let sc = Scenario::from_json(&fs::read_to_string(&f).unwrap()).unwrap();
        let report = run_scenario(&sc).unwrap();
        assert!(report.passed(), "{}: {:?}", f.display(), report.failures());
        assert_eq!(Scenario::from_json(&sc.to_json()).unwrap(), sc);
    }
}

#[test]
fn same_seed_same_bytes_other_seed_other_digest() {
    for s in payoff_scenarios(21).into_iter().chain(multiparty_scenarios(21)) {
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl(), "{}", s.name);
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(run_scenario(&other).unwrap().digest(), a.digest(), "{}", s.name);
    }
}

#[test]
fn reports_round_trip_and_detect_tampering() {
    let report = run_scenario(&liquidation_scenarios(3)[1]).unwrap();
    let text = report.to_jsonl();
    assert_eq!(verify_report(&text).unwrap(), report.digest());
    assert_eq!(Report::parse_jsonl(&text).unwrap().to_jsonl(), text);
    let tampered = text.replacen("LiquidatedClosed", "Successful", 1);
    assert_ne!(tampered, text);
    assert!(matches!(verify_report(&tampered), Err(HarnessError::DigestMismatch { .. })));
    let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
    assert!(verify_report(&truncated).is_err());
}

#[test]
fn every_deviation_is_strictly_worse() {
    let base = payoff_base(4);
    assert!(premise_holds(base.loan.as_ref().unwrap()));
    let rows = rationality(&base).unwrap();
    assert_eq!(rows.len(), 8);
    for r in rows {
        assert!(r.strictly_worse(), "{} {:?}: {} vs {}", r.party, r.strategy, r.deviant, r.honest);
    }
}

#[test]
fn every_suite_conserves_and_passes() {
    for name in SUITES {
        let r = run_suite(name, 17).unwrap();
        r.ensure_passed().unwrap();
    }
    assert!(matches!(run_suite("nope", 0), Err(HarnessError::UnknownSuite(_))));
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut s = payoff_base(0);
    s.borrower = Strategy::TimesOut;
    assert!(matches!(s.validate(), Err(HarnessError::ScenarioInvalid(_))));
    let mut s = payoff_base(0);
    s.lender = Strategy::BroadcastOldState(0);
    assert!(s.validate().is_err());
    let mut s = payoff_base(0);
    s.loan.as_mut().unwrap().n = 0;
    assert!(s.validate().is_err());
    let mut s = payoff_base(0);
    s.loan = None;
    assert!(s.validate().is_err());
}
