//! Acceptance suite: one line per criterion, then a hard assertion.
//!
//! `cargo test -p railguard --test acceptance -- --nocapture` shows the lines.

use railguard::verify::{self, CriterionReport, Outcome};

fn check(report: CriterionReport) {
    println!("{report}");
    assert!(report.passed(), "{report}");
}

#[test]
fn criterion_01_efficiency_rows() {
    check(verify::efficiency_rows());
}

#[test]
fn criterion_02_hardware_claims_substituted() {
    let r = verify::hardware_claims();
    assert_eq!(r.outcome, Outcome::NotApplicable);
    check(r);
}

#[test]
fn criterion_03_nms_oracle() {
    check(verify::nms_oracle());
}

#[test]
fn criterion_04_encode_decode_round_trip() {
    check(verify::encode_decode_round_trip());
}

#[test]
fn criterion_05_fsm_closure_and_cycle() {
    check(verify::fsm_closure_and_cycle());
}

#[test]
fn criterion_06_height_model() {
    check(verify::height_model());
}

#[test]
fn criterion_07_scenario_fidelity() {
    check(verify::scenario_fidelity());
}

#[test]
fn criterion_08_evaluation_arithmetic() {
    check(verify::evaluation_arithmetic());
}

#[test]
fn criterion_09_latency_harness() {
    check(verify::latency_harness());
}

#[test]
fn full_suite_runs_every_criterion_once() {
    let ids: Vec<u8> = verify::run_all().iter().map(|r| r.id).collect();
    assert_eq!(ids, (1..=9).collect::<Vec<_>>());
}
