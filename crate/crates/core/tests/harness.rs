mod common;

use vmsift::clock::SimTime;
use vmsift::config::Config;
use vmsift::harness::{
    median, summarize, write_reports_csv, AttackReport, Experiment, Scenario, REPORT_COLUMNS,
};

fn report(iteration: u64, success: bool, extracted: usize, reaction: Option<f64>) -> AttackReport {
    AttackReport {
        scenario: Scenario::Ssh,
        load_level: 1.0,
        iteration,
        seed: iteration,
        success,
        reaction_ms: reaction,
        tracked_pages: 10,
        filtered_pages: 8,
        extracted_pages: extracted,
        observation_ms: 1000.0,
        search_ms: 900.0,
        requests_made: extracted as u64,
        attempts: 1,
    }
}

#[test]
fn ssh_extracts_single_digit_pages() {
    let exp = Experiment::new(&Config::calibrated(), Scenario::Ssh, 1.0).unwrap();
    let reports = exp.run_batch(3, 40, 1).unwrap();
    let pages: Vec<f64> = reports
        .iter()
        .filter(|r| r.success)
        .map(|r| r.extracted_pages as f64)
        .collect();
    assert!(pages.len() >= 39);
    let m = median(&pages).unwrap();
    assert!((1.0..10.0).contains(&m), "median {m}");
}

#[test]
fn reports_respect_invariants() {
    for scenario in Scenario::ALL {
        let exp = Experiment::new(&Config::calibrated(), scenario, 9.0).unwrap();
        for r in exp.run_batch(8, 10, 1).unwrap() {
            assert!(!r.success || r.extracted_pages >= 1);
            assert!(r.reaction_ms.is_none_or(|t| t >= 0.0));
            assert!(r.filtered_pages <= r.tracked_pages);
        }
    }
}

#[test]
fn start_inside_critical_window_fails() {
    let config = common::periodic_window(10.0);
    let exp = Experiment::new(&config, Scenario::TlsNginx, 1.0).unwrap();
    let inside = exp
        .run_attack(0, 1, Some(SimTime::from_ms(700_004)))
        .unwrap();
    assert!(!inside.success);
    let outside = exp
        .run_attack(0, 1, Some(SimTime::from_ms(700_500)))
        .unwrap();
    assert!(outside.success);
    assert_eq!(outside.reaction_ms, Some(10.0));
}

#[test]
fn same_seed_same_report() {
    for scenario in Scenario::ALL {
        let exp = Experiment::new(&Config::calibrated(), scenario, 17.0).unwrap();
        let seed = exp.iteration_seed(99, 4);
        assert_eq!(
            exp.run_iteration(4, seed).unwrap(),
            exp.run_iteration(4, seed).unwrap()
        );
    }
}

#[test]
fn batch_order_independent_of_workers() {
    let exp = Experiment::new(&Config::calibrated(), Scenario::TlsNginx, 25.0).unwrap();
    let a = exp.run_batch(5, 12, 1).unwrap();
    let b = exp.run_batch(5, 12, 3).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().enumerate().all(|(i, r)| r.iteration == i as u64));
}

#[test]
fn one_failure_in_two_thousand() {
    let reports: Vec<AttackReport> = (0..2000)
        .map(|i| report(i, i != 17, 7, Some(4.0)))
        .collect();
    let s = summarize(&reports).unwrap();
    assert_eq!(s.successes, 1999);
    assert_eq!(s.success_rate, 0.9995);
}

#[test]
fn summary_statistics() {
    let reports: Vec<AttackReport> = [3, 5, 7]
        .iter()
        .enumerate()
        .map(|(i, &k)| report(i as u64, true, k, Some(4.0)))
        .collect();
    let s = summarize(&reports).unwrap();
    assert_eq!(s.median_extracted_pages, Some(5.0));
    assert_eq!(s.mad_extracted_pages, Some(2.0));
    assert_eq!(s.reaction_histogram.len(), 1);
    assert_eq!(s.reaction_histogram[0].bin_ms, 4);
    assert_eq!(s.reaction_histogram[0].normalized, 1.0);
    assert!(summarize(&[]).is_err());
}

#[test]
fn csv_header_order() {
    let mut out = Vec::new();
    write_reports_csv(&[report(0, true, 7, None)], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header,
        "scenario,load_level,iteration,seed,success,reaction_ms,tracked_pages,filtered_pages,extracted_pages,observation_s,search_s,requests"
    );
    assert_eq!(header, REPORT_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 2);
}
