mod common;

use common::*;
use uda_forge::expcli::config::RunConfig;
use uda_forge::expcli::run::execute;

const SEEDS: [u64; 3] = [0, 1, 2];

fn target_accuracy(cfg: &RunConfig) -> f64 {
    execute(cfg).unwrap().result.target_test_accuracy().unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn baseline_at(shift: f64, seed: u64) -> RunConfig {
    let mut v = serde_json::to_value(synth_config("baseline", seed, None)).unwrap();
    v["dataset"]["synth"]["shift"] = shift.into();
    RunConfig::from_value(v).unwrap()
}

// drops the pseudo-label diagnostic only CDCL fills in
fn without_pseudo(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

fn cdcl_config(tau: f64, gamma: f64, seed: u64) -> RunConfig {
    synth_config("cdcl", seed, Some(("cdcl", serde_json::json!({ "tau": tau, "gamma": gamma }))))
}

#[test]
fn baseline_target_accuracy_falls_as_shift_grows() {
    let acc: Vec<f64> = [0.0, 0.3, 0.6]
        .iter()
        .map(|&shift| mean(&SEEDS.map(|s| target_accuracy(&baseline_at(shift, s)))))
        .collect();
    eprintln!("baseline target accuracy by shift: {acc:?}");
    assert!(acc[0] > acc[1] && acc[1] > acc[2], "{acc:?}");
}

#[test]
fn cdcl_gamma_zero_is_the_baseline() {
    for seed in [0, 3] {
        let base = execute(&synth_config("baseline", seed, None)).unwrap().result;
        for tau in [0.1, 1.0] {
            let cdcl = execute(&cdcl_config(tau, 0.0, seed)).unwrap().result;
            assert_eq!(without_pseudo(&base.metrics_csv()), without_pseudo(&cdcl.metrics_csv()));
            assert_eq!(base.train_loss, cdcl.train_loss);
            assert_eq!(base.target_test, cdcl.target_test);
        }
    }
}

#[test]
fn uda_run_reports_both_test_domains() {
    let r = execute(&uda_config(0.1, 0)).unwrap().result;
    let (s, t) = (r.source_test.unwrap(), r.target_test.unwrap());
    assert_eq!(s.total(), 100);
    assert_eq!(t.total(), 100);
    assert!(r.best_epoch >= 1 && r.best_epoch <= 10);
    assert_eq!(r.train_loss.len(), 10);
}

#[test]
#[ignore = "not reproduced: on the synthetic corpus every gamma > 0 cell trails gamma = 0"]
fn cdcl_grid_beats_gamma_zero() {
    let base = mean(&SEEDS.map(|s| target_accuracy(&cdcl_config(1.0, 0.0, s))));
    let best = [0.1, 0.5, 1.0]
        .iter()
        .flat_map(|&tau| [0.1, 1.0, 5.0].map(move |gamma| (tau, gamma)))
        .map(|(tau, gamma)| mean(&SEEDS.map(|s| target_accuracy(&cdcl_config(tau, gamma, s)))))
        .fold(f64::MIN, f64::max);
    assert!(best > base, "best cell {best:.3} vs gamma = 0 {base:.3}");
}
