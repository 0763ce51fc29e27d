//! Estimator behaviour through the public API.

use fluidnet::analytics::{bahadur_rao_p, solve_twist};
use fluidnet::simulate::{estimate_is, estimate_mc, estimate_modulated_is, sweep, Precision};
use fluidnet::{JobLaw, Jobs, ModulatedNetworkSpec, NetworkSpec, RareTarget, StateSpec};

fn single_node() -> (NetworkSpec, RareTarget) {
    (NetworkSpec::single_node(1.0, 1.0, 1.0, 1.0), RareTarget::new(vec![1.0]))
}

#[test]
fn importance_sampling_agrees_with_crude_monte_carlo() {
    let (spec, target) = single_node();
    let precision = Precision {
        eps: 0.05,
        ..Precision::default()
    };
    let is = estimate_is(&spec, &target, 10, &precision, 1).unwrap();
    let mc = estimate_mc(&spec, &target, 10, &precision, 2).unwrap();
    let gap = (is.p_hat - mc.p_hat).abs();
    assert!(gap < is.half_width + mc.half_width, "{is:?} vs {mc:?}");
    assert!(is.runs < mc.runs);
}

#[test]
fn log_probability_per_n_approaches_rate() {
    let (spec, target) = single_node();
    let sol = solve_twist(&spec, &target).unwrap();
    let ns = [10, 20, 40, 100];
    let rows = sweep(&spec, &target, &ns, &Precision::default(), 5).unwrap();
    let gaps: Vec<f64> = rows.iter().map(|r| (r.p_hat.ln() / r.n as f64 + sol.rate).abs()).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    let last = rows.last().unwrap();
    let ratio = last.p_hat / bahadur_rao_p(&sol, 100.0);
    assert!((0.8..1.2).contains(&ratio), "{ratio}");
    assert_eq!(last.br_approx, Some(bahadur_rao_p(&sol, 100.0)));
}

#[test]
fn modulated_estimate_is_worker_invariant() {
    let state = |lambda: f64, mu: f64, r: f64| StateSpec {
        lambda,
        jobs: Jobs(vec![JobLaw::exponential(mu)]),
        drain: vec![r],
        routing: vec![vec![1.0]],
    };
    let spec = ModulatedNetworkSpec {
        generator: vec![vec![-2.0, 2.0], vec![2.0, -2.0]],
        initial_state: 0,
        horizon: 1.0,
        states: vec![state(2.0, 0.5, 5.0), state(1.0, 1.0, 1.0)],
    };
    let target = RareTarget::new(vec![3.0]);
    let base = Precision {
        max_runs: 3000,
        min_runs: 3000,
        ..Precision::default()
    };
    let one = estimate_modulated_is(&spec, &target, 20, &base, 9, true).unwrap();
    let three = estimate_modulated_is(&spec, &target, 20, &Precision { workers: 3, ..base }, 9, true).unwrap();
    assert_eq!(one.estimate.p_hat, three.estimate.p_hat);
    assert_eq!(one.estimate.variance_hat, three.estimate.variance_hat);
    assert_eq!(one.records, three.records);
    assert_eq!(one.estimate.runs, 3000);
    let best = one.best.best.unwrap();
    assert!(best.1 > 0.5 && best.1 < 0.6);
}
