mod common;

use common::{run, TOL};

const INSTANCES: u64 = 20;

fn check(loss: &str) {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let report = run(loss, i);
        assert!(
            report.passes(TOL),
            "{loss} instance {i}: relative error {:.3e}, worst entry {:?}",
            report.relative_error,
            report.worst
        );
        assert!(report.analytic_norm > 0.0, "{loss} instance {i}: zero gradient");
        worst = worst.max(report.relative_error);
    }
    println!("{loss}: worst relative error {worst:.3e}");
}

#[test]
fn dynamics_nll_gradients() {
    check("dynamics_nll");
}

#[test]
fn a2c_gradients() {
    check("a2c");
}

#[test]
fn consistency_gradients() {
    check("consistency");
}

#[test]
fn elbo_gradients() {
    check("elbo");
}

#[test]
fn imitation_gradients() {
    check("imitation");
}
