//! End-to-end acceptance run: builds the shipped evaluators from the default
//! scenario config and prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p hjp-core --test acceptance -- --nocapture`.

use hjp_core::sim::{self, Evaluators};
use hjp_core::validate::{self, CheckOutcome};

const SEED: u64 = 7;

#[test]
fn acceptance_criteria() {
    let config = sim::scenario_form_platoon();
    let evals = Evaluators::build(&config).expect("default evaluators build");
    let scratch = tempfile::tempdir().unwrap();

    let mut lines: Vec<(usize, CheckOutcome)> = vec![
        (1, validate::double_integrator_oracle()),
        (2, validate::frozen_invariants(&config, &evals, 2000, SEED)),
        (3, validate::reconstruction_cross_check()),
        (
            4,
            validate::safety_soundness(&evals.safety, &config.safety, config.limits.u_max, SEED, 100),
        ),
        (5, validate::liveness_achievement(&config, &evals.highway, SEED, 50)),
    ];
    // form_platoon, malfunction, intruder, then determinism
    for (k, c) in validate::scenario_checks(&evals).into_iter().enumerate() {
        lines.push((6 + k, c));
    }
    lines.push((10, validate::cache_round_trip(&evals, scratch.path())));

    println!();
    for (n, c) in &lines {
        println!("criterion {n:>2}: {c}");
    }
    let failed: Vec<usize> = lines.iter().filter(|(_, c)| !c.passed).map(|(n, _)| *n).collect();
    assert_eq!(lines.len(), 10);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
