//! Shared fixtures for the benchmarks: the default scenario shrunk onto
//! coarse grids so a full evaluator build takes well under a second.

use hjp_core::sim::{self, Evaluators, ScenarioConfig};

pub fn coarse(mut c: ScenarioConfig) -> ScenarioConfig {
    c.evaluators.highway.counts = [61, 29];
    c.evaluators.join.counts = [61, 29];
    c.evaluators.safety.counts = [41, 21, 13];
    c.evaluators.max_slabs = 60;
    c
}

pub fn coarse_evaluators() -> (ScenarioConfig, Evaluators) {
    let c = coarse(sim::scenario_form_platoon());
    let e = Evaluators::build(&c).expect("coarse evaluators build");
    (c, e)
}
