//! Invariant suites and oracle cross-checks.
//!
//! Each check returns a [`CheckOutcome`] with the measured quantity, so the
//! CLI and the acceptance tests print the same report. Randomized checks
//! take an explicit seed and are reproducible; rollout batches run on the
//! rayon pool but fold results back in sample order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{AxisProduct, Subsystem};
use crate::grid::{signed_box, Grid};
use crate::hjsolver::{cache, solve, solve_system, CoupledSeries, SolveOptions, ValueSeries};
use crate::platoon::VehicleId;
use crate::reach::{relative_state, ReachError, ReachEvaluator, SafetyParams, TargetSpec};
use crate::sim::{self, Evaluators, Metrics, ScenarioConfig, SimError, Trace};

/// Result of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Measured values and the threshold they were held to.
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// A check that could not run counts as failed.
    fn errored(name: impl Into<String>, err: impl fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Named group of checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Solver,
    Reach,
    Platoon,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "solver" => Ok(Self::Solver),
            "reach" => Ok(Self::Reach),
            "platoon" => Ok(Self::Platoon),
            "all" => Ok(Self::All),
            other => Err(format!("unknown suite '{other}' (solver, reach, platoon, all)")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<CheckOutcome>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

/// Runs a suite against a scenario config and its evaluators.
///
/// `scratch` receives cache files for the round-trip check.
pub fn run_suite(suite: Suite, config: &ScenarioConfig, evals: &Evaluators, seed: u64, scratch: &Path) -> Report {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Solver | Suite::All) {
        checks.push(double_integrator_oracle());
        checks.push(symmetry());
        checks.push(frozen_invariants(config, evals, 2000, seed));
        checks.push(reconstruction_cross_check());
        checks.push(cache_round_trip(evals, scratch));
    }
    if matches!(suite, Suite::Reach | Suite::All) {
        checks.push(safety_soundness(&evals.safety, &config.safety, config.limits.u_max, seed, 100));
        checks.push(liveness_achievement(config, &evals.highway, seed, 50));
        checks.push(translation_invariance(&evals.safety, config.safety.t_internal, seed, 200));
    }
    if matches!(suite, Suite::Platoon | Suite::All) {
        checks.extend(scenario_checks(evals));
    }
    Report { checks }
}

// ---------------------------------------------------------------- solver

const DI_TARGET: [f64; 2] = [0.5, 0.25];
const DI_HORIZON: f64 = 3.0;

/// Whether the unit double integrator at `(p0, v0)` can be inside the
/// target box exactly `s` seconds from now.
///
/// The reachable set at time `s` is bounded, for each final velocity, by the
/// two single-switch extremals (accelerate then brake, and the reverse);
/// every position in between is attainable.
fn di_reach_at(p0: f64, v0: f64, s: f64) -> bool {
    let [r, w] = DI_TARGET;
    let (a, b) = ((v0 - s).max(-w), (v0 + s).min(w));
    if a > b {
        return false;
    }
    let m = 64;
    (0..=m).any(|j| {
        let vf = a + (b - a) * j as f64 / m as f64;
        let t1 = 0.5 * (s + vf - v0);
        let t2 = s - t1;
        let pmax = p0 + v0 * t1 + 0.5 * t1 * t1 + (v0 + t1) * t2 - 0.5 * t2 * t2;
        let t1 = 0.5 * (s - vf + v0);
        let t2 = s - t1;
        let pmin = p0 + v0 * t1 - 0.5 * t1 * t1 + (v0 - t1) * t2 + 0.5 * t2 * t2;
        pmax >= -r && pmin <= r
    })
}

/// Minimum-time oracle: reachable at some time within the horizon.
pub fn di_oracle(p: f64, v: f64, horizon: f64) -> bool {
    let n = 1500;
    (0..=n).any(|i| di_reach_at(p, v, horizon * i as f64 / n as f64))
}

/// Frozen double-integrator BRS on 81×81 against the analytic oracle:
/// misclassified nodes must lie within two cells of the true boundary.
pub fn double_integrator_oracle() -> CheckOutcome {
    let name = "double-integrator BRS vs minimum-time oracle";
    let t0 = Instant::now();
    let run = || -> Result<(usize, usize, usize), Box<dyn std::error::Error>> {
        let g = Arc::new(Grid::new(&[-4.0, -3.0], &[4.0, 3.0], &[81, 81])?);
        let l = signed_box(&g, &[0.0, 0.0], &DI_TARGET)?;
        let sub = Subsystem::double_integrator(1.0)?;
        let s = solve(&sub, &g, &l, &SolveOptions::new(DI_HORIZON).frozen(true))?;
        let last = s.slabs().last().expect("terminal slab").values();
        let (hp, hv) = (g.spacings()[0], g.spacings()[1]);
        let per_node: Vec<(bool, bool)> = (0..g.len())
            .into_par_iter()
            .map(|n| {
                let x = g.node(n);
                let o = di_oracle(x[0], x[1], DI_HORIZON);
                if (last[n] <= 0.0) == o {
                    return (false, false);
                }
                // does the true label change anywhere in the ±2-cell box?
                let near = (-8..=8).any(|i| {
                    (-8..=8).any(|j| di_oracle(x[0] + hp * i as f64 / 4.0, x[1] + hv * j as f64 / 4.0, DI_HORIZON) != o)
                });
                (true, !near)
            })
            .collect();
        let wrong = per_node.iter().filter(|p| p.0).count();
        let far = per_node.iter().filter(|p| p.1).count();
        Ok((wrong, far, g.len()))
    };
    match run() {
        Ok((wrong, far, total)) => {
            let secs = t0.elapsed().as_secs_f64();
            CheckOutcome::new(
                name,
                far == 0 && secs < 60.0,
                format!("{wrong}/{total} nodes misclassified, {far} farther than 2 cells from the boundary; {secs:.1} s (limit 60 s)"),
            )
        }
        Err(e) => CheckOutcome::errored(name, e),
    }
}

/// Symmetric grid, target and limits give an even value function.
pub fn symmetry() -> CheckOutcome {
    let name = "value function symmetry V(-x) = V(x)";
    let run = || -> Result<f64, Box<dyn std::error::Error>> {
        let g = Arc::new(Grid::new(&[-4.0, -3.0], &[4.0, 3.0], &[41, 31])?);
        let l = signed_box(&g, &[0.0, 0.0], &DI_TARGET)?;
        let sub = Subsystem::double_integrator(1.0)?;
        let s = solve(&sub, &g, &l, &SolveOptions::new(2.0).frozen(true))?;
        let counts = g.counts().to_vec();
        let mut worst: f64 = 0.0;
        let (mut idx, mut mirror) = ([0usize; 2], [0usize; 2]);
        for slab in s.slabs() {
            let v = slab.values();
            for n in 0..g.len() {
                g.unravel(n, &mut idx);
                for k in 0..2 {
                    mirror[k] = counts[k] - 1 - idx[k];
                }
                worst = worst.max((v[n] - v[g.flat(&mirror)]).abs());
            }
        }
        Ok(worst)
    };
    match run() {
        Ok(worst) => CheckOutcome::new(name, worst <= 1e-9, format!("max |V(x) - V(-x)| = {worst:.2e} (limit 1e-9)")),
        Err(e) => CheckOutcome::errored(name, e),
    }
}

/// Counts nodes where a later slab exceeds an earlier one, and checks that
/// slab 0 is bit-identical to `terminal`.
pub fn series_invariants(series: &ValueSeries, terminal: &[f64]) -> (usize, bool) {
    let slabs = series.slabs();
    let identity = slabs[0].values().len() == terminal.len()
        && slabs[0].values().iter().zip(terminal).all(|(a, b)| a.to_bits() == b.to_bits());
    let violations = slabs
        .windows(2)
        .map(|w| w[0].values().iter().zip(w[1].values()).filter(|(a, b)| b > a).count())
        .sum();
    (violations, identity)
}

/// Freezing monotonicity and terminal identity for the three shipped
/// evaluators.
///
/// The evaluators store unfrozen per-axis series; their "within τ" value is
/// the running minimum over stored slabs of the time-matched reconstruction.
/// Checked here: slab 0 of every axis series equals the independently
/// sampled terminal bit for bit; the reconstructed value is non-increasing
/// over every stored slab at `pairs` random product-grid nodes; and a frozen
/// re-solve of every axis on its shipped grid is non-increasing at every
/// node of every slab with slab 0 equal to the terminal.
pub fn frozen_invariants(config: &ScenarioConfig, evals: &Evaluators, pairs: usize, seed: u64) -> CheckOutcome {
    let name = "frozen monotonicity and terminal identity";
    let specs = match config.evaluator_specs() {
        Ok(s) => s,
        Err(e) => return CheckOutcome::errored(name, e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    let mut ok = true;
    for ((spec, ev), label) in specs.iter().zip([&evals.highway, &evals.join, &evals.safety]).zip(Evaluators::NAMES) {
        let run = |rng: &mut ChaCha8Rng| -> Result<(usize, usize, bool, usize), ReachError> {
            let series = [ev.coupled().x(), ev.coupled().y()];
            let mut identity = true;
            let mut frozen_increases = 0;
            let mut frozen_slabs = 0;
            for (axis, s) in series.iter().enumerate() {
                let terminal = spec.terminal(axis)?;
                let (_, same) = series_invariants(s, terminal.values());
                identity &= same;
                let opts = SolveOptions::new(ev.horizon()).frozen(true).scheme(spec.options().scheme);
                let frozen = solve(ev.subsystem(), s.grid(), &terminal, &opts)?;
                let (inc, same) = series_invariants(&frozen, terminal.values());
                identity &= same;
                frozen_increases += inc;
                frozen_slabs += frozen.slabs().len();
            }
            // running-min reconstruction at node pairs, every stored slab
            let (gx, gy) = (series[0].grid(), series[1].grid());
            let d = gx.dim();
            let mut increases = 0;
            for _ in 0..pairs {
                let (nx, ny) = (rng.random_range(0..gx.len()), rng.random_range(0..gy.len()));
                let (px, py) = (gx.node(nx), gy.node(ny));
                let mut prev = f64::INFINITY;
                for &tau in ev.times() {
                    let v = ev.coupled().value(&px[..d], &py[..d], tau).value;
                    if v > prev {
                        increases += 1;
                    }
                    prev = v;
                }
            }
            Ok((increases, frozen_increases, identity, frozen_slabs))
        };
        match run(&mut rng) {
            Ok((inc, finc, identity, fslabs)) => {
                ok &= inc == 0 && finc == 0 && identity;
                parts.push(format!(
                    "{label}: {} slabs × {pairs} node pairs, {inc} increases; frozen re-solve {fslabs} slabs, {finc} increases; terminal {}",
                    ev.times().len(),
                    if identity { "identical" } else { "DIFFERS" }
                ));
            }
            Err(e) => return CheckOutcome::errored(name, e),
        }
    }
    CheckOutcome::new(name, ok, parts.join("; "))
}

/// Sign-disagreement fraction between the time-matched reconstruction and a
/// direct 4D solve of the unaugmented relative game on 21⁴ nodes, ignoring
/// nodes within one cell of either zero level.
///
/// Returns the filtered fraction, the number of nodes it was taken over, and
/// the unfiltered fraction over all nodes.
pub fn reconstruction_disagreement(u_self: f64, u_other: f64, d: f64, horizon: f64) -> Result<(f64, usize, f64), ReachError> {
    let sub = Subsystem::relative_game(u_self, u_other)?;
    let g2 = Arc::new(Grid::new(&[-10.0, -5.0], &[10.0, 5.0], &[21, 21])?);
    let l2 = g2.sample(|x| x[0].abs() - d);
    let axis = Arc::new(solve(&sub, &g2, &l2, &SolveOptions::new(horizon))?);
    let coupled = CoupledSeries::new(Arc::clone(&axis), axis)?;
    let g4 = Arc::new(Grid::new(&[-10.0, -5.0, -10.0, -5.0], &[10.0, 5.0, 10.0, 5.0], &[21; 4])?);
    let l4 = g4.sample(|x| (x[0].abs() - d).max(x[2].abs() - d));
    let product = AxisProduct { first: sub, second: sub };
    let direct = solve_system(&product, &g4, &l4, &SolveOptions::new(horizon).frozen(true).stride(usize::MAX))?;
    let dv = direct.slabs().last().expect("terminal slab").values();
    let rv: Vec<f64> = (0..g4.len())
        .into_par_iter()
        .map(|n| {
            let x = g4.node(n);
            coupled.value(&x[..2], &x[2..], horizon).value
        })
        .collect();
    let counts = g4.counts();
    let (mut counted, mut disagree, mut raw) = (0usize, 0usize, 0usize);
    let mut idx = [0usize; 4];
    let mut nb = [0usize; 4];
    for n in 0..g4.len() {
        g4.unravel(n, &mut idx);
        let (sd, sr) = (dv[n] <= 0.0, rv[n] <= 0.0);
        if sd != sr {
            raw += 1;
        }
        let near_boundary = (0..81usize).any(|code| {
            let mut c = code;
            for k in 0..4 {
                let j = idx[k] as i64 + (c % 3) as i64 - 1;
                c /= 3;
                if j < 0 || j >= counts[k] as i64 {
                    return false;
                }
                nb[k] = j as usize;
            }
            let m = g4.flat(&nb);
            (dv[m] <= 0.0) != sd || (rv[m] <= 0.0) != sr
        });
        if near_boundary {
            continue;
        }
        counted += 1;
        if sd != sr {
            disagree += 1;
        }
    }
    Ok((disagree as f64 / counted.max(1) as f64, counted, raw as f64 / g4.len() as f64))
}

/// Reconstruction cross-check at horizon 1.5 for symmetric and both
/// asymmetric control limits.
pub fn reconstruction_cross_check() -> CheckOutcome {
    let name = "reconstruction vs direct 4D solve";
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (us, uo) in [(3.0, 3.0), (2.0, 3.0), (3.0, 2.0)] {
        match reconstruction_disagreement(us, uo, 2.0, 1.5) {
            Ok((frac, counted, raw)) => {
                ok &= frac < 0.03;
                parts.push(format!(
                    "limits ({us},{uo}): {:.3}% of {counted} off-boundary nodes ({:.2}% of all nodes)",
                    100.0 * frac,
                    100.0 * raw
                ));
            }
            Err(e) => return CheckOutcome::errored(name, e),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ok &= secs < 900.0;
    CheckOutcome::new(name, ok, format!("{} (limit 3%); {secs:.1} s (limit 900 s)", parts.join(", ")))
}

/// Save/load of every evaluator is bit-exact, and damaged files are
/// rejected with the matching error class.
pub fn cache_round_trip(evals: &Evaluators, dir: &Path) -> CheckOutcome {
    let name = "cache round trip and corruption rejection";
    let run = || -> Result<Vec<String>, Box<dyn std::error::Error>> {
        let mut problems = Vec::new();
        for (ev, label) in [&evals.highway, &evals.join, &evals.safety].into_iter().zip(Evaluators::NAMES) {
            let [px, _] = ev.save(dir, label)?;
            let back = ReachEvaluator::load(dir, label)?;
            for (a, b) in [(ev.coupled().x(), back.coupled().x()), (ev.coupled().y(), back.coupled().y())] {
                if !bit_identical(a, b) {
                    problems.push(format!("{label} reload differs"));
                }
            }
            let bytes = std::fs::read(&px)?;
            let mut flipped = bytes.clone();
            let mid = flipped.len() / 2;
            flipped[mid] ^= 0x01;
            if !matches!(cache::decode(&flipped), Err(cache::CacheError::Checksum { .. })) {
                problems.push(format!("{label}: flipped byte not reported as checksum mismatch"));
            }
            if !matches!(cache::decode(&bytes[..bytes.len() - 9]), Err(cache::CacheError::Truncated { .. })) {
                problems.push(format!("{label}: truncation not reported"));
            }
            let mut magic = bytes.clone();
            magic[..4].copy_from_slice(b"XXXX");
            if !matches!(cache::decode(&magic), Err(cache::CacheError::Version(_))) {
                problems.push(format!("{label}: bad magic not reported as version error"));
            }
            let mut padded = bytes;
            padded.push(0);
            if !matches!(cache::decode(&padded), Err(cache::CacheError::Malformed(_))) {
                problems.push(format!("{label}: trailing bytes accepted"));
            }
        }
        Ok(problems)
    };
    match run() {
        Ok(p) if p.is_empty() => CheckOutcome::new(
            name,
            true,
            "3 evaluators × 2 axes reload bit-exact; checksum, truncation, magic and trailing-byte damage rejected",
        ),
        Ok(p) => CheckOutcome::new(name, false, p.join("; ")),
        Err(e) => CheckOutcome::errored(name, e),
    }
}

fn bit_identical(a: &ValueSeries, b: &ValueSeries) -> bool {
    a.grid() == b.grid()
        && a.frozen() == b.frozen()
        && a.subsystem() == b.subsystem()
        && a.times().iter().map(|t| t.to_bits()).eq(b.times().iter().map(|t| t.to_bits()))
        && a.slabs().len() == b.slabs().len()
        && a.slabs().iter().zip(b.slabs()).all(|(x, y)| {
            x.values().iter().map(|v| v.to_bits()).eq(y.values().iter().map(|v| v.to_bits()))
        })
}

// ----------------------------------------------------------------- reach

const ROLLOUT_DT: f64 = 0.01;

/// Other-agent behaviours in the soundness rollouts. The first plays the
/// capture-optimal law; the rest are randomized.
#[derive(Debug, Clone, Copy)]
enum Pursuer {
    Capture,
    Constant([f64; 2]),
    Reverse { u: [f64; 2], at: f64 },
    Random,
    CaptureThenMirror { at: f64 },
}

/// One adversarial rollout from relative state `s`; returns whether the pair
/// ever came within `d` on both axes.
fn rollout_captured(ev: &ReachEvaluator, s: &[f64; 6], pursuer: Pursuer, tau: f64, d: f64, u_max: f64, rng: &mut ChaCha8Rng) -> Result<bool, ReachError> {
    let (mut p, mut vi) = ([s[0], s[2]], [s[4], s[5]]);
    let mut vj = [s[4] - s[1], s[5] - s[3]];
    let n = (tau / ROLLOUT_DT).round() as usize;
    for k in 0..n {
        let t = k as f64 * ROLLOUT_DT;
        let rem = (tau - t).max(0.0);
        let rel = [p[0], vi[0] - vj[0], p[1], vi[1] - vj[1], vi[0], vi[1]];
        let ue = ev.safety_control(&rel, rem)?;
        let up = match pursuer {
            Pursuer::Capture => ev.capture_control(&rel, rem)?,
            Pursuer::Constant(u) => u,
            Pursuer::Reverse { u, at } => {
                if t < at {
                    u
                } else {
                    [-u[0], -u[1]]
                }
            }
            Pursuer::Random => [u_max * rng.random_range(-1.0..1.0f64).signum(), u_max * rng.random_range(-1.0..1.0f64).signum()],
            Pursuer::CaptureThenMirror { at } => {
                let uc = ev.capture_control(&rel, rem)?;
                if t < at {
                    uc
                } else {
                    [-uc[0], uc[1]]
                }
            }
        };
        for a in 0..2 {
            vi[a] += ue[a] * ROLLOUT_DT;
            vj[a] += up[a] * ROLLOUT_DT;
            p[a] += (vi[a] - vj[a]) * ROLLOUT_DT;
        }
        if p[0].abs() <= d && p[1].abs() <= d {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Closed-loop soundness of the safety set: from `states` random relative
/// states outside the set at `t_internal`, the evader's safety controller
/// avoids capture against the capture-optimal pursuer and 20 randomized
/// pursuers. Sampling is biased toward the set boundary.
pub fn safety_soundness(ev: &ReachEvaluator, params: &SafetyParams, u_max: f64, seed: u64, states: usize) -> CheckOutcome {
    let name = "safety soundness under adversarial rollouts";
    let t0 = Instant::now();
    let tau = params.t_internal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(states);
    let mut near = 0;
    while samples.len() < states {
        let s = [
            rng.random_range(-8.0..8.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-8.0..8.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
        ];
        let m = match ev.membership(&s, tau) {
            Ok(m) => m,
            Err(e) => return CheckOutcome::errored(name, e),
        };
        if m.inside || (m.value > 0.6 && rng.random_range(0.0..1.0) < 0.8) {
            continue;
        }
        if m.value < 0.3 {
            near += 1;
        }
        samples.push((s, rng.random::<u64>()));
    }
    let results: Result<Vec<usize>, ReachError> = samples
        .par_iter()
        .map(|(s, sub_seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(*sub_seed);
            let mut captures = 0;
            for strat in 0..21 {
                let u = [rng.random_range(-u_max..u_max), rng.random_range(-u_max..u_max)];
                let at = rng.random_range(0.0..tau);
                let pursuer = match strat {
                    0 => Pursuer::Capture,
                    1..=7 => Pursuer::Constant(u),
                    8..=13 => Pursuer::Reverse { u, at },
                    14..=17 => Pursuer::Random,
                    _ => Pursuer::CaptureThenMirror { at },
                };
                if rollout_captured(ev, s, pursuer, tau, params.d, u_max, &mut rng)? {
                    captures += 1;
                }
            }
            Ok(captures)
        })
        .collect();
    match results {
        Ok(c) => {
            let captures: usize = c.iter().sum();
            let secs = t0.elapsed().as_secs_f64();
            CheckOutcome::new(
                name,
                captures == 0 && secs < 120.0,
                format!(
                    "{states} states ({near} with value < 0.3) × 21 pursuers, {captures} captures (limit 0); {secs:.1} s (limit 120 s)"
                ),
            )
        }
        Err(e) => CheckOutcome::errored(name, e),
    }
}

/// Rollouts from random members of the highway set reach the target within
/// the built horizon plus one step under the liveness controller.
pub fn liveness_achievement(config: &ScenarioConfig, ev: &ReachEvaluator, seed: u64, states: usize) -> CheckOutcome {
    let name = "liveness achievement from highway set members";
    let t0 = Instant::now();
    let target: TargetSpec = match config.highway_target() {
        Ok(t) => t,
        Err(e) => return CheckOutcome::errored(name, e),
    };
    let horizon = ev.horizon();
    let half = config.evaluators.highway.half_widths;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(states);
    let mut tries = 0usize;
    while samples.len() < states {
        tries += 1;
        if tries > 1_000_000 {
            return CheckOutcome::new(name, false, "could not sample enough member states");
        }
        let c = target.center;
        let s = [
            c[0] + rng.random_range(-0.75 * half[0]..0.75 * half[0]),
            c[1] + rng.random_range(-0.75 * half[1]..0.75 * half[1]),
            c[2] + rng.random_range(-0.75 * half[0]..0.75 * half[0]),
            c[3] + rng.random_range(-0.75 * half[1]..0.75 * half[1]),
        ];
        match ev.membership(&s, horizon) {
            Ok(m) if m.inside => samples.push(s),
            Ok(_) => {}
            Err(e) => return CheckOutcome::errored(name, e),
        }
    }
    let steps = (horizon / ROLLOUT_DT).round() as usize + 1;
    let results: Result<Vec<Option<f64>>, ReachError> = samples
        .par_iter()
        .map(|s| {
            let mut x = *s;
            for k in 0..=steps {
                if target.contains(&x) {
                    return Ok(Some(k as f64 * ROLLOUT_DT));
                }
                let rem = (horizon - k as f64 * ROLLOUT_DT).max(0.0);
                let (u, _) = ev.liveness_control_unchecked(&x, rem)?;
                x[1] += u[0] * ROLLOUT_DT;
                x[3] += u[1] * ROLLOUT_DT;
                x[0] += x[1] * ROLLOUT_DT;
                x[2] += x[3] * ROLLOUT_DT;
            }
            Ok(None)
        })
        .collect();
    match results {
        Ok(r) => {
            let misses = r.iter().filter(|t| t.is_none()).count();
            let slowest = r.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
            let secs = t0.elapsed().as_secs_f64();
            CheckOutcome::new(
                name,
                misses == 0 && secs < 120.0,
                format!(
                    "{states} states, {misses} missed the target within {horizon} s + {ROLLOUT_DT} s, slowest arrival {slowest:.2} s; {secs:.1} s (limit 120 s)"
                ),
            )
        }
        Err(e) => CheckOutcome::errored(name, e),
    }
}

/// Safety membership depends only on the relative state.
pub fn translation_invariance(ev: &ReachEvaluator, tau: f64, seed: u64, samples: usize) -> CheckOutcome {
    let name = "safety membership translation invariance";
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f4a_7c15);
    let mut mismatches = 0;
    for _ in 0..samples {
        let me = [rng.random_range(-50.0..50.0), rng.random_range(-3.0..3.0), rng.random_range(-50.0..50.0), rng.random_range(-3.0..3.0)];
        let other = [me[0] + rng.random_range(-8.0..8.0), rng.random_range(-3.0..3.0), me[2] + rng.random_range(-8.0..8.0), rng.random_range(-3.0..3.0)];
        let shift = [rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3)];
        let moved = |s: [f64; 4]| [s[0] + shift[0], s[1], s[2] + shift[1], s[3]];
        let a = ev.membership(&relative_state(&me, &other), tau);
        let b = ev.membership(&relative_state(&moved(me), &moved(other)), tau);
        match (a, b) {
            (Ok(a), Ok(b)) if a.inside == b.inside && (a.value - b.value).abs() < 1e-9 => {}
            (Ok(_), Ok(_)) => mismatches += 1,
            (Err(e), _) | (_, Err(e)) => return CheckOutcome::errored(name, e),
        }
    }
    CheckOutcome::new(name, mismatches == 0, format!("{samples} translated pairs, {mismatches} membership changes"))
}

// --------------------------------------------------------------- platoon

/// Criteria for the merge scenario: one platoon of all vehicles in the
/// final quarter, speeds and gaps within 10%, no collisions.
pub fn judge_form_platoon(config: &ScenarioConfig, m: &Metrics) -> CheckOutcome {
    let n = config.vehicles.len();
    let detail = match &m.formation {
        Some(f) => format!(
            "final-quarter platoon size {} of {n}, speed error {:.2}%, gap error {:.2}% (limits 10%), {} collisions, min separation {:.2} m",
            f.min_size,
            100.0 * f.speed_error,
            100.0 * f.gap_error,
            m.collisions,
            m.min_separation
        ),
        None => format!("no platoon in the final quarter, {} collisions", m.collisions),
    };
    let ok = m.collisions == 0
        && m.formation
            .as_ref()
            .is_some_and(|f| f.min_size == n && f.speed_error <= 0.10 && f.gap_error <= 0.10);
    CheckOutcome::new("scenario form_platoon", ok, detail)
}

/// Criteria for the malfunction scenario.
pub fn judge_malfunction(config: &ScenarioConfig, trace: &Trace, m: &Metrics) -> CheckOutcome {
    let (faulty, fault_t) = config
        .events
        .iter()
        .find_map(|e| match e {
            sim::Event::Fault { time, vehicle } => Some((*vehicle, *time)),
            _ => None,
        })
        .unwrap_or((0, 0.0));
    let original: Vec<VehicleId> = config.platoons.first().cloned().unwrap_or_default();
    let expected: Vec<VehicleId> = original.iter().copied().filter(|&v| v != faulty).collect();
    // first registry change after the fault: the faulty member is removed
    // and everyone behind it moves up one place
    let renumbered = trace
        .restructures
        .iter()
        .find(|(t, _)| *t >= fault_t - 1e-9)
        .map(|(_, p)| p.iter().any(|members| *members == expected))
        .unwrap_or(false);
    let exit = m.faulty_exits.iter().find(|e| e.0 == faulty).and_then(|e| e.2.map(|x| x - e.1));
    let exit_ok = exit.is_some_and(|dt| dt <= config.safety.t_internal + 1e-9);
    let ok = renumbered && m.collisions == 0 && m.altitude_changes == 0 && exit_ok && m.max_breaches <= 1;
    CheckOutcome::new(
        "scenario malfunction",
        ok,
        format!(
            "vehicle {faulty} faulty at t={fault_t}; platoon renumbered to {expected:?}: {renumbered}; left the band after {} (limit {} s); {} collisions, {} altitude changes, max simultaneous breaches {}",
            exit.map(|d| format!("{d:.2} s")).unwrap_or_else(|| "never".into()),
            config.safety.t_internal,
            m.collisions,
            m.altitude_changes,
            m.max_breaches
        ),
    )
}

/// Criteria for the intruder scenario.
pub fn judge_intruder(config: &ScenarioConfig, m: &Metrics) -> CheckOutcome {
    let start = config.events.iter().find_map(|e| match e {
        sim::Event::Intruder { state, .. } => Some([state[0], state[2]]),
        _ => None,
    });
    let leader = config.platoons.first().and_then(|p| p.first().copied());
    let leader_breaches = leader.and_then(|l| m.breaches.get(&l.to_string()).copied());
    let split_rejoin = !m.split_rejoins.is_empty();
    let ok = start == Some([40.0, 30.0])
        && leader_breaches == Some(0)
        && split_rejoin
        && m.collisions == 0
        && m.max_breaches <= 1;
    CheckOutcome::new(
        "scenario intruder",
        ok,
        format!(
            "intruder from {start:?}; leader breaches {}; split/rejoin {:?}; {} collisions; max simultaneous breaches {} (limit 1)",
            leader_breaches.map(|b| b.to_string()).unwrap_or_else(|| "n/a".into()),
            m.split_rejoins,
            m.collisions,
            m.max_breaches
        ),
    )
}

/// Runs a scenario and returns its trace and metrics.
pub fn run_scenario(config: &ScenarioConfig, evals: &Evaluators) -> Result<(Trace, Metrics), SimError> {
    let trace = sim::run(config, evals)?;
    let m = sim::metrics(&trace, config)?;
    Ok((trace, m))
}

/// Scenario criteria for the three built-in scenarios plus a determinism
/// check (second run, byte-identical CSV).
pub fn scenario_checks(evals: &Evaluators) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut determinism = Vec::new();
    let mut deterministic = true;
    for name in sim::BUILTIN_SCENARIOS {
        let config = sim::builtin_scenario(name).expect("built-in name");
        let (trace, m) = match run_scenario(&config, evals) {
            Ok(r) => r,
            Err(e) => {
                out.push(CheckOutcome::errored(format!("scenario {name}"), e));
                deterministic = false;
                continue;
            }
        };
        out.push(match name {
            "form_platoon" => judge_form_platoon(&config, &m),
            "malfunction" => judge_malfunction(&config, &trace, &m),
            _ => judge_intruder(&config, &m),
        });
        let same = sim::run(&config, evals).map(|t| t.to_csv_string() == trace.to_csv_string()).unwrap_or(false);
        deterministic &= same;
        determinism.push(format!("{name}: {}", if same { "identical" } else { "DIFFERS" }));
    }
    out.push(CheckOutcome::new("deterministic traces", deterministic, determinism.join(", ")));
    out
}
