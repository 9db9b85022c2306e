//! Explicit time marching of the terminal-value Hamilton-Jacobi equation.
//!
//! Horizons are nonnegative: `τ = -t`. The value at horizon `τ` satisfies
//!
//! ```text
//! ∂V/∂τ = H(x, ∇V)            (unfrozen, reach exactly at τ)
//! ∂V/∂τ = min{0, H(x, ∇V)}    (frozen, reach within τ)
//! V(0, x) = l(x)
//! ```
//!
//! discretized with monotone numerical Hamiltonians (upwind Godunov fluxes for
//! separable terms, Lax-Friedrichs otherwise) fed by one-sided differences:
//! first-order with forward Euler, or second-order ENO with Heun steps. Either
//! way the frozen update never raises a value.

pub mod cache;
mod coupled;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, HamiltonianSystem, Subsystem};
use crate::grid::{Grid, LevelSet, MAX_DIM};

pub use coupled::{CoupledSeries, CoupledValue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid solve options: {0}")]
    Options(&'static str),
    #[error("terminal level set is not on the solve grid")]
    TerminalGrid,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("all dissipation coefficients are zero; no stable step exists")]
    CflDegenerate,
    #[error("requested {steps} steps gives Δτ = {dt}, above the stable bound {limit}")]
    StepTooLarge { steps: usize, dt: f64, limit: f64 },
    #[error("non-finite value encountered at τ = {tau}")]
    NonFinite { tau: f64 },
    #[error("coupled reconstruction needs unfrozen series")]
    FrozenInput,
    #[error("axis series do not share a time lattice")]
    TimeLattice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Final horizon `T` (s).
    pub horizon: f64,
    pub cfl_factor: f64,
    /// Store every k-th step (the final step is always stored).
    pub store_stride: usize,
    pub freeze: bool,
    /// Exact step count; defaults to the fewest steps the CFL bound allows.
    pub steps: Option<usize>,
    pub scheme: Scheme,
}

/// Spatial/temporal accuracy of the march.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// First-order one-sided differences, forward Euler. Monotone.
    FirstOrder,
    /// Second-order ENO differences with two-stage TVD Runge-Kutta.
    #[default]
    Eno2,
}

impl SolveOptions {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            cfl_factor: 0.5,
            store_stride: 1,
            freeze: false,
            steps: None,
            scheme: Scheme::default(),
        }
    }

    pub fn frozen(mut self, freeze: bool) -> Self {
        self.freeze = freeze;
        self
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.store_stride = stride;
        self
    }

    pub fn scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn steps(mut self, steps: usize) -> Self {
        self.steps = Some(steps);
        self
    }

    fn validate(&self) -> Result<(), SolveError> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SolveError::Options("horizon must be positive"));
        }
        if !(self.cfl_factor > 0.0 && self.cfl_factor < 1.0) {
            return Err(SolveError::Options("cfl_factor must lie in (0, 1)"));
        }
        if self.store_stride == 0 {
            return Err(SolveError::Options("store_stride must be at least 1"));
        }
        if self.steps == Some(0) {
            return Err(SolveError::Options("step count must be positive"));
        }
        Ok(())
    }
}

/// Step count and Δτ for marching `sys` on `grid`.
pub fn plan_steps(sys: &dyn HamiltonianSystem, grid: &Grid, opts: &SolveOptions) -> Result<(usize, f64), SolveError> {
    opts.validate()?;
    let alphas = sys.alphas(grid)?;
    let rate: f64 = alphas.iter().zip(grid.spacings()).map(|(a, h)| a / h).sum();
    if rate <= 0.0 {
        return Err(SolveError::CflDegenerate);
    }
    let limit = opts.cfl_factor / rate;
    let steps = match opts.steps {
        Some(n) => {
            let dt = opts.horizon / n as f64;
            if dt > limit * (1.0 + 1e-12) {
                return Err(SolveError::StepTooLarge { steps: n, dt, limit });
            }
            n
        }
        None => (opts.horizon / limit).ceil().max(1.0) as usize,
    };
    Ok((steps, opts.horizon / steps as f64))
}

/// Time-stacked solution `V(τ, ·)` for stored horizons `τ₀ = 0 < τ₁ < … `.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSeries {
    grid: Arc<Grid>,
    times: Vec<f64>,
    slabs: Vec<LevelSet>,
    frozen: bool,
    subsystem: Option<Subsystem>,
}

impl ValueSeries {
    pub(crate) fn from_parts(
        grid: Arc<Grid>,
        times: Vec<f64>,
        slabs: Vec<LevelSet>,
        frozen: bool,
        subsystem: Option<Subsystem>,
    ) -> Self {
        Self {
            grid,
            times,
            slabs,
            frozen,
            subsystem,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn slabs(&self) -> &[LevelSet] {
        &self.slabs
    }

    pub fn slab(&self, k: usize) -> &LevelSet {
        &self.slabs[k]
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn subsystem(&self) -> Option<&Subsystem> {
        self.subsystem.as_ref()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("series has at least the terminal slab")
    }

    /// Number of stored slabs with time at most `tau`.
    pub fn slabs_within(&self, tau: f64) -> usize {
        self.times.partition_point(|&t| t <= tau + 1e-9)
    }

    /// Index of the stored slab closest to `tau`.
    pub fn nearest_slab(&self, tau: f64) -> usize {
        let i = self.times.partition_point(|&t| t < tau);
        if i == 0 {
            0
        } else if i >= self.times.len() {
            self.times.len() - 1
        } else if (self.times[i] - tau) < (tau - self.times[i - 1]) {
            i
        } else {
            i - 1
        }
    }
}

/// Solves for one axis subsystem and records its descriptor in the series.
pub fn solve(sub: &Subsystem, grid: &Arc<Grid>, terminal: &LevelSet, opts: &SolveOptions) -> Result<ValueSeries, SolveError> {
    if grid.dim() != sub.dim() {
        return Err(DynamicsError::GridDimension {
            expected: sub.dim(),
            got: grid.dim(),
        }
        .into());
    }
    let mut series = solve_system(sub, grid, terminal, opts)?;
    series.subsystem = Some(*sub);
    Ok(series)
}

/// Solves any [`HamiltonianSystem`], e.g. a stacked product of axes.
pub fn solve_system(
    sys: &dyn HamiltonianSystem,
    grid: &Arc<Grid>,
    terminal: &LevelSet,
    opts: &SolveOptions,
) -> Result<ValueSeries, SolveError> {
    if **terminal.grid() != **grid {
        return Err(SolveError::TerminalGrid);
    }
    let (steps, dt) = plan_steps(sys, grid, opts)?;
    let alphas = sys.alphas(grid)?;
    let mut times = vec![0.0];
    let mut slabs = vec![terminal.clone()];
    let mut current = terminal.values().to_vec();
    let mut next = vec![0.0; current.len()];
    let mut stage = Vec::new();
    for step in 1..=steps {
        advance(sys, grid, &alphas, opts.scheme, &current, &mut next, &mut stage, dt, opts.freeze);
        std::mem::swap(&mut current, &mut next);
        let tau = if step == steps { opts.horizon } else { step as f64 * dt };
        if current.par_iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite { tau });
        }
        if step % opts.store_stride == 0 || step == steps {
            times.push(tau);
            slabs.push(LevelSet::from_parts(Arc::clone(grid), current.clone()));
        }
    }
    Ok(ValueSeries {
        grid: Arc::clone(grid),
        times,
        slabs,
        frozen: opts.freeze,
        subsystem: None,
    })
}

const CHUNK: usize = 4096;

/// One time step: forward Euler for the first-order scheme, Heun's method
/// (two-stage TVD Runge-Kutta) for ENO2.
#[allow(clippy::too_many_arguments)]
fn advance(
    sys: &dyn HamiltonianSystem,
    grid: &Grid,
    alphas: &[f64],
    scheme: Scheme,
    current: &[f64],
    next: &mut [f64],
    stage: &mut Vec<f64>,
    dt: f64,
    freeze: bool,
) {
    rates(sys, grid, alphas, scheme, current, next, freeze);
    next.par_iter_mut().zip(current).for_each(|(r, v)| *r = v + dt * *r);
    if scheme == Scheme::FirstOrder {
        return;
    }
    stage.resize(current.len(), 0.0);
    rates(sys, grid, alphas, scheme, next, stage, freeze);
    // average of the start value and a second Euler step from the first stage
    next.par_iter_mut()
        .zip(stage.par_iter())
        .zip(current)
        .for_each(|((w, r), v)| *w = 0.5 * (v + *w + dt * r));
}

/// One-sided derivatives of `values` along a stencil direction with flat
/// stride `s`, where `below`/`above` count the nodes available on each side.
/// Grid faces use the single interior difference for both sides
/// (second-order one-sided under ENO2).
#[inline]
fn one_sided(values: &[f64], n: usize, s: usize, below: usize, above: usize, h: f64, scheme: Scheme) -> (f64, f64) {
    let v = values[n];
    let eno = scheme == Scheme::Eno2 && below + above >= 2;
    if below == 0 {
        let mut f = (values[n + s] - v) / h;
        if eno {
            f -= 0.5 * (values[n + 2 * s] - 2.0 * values[n + s] + v) / h;
        }
        return (f, f);
    }
    if above == 0 {
        let mut b = (v - values[n - s]) / h;
        if eno {
            b += 0.5 * (v - 2.0 * values[n - s] + values[n - 2 * s]) / h;
        }
        return (b, b);
    }
    let (dm, dp) = ((v - values[n - s]) / h, (values[n + s] - v) / h);
    if !eno {
        return (dm, dp);
    }
    // undivided second differences; ENO keeps the smaller one where both
    // stencils fit
    let centre = values[n + s] - 2.0 * v + values[n - s];
    let left = (below >= 2).then(|| v - 2.0 * values[n - s] + values[n - 2 * s]);
    let right = (above >= 2).then(|| values[n + 2 * s] - 2.0 * values[n + s] + v);
    let pick = |a: Option<f64>| match a {
        Some(a) if a.abs() < centre.abs() => a,
        _ => centre,
    };
    (dm + 0.5 * pick(left) / h, dp - 0.5 * pick(right) / h)
}

/// Coupled dimension pairs whose spacings agree, so the grid diagonal is a
/// valid stencil for `q_a + q_b`; other pairs get `None` at every node.
fn diagonal_pairs(sys: &dyn HamiltonianSystem, grid: &Grid) -> Vec<Option<(usize, usize)>> {
    let h = grid.spacings();
    sys.coupled_pairs()
        .into_iter()
        .map(|(a, b)| ((h[a] - h[b]).abs() <= 1e-9 * h[a]).then_some((a, b)))
        .collect()
}

/// Evaluates `∂V/∂τ` at every node into `out`.
fn rates(
    sys: &dyn HamiltonianSystem,
    grid: &Grid,
    alphas: &[f64],
    scheme: Scheme,
    current: &[f64],
    out: &mut [f64],
    freeze: bool,
) {
    let d = grid.dim();
    let pairs = diagonal_pairs(sys, grid);
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
        let mut diag = vec![None; pairs.len()];
        let mut idx = [0usize; MAX_DIM];
        let mut x = [0.0; MAX_DIM];
        let mut qm = [0.0; MAX_DIM];
        let mut qp = [0.0; MAX_DIM];
        let start = c * CHUNK;
        grid.unravel(start, &mut idx);
        for (off, slot) in out.iter_mut().enumerate() {
            let n = start + off;
            for k in 0..d {
                x[k] = grid.coord(k, idx[k]);
                (qm[k], qp[k]) = one_sided(
                    current,
                    n,
                    grid.strides()[k],
                    idx[k],
                    grid.counts()[k] - 1 - idx[k],
                    grid.spacings()[k],
                    scheme,
                );
            }
            for (slot, pair) in diag.iter_mut().zip(&pairs) {
                *slot = pair.and_then(|(a, b)| {
                    let below = idx[a].min(idx[b]);
                    let above = (grid.counts()[a] - 1 - idx[a]).min(grid.counts()[b] - 1 - idx[b]);
                    (below > 0 && above > 0).then(|| {
                        let s = grid.strides()[a] + grid.strides()[b];
                        let (m, p) = one_sided(current, n, s, below, above, grid.spacings()[a], scheme);
                        [m, p]
                    })
                });
            }
            let h_num = sys.numerical_hamiltonian(&x[..d], &qm[..d], &qp[..d], &diag, alphas);
            *slot = if freeze { h_num.min(0.0) } else { h_num };
            // advance the multi-index, last dimension fastest
            for k in (0..d).rev() {
                idx[k] += 1;
                if idx[k] < grid.counts()[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::signed_box;

    fn di_grid(n: usize) -> Arc<Grid> {
        Arc::new(Grid::new(&[-5.0, -3.0], &[5.0, 3.0], &[n, n]).unwrap())
    }

    fn di_target(g: &Arc<Grid>) -> LevelSet {
        signed_box(g, &[0.0, 0.0], &[0.5, 0.25]).unwrap()
    }

    #[test]
    fn terminal_slab_is_identical() {
        let g = di_grid(41);
        let l = di_target(&g);
        let sub = Subsystem::double_integrator(1.0).unwrap();
        for freeze in [false, true] {
            let s = solve(&sub, &g, &l, &SolveOptions::new(1.0).frozen(freeze)).unwrap();
            assert_eq!(s.times()[0], 0.0);
            assert_eq!(s.slab(0).values(), l.values());
            assert_eq!(s.horizon(), 1.0);
        }
    }

    #[test]
    fn frozen_slabs_never_increase_and_contain_target() {
        let g = di_grid(41);
        let l = di_target(&g);
        let sub = Subsystem::double_integrator(1.0).unwrap();
        let s = solve(&sub, &g, &l, &SolveOptions::new(2.0).frozen(true).stride(3)).unwrap();
        for w in s.slabs().windows(2) {
            for (a, b) in w[0].values().iter().zip(w[1].values()) {
                assert!(b <= a);
            }
        }
        let last = s.slabs().last().unwrap();
        for (lv, v) in l.values().iter().zip(last.values()) {
            if *lv <= 0.0 {
                assert!(*v <= 0.0);
            }
        }
    }

    #[test]
    fn double_integrator_example_membership() {
        // min-time from (3, 0) into the box is about 3 s
        let g = Arc::new(Grid::new(&[-5.0, -3.0], &[5.0, 3.0], &[81, 81]).unwrap());
        let l = di_target(&g);
        let sub = Subsystem::double_integrator(1.0).unwrap();
        let s = solve(&sub, &g, &l, &SolveOptions::new(5.0).frozen(true)).unwrap();
        let at = |tau: f64| s.slab(s.nearest_slab(tau)).interpolate(&[3.0, 0.0]);
        assert!(at(5.0) < 0.0, "{}", at(5.0));
        assert!(at(1.0) > 0.0, "{}", at(1.0));
    }

    #[test]
    fn symmetric_problem_gives_even_value() {
        let g = di_grid(41);
        let l = di_target(&g);
        let sub = Subsystem::double_integrator(1.0).unwrap();
        let s = solve(&sub, &g, &l, &SolveOptions::new(1.5)).unwrap();
        let last = s.slabs().last().unwrap().values();
        let n = g.len();
        for i in 0..n {
            assert!((last[i] - last[n - 1 - i]).abs() < 1e-9);
        }
    }

    #[test]
    fn step_planning() {
        let g = di_grid(41);
        let sub = Subsystem::double_integrator(1.0).unwrap();
        let (n, dt) = plan_steps(&sub, &g, &SolveOptions::new(1.0)).unwrap();
        // rate = 3/0.25 + 1/0.15
        let rate = 3.0 / 0.25 + 1.0 / 0.15;
        assert!(dt * rate <= 0.5 + 1e-12);
        assert_eq!(n, (1.0 / (0.5 / rate)).ceil() as usize);
        assert!(matches!(
            plan_steps(&sub, &g, &SolveOptions::new(1.0).steps(2)),
            Err(SolveError::StepTooLarge { .. })
        ));
        assert!(plan_steps(&sub, &g, &SolveOptions::new(-1.0)).is_err());
        let mut bad = SolveOptions::new(1.0);
        bad.cfl_factor = 1.0;
        assert!(plan_steps(&sub, &g, &bad).is_err());
    }

    #[test]
    fn degenerate_dissipation_is_rejected() {
        // zero velocity extent is impossible on a valid grid, but a pure
        // transport system with zero speed everywhere still has no stable step
        struct Still;
        impl HamiltonianSystem for Still {
            fn dim(&self) -> usize {
                1
            }
            fn hamiltonian_at(&self, _: &[f64], _: &[f64]) -> f64 {
                0.0
            }
            fn alphas(&self, _: &Grid) -> Result<Vec<f64>, DynamicsError> {
                Ok(vec![0.0])
            }
        }
        let g = Arc::new(Grid::new(&[0.0], &[1.0], &[5]).unwrap());
        let l = g.sample(|x| x[0]);
        assert_eq!(
            solve_system(&Still, &g, &l, &SolveOptions::new(1.0)).unwrap_err(),
            SolveError::CflDegenerate
        );
    }

    #[test]
    fn refinement_moves_boundary_less_than_coarse_spacing() {
        let sub = Subsystem::double_integrator(1.0).unwrap();
        // zero crossing of V(2, p, 0) along p > 0
        let crossing = |n: usize| {
            let g = Arc::new(Grid::new(&[-5.0, -3.0], &[5.0, 3.0], &[n, n]).unwrap());
            let s = solve(&sub, &g, &di_target(&g), &SolveOptions::new(2.0).frozen(true)).unwrap();
            let last = s.slabs().last().unwrap();
            let mut p = 0.0;
            while last.interpolate(&[p, 0.0]) <= 0.0 {
                p += 1e-3;
            }
            (p, g.spacings()[0])
        };
        let (coarse, h) = crossing(41);
        let (fine, _) = crossing(81);
        assert!((coarse - fine).abs() < h, "{coarse} vs {fine}");
    }
}
