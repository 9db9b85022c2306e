use std::sync::Arc;

use super::{SolveError, ValueSeries};

/// Coupled reachable set recovered from two decoupled axis solutions.
///
/// `V(τ, x) = min_{s ≤ τ} max(V_x(s, x_x), V_y(s, x_y))` over the shared
/// stored lattice: both axis targets must hold at the same elapsed time `s`.
#[derive(Debug, Clone)]
pub struct CoupledSeries {
    x: Arc<ValueSeries>,
    y: Arc<ValueSeries>,
}

/// Reconstructed value together with the stored slab that attains it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledValue {
    pub value: f64,
    /// Index of the minimizing stored time (earliest on ties).
    pub slab: usize,
    pub time: f64,
}

impl CoupledSeries {
    pub fn new(x: Arc<ValueSeries>, y: Arc<ValueSeries>) -> Result<Self, SolveError> {
        if x.frozen() || y.frozen() {
            return Err(SolveError::FrozenInput);
        }
        let (tx, ty) = (x.times(), y.times());
        let tol = 1e-9 * x.horizon().max(1.0);
        if tx.len() != ty.len() || tx.iter().zip(ty).any(|(a, b)| (a - b).abs() > tol) {
            return Err(SolveError::TimeLattice);
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &Arc<ValueSeries> {
        &self.x
    }

    pub fn y(&self) -> &Arc<ValueSeries> {
        &self.y
    }

    pub fn times(&self) -> &[f64] {
        self.x.times()
    }

    pub fn horizon(&self) -> f64 {
        self.x.horizon()
    }

    /// Evaluates the reconstruction at horizon `tau` (clamped to the stored
    /// range) for the two axis sub-states.
    pub fn value(&self, state_x: &[f64], state_y: &[f64], tau: f64) -> CoupledValue {
        let count = self.x.slabs_within(tau).max(1);
        let mut best = CoupledValue {
            value: f64::INFINITY,
            slab: 0,
            time: 0.0,
        };
        for k in 0..count {
            let vx = self.x.slab(k).interpolate(state_x);
            let vy = self.y.slab(k).interpolate(state_y);
            let v = vx.max(vy);
            if v < best.value {
                best = CoupledValue {
                    value: v,
                    slab: k,
                    time: self.x.times()[k],
                };
            }
        }
        best
    }

    /// Earliest stored slab within `tau` whose combined value is ≤ 0: the
    /// (slab-resolution) time to reach the target.
    pub fn first_inside(&self, state_x: &[f64], state_y: &[f64], tau: f64) -> Option<CoupledValue> {
        let count = self.x.slabs_within(tau).max(1);
        (0..count).find_map(|k| {
            let v = self.x.slab(k).interpolate(state_x).max(self.y.slab(k).interpolate(state_y));
            (v <= 0.0).then(|| CoupledValue {
                value: v,
                slab: k,
                time: self.x.times()[k],
            })
        })
    }

    /// Axis values at one stored slab.
    pub fn axis_values(&self, state_x: &[f64], state_y: &[f64], slab: usize) -> (f64, f64) {
        (
            self.x.slab(slab).interpolate(state_x),
            self.y.slab(slab).interpolate(state_y),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Subsystem;
    use crate::grid::{signed_box, Grid};
    use crate::hjsolver::{solve, SolveOptions};

    fn axis(freeze: bool, horizon: f64) -> Arc<ValueSeries> {
        let g = Arc::new(Grid::new(&[-6.0, -3.0], &[6.0, 3.0], &[61, 31]).unwrap());
        let l = signed_box(&g, &[0.0, 0.0], &[0.5, 0.5]).unwrap();
        let sub = Subsystem::double_integrator(1.0).unwrap();
        let opts = SolveOptions::new(horizon).frozen(freeze).steps(200).stride(10);
        Arc::new(solve(&sub, &g, &l, &opts).unwrap())
    }

    #[test]
    fn rejects_frozen_and_mismatched_inputs() {
        let a = axis(false, 2.0);
        assert_eq!(
            CoupledSeries::new(axis(true, 2.0), a.clone()).unwrap_err(),
            SolveError::FrozenInput
        );
        assert_eq!(
            CoupledSeries::new(a.clone(), axis(false, 3.0)).unwrap_err(),
            SolveError::TimeLattice
        );
    }

    #[test]
    fn inside_both_targets_is_member_at_every_horizon() {
        let c = CoupledSeries::new(axis(false, 2.0), axis(false, 2.0)).unwrap();
        for &tau in c.times() {
            let v = c.value(&[0.1, 0.0], &[-0.2, 0.1], tau);
            assert!(v.value <= 0.0);
        }
    }

    #[test]
    fn value_is_min_over_time_of_axis_max_and_monotone() {
        let c = CoupledSeries::new(axis(false, 2.0), axis(false, 2.0)).unwrap();
        let (sx, sy) = ([2.0, -0.5], [-1.0, 1.0]);
        let mut prev = f64::INFINITY;
        for (k, &tau) in c.times().iter().enumerate() {
            let v = c.value(&sx, &sy, tau);
            let brute = (0..=k)
                .map(|j| {
                    let (a, b) = c.axis_values(&sx, &sy, j);
                    a.max(b)
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(v.value, brute);
            assert!(v.value <= prev);
            prev = v.value;
        }
    }
}
