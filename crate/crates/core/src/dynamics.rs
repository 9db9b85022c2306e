//! Closed-form Hamiltonians and bang-bang control laws for the per-axis
//! subsystems used by the solver.
//!
//! Every subsystem is one axis of the planar quadrotor model (double
//! integrator per axis). The `x` and `y` axes decouple exactly, so the
//! four-dimensional and six-dimensional sets are assembled from two of these.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, MAX_DIM};

/// Default deadband on costate coefficients before a bang-bang law switches.
pub const DEFAULT_GRAD_DEADBAND: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("{kind:?} expects {expected}-dimensional state and costate, got {state} and {costate}")]
    Dimension {
        kind: SubsystemKind,
        expected: usize,
        state: usize,
        costate: usize,
    },
    #[error("invalid control limits: {0}")]
    Limits(&'static str),
    #[error("{kind:?} does not support role {role:?}")]
    Role { kind: SubsystemKind, role: Role },
    #[error("grid has dimension {got}, subsystem needs {expected}")]
    GridDimension { expected: usize, got: usize },
}

/// Per-axis acceleration bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLimits {
    /// Acceleration bound of the vehicle being controlled (m/s²).
    pub u_max_self: f64,
    /// Acceleration bound of the other agent (m/s²).
    pub u_max_other: f64,
    /// Per-axis speed cap of the controlled vehicle (m/s).
    pub v_max: Option<f64>,
}

impl ControlLimits {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.u_max_self > 0.0) {
            return Err(DynamicsError::Limits("u_max_self must be positive"));
        }
        if !(self.u_max_other >= 0.0) {
            return Err(DynamicsError::Limits("u_max_other must be non-negative"));
        }
        if let Some(v) = self.v_max {
            if !(v > 0.0) {
                return Err(DynamicsError::Limits("v_max must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubsystemKind {
    /// State `(p, v)`: `ṗ = v, v̇ = u`.
    DoubleIntegrator2,
    /// State `(p_r, v_r)`: `ṗ_r = v_r, v̇_r = u_self − u_other`.
    RelativeDoubleIntegrator2,
    /// State `(p_r, v_r, v_self)`: relative axis plus the controlled
    /// vehicle's own velocity, which carries the speed cap.
    AugmentedRelative3,
}

impl SubsystemKind {
    pub fn dim(self) -> usize {
        match self {
            SubsystemKind::DoubleIntegrator2 | SubsystemKind::RelativeDoubleIntegrator2 => 2,
            SubsystemKind::AugmentedRelative3 => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// One minimizing player drives the state into the target.
    Reach,
    /// The controlled vehicle maximizes to stay out of the target while the
    /// other agent minimizes to force it in.
    Game,
}

/// Controls chosen by a bang-bang law on one axis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxisControls {
    pub own: f64,
    pub other: f64,
}

/// One axis of the vehicle model with its control bounds and game role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subsystem {
    pub kind: SubsystemKind,
    pub limits: ControlLimits,
    pub role: Role,
}

impl Subsystem {
    pub fn new(kind: SubsystemKind, limits: ControlLimits, role: Role) -> Result<Self, DynamicsError> {
        limits.validate()?;
        match (kind, role) {
            (SubsystemKind::DoubleIntegrator2, Role::Game)
            | (SubsystemKind::AugmentedRelative3, Role::Reach) => {
                return Err(DynamicsError::Role { kind, role })
            }
            (SubsystemKind::RelativeDoubleIntegrator2, Role::Reach) if limits.u_max_other != 0.0 => {
                return Err(DynamicsError::Limits(
                    "relative reach assumes the other agent does not accelerate",
                ))
            }
            _ => {}
        }
        Ok(Self { kind, limits, role })
    }

    pub fn double_integrator(u_max: f64) -> Result<Self, DynamicsError> {
        Self::new(
            SubsystemKind::DoubleIntegrator2,
            ControlLimits {
                u_max_self: u_max,
                u_max_other: 0.0,
                v_max: None,
            },
            Role::Reach,
        )
    }

    pub fn relative_reach(u_max: f64) -> Result<Self, DynamicsError> {
        Self::new(
            SubsystemKind::RelativeDoubleIntegrator2,
            ControlLimits {
                u_max_self: u_max,
                u_max_other: 0.0,
                v_max: None,
            },
            Role::Reach,
        )
    }

    pub fn relative_game(u_max_self: f64, u_max_other: f64) -> Result<Self, DynamicsError> {
        Self::new(
            SubsystemKind::RelativeDoubleIntegrator2,
            ControlLimits {
                u_max_self,
                u_max_other,
                v_max: None,
            },
            Role::Game,
        )
    }

    pub fn augmented_game(u_max_self: f64, u_max_other: f64, v_max: f64) -> Result<Self, DynamicsError> {
        Self::new(
            SubsystemKind::AugmentedRelative3,
            ControlLimits {
                u_max_self,
                u_max_other,
                v_max: Some(v_max),
            },
            Role::Game,
        )
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    fn check(&self, state: &[f64], costate: &[f64]) -> Result<(), DynamicsError> {
        let d = self.dim();
        if state.len() != d || costate.len() != d {
            return Err(DynamicsError::Dimension {
                kind: self.kind,
                expected: d,
                state: state.len(),
                costate: costate.len(),
            });
        }
        Ok(())
    }

    /// Admissible interval for the controlled vehicle's acceleration given its
    /// own velocity. At or beyond the cap only decelerating inputs remain.
    #[inline]
    pub fn admissible(&self, v_self: f64) -> (f64, f64) {
        let u = self.limits.u_max_self;
        match self.limits.v_max {
            Some(cap) if v_self >= cap => (-u, 0.0),
            Some(cap) if v_self <= -cap => (0.0, u),
            _ => (-u, u),
        }
    }

    /// `min_u q·f` for reach, `max_self min_other q·f` for games.
    pub fn hamiltonian(&self, state: &[f64], costate: &[f64]) -> Result<f64, DynamicsError> {
        self.check(state, costate)?;
        Ok(self.hamiltonian_unchecked(state, costate))
    }

    #[inline]
    pub fn hamiltonian_unchecked(&self, x: &[f64], q: &[f64]) -> f64 {
        let l = &self.limits;
        match (self.kind, self.role) {
            (SubsystemKind::DoubleIntegrator2 | SubsystemKind::RelativeDoubleIntegrator2, Role::Reach) => {
                q[0] * x[1] - l.u_max_self * q[1].abs()
            }
            (SubsystemKind::RelativeDoubleIntegrator2, Role::Game) => {
                q[0] * x[1] + (l.u_max_self - l.u_max_other) * q[1].abs()
            }
            (SubsystemKind::AugmentedRelative3, _) => {
                let c = q[1] + q[2];
                let (lo, hi) = self.admissible(x[2]);
                q[0] * x[1] + (c * lo).max(c * hi) - l.u_max_other * q[1].abs()
            }
            (SubsystemKind::DoubleIntegrator2, Role::Game) => unreachable!("rejected in Subsystem::new"),
        }
    }

    /// Bang-bang optimizers of the Hamiltonian. Coefficients with magnitude at
    /// or below `deadband` yield a zero input.
    pub fn optimal_control(&self, state: &[f64], costate: &[f64], deadband: f64) -> Result<AxisControls, DynamicsError> {
        self.check(state, costate)?;
        Ok(self.optimal_control_unchecked(state, costate, deadband))
    }

    pub fn optimal_control_unchecked(&self, x: &[f64], q: &[f64], deadband: f64) -> AxisControls {
        let l = &self.limits;
        let sign = |c: f64| if c.abs() <= deadband { 0.0 } else { c.signum() };
        match self.role {
            Role::Reach => AxisControls {
                own: -l.u_max_self * sign(q[1]),
                other: 0.0,
            },
            Role::Game => {
                let (c, (lo, hi)) = match self.kind {
                    SubsystemKind::AugmentedRelative3 => (q[1] + q[2], self.admissible(x[2])),
                    _ => (q[1], (-l.u_max_self, l.u_max_self)),
                };
                let own = match sign(c) {
                    s if s > 0.0 => hi,
                    s if s < 0.0 => lo,
                    _ => 0.0,
                };
                AxisControls {
                    own,
                    other: l.u_max_other * sign(q[1]),
                }
            }
        }
    }

    /// State derivative for given inputs.
    pub fn flow(&self, x: &[f64], own: f64, other: f64, out: &mut [f64]) {
        match self.kind {
            SubsystemKind::DoubleIntegrator2 => {
                out[0] = x[1];
                out[1] = own;
            }
            SubsystemKind::RelativeDoubleIntegrator2 => {
                out[0] = x[1];
                out[1] = own - other;
            }
            SubsystemKind::AugmentedRelative3 => {
                out[0] = x[1];
                out[1] = own - other;
                out[2] = own;
            }
        }
    }

    /// Global Lax-Friedrichs coefficients: bounds of `|∂H/∂q_k|` over the grid.
    pub fn dissipation_bounds(&self, grid: &Grid) -> Result<Vec<f64>, DynamicsError> {
        let d = self.dim();
        if grid.dim() != d {
            return Err(DynamicsError::GridDimension {
                expected: d,
                got: grid.dim(),
            });
        }
        let speed = grid.mins()[1].abs().max(grid.maxs()[1].abs());
        let l = &self.limits;
        Ok(match self.kind {
            SubsystemKind::DoubleIntegrator2 => vec![speed, l.u_max_self],
            SubsystemKind::RelativeDoubleIntegrator2 => vec![speed, l.u_max_self + l.u_max_other],
            SubsystemKind::AugmentedRelative3 => {
                vec![speed, l.u_max_self + l.u_max_other, l.u_max_self]
            }
        })
    }
}

/// Anything the marching solver can integrate: a state dimension, a
/// Hamiltonian and dissipation coefficients.
pub trait HamiltonianSystem: Sync {
    fn dim(&self) -> usize;
    fn hamiltonian_at(&self, state: &[f64], costate: &[f64]) -> f64;
    fn alphas(&self, grid: &Grid) -> Result<Vec<f64>, DynamicsError>;

    /// Dimension pairs `(a, b)` whose costate sum `q_a + q_b` drives a term
    /// of the Hamiltonian. The solver supplies one-sided differences along
    /// the grid diagonal `e_a + e_b` for each pair when both spacings agree.
    fn coupled_pairs(&self) -> Vec<(usize, usize)> {
        Vec::new()
    }

    /// Monotone numerical Hamiltonian from one-sided costates `qm` (backward)
    /// and `qp` (forward), plus `[backward, forward]` diagonal sums for each
    /// coupled pair where available. Defaults to Lax-Friedrichs with the
    /// global bounds.
    fn numerical_hamiltonian(
        &self,
        state: &[f64],
        qm: &[f64],
        qp: &[f64],
        _diag: &[Option<[f64; 2]>],
        alphas: &[f64],
    ) -> f64 {
        lax_friedrichs(self, state, qm, qp, alphas)
    }
}

/// Lax-Friedrichs: `H(x, q̄) + Σ α_k (q⁺_k − q⁻_k) / 2` with `q̄` the average.
pub fn lax_friedrichs<S: HamiltonianSystem + ?Sized>(
    sys: &S,
    state: &[f64],
    qm: &[f64],
    qp: &[f64],
    alphas: &[f64],
) -> f64 {
    let mut q = [0.0; MAX_DIM];
    let mut diss = 0.0;
    for k in 0..qm.len() {
        q[k] = 0.5 * (qm[k] + qp[k]);
        diss += 0.5 * alphas[k] * (qp[k] - qm[k]);
    }
    sys.hamiltonian_at(state, &q[..qm.len()]) + diss
}

/// Godunov flux of the scalar term `h(q) = c·q + s·|q|` for `V_τ = h(V_x)`:
/// the max of `h` over `[q⁻, q⁺]` when ordered, else the min over `[q⁺, q⁻]`.
/// Extrema sit at the endpoints or at the kink `q = 0`.
#[inline]
pub fn godunov_term(c: f64, s: f64, qm: f64, qp: f64) -> f64 {
    let h = |q: f64| c * q + s * q.abs();
    let (lo, hi) = if qm <= qp { (qm, qp) } else { (qp, qm) };
    let (a, b) = (h(lo), h(hi));
    let straddles = lo < 0.0 && hi > 0.0;
    if qm <= qp {
        let m = a.max(b);
        if straddles { m.max(0.0) } else { m }
    } else {
        let m = a.min(b);
        if straddles { m.min(0.0) } else { m }
    }
}

impl HamiltonianSystem for Subsystem {
    fn dim(&self) -> usize {
        self.kind.dim()
    }

    fn hamiltonian_at(&self, state: &[f64], costate: &[f64]) -> f64 {
        self.hamiltonian_unchecked(state, costate)
    }

    fn alphas(&self, grid: &Grid) -> Result<Vec<f64>, DynamicsError> {
        self.dissipation_bounds(grid)
    }

    fn coupled_pairs(&self) -> Vec<(usize, usize)> {
        match self.kind {
            SubsystemKind::AugmentedRelative3 => vec![(1, 2)],
            _ => Vec::new(),
        }
    }

    fn numerical_hamiltonian(
        &self,
        x: &[f64],
        qm: &[f64],
        qp: &[f64],
        diag: &[Option<[f64; 2]>],
        _alphas: &[f64],
    ) -> f64 {
        let l = &self.limits;
        let transport = godunov_term(x[1], 0.0, qm[0], qp[0]);
        match (self.kind, self.role) {
            (SubsystemKind::DoubleIntegrator2 | SubsystemKind::RelativeDoubleIntegrator2, Role::Reach) => {
                transport + godunov_term(0.0, -l.u_max_self, qm[1], qp[1])
            }
            (SubsystemKind::RelativeDoubleIntegrator2, Role::Game) => {
                transport + godunov_term(0.0, l.u_max_self - l.u_max_other, qm[1], qp[1])
            }
            // the self input moves (v_r, v_self) along their diagonal, so its
            // term is a scalar transport in q2 + q3; off the diagonal stencil
            // it falls back to LF with its own Lipschitz bound
            (SubsystemKind::AugmentedRelative3, _) => {
                let (lo, hi) = self.admissible(x[2]);
                let other = godunov_term(0.0, -l.u_max_other, qm[1], qp[1]);
                let own = match diag.first().copied().flatten() {
                    Some([dm, dp]) => godunov_term(0.5 * (hi + lo), 0.5 * (hi - lo), dm, dp),
                    None => {
                        let c = 0.5 * (qm[1] + qp[1] + qm[2] + qp[2]);
                        let a = lo.abs().max(hi.abs());
                        (c * lo).max(c * hi) + 0.5 * a * (qp[1] - qm[1] + qp[2] - qm[2])
                    }
                };
                transport + other + own
            }
            (SubsystemKind::DoubleIntegrator2, Role::Game) => unreachable!("rejected in Subsystem::new"),
        }
    }
}

/// Two decoupled subsystems stacked into one state vector. Used to solve the
/// full product system directly when cross-checking reconstructions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisProduct {
    pub first: Subsystem,
    pub second: Subsystem,
}

impl HamiltonianSystem for AxisProduct {
    fn dim(&self) -> usize {
        self.first.dim() + self.second.dim()
    }

    fn hamiltonian_at(&self, x: &[f64], q: &[f64]) -> f64 {
        let d = self.first.dim();
        self.first.hamiltonian_unchecked(&x[..d], &q[..d]) + self.second.hamiltonian_unchecked(&x[d..], &q[d..])
    }

    fn alphas(&self, grid: &Grid) -> Result<Vec<f64>, DynamicsError> {
        let d1 = self.first.dim();
        let d2 = self.second.dim();
        if grid.dim() != d1 + d2 {
            return Err(DynamicsError::GridDimension {
                expected: d1 + d2,
                got: grid.dim(),
            });
        }
        let g1 = Grid::new(&grid.mins()[..d1], &grid.maxs()[..d1], &grid.counts()[..d1])
            .expect("sub-grid of a valid grid");
        let g2 = Grid::new(&grid.mins()[d1..], &grid.maxs()[d1..], &grid.counts()[d1..])
            .expect("sub-grid of a valid grid");
        let mut a = self.first.dissipation_bounds(&g1)?;
        a.extend(self.second.dissipation_bounds(&g2)?);
        Ok(a)
    }

    fn coupled_pairs(&self) -> Vec<(usize, usize)> {
        let d = self.first.dim();
        let mut pairs = self.first.coupled_pairs();
        pairs.extend(self.second.coupled_pairs().into_iter().map(|(a, b)| (a + d, b + d)));
        pairs
    }

    fn numerical_hamiltonian(
        &self,
        x: &[f64],
        qm: &[f64],
        qp: &[f64],
        diag: &[Option<[f64; 2]>],
        alphas: &[f64],
    ) -> f64 {
        let d = self.first.dim();
        let n1 = usize::from(self.first.kind == SubsystemKind::AugmentedRelative3);
        self.first.numerical_hamiltonian(&x[..d], &qm[..d], &qp[..d], &diag[..n1], &alphas[..d])
            + self.second.numerical_hamiltonian(&x[d..], &qm[d..], &qp[d..], &diag[n1..], &alphas[d..])
    }
}
