//! The reachable-set products used online: highway merging (absolute
//! liveness), platoon joining (relative liveness) and pairwise safety.
//!
//! Each evaluator pairs two unfrozen per-axis solves and answers queries
//! through the time-matched reconstruction of [`CoupledSeries`].
//!
//! State layouts:
//! - liveness: `(p_x, v_x, p_y, v_y)`, absolute or relative to the vehicle
//!   being followed;
//! - safety: `(p_x,r, v_x,r, p_y,r, v_y,r, v_x,i, v_y,i)` where the relative
//!   state is the evader `i` minus the other vehicle `j`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{DynamicsError, Role, Subsystem, SubsystemKind, DEFAULT_GRAD_DEADBAND};
use crate::grid::{signed_box, Grid, GridError, MAX_DIM};
use crate::hjsolver::cache::{self, CacheError};
use crate::hjsolver::{plan_steps, solve, CoupledSeries, Scheme, SolveError, SolveOptions, ValueSeries};

/// Value band above zero inside which a locked-in vehicle keeps its
/// liveness controller.
pub const LOCK_IN_BAND: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ReachError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("horizon {requested} outside the built range [0, {built}]")]
    HorizonExceeded { requested: f64, built: f64 },
    #[error("expected a {expected}-component state, got {got}")]
    StateDim { expected: usize, got: usize },
    #[error("state is outside the reachable set (value {value:.4})")]
    OutsideSet { value: f64 },
    #[error("{op} is not defined for {kind:?} evaluators")]
    WrongKind { op: &'static str, kind: EvaluatorKind },
    #[error("axis series are inconsistent: {0}")]
    Mismatch(String),
}

/// Box target `|x_k − center_k| ≤ radii_k` over `(p_x, v_x, p_y, v_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub center: [f64; 4],
    pub radii: [f64; 4],
}

impl TargetSpec {
    pub fn validate(&self) -> Result<(), ReachError> {
        if self.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) || self.center.iter().any(|c| !c.is_finite()) {
            return Err(ReachError::Params("target radii must be positive and finite".into()));
        }
        Ok(())
    }

    /// `(center, radii)` of axis 0 (x) or 1 (y).
    pub fn axis(&self, axis: usize) -> ([f64; 2], [f64; 2]) {
        let o = 2 * axis;
        ([self.center[o], self.center[o + 1]], [self.radii[o], self.radii[o + 1]])
    }

    pub fn contains(&self, state: &[f64; 4]) -> bool {
        self.value(state) <= 0.0
    }

    pub fn value(&self, state: &[f64; 4]) -> f64 {
        crate::grid::box_value(state, &self.center, &self.radii)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyParams {
    /// Collision half-width per axis (m).
    pub d: f64,
    /// Per-axis speed cap (m/s).
    pub v_max: f64,
    /// Time a faulty vehicle needs to leave the highway band (s).
    pub t_internal: f64,
    /// Horizon for checks against vehicles outside one's platoon (s).
    pub t_external: f64,
}

impl Default for SafetyParams {
    fn default() -> Self {
        Self {
            d: 2.0,
            v_max: 5.0,
            t_internal: 1.5,
            t_external: 3.0,
        }
    }
}

impl SafetyParams {
    pub fn validate(&self) -> Result<(), ReachError> {
        if !(self.d > 0.0 && self.v_max > 0.0 && self.t_internal > 0.0) {
            return Err(ReachError::Params("d, v_max and t_internal must be positive".into()));
        }
        if !(self.t_external > self.t_internal) {
            return Err(ReachError::Params("t_external must exceed t_internal".into()));
        }
        Ok(())
    }
}

/// Serializable grid description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GridSpec {
    pub fn new(mins: &[f64], maxs: &[f64], counts: &[usize]) -> Self {
        Self {
            mins: mins.to_vec(),
            maxs: maxs.to_vec(),
            counts: counts.to_vec(),
        }
    }

    /// Grid spanning `center ± half` with the given node counts.
    pub fn centered(center: &[f64], half: &[f64], counts: &[usize]) -> Self {
        Self {
            mins: center.iter().zip(half).map(|(c, h)| c - h).collect(),
            maxs: center.iter().zip(half).map(|(c, h)| c + h).collect(),
            counts: counts.to_vec(),
        }
    }

    pub fn build(&self) -> Result<Arc<Grid>, GridError> {
        Ok(Arc::new(Grid::new(&self.mins, &self.maxs, &self.counts)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisGrids {
    pub x: GridSpec,
    pub y: GridSpec,
}

/// Horizon and storage options shared by every evaluator build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub horizon: f64,
    /// Upper bound on stored slabs per axis; sets the store stride.
    pub max_slabs: usize,
    #[serde(default)]
    pub scheme: Scheme,
}

impl BuildOptions {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            max_slabs: 200,
            scheme: Scheme::default(),
        }
    }

    pub fn max_slabs(mut self, n: usize) -> Self {
        self.max_slabs = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluatorKind {
    LivenessAbsolute,
    LivenessRelative,
    SafetyGame,
}

impl EvaluatorKind {
    pub fn state_dim(self) -> usize {
        match self {
            Self::LivenessAbsolute | Self::LivenessRelative => 4,
            Self::SafetyGame => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LivenessAbsolute => "highway",
            Self::LivenessRelative => "join",
            Self::SafetyGame => "safety",
        }
    }

    fn of(sub: &Subsystem) -> Option<Self> {
        match (sub.kind, sub.role) {
            (SubsystemKind::DoubleIntegrator2, Role::Reach) => Some(Self::LivenessAbsolute),
            (SubsystemKind::RelativeDoubleIntegrator2, Role::Reach) => Some(Self::LivenessRelative),
            (SubsystemKind::AugmentedRelative3, Role::Game) => Some(Self::SafetyGame),
            _ => None,
        }
    }
}

/// Everything an evaluator build depends on; its hash keys the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvaluatorSpec {
    Highway {
        target: TargetSpec,
        u_max: f64,
        grids: AxisGrids,
        options: BuildOptions,
    },
    Join {
        target: TargetSpec,
        u_max: f64,
        grids: AxisGrids,
        options: BuildOptions,
    },
    Safety {
        params: SafetyParams,
        /// Numerical buffer added to `d` in the solved target (m).
        margin: f64,
        u_max_self: f64,
        u_max_other: f64,
        grids: AxisGrids,
        options: BuildOptions,
    },
}

impl EvaluatorSpec {
    pub fn kind(&self) -> EvaluatorKind {
        match self {
            Self::Highway { .. } => EvaluatorKind::LivenessAbsolute,
            Self::Join { .. } => EvaluatorKind::LivenessRelative,
            Self::Safety { .. } => EvaluatorKind::SafetyGame,
        }
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(self).expect("evaluator specs always serialize");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn options(&self) -> &BuildOptions {
        match self {
            Self::Highway { options, .. } | Self::Join { options, .. } | Self::Safety { options, .. } => options,
        }
    }

    /// Terminal function of one axis, sampled on that axis' grid.
    pub fn terminal(&self, axis: usize) -> Result<crate::grid::LevelSet, ReachError> {
        if axis > 1 {
            return Err(ReachError::Params(format!("axis {axis} out of range")));
        }
        match self {
            Self::Highway { target, grids, .. } | Self::Join { target, grids, .. } => {
                let g = if axis == 0 { &grids.x } else { &grids.y }.build()?;
                let (c, r) = target.axis(axis);
                Ok(signed_box(&g, &c, &r)?)
            }
            Self::Safety {
                params, margin, grids, ..
            } => {
                let g = if axis == 0 { &grids.x } else { &grids.y }.build()?;
                let d = params.d + margin;
                Ok(g.sample(|x| x[0].abs() - d))
            }
        }
    }

    pub fn build(&self) -> Result<ReachEvaluator, ReachError> {
        match self {
            Self::Highway {
                target,
                u_max,
                grids,
                options,
            } => build_highway_brs(target, *u_max, grids, options),
            Self::Join {
                target,
                u_max,
                grids,
                options,
            } => build_join_brs(target, *u_max, grids, options),
            Self::Safety {
                params,
                margin,
                u_max_self,
                u_max_other,
                grids,
                options,
            } => build_safety_brs(params, *margin, *u_max_self, *u_max_other, grids, options),
        }
    }
}

/// Result of a membership query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub value: f64,
    pub inside: bool,
    /// Stored slab at which the reconstruction attains its minimum.
    pub slab: usize,
    /// Elapsed time of that slab.
    pub time: f64,
}

/// A queryable reachable set assembled from two axis solves.
#[derive(Debug, Clone)]
pub struct ReachEvaluator {
    kind: EvaluatorKind,
    coupled: CoupledSeries,
    subsystems: [Subsystem; 2],
    deadband: f64,
}

impl ReachEvaluator {
    /// Wraps two axis series; the kind follows from their subsystem records.
    pub fn from_series(x: Arc<ValueSeries>, y: Arc<ValueSeries>) -> Result<Self, ReachError> {
        let (sx, sy) = match (x.subsystem(), y.subsystem()) {
            (Some(a), Some(b)) => (*a, *b),
            _ => return Err(ReachError::Mismatch("axis series carry no subsystem record".into())),
        };
        if sx != sy {
            return Err(ReachError::Mismatch("axes were solved for different subsystems".into()));
        }
        let kind = EvaluatorKind::of(&sx)
            .ok_or_else(|| ReachError::Mismatch(format!("no evaluator uses {:?}/{:?}", sx.kind, sx.role)))?;
        Ok(Self {
            kind,
            coupled: CoupledSeries::new(x, y)?,
            subsystems: [sx, sy],
            deadband: DEFAULT_GRAD_DEADBAND,
        })
    }

    pub fn with_deadband(mut self, deadband: f64) -> Self {
        self.deadband = deadband;
        self
    }

    pub fn kind(&self) -> EvaluatorKind {
        self.kind
    }

    pub fn subsystem(&self) -> &Subsystem {
        &self.subsystems[0]
    }

    pub fn coupled(&self) -> &CoupledSeries {
        &self.coupled
    }

    pub fn horizon(&self) -> f64 {
        self.coupled.horizon()
    }

    pub fn times(&self) -> &[f64] {
        self.coupled.times()
    }

    /// Splits a full state into the two axis states.
    fn split(&self, state: &[f64]) -> Result<([f64; 3], [f64; 3], usize), ReachError> {
        let expected = self.kind.state_dim();
        if state.len() != expected {
            return Err(ReachError::StateDim {
                expected,
                got: state.len(),
            });
        }
        Ok(match self.kind {
            EvaluatorKind::SafetyGame => (
                [state[0], state[1], state[4]],
                [state[2], state[3], state[5]],
                3,
            ),
            _ => ([state[0], state[1], 0.0], [state[2], state[3], 0.0], 2),
        })
    }

    fn check_tau(&self, tau: f64) -> Result<(), ReachError> {
        let built = self.horizon();
        if !(tau >= 0.0 && tau <= built + 1e-9) {
            return Err(ReachError::HorizonExceeded { requested: tau, built });
        }
        Ok(())
    }

    pub fn membership(&self, state: &[f64], tau: f64) -> Result<Membership, ReachError> {
        self.check_tau(tau)?;
        let (ax, ay, d) = self.split(state)?;
        let v = self.coupled.value(&ax[..d], &ay[..d], tau);
        Ok(Membership {
            value: v.value,
            inside: v.value <= 0.0,
            slab: v.slab,
            time: v.time,
        })
    }

    /// Axis controls from the slab gradients at the critical time.
    fn axis_controls(&self, state: &[f64], tau: f64) -> Result<([crate::dynamics::AxisControls; 2], Membership), ReachError> {
        let m = self.membership(state, tau)?;
        Ok((self.controls_at(state, m.slab)?, m))
    }

    fn controls_at(&self, state: &[f64], slab: usize) -> Result<[crate::dynamics::AxisControls; 2], ReachError> {
        let (ax, ay, d) = self.split(state)?;
        let mut q = [0.0; MAX_DIM];
        let mut out = [crate::dynamics::AxisControls::default(); 2];
        for (axis, (st, series)) in [(&ax, self.coupled.x()), (&ay, self.coupled.y())].into_iter().enumerate() {
            crate::grid::gradient_into(series.slab(slab), &st[..d], &mut q[..d]);
            out[axis] = self.subsystems[axis].optimal_control_unchecked(&st[..d], &q[..d], self.deadband);
        }
        Ok(out)
    }

    fn require_liveness(&self, op: &'static str) -> Result<(), ReachError> {
        match self.kind {
            EvaluatorKind::SafetyGame => Err(ReachError::WrongKind { op, kind: self.kind }),
            _ => Ok(()),
        }
    }

    fn require_safety(&self, op: &'static str) -> Result<(), ReachError> {
        match self.kind {
            EvaluatorKind::SafetyGame => Ok(()),
            _ => Err(ReachError::WrongKind { op, kind: self.kind }),
        }
    }

    /// Optimal reach control for a member state.
    pub fn liveness_control(&self, state: &[f64], tau: f64) -> Result<[f64; 2], ReachError> {
        self.require_liveness("liveness_control")?;
        let (u, m) = self.axis_controls(state, tau)?;
        if !m.inside {
            return Err(ReachError::OutsideSet { value: m.value });
        }
        Ok([u[0].own, u[1].own])
    }

    /// Same law without the membership precondition, for locked-in vehicles
    /// inside the hysteresis band.
    pub fn liveness_control_unchecked(&self, state: &[f64], tau: f64) -> Result<([f64; 2], Membership), ReachError> {
        self.require_liveness("liveness_control")?;
        let (u, m) = self.axis_controls(state, tau)?;
        Ok(([u[0].own, u[1].own], m))
    }

    /// Minimum-time reach control: the optimal control read at the earliest
    /// stored time whose reachable set contains the state. Deep inside a
    /// frozen set the value is flat at the final horizon, so this is the
    /// slab that still carries a useful gradient. `None` when the state is
    /// outside the set at every time up to `tau`.
    pub fn reach_control(&self, state: &[f64], tau: f64) -> Result<Option<([f64; 2], Membership)>, ReachError> {
        self.require_liveness("reach_control")?;
        self.check_tau(tau)?;
        let (ax, ay, d) = self.split(state)?;
        let Some(v) = self.coupled.first_inside(&ax[..d], &ay[..d], tau) else {
            return Ok(None);
        };
        let u = self.controls_at(state, v.slab)?;
        let m = Membership {
            value: v.value,
            inside: true,
            slab: v.slab,
            time: v.time,
        };
        Ok(Some(([u[0].own, u[1].own], m)))
    }

    /// Evader acceleration that maximizes the game value.
    pub fn safety_control(&self, rel_state: &[f64], tau: f64) -> Result<[f64; 2], ReachError> {
        self.require_safety("safety_control")?;
        let (u, _) = self.axis_controls(rel_state, tau)?;
        Ok([u[0].own, u[1].own])
    }

    /// Safety control together with the two axis values at the critical
    /// slab. Separation is kept as long as either axis stays positive, so
    /// only the axes at the max need the safety control.
    pub fn safety_axes(&self, rel_state: &[f64], tau: f64) -> Result<([f64; 2], [f64; 2]), ReachError> {
        self.require_safety("safety_axes")?;
        let (u, m) = self.axis_controls(rel_state, tau)?;
        let (ax, ay, d) = self.split(rel_state)?;
        let (vx, vy) = self.coupled.axis_values(&ax[..d], &ay[..d], m.slab);
        Ok(([u[0].own, u[1].own], [vx, vy]))
    }

    /// The other vehicle's worst-case (capturing) acceleration.
    pub fn capture_control(&self, rel_state: &[f64], tau: f64) -> Result<[f64; 2], ReachError> {
        self.require_safety("capture_control")?;
        let (u, _) = self.axis_controls(rel_state, tau)?;
        Ok([u[0].other, u[1].other])
    }

    /// Writes `<stem>_x.hjvf` and `<stem>_y.hjvf` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<[PathBuf; 2], ReachError> {
        let paths = Self::paths(dir, stem);
        cache::save_series(self.coupled.x(), &paths[0])?;
        cache::save_series(self.coupled.y(), &paths[1])?;
        Ok(paths)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, ReachError> {
        let [px, py] = Self::paths(dir, stem);
        let x = Arc::new(cache::load_series(&px)?);
        let y = Arc::new(cache::load_series(&py)?);
        Self::from_series(x, y)
    }

    pub fn paths(dir: &Path, stem: &str) -> [PathBuf; 2] {
        [dir.join(format!("{stem}_x.hjvf")), dir.join(format!("{stem}_y.hjvf"))]
    }
}

/// Relative safety state of `me` with respect to `other`, both `(p_x, v_x, p_y, v_y)`.
pub fn relative_state(me: &[f64; 4], other: &[f64; 4]) -> [f64; 6] {
    [
        me[0] - other[0],
        me[1] - other[1],
        me[2] - other[2],
        me[3] - other[3],
        me[1],
        me[3],
    ]
}

/// Solves both axes on a shared step count and store stride.
fn build_pair(
    sub: Subsystem,
    grids: &AxisGrids,
    terminal: impl Fn(&Arc<Grid>, usize) -> Result<crate::grid::LevelSet, ReachError>,
    options: &BuildOptions,
) -> Result<ReachEvaluator, ReachError> {
    if options.max_slabs < 2 {
        return Err(ReachError::Params("max_slabs must be at least 2".into()));
    }
    let gx = grids.x.build()?;
    let gy = grids.y.build()?;
    let base = SolveOptions::new(options.horizon).scheme(options.scheme);
    let (nx, _) = plan_steps(&sub, &gx, &base)?;
    let (ny, _) = plan_steps(&sub, &gy, &base)?;
    let steps = nx.max(ny);
    let stride = steps.div_ceil(options.max_slabs - 1).max(1);
    let opts = base.steps(steps).stride(stride);
    let lx = terminal(&gx, 0)?;
    let ly = terminal(&gy, 1)?;
    let (sx, sy) = rayon::join(|| solve(&sub, &gx, &lx, &opts), || solve(&sub, &gy, &ly, &opts));
    ReachEvaluator::from_series(Arc::new(sx?), Arc::new(sy?))
}

/// Reach-within-`T` set of the absolute highway entry target.
pub fn build_highway_brs(
    target: &TargetSpec,
    u_max: f64,
    grids: &AxisGrids,
    options: &BuildOptions,
) -> Result<ReachEvaluator, ReachError> {
    target.validate()?;
    let sub = Subsystem::double_integrator(u_max)?;
    build_pair(
        sub,
        grids,
        |g, axis| {
            let (c, r) = target.axis(axis);
            Ok(signed_box(g, &c, &r)?)
        },
        options,
    )
}

/// Reach-within-`T` set of a target relative to a constant-velocity vehicle.
pub fn build_join_brs(
    target: &TargetSpec,
    u_max: f64,
    grids: &AxisGrids,
    options: &BuildOptions,
) -> Result<ReachEvaluator, ReachError> {
    target.validate()?;
    let sub = Subsystem::relative_reach(u_max)?;
    build_pair(
        sub,
        grids,
        |g, axis| {
            let (c, r) = target.axis(axis);
            Ok(signed_box(g, &c, &r)?)
        },
        options,
    )
}

/// Set of relative states from which the other vehicle can force both
/// relative positions within `d` at a common time.
///
/// The solved target is `|p_r| ≤ d + margin`: a small buffer (about half a
/// position cell) absorbs discretization error at the set boundary so that
/// states reported safe stay safe under adversarial play.
pub fn build_safety_brs(
    params: &SafetyParams,
    margin: f64,
    u_max_self: f64,
    u_max_other: f64,
    grids: &AxisGrids,
    options: &BuildOptions,
) -> Result<ReachEvaluator, ReachError> {
    params.validate()?;
    if options.horizon < params.t_external - 1e-12 {
        return Err(ReachError::Params(format!(
            "safety horizon {} is shorter than t_external {}",
            options.horizon, params.t_external
        )));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(ReachError::Params("safety margin must be non-negative".into()));
    }
    let sub = Subsystem::augmented_game(u_max_self, u_max_other, params.v_max)?;
    let d = params.d + margin;
    build_pair(sub, grids, |g, _| Ok(g.sample(|x| x[0].abs() - d)), options)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn highway_target() -> TargetSpec {
        let dir = [2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt()];
        TargetSpec {
            center: [4.0, 3.0 * dir[0], 2.0, 3.0 * dir[1]],
            radii: [0.5, 0.3, 0.5, 0.3],
        }
    }

    fn liveness_grids(t: &TargetSpec) -> AxisGrids {
        AxisGrids {
            x: GridSpec::centered(&[t.center[0], t.center[1]], &[12.0, 6.0], &[61, 41]),
            y: GridSpec::centered(&[t.center[2], t.center[3]], &[12.0, 6.0], &[61, 41]),
        }
    }

    fn safety() -> ReachEvaluator {
        let grid = GridSpec::new(&[-20.0, -10.0, -6.0], &[20.0, 10.0, 6.0], &[41, 21, 13]);
        let grids = AxisGrids { x: grid.clone(), y: grid };
        build_safety_brs(&SafetyParams::default(), 0.25, 3.0, 3.0, &grids, &BuildOptions::new(3.0).max_slabs(40)).unwrap()
    }

    #[test]
    fn highway_target_center_is_member_and_distant_rest_is_not() {
        let t = highway_target();
        let ev = build_highway_brs(&t, 3.0, &liveness_grids(&t), &BuildOptions::new(1.0)).unwrap();
        assert_eq!(ev.kind(), EvaluatorKind::LivenessAbsolute);
        for tau in [0.0, 0.5, 1.0] {
            assert!(ev.membership(&t.center, tau).unwrap().inside);
        }
        // at rest 100 m away: clamped query, far outside
        let far = [104.0, 0.0, 2.0, 0.0];
        assert!(!ev.membership(&far, 1.0).unwrap().inside);
        // 10 m away at rest cannot be covered in 1 s (at most 1.5 m)
        let near = [-6.0, 0.0, 2.0, 0.0];
        assert!(!ev.membership(&near, 1.0).unwrap().inside);
        assert!(matches!(
            ev.membership(&t.center, 1.5),
            Err(ReachError::HorizonExceeded { .. })
        ));
        assert!(matches!(ev.membership(&[0.0; 3], 0.5), Err(ReachError::StateDim { .. })));
    }

    #[test]
    fn join_relative_target_behind_tail() {
        let b = 4.0;
        let dir = [2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt()];
        let t = TargetSpec {
            center: [-b * dir[0], 0.0, -b * dir[1], 0.0],
            radii: [0.5, 0.3, 0.5, 0.3],
        };
        let ev = build_join_brs(&t, 3.0, &liveness_grids(&t), &BuildOptions::new(2.0)).unwrap();
        assert_eq!(ev.kind(), EvaluatorKind::LivenessRelative);
        assert!(ev.membership(&t.center, 2.0).unwrap().inside);
        // receding gap of 20 m at zero relative speed: ½·3·2² = 6 < 20
        let gap = [t.center[0] - 20.0, 0.0, t.center[2], 0.0];
        assert!(!ev.membership(&gap, 2.0).unwrap().inside);
    }

    #[test]
    fn membership_is_monotone_and_matches_definition() {
        let t = highway_target();
        let ev = build_highway_brs(&t, 3.0, &liveness_grids(&t), &BuildOptions::new(2.0).max_slabs(30)).unwrap();
        let s = [1.0, 1.0, 0.5, 0.0];
        let mut prev = f64::INFINITY;
        for &tau in ev.times() {
            let m = ev.membership(&s, tau).unwrap();
            assert!(m.value <= prev);
            prev = m.value;
            let k = ev.coupled().x().slabs_within(tau);
            let brute = (0..k)
                .map(|j| {
                    let (a, b) = ev.coupled().axis_values(&[s[0], s[1]], &[s[2], s[3]], j);
                    a.max(b)
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(m.value, brute);
        }
    }

    #[test]
    fn liveness_control_rules() {
        let t = highway_target();
        let ev = build_highway_brs(&t, 3.0, &liveness_grids(&t), &BuildOptions::new(2.0)).unwrap();
        assert_eq!(ev.liveness_control(&t.center, 2.0).unwrap(), [0.0, 0.0]);
        // sign rule against the slab gradient at the critical time
        let s = [t.center[0] - 3.0, t.center[1], t.center[2] - 1.0, t.center[3]];
        let m = ev.membership(&s, 2.0).unwrap();
        let u = ev.liveness_control(&s, 2.0).unwrap();
        let q = ev.coupled().x().slab(m.slab).gradient_at(&[s[0], s[1]]);
        assert!(q[1].abs() > DEFAULT_GRAD_DEADBAND);
        assert_eq!(u[0], -3.0 * q[1].signum());
        let far = [t.center[0] - 11.0, t.center[1], t.center[2], t.center[3]];
        assert!(matches!(ev.liveness_control(&far, 2.0), Err(ReachError::OutsideSet { .. })));
        assert!(matches!(ev.safety_control(&s, 2.0), Err(ReachError::WrongKind { .. })));
    }

    #[test]
    fn safety_set_examples() {
        let ev = safety();
        assert_eq!(ev.kind(), EvaluatorKind::SafetyGame);
        for tau in [0.0, 1.5, 3.0] {
            assert!(ev.membership(&[0.5, 0.0, 0.5, 0.0, 3.0, 0.0], tau).unwrap().inside);
        }
        // ½·(3+3)·1.5² = 6.75 m of closure per axis, far short of 48 m
        assert!(!ev.membership(&[50.0, 0.0, 50.0, 0.0, 0.0, 0.0], 1.5).unwrap().inside);
        // closing fast from 6 m on both axes with no escape margin
        assert!(ev.membership(&[4.0, -6.0, 4.0, -6.0, 0.0, 0.0], 1.5).unwrap().inside);
    }

    #[test]
    fn safety_control_pushes_apart_and_respects_cap() {
        let ev = safety();
        // evader ahead in x and y, being approached in x: accelerate away
        let s = [4.0, -2.0, 3.0, 0.0, 0.0, 0.0];
        assert!(!ev.membership(&s, 1.5).unwrap().inside);
        let u = ev.safety_control(&s, 1.5).unwrap();
        assert_eq!(u, [3.0, 3.0]);
        // same situation at the speed cap: cannot accelerate further in x
        let u = ev.safety_control(&[4.0, -2.0, 3.0, 0.0, 5.0, 0.0], 1.5).unwrap();
        assert_eq!(u[0], 0.0);
        // mirrored state gives the mirrored law
        let a = ev.safety_control(&[3.0, -1.0, 2.5, -1.5, 0.5, -0.5], 1.5).unwrap();
        let b = ev.safety_control(&[-3.0, 1.0, -2.5, 1.5, -0.5, 0.5], 1.5).unwrap();
        assert_eq!(a, [-b[0], -b[1]]);
        let c = ev.capture_control(&s, 1.5).unwrap();
        assert_eq!(c[0], 3.0);
    }

    #[test]
    fn safety_depends_only_on_relative_state() {
        let ev = safety();
        let (a, b) = ([10.0, 3.0, 4.0, 1.0], [6.0, 4.0, 1.0, 0.0]);
        let shift = |s: [f64; 4]| [s[0] + 123.0, s[1], s[2] - 77.0, s[3]];
        let r1 = relative_state(&a, &b);
        let r2 = relative_state(&shift(a), &shift(b));
        assert_eq!(r1, r2);
        assert_eq!(ev.membership(&r1, 1.5).unwrap(), ev.membership(&r2, 1.5).unwrap());
    }

    #[test]
    fn spec_fingerprint_tracks_parameters() {
        let grid = GridSpec::new(&[-20.0, -10.0, -6.0], &[20.0, 10.0, 6.0], &[41, 21, 13]);
        let mk = |d: f64| EvaluatorSpec::Safety {
            params: SafetyParams { d, ..SafetyParams::default() },
            margin: 0.25,
            u_max_self: 3.0,
            u_max_other: 3.0,
            grids: AxisGrids { x: grid.clone(), y: grid.clone() },
            options: BuildOptions::new(3.0),
        };
        assert_eq!(mk(2.0).fingerprint(), mk(2.0).fingerprint());
        assert_ne!(mk(2.0).fingerprint(), mk(2.5).fingerprint());
        assert_eq!(mk(2.0).fingerprint().len(), 64);
    }

    #[test]
    fn save_and_load_round_trip() {
        let ev = safety();
        let dir = tempfile::tempdir().unwrap();
        ev.save(dir.path(), "safety").unwrap();
        let back = ReachEvaluator::load(dir.path(), "safety").unwrap();
        assert_eq!(back.kind(), EvaluatorKind::SafetyGame);
        assert_eq!(**back.coupled().x(), **ev.coupled().x());
        assert_eq!(**back.coupled().y(), **ev.coupled().y());
    }

    #[test]
    fn safety_horizon_must_cover_t_external() {
        let grid = GridSpec::new(&[-20.0, -10.0, -6.0], &[20.0, 10.0, 6.0], &[21, 11, 7]);
        let grids = AxisGrids { x: grid.clone(), y: grid };
        let r = build_safety_brs(&SafetyParams::default(), 0.25, 3.0, 3.0, &grids, &BuildOptions::new(2.0));
        assert!(matches!(r, Err(ReachError::Params(_))));
    }
}
