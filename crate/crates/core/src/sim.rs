//! Deterministic fixed-step scenario engine.
//!
//! Every step each vehicle gathers its safety checks, arbitrates between the
//! safety controller and its liveness controller, and all vehicles are then
//! integrated together (semi-implicit Euler: velocity first). Mode changes
//! are applied after integration, in vehicle-id order.
//!
//! Who checks whom, and over which horizon:
//! - platoon neighbours: `t_internal`;
//! - intruders: `t_external`;
//! - faulty vehicles: `t_external`, capped by the time left before the faulty
//!   vehicle leaves the band;
//! - the vehicle a joiner is closing on: `t_internal`;
//! - while merging or rejoining, every other cooperative vehicle in the
//!   band: `t_internal`.
//!
//! Within a platoon both neighbours evaluate their check, but only the
//! trailing one acts on it: followers feed the leader's acceleration
//! forward, so a leader evading its own follower only drags it along.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hjsolver::Scheme;
use crate::platoon::{
    approach_control, arbitrate_control, follower_control, heading, leader_highway_control, nominal_offset,
    plan_escalation, safety_check_set, Check, Fleet, Gains, HighwayPath, Mode, ModeChange, PlatoonError, PlatoonId,
    PlatoonRegistry, Transition, VehicleId, VehicleRecord, HIGHWAY_BAND,
};
use crate::reach::{
    relative_state, AxisGrids, BuildOptions, EvaluatorSpec, GridSpec, ReachError, ReachEvaluator, SafetyParams,
    TargetSpec, LOCK_IN_BAND,
};

/// Seconds a vehicle must go without its safety controller before reaching
/// a merge, join or rejoin goal counts.
pub const SETTLE_TIME: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Reach(#[from] ReachError),
    #[error(transparent)]
    Platoon(#[from] PlatoonError),
    #[error("{evaluator} evaluator was built for different parameters (have {have}, config needs {want})")]
    Mismatch {
        evaluator: &'static str,
        have: String,
        want: String,
    },
    #[error("vehicle {id} state became non-finite at t = {t}")]
    NonFinite { id: VehicleId, t: f64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

fn default_dt() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighwayConfig {
    pub vertices: Vec<[f64; 2]>,
    /// Travel speed v̄ (m/s).
    pub speed: f64,
    /// Merge point on the highway.
    pub entry: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRadii {
    /// Box half-widths of the highway entry target.
    pub highway: [f64; 4],
    /// Box half-widths of the relative join target.
    pub join: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    pub u_max: f64,
}

/// Per-axis `(p, v)` grid centred on a liveness target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LivenessGrid {
    pub half_widths: [f64; 2],
    pub counts: [usize; 2],
    pub horizon: f64,
}

/// Per-axis `(p_r, v_r, v_self)` grid of the safety game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyGrid {
    pub mins: [f64; 3],
    pub maxs: [f64; 3],
    pub counts: [usize; 3],
    pub horizon: f64,
    /// Buffer added to `d` in the solved target (m).
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorGrids {
    pub highway: LivenessGrid,
    pub join: LivenessGrid,
    pub safety: SafetyGrid,
    pub max_slabs: usize,
    #[serde(default)]
    pub scheme: Scheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleConfig {
    pub id: VehicleId,
    /// `(p_x, v_x, p_y, v_y)`.
    pub state: [f64; 4],
    /// Free vehicles hold still until this time (s).
    #[serde(default)]
    pub release: f64,
    /// Vehicle this one lines up behind; none means merge onto the highway.
    #[serde(default)]
    pub follow: Option<VehicleId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntruderBehavior {
    ConstantVelocity,
    /// Plays the capture-optimal game control against the nearest vehicle.
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Event {
    /// The vehicle leaves its platoon and tracks the highway in reverse.
    Fault { time: f64, vehicle: VehicleId },
    Intruder {
        time: f64,
        id: VehicleId,
        state: [f64; 4],
        behavior: IntruderBehavior,
    },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Self::Fault { time, .. } | Self::Intruder { time, .. } => *time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub highway: HighwayConfig,
    pub targets: TargetRadii,
    pub safety: SafetyParams,
    pub limits: Limits,
    pub gains: Gains,
    /// Platoon spacing b (m).
    pub spacing: f64,
    /// Leader lookahead along the highway (m).
    pub lookahead: f64,
    /// Position error clip of the straight-line approach (m).
    pub approach_error: f64,
    pub evaluators: EvaluatorGrids,
    pub vehicles: Vec<VehicleConfig>,
    /// Initial platoons, leader first.
    #[serde(default)]
    pub platoons: Vec<Vec<VehicleId>>,
    #[serde(default)]
    pub events: Vec<Event>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario configs always serialize")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        self.safety.validate()?;
        if !(self.limits.u_max > 0.0) {
            return bad("u_max must be positive".into());
        }
        if !(self.gains.kp > 0.0 && self.gains.kv > 0.0) {
            return bad("gains must be positive".into());
        }
        if !(self.spacing > 0.0 && self.lookahead >= 0.0 && self.approach_error > 0.0) {
            return bad("spacing and approach_error must be positive, lookahead non-negative".into());
        }
        self.highway_path()?;
        let mut ids: Vec<VehicleId> = self.vehicles.iter().map(|v| v.id).collect();
        for e in &self.events {
            if let Event::Intruder { id, .. } = e {
                ids.push(*id);
            }
        }
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return bad("vehicle ids must be unique".into());
        }
        let known = |v: &VehicleId| self.vehicles.iter().any(|c| c.id == *v);
        for v in &self.vehicles {
            if let Some(f) = v.follow {
                if !known(&f) || f == v.id {
                    return bad(format!("vehicle {} follows unknown vehicle {f}", v.id));
                }
            }
            if v.state.iter().any(|x| !x.is_finite()) {
                return bad(format!("vehicle {} has a non-finite state", v.id));
            }
        }
        let mut seen = Vec::new();
        for p in &self.platoons {
            if p.is_empty() {
                return bad("platoons must not be empty".into());
            }
            for m in p {
                if !known(m) || seen.contains(m) {
                    return bad(format!("platoon member {m} is unknown or listed twice"));
                }
                seen.push(*m);
            }
        }
        for e in &self.events {
            if !(e.time() >= 0.0) {
                return bad("event times must be non-negative".into());
            }
            if let Event::Fault { vehicle, .. } = e {
                if !known(vehicle) {
                    return bad(format!("fault event names unknown vehicle {vehicle}"));
                }
            }
        }
        Ok(())
    }

    pub fn highway_path(&self) -> Result<HighwayPath, SimError> {
        Ok(HighwayPath::new(self.highway.vertices.clone(), self.highway.speed)?)
    }

    /// Highway direction at the merge point.
    pub fn entry_direction(&self) -> Result<[f64; 2], SimError> {
        let h = self.highway_path()?;
        Ok(h.direction_at(h.project(self.highway.entry).arc))
    }

    pub fn highway_target(&self) -> Result<TargetSpec, SimError> {
        let d = self.entry_direction()?;
        let (e, v) = (self.highway.entry, self.highway.speed);
        Ok(TargetSpec {
            center: [e[0], v * d[0], e[1], v * d[1]],
            radii: self.targets.highway,
        })
    }

    /// `b` behind the vehicle ahead, matching its velocity.
    pub fn join_target(&self) -> Result<TargetSpec, SimError> {
        let d = self.entry_direction()?;
        let b = self.spacing;
        Ok(TargetSpec {
            center: [-b * d[0], 0.0, -b * d[1], 0.0],
            radii: self.targets.join,
        })
    }

    fn liveness_grids(t: &TargetSpec, g: &LivenessGrid) -> AxisGrids {
        AxisGrids {
            x: GridSpec::centered(&[t.center[0], t.center[1]], &g.half_widths, &g.counts),
            y: GridSpec::centered(&[t.center[2], t.center[3]], &g.half_widths, &g.counts),
        }
    }

    /// The three evaluator builds this scenario needs: highway, join, safety.
    pub fn evaluator_specs(&self) -> Result<[EvaluatorSpec; 3], SimError> {
        let ev = &self.evaluators;
        let opts = |h: f64| BuildOptions {
            horizon: h,
            max_slabs: ev.max_slabs,
            scheme: ev.scheme,
        };
        let ht = self.highway_target()?;
        let jt = self.join_target()?;
        let sg = GridSpec::new(&ev.safety.mins, &ev.safety.maxs, &ev.safety.counts);
        Ok([
            EvaluatorSpec::Highway {
                target: ht,
                u_max: self.limits.u_max,
                grids: Self::liveness_grids(&ht, &ev.highway),
                options: opts(ev.highway.horizon),
            },
            EvaluatorSpec::Join {
                target: jt,
                u_max: self.limits.u_max,
                grids: Self::liveness_grids(&jt, &ev.join),
                options: opts(ev.join.horizon),
            },
            EvaluatorSpec::Safety {
                params: self.safety,
                margin: ev.safety.margin,
                u_max_self: self.limits.u_max,
                u_max_other: self.limits.u_max,
                grids: AxisGrids {
                    x: sg.clone(),
                    y: sg,
                },
                options: opts(ev.safety.horizon),
            },
        ])
    }

    /// Defaults shared by the built-in scenarios.
    pub fn base(name: &str) -> Self {
        Self {
            name: name.into(),
            duration: 40.0,
            dt: default_dt(),
            highway: HighwayConfig {
                vertices: vec![[-100.0, -50.0], [400.0, 200.0]],
                speed: 3.0,
                entry: [4.0, 2.0],
            },
            targets: TargetRadii {
                highway: [0.5, 0.3, 0.5, 0.3],
                join: [0.5, 0.3, 0.5, 0.3],
            },
            safety: SafetyParams::default(),
            limits: Limits { u_max: 3.0 },
            gains: Gains::default(),
            spacing: 4.0,
            lookahead: 2.0,
            approach_error: 3.0,
            evaluators: EvaluatorGrids {
                highway: LivenessGrid {
                    half_widths: [16.0, 7.0],
                    counts: [161, 71],
                    horizon: 4.0,
                },
                join: LivenessGrid {
                    half_widths: [16.0, 7.0],
                    counts: [161, 71],
                    horizon: 4.0,
                },
                safety: SafetyGrid {
                    mins: [-20.0, -10.0, -6.0],
                    maxs: [20.0, 10.0, 6.0],
                    counts: [81, 41, 25],
                    horizon: 3.0,
                    margin: 0.25,
                },
                max_slabs: 200,
                scheme: Scheme::default(),
            },
            vehicles: Vec::new(),
            platoons: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Steady platoon on the highway: leader at arc `s0` from the entry,
    /// members every `b` behind it, all at highway speed.
    fn cruising_platoon(&mut self, n: u32, s0: f64) {
        let h = self.highway_path().expect("built-in highway is valid");
        let base = h.project(self.highway.entry).arc;
        let v = self.highway.speed;
        for i in 1..=n {
            let s = base + s0 - (i - 1) as f64 * self.spacing;
            let p = h.point_at(s);
            let d = h.direction_at(s);
            self.vehicles.push(VehicleConfig {
                id: i,
                state: [p[0], v * d[0], p[1], v * d[1]],
                release: 0.0,
                follow: None,
            });
        }
        self.platoons = vec![(1..=n).collect()];
    }
}

/// Five vehicles released three seconds apart from parking spots below the
/// highway; the first merges at the entry point and the rest line up
/// behind it in release order.
pub fn scenario_form_platoon() -> ScenarioConfig {
    let mut c = ScenarioConfig::base("form_platoon");
    c.duration = 60.0;
    let d = c.entry_direction().expect("built-in highway is valid");
    let below = [d[1], -d[0]];
    let e = c.highway.entry;
    for i in 1..=5u32 {
        let along = -4.0 - 10.0 * (i - 1) as f64;
        c.vehicles.push(VehicleConfig {
            id: i,
            state: [e[0] + along * d[0] + 10.0 * below[0], 0.0, e[1] + along * d[1] + 10.0 * below[1], 0.0],
            release: 3.0 * (i - 1) as f64,
            follow: if i == 1 { None } else { Some(i - 1) },
        });
    }
    c
}

/// Five-vehicle platoon; the middle member faults at t = 0 and tracks the
/// highway in reverse.
pub fn scenario_malfunction() -> ScenarioConfig {
    let mut c = ScenarioConfig::base("malfunction");
    c.duration = 30.0;
    c.cruising_platoon(5, 10.0);
    c.events.push(Event::Fault { time: 0.0, vehicle: 3 });
    c
}

/// Heading of the intruder in the built-in intruder scenario, measured
/// counter-clockwise from +x.
pub const INTRUDER_HEADING_DEG: f64 = 235.0;

/// Four-vehicle platoon crossed by a constant-velocity intruder from (40, 30)
/// heading down and to the left.
pub fn scenario_intruder() -> ScenarioConfig {
    let mut c = ScenarioConfig::base("intruder");
    c.duration = 40.0;
    // Leader starts far enough up the highway that the intruder's path
    // crosses behind it, through the followers.
    c.cruising_platoon(4, 40.0);
    let (sin, cos) = INTRUDER_HEADING_DEG.to_radians().sin_cos();
    let v = c.highway.speed;
    c.events.push(Event::Intruder {
        time: 0.0,
        id: 0,
        state: [40.0, v * cos, 30.0, v * sin],
        behavior: IntruderBehavior::ConstantVelocity,
    });
    c
}

pub fn builtin_scenario(name: &str) -> Option<ScenarioConfig> {
    match name {
        "form_platoon" => Some(scenario_form_platoon()),
        "malfunction" => Some(scenario_malfunction()),
        "intruder" => Some(scenario_intruder()),
        _ => None,
    }
}

pub const BUILTIN_SCENARIOS: [&str; 3] = ["form_platoon", "malfunction", "intruder"];

/// The three reachable sets a scenario runs on, tagged with the fingerprints
/// of the specs they were built from.
#[derive(Debug, Clone)]
pub struct Evaluators {
    pub highway: ReachEvaluator,
    pub join: ReachEvaluator,
    pub safety: ReachEvaluator,
    fingerprints: [String; 3],
}

impl Evaluators {
    pub const NAMES: [&'static str; 3] = ["highway", "join", "safety"];

    pub fn build(config: &ScenarioConfig) -> Result<Self, SimError> {
        let specs = config.evaluator_specs()?;
        let (h, (j, s)) = rayon::join(|| specs[0].build(), || rayon::join(|| specs[1].build(), || specs[2].build()));
        Self::from_parts(&specs, h?, j?, s?)
    }

    /// Pairs loaded evaluators with the specs they were built from.
    pub fn from_parts(
        specs: &[EvaluatorSpec; 3],
        highway: ReachEvaluator,
        join: ReachEvaluator,
        safety: ReachEvaluator,
    ) -> Result<Self, SimError> {
        for (spec, ev) in specs.iter().zip([&highway, &join, &safety]) {
            if spec.kind() != ev.kind() {
                return Err(SimError::Config(format!(
                    "expected a {} evaluator, got {}",
                    spec.kind().name(),
                    ev.kind().name()
                )));
            }
        }
        Ok(Self {
            highway,
            join,
            safety,
            fingerprints: specs.clone().map(|s| s.fingerprint()),
        })
    }

    pub fn fingerprints(&self) -> &[String; 3] {
        &self.fingerprints
    }

    fn check(&self, config: &ScenarioConfig) -> Result<(), SimError> {
        let specs = config.evaluator_specs()?;
        for (k, spec) in specs.iter().enumerate() {
            let want = spec.fingerprint();
            if want != self.fingerprints[k] {
                return Err(SimError::Mismatch {
                    evaluator: Self::NAMES[k],
                    have: self.fingerprints[k][..12].to_string(),
                    want: want[..12].to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Which law produced a vehicle's acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    Idle,
    /// Straight-line approach toward a liveness target.
    Approach,
    /// Locked-in optimal reach control.
    Liveness,
    Highway,
    Follow,
    Safety,
    Faulty,
    Intruder,
    Escalated,
}

impl Controller {
    pub fn name(self) -> &'static str {
        match self {
            Self::Idle => "idle",
            Self::Approach => "approach",
            Self::Liveness => "liveness",
            Self::Highway => "highway",
            Self::Follow => "follow",
            Self::Safety => "safety",
            Self::Faulty => "faulty",
            Self::Intruder => "intruder",
            Self::Escalated => "escalated",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            Self::Idle,
            Self::Approach,
            Self::Liveness,
            Self::Highway,
            Self::Follow,
            Self::Safety,
            Self::Faulty,
            Self::Intruder,
            Self::Escalated,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub id: VehicleId,
    pub mode: Mode,
    pub platoon: Option<PlatoonId>,
    pub index: Option<usize>,
    pub band: i32,
    pub p: [f64; 2],
    pub v: [f64; 2],
    pub u: [f64; 2],
    pub breaches: usize,
    pub controller: Controller,
    /// Safety value against each column vehicle, when it was checked.
    pub vs: Vec<Option<f64>>,
}

/// A mode change as it happened during the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeEvent {
    pub t: f64,
    pub id: VehicleId,
    pub from: Mode,
    pub to: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Vehicle ids with a `vs_<j>` column.
    pub columns: Vec<VehicleId>,
    pub rows: Vec<TraceRow>,
    pub events: Vec<ModeEvent>,
    /// Registry after every fault event: `(time, platoon members)`.
    pub restructures: Vec<(f64, Vec<Vec<VehicleId>>)>,
}

const HEADER: [&str; 14] = [
    "t",
    "id",
    "mode",
    "platoon",
    "index",
    "band",
    "px",
    "py",
    "vx",
    "vy",
    "ux",
    "uy",
    "breaches",
    "controller",
];

impl Trace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = HEADER.iter().map(|s| s.to_string()).collect();
        header.extend(self.columns.iter().map(|j| format!("vs_{j}")));
        w.write_record(&header)?;
        let opt = |x: Option<String>| x.unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![
                r.t.to_string(),
                r.id.to_string(),
                r.mode.name().to_string(),
                opt(r.platoon.map(|p| p.to_string())),
                opt(r.index.map(|i| i.to_string())),
                r.band.to_string(),
                r.p[0].to_string(),
                r.p[1].to_string(),
                r.v[0].to_string(),
                r.v[1].to_string(),
                r.u[0].to_string(),
                r.u[1].to_string(),
                r.breaches.to_string(),
                r.controller.name().to_string(),
            ];
            rec.extend(r.vs.iter().map(|v| opt(v.map(|x| x.to_string()))));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Reads the rows back from CSV (events and restructures are not stored).
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, SimError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < HEADER.len() || header.iter().zip(HEADER).any(|(a, b)| a != b) {
            return Err(SimError::Config("trace header does not match".into()));
        }
        let columns = header
            .iter()
            .skip(HEADER.len())
            .map(|h| h.strip_prefix("vs_").and_then(|s| s.parse().ok()))
            .collect::<Option<Vec<VehicleId>>>()
            .ok_or_else(|| SimError::Config("bad vs_ column name".into()))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |k: usize| -> Result<f64, SimError> {
                rec[k].parse().map_err(|_| SimError::Config(format!("bad number {:?}", &rec[k])))
            };
            let o = |k: usize| -> Option<u64> { rec[k].parse().ok() };
            let mode = match &rec[2] {
                "free" => Mode::Free,
                "leader" => Mode::Leader,
                "follower" => Mode::Follower,
                "faulty" => Mode::Faulty,
                m => return Err(SimError::Config(format!("unknown mode {m:?}"))),
            };
            rows.push(TraceRow {
                t: f(0)?,
                id: f(1)? as VehicleId,
                mode,
                platoon: o(3).map(|x| x as PlatoonId),
                index: o(4).map(|x| x as usize),
                band: f(5)? as i32,
                p: [f(6)?, f(7)?],
                v: [f(8)?, f(9)?],
                u: [f(10)?, f(11)?],
                breaches: f(12)? as usize,
                controller: Controller::parse(&rec[13])
                    .ok_or_else(|| SimError::Config(format!("unknown controller {:?}", &rec[13])))?,
                vs: (HEADER.len()..rec.len()).map(|k| rec[k].parse().ok()).collect(),
            });
        }
        Ok(Self {
            columns,
            rows,
            events: Vec::new(),
            restructures: Vec::new(),
        })
    }
}

/// Per-vehicle controller state that is not part of the vehicle record.
#[derive(Debug, Clone)]
struct Pilot {
    release: f64,
    follow: Option<VehicleId>,
    /// Start time of the current locked-in liveness manoeuvre.
    lock: Option<f64>,
    /// Last valid heading while leading.
    heading: [f64; 2],
    intruder: Option<IntruderBehavior>,
    present: bool,
    /// Last time the safety controller was in charge.
    last_safety: Option<f64>,
}

/// What one vehicle decided this step.
#[derive(Debug, Clone)]
struct Decision {
    u: [f64; 2],
    controller: Controller,
    checks: Vec<Check>,
    escalate: bool,
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    ev: &'a Evaluators,
    highway: HighwayPath,
    reverse: HighwayPath,
    highway_target: TargetSpec,
    join_target: TargetSpec,
    fleet: Fleet,
    pilots: BTreeMap<VehicleId, Pilot>,
    events: Vec<ModeEvent>,
}

/// A liveness manoeuvre target: absolute highway entry, or relative to a
/// vehicle ahead.
enum Goal {
    Highway,
    Behind(VehicleId),
}

impl<'a> Engine<'a> {
    fn record(&self, id: VehicleId) -> &VehicleRecord {
        self.fleet.get(id).expect("pilots and records share ids")
    }

    fn externals(&self) -> Vec<VehicleId> {
        self.fleet
            .vehicles()
            .iter()
            .filter(|r| r.band == HIGHWAY_BAND && self.pilots[&r.id].present)
            .filter(|r| r.mode == Mode::Faulty || self.pilots[&r.id].intruder.is_some())
            .map(|r| r.id)
            .collect()
    }

    fn external_horizon(&self, j: VehicleId) -> f64 {
        let s = &self.cfg.safety;
        match self.record(j).fault_clock {
            Some(c) => s.t_external.min(s.t_internal - c).max(0.0),
            None => s.t_external,
        }
    }

    /// Who `id` checks and at which horizon.
    fn checks_for(&self, id: VehicleId, goal: Option<&Goal>, externals: &[VehicleId]) -> Vec<(VehicleId, f64)> {
        let me = self.record(id);
        let s = &self.cfg.safety;
        let mut out: Vec<(VehicleId, f64)> = Vec::new();
        let push = |j: VehicleId, h: f64, out: &mut Vec<(VehicleId, f64)>| {
            if j != id && !out.iter().any(|(k, _)| *k == j) {
                out.push((j, h));
            }
        };
        if me.band != HIGHWAY_BAND {
            return out;
        }
        for j in safety_check_set(id, self.fleet.registry(), externals) {
            let h = if externals.contains(&j) {
                self.external_horizon(j)
            } else {
                s.t_internal
            };
            push(j, h, &mut out);
        }
        if let Some(Goal::Behind(j)) = goal {
            if self.record(*j).band == HIGHWAY_BAND {
                push(*j, s.t_internal, &mut out);
            }
        }
        // anyone manoeuvring toward a merge can meet anyone in the band
        if goal.is_some() {
            for r in self.fleet.vehicles() {
                if r.band == HIGHWAY_BAND && self.pilots[&r.id].present {
                    push(r.id, s.t_internal, &mut out);
                }
            }
        }
        out
    }

    fn tail_of(&self, pid: PlatoonId) -> VehicleId {
        self.fleet.registry().get(pid).expect("live platoon").tail()
    }

    /// Liveness goal for vehicles that are merging or rejoining.
    fn goal(&self, id: VehicleId) -> Option<Goal> {
        let me = self.record(id);
        let reg = self.fleet.registry();
        match me.mode {
            Mode::Free => match self.pilots[&id].follow {
                None => Some(Goal::Highway),
                Some(j) => {
                    let target = match reg.locate(j) {
                        Some((pid, _)) => self.tail_of(pid),
                        None => j,
                    };
                    if self.record(target).mode == Mode::Faulty {
                        return Some(match reg.platoons().next() {
                            Some(p) => Goal::Behind(p.tail()),
                            None => Goal::Highway,
                        });
                    }
                    Some(Goal::Behind(target))
                }
            },
            Mode::Leader => reg
                .resolve_origin(me.platoon.unwrap())
                .map(|o| Goal::Behind(self.tail_of(o))),
            _ => None,
        }
    }

    /// Relative (or absolute) state handed to a liveness evaluator.
    fn goal_state(&self, id: VehicleId, goal: &Goal) -> [f64; 4] {
        let me = self.record(id).state;
        match goal {
            Goal::Highway => me,
            Goal::Behind(j) => {
                let o = self.record(*j).state;
                [me[0] - o[0], me[1] - o[1], me[2] - o[2], me[3] - o[3]]
            }
        }
    }

    fn goal_reached(&self, id: VehicleId, goal: &Goal) -> bool {
        let x = self.goal_state(id, goal);
        match goal {
            Goal::Highway => self.highway_target.contains(&x),
            Goal::Behind(_) => self.join_target.contains(&x),
        }
    }

    /// Approach phase until inside the reachable set, then the locked-in
    /// minimum-time reach control. A locked-in vehicle keeps the optimal law
    /// while its value stays within the hysteresis band.
    fn liveness(&mut self, id: VehicleId, goal: &Goal, t: f64) -> Result<([f64; 2], Controller), SimError> {
        let (ev, target, horizon) = match goal {
            Goal::Highway => (&self.ev.highway, self.highway_target, self.cfg.evaluators.highway.horizon),
            Goal::Behind(_) => (&self.ev.join, self.join_target, self.cfg.evaluators.join.horizon),
        };
        let horizon = horizon.min(ev.horizon());
        let x = self.goal_state(id, goal);
        let locked = self.pilots[&id].lock.is_some();
        // lock in only close to the target, where the optimal control does
        // not build up speeds outside the safety grid
        let near = (x[0] - target.center[0]).abs().max((x[2] - target.center[2]).abs()) <= self.cfg.approach_error;
        if locked || near {
            if let Some((u, _)) = ev.reach_control(&x, horizon)? {
                self.pilots.get_mut(&id).unwrap().lock.get_or_insert(t);
                return Ok((u, Controller::Liveness));
            }
            if locked {
                let (u, m) = ev.liveness_control_unchecked(&x, horizon)?;
                if m.value <= LOCK_IN_BAND {
                    return Ok((u, Controller::Liveness));
                }
            }
        }
        let pilot = self.pilots.get_mut(&id).unwrap();
        pilot.lock = None;
        let me = self.record(id).state;
        let abs = match goal {
            // a fixed point: come to rest on it and let lock-in take over
            Goal::Highway => [target.center[0], 0.0, target.center[2], 0.0],
            Goal::Behind(j) => {
                let o = self.record(*j).state;
                let c = target.center;
                [o[0] + c[0], o[1] + c[1], o[2] + c[2], o[3] + c[3]]
            }
        };
        let u = approach_control(&me, &abs, self.cfg.approach_error, self.cfg.gains, self.cfg.limits.u_max);
        Ok((u, Controller::Approach))
    }

    fn decide(&mut self, id: VehicleId, t: f64, externals: &[VehicleId]) -> Result<Decision, SimError> {
        let cfg = self.cfg;
        let u_max = cfg.limits.u_max;
        let me = self.record(id).clone();
        let pilot = self.pilots[&id].clone();
        let plain = |u, controller| Decision {
            u,
            controller,
            checks: Vec::new(),
            escalate: false,
        };
        if let Some(b) = pilot.intruder {
            let u = match b {
                IntruderBehavior::ConstantVelocity => [0.0; 2],
                IntruderBehavior::Adversarial => self.capture(id)?,
            };
            return Ok(plain(u, Controller::Intruder));
        }
        if me.mode == Mode::Faulty {
            let u = leader_highway_control(&me.state, &self.reverse, cfg.lookahead, cfg.gains, u_max);
            return Ok(plain(u, Controller::Faulty));
        }
        if me.mode == Mode::Free && t + 1e-9 < pilot.release {
            return Ok(plain([0.0; 2], Controller::Idle));
        }
        if me.band != HIGHWAY_BAND {
            return Ok(plain([0.0; 2], Controller::Escalated));
        }
        let goal = self.goal(id);
        let (live_u, live_c) = match (&goal, me.mode) {
            (Some(g), _) => self.liveness(id, g, t)?,
            (None, Mode::Leader) => {
                let u = leader_highway_control(&me.state, &self.highway, cfg.lookahead, cfg.gains, u_max);
                (u, Controller::Highway)
            }
            (None, _) => {
                let (pid, idx) = (me.platoon.unwrap(), me.index.unwrap());
                let leader = self.record(self.fleet.registry().get(pid).unwrap().leader());
                let h = heading(leader.velocity(), self.pilots[&leader.id].heading);
                let off = nominal_offset(idx, self.fleet.registry().spacing(), h);
                let u = follower_control(&me.state, &leader.state, leader.last_accel, off, cfg.gains, u_max);
                (u, Controller::Follow)
            }
        };
        // within a platoon the trailing member of each pair is the one that
        // acts; the one ahead still evaluates (and traces) the check
        let behind = match (me.platoon, me.index) {
            (Some(p), Some(i)) => self.fleet.registry().get(p).unwrap().members.get(i).copied(),
            _ => None,
        };
        let mut checks = Vec::new();
        for (j, tau) in self.checks_for(id, goal.as_ref(), externals) {
            let other = self.record(j);
            let rel = relative_state(&me.state, &other.state);
            let m = self.ev.safety.membership(&rel, tau)?;
            let acts = m.inside && Some(j) != behind;
            let safety_u = if acts {
                let (u, v) = self.ev.safety.safety_axes(&rel, tau)?;
                binding_axes(u, v, live_u)
            } else {
                [0.0; 2]
            };
            checks.push(Check {
                id: j,
                value: m.value,
                inside: acts,
                distance: (rel[0].abs()).max(rel[2].abs()),
                safety_u,
            });
        }
        let a = arbitrate_control(live_u, &checks);
        if a.breaches > 0 {
            self.pilots.get_mut(&id).unwrap().lock = None;
        }
        Ok(Decision {
            u: a.u,
            controller: if a.breaches > 0 { Controller::Safety } else { live_c },
            checks,
            escalate: a.escalate,
        })
    }

    /// Capture-optimal acceleration of `id` against the nearest highway vehicle.
    fn capture(&self, id: VehicleId) -> Result<[f64; 2], SimError> {
        let me = self.record(id);
        let target = self
            .fleet
            .vehicles()
            .iter()
            .filter(|r| r.id != id && r.band == HIGHWAY_BAND && self.pilots[&r.id].intruder.is_none())
            .filter(|r| r.mode != Mode::Faulty && self.pilots[&r.id].present)
            .min_by(|a, b| {
                let da = (a.state[0] - me.state[0]).abs().max((a.state[2] - me.state[2]).abs());
                let db = (b.state[0] - me.state[0]).abs().max((b.state[2] - me.state[2]).abs());
                da.total_cmp(&db).then(a.id.cmp(&b.id))
            });
        Ok(match target {
            Some(r) => {
                let rel = relative_state(&r.state, &me.state);
                self.ev.safety.capture_control(&rel, self.cfg.safety.t_external)?
            }
            None => [0.0; 2],
        })
    }

    fn log(&mut self, t: f64, changes: Vec<ModeChange>) {
        self.events.extend(changes.into_iter().map(|c| ModeEvent {
            t,
            id: c.id,
            from: c.from,
            to: c.to,
        }));
    }

    fn apply(&mut self, t: f64, tr: Transition) -> Result<(), SimError> {
        let ch = self.fleet.apply(tr)?;
        for c in &ch {
            if let Some(p) = self.pilots.get_mut(&c.id) {
                p.lock = None;
                if c.to == Mode::Leader {
                    let r = self.fleet.get(c.id)?;
                    p.heading = heading(r.velocity(), p.heading);
                }
            }
        }
        self.log(t, ch);
        Ok(())
    }

    /// Mode automaton edges taken after the step's integration.
    fn transitions(&mut self, t: f64, decisions: &BTreeMap<VehicleId, Decision>) -> Result<(), SimError> {
        self.fleet.tick(self.cfg.dt, self.cfg.safety.t_internal);
        for (&id, d) in decisions {
            if d.controller == Controller::Safety {
                self.pilots.get_mut(&id).unwrap().last_safety = Some(t);
            }
        }
        // a follower that has to run its safety controller detaches
        for (&id, d) in decisions {
            if d.controller == Controller::Safety && self.record(id).mode == Mode::Follower {
                self.apply(t, Transition::Split(id))?;
            }
        }
        let mut moved = Vec::new();
        let escalating: BTreeMap<VehicleId, Vec<VehicleId>> = decisions
            .iter()
            .filter(|(_, d)| d.escalate)
            .map(|(&id, d)| {
                let mut b: Vec<&Check> = d.checks.iter().filter(|c| c.inside).collect();
                b.sort_by(|x, y| x.distance.total_cmp(&y.distance).then(x.id.cmp(&y.id)));
                (id, b.into_iter().map(|c| c.id).collect())
            })
            .collect();
        if !escalating.is_empty() {
            let bands: Vec<i32> = self.fleet.vehicles().iter().map(|r| r.band).collect();
            // platoons stay intact: only free vehicles are sent to other
            // bands on someone else's behalf, otherwise the requester moves
            let movable = |j: VehicleId| {
                self.pilots[&j].intruder.is_none() && self.fleet.get(j).map(|r| r.mode == Mode::Free).unwrap_or(false)
            };
            let moves = plan_escalation(&escalating, movable, &bands);
            for (v, band) in moves {
                moved.push(v);
                // a platoon member that leaves the band lines up behind its
                // old platoon when it returns
                let follow = match self.record(v).platoon {
                    Some(p) => Some(self.fleet.registry().get(p).unwrap().leader()).filter(|&l| l != v),
                    None => self.pilots[&v].follow,
                };
                self.apply(t, Transition::ChangeBand { vehicle: v, band })?;
                self.pilots.get_mut(&v).unwrap().follow = follow;
            }
        }
        let ids: Vec<VehicleId> = self.pilots.keys().copied().collect();
        for id in ids {
            let p = &self.pilots[&id];
            if !p.present || p.intruder.is_some() {
                continue;
            }
            let me = self.record(id).clone();
            if me.mode == Mode::Faulty {
                continue;
            }
            if me.band != HIGHWAY_BAND {
                if !moved.contains(&id) && self.clear_to_return(id)? {
                    self.apply(t, Transition::ChangeBand { vehicle: id, band: HIGHWAY_BAND })?;
                }
                continue;
            }
            // goals count only after a quiet spell, so a vehicle that just
            // dodged something does not snap straight back into line
            if !decisions.contains_key(&id) || p.last_safety.is_some_and(|ts| t - ts < SETTLE_TIME) {
                continue;
            }
            let Some(goal) = self.goal(id) else { continue };
            if !self.goal_reached(id, &goal) {
                continue;
            }
            match (goal, me.mode) {
                (Goal::Highway, Mode::Free) => self.apply(t, Transition::FormPlatoon(id))?,
                (Goal::Behind(j), mode) => {
                    let Some((pid, idx)) = self.fleet.registry().locate(j) else { continue };
                    if idx != self.fleet.registry().get(pid).unwrap().members.len() {
                        continue;
                    }
                    match mode {
                        Mode::Free => self.apply(t, Transition::JoinTail { vehicle: id, platoon: pid })?,
                        Mode::Leader => self.apply(t, Transition::Rejoin { leader: id, into: pid })?,
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// An escalated vehicle may come back once no pair it would form in the
    /// highway band is breached, from either side.
    fn clear_to_return(&self, id: VehicleId) -> Result<bool, SimError> {
        let me = self.record(id);
        for r in self.fleet.vehicles() {
            if r.id == id || r.band != HIGHWAY_BAND || !self.pilots[&r.id].present {
                continue;
            }
            for rel in [relative_state(&me.state, &r.state), relative_state(&r.state, &me.state)] {
                if self.ev.safety.membership(&rel, self.cfg.safety.t_internal)?.inside {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

/// Axis values closer than this to the larger one also count as binding.
const BINDING_TIE: f64 = 0.1;

/// Safety control on the axes that carry the pair's separation, the
/// liveness control on the other one.
fn binding_axes(safety_u: [f64; 2], axis_values: [f64; 2], live_u: [f64; 2]) -> [f64; 2] {
    let top = axis_values[0].max(axis_values[1]);
    let mut u = live_u;
    for k in 0..2 {
        if axis_values[k] >= top - BINDING_TIE {
            u[k] = safety_u[k];
        }
    }
    u
}

/// Runs a scenario to completion.
pub fn run(config: &ScenarioConfig, evaluators: &Evaluators) -> Result<Trace, SimError> {
    config.validate()?;
    evaluators.check(config)?;
    let highway = config.highway_path()?;
    let entry_dir = config.entry_direction()?;
    let mut records: Vec<VehicleRecord> = config.vehicles.iter().map(|v| VehicleRecord::free(v.id, v.state)).collect();
    let mut pilots = BTreeMap::new();
    for v in &config.vehicles {
        pilots.insert(
            v.id,
            Pilot {
                release: v.release,
                follow: v.follow,
                lock: None,
                heading: heading([v.state[1], v.state[3]], entry_dir),
                intruder: None,
                present: true,
                last_safety: None,
            },
        );
    }
    let mut columns: Vec<VehicleId> = config.vehicles.iter().map(|v| v.id).collect();
    for e in &config.events {
        if let Event::Intruder { id, state, behavior, .. } = e {
            records.push(VehicleRecord::free(*id, *state));
            columns.push(*id);
            pilots.insert(
                *id,
                Pilot {
                    release: 0.0,
                    follow: None,
                    lock: None,
                    heading: entry_dir,
                    intruder: Some(*behavior),
                    present: false,
                    last_safety: None,
                },
            );
        }
    }
    columns.sort_unstable();
    let mut fleet = Fleet::new(records, PlatoonRegistry::new(config.spacing, highway.clone()));
    for p in &config.platoons {
        fleet = fleet.with_platoon(p)?;
    }
    let mut engine = Engine {
        cfg: config,
        ev: evaluators,
        reverse: highway.reversed(),
        highway,
        highway_target: config.highway_target()?,
        join_target: config.join_target()?,
        fleet,
        pilots,
        events: Vec::new(),
    };
    let mut pending: Vec<&Event> = config.events.iter().collect();
    pending.sort_by(|a, b| a.time().total_cmp(&b.time()));
    let mut pending = pending.into_iter().peekable();
    let steps = (config.duration / config.dt).round() as usize;
    let mut rows = Vec::with_capacity(steps * columns.len());
    let mut restructures = Vec::new();
    for k in 0..steps {
        let t = k as f64 * config.dt;
        while let Some(e) = pending.next_if(|e| e.time() <= t + 1e-9) {
            match e {
                Event::Fault { vehicle, .. } => {
                    engine.apply(t, Transition::Fault(*vehicle))?;
                    let members = engine.fleet.registry().platoons().map(|p| p.members.clone()).collect();
                    restructures.push((t, members));
                }
                Event::Intruder { id, .. } => engine.pilots.get_mut(id).unwrap().present = true,
            }
        }
        let externals = engine.externals();
        let ids: Vec<VehicleId> = engine.pilots.iter().filter(|(_, p)| p.present).map(|(&id, _)| id).collect();
        let mut decisions = BTreeMap::new();
        for &id in &ids {
            let d = engine.decide(id, t, &externals)?;
            decisions.insert(id, d);
        }
        for (&id, d) in &decisions {
            let r = engine.record(id);
            let mut vs = vec![None; columns.len()];
            for c in &d.checks {
                let k = columns.binary_search(&c.id).expect("checked ids are columns");
                vs[k] = Some(c.value);
            }
            rows.push(TraceRow {
                t,
                id,
                mode: r.mode,
                platoon: r.platoon,
                index: r.index,
                band: r.band,
                p: r.position(),
                v: r.velocity(),
                u: d.u,
                breaches: d.checks.iter().filter(|c| c.inside).count(),
                controller: d.controller,
                vs,
            });
        }
        for (&id, d) in &decisions {
            let r = engine.fleet.get_mut(id)?;
            r.state[1] += d.u[0] * config.dt;
            r.state[3] += d.u[1] * config.dt;
            r.state[0] += r.state[1] * config.dt;
            r.state[2] += r.state[3] * config.dt;
            r.last_accel = d.u;
            if r.state.iter().any(|x| !x.is_finite()) {
                return Err(SimError::NonFinite { id, t });
            }
        }
        for (&id, _) in decisions.iter().filter(|(_, d)| d.controller != Controller::Idle) {
            let r = engine.fleet.get(id)?;
            if r.mode == Mode::Leader {
                let h = heading(r.velocity(), engine.pilots[&id].heading);
                engine.pilots.get_mut(&id).unwrap().heading = h;
            }
        }
        engine.transitions(t + config.dt, &decisions)?;
        engine.fleet.registry().check(engine.fleet.vehicles())?;
    }
    Ok(Trace {
        columns,
        rows,
        events: engine.events,
        restructures,
    })
}

/// Final-quarter formation quality of the largest platoon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Formation {
    /// Smallest size of the largest platoon over the window.
    pub min_size: usize,
    /// Worst |speed along the highway − v̄| / v̄.
    pub speed_error: f64,
    /// Worst |gap − b| / b between consecutive members.
    pub gap_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub scenario: String,
    /// Smallest max(|Δp_x|, |Δp_y|) over time and same-band pairs.
    pub min_separation: f64,
    /// Onsets of same-band pairs within `d` on both axes.
    pub collisions: usize,
    /// Largest number of simultaneous breaches of any vehicle.
    pub max_breaches: usize,
    /// Per vehicle, the largest simultaneous breach count.
    pub breaches: BTreeMap<String, usize>,
    /// Band changes other than faulty descents.
    pub altitude_changes: usize,
    /// `(vehicle, fault time, time it left the band)`.
    pub faulty_exits: Vec<(VehicleId, f64, Option<f64>)>,
    /// Followers that split off and later merged back: `(vehicle, split, rejoin)`.
    pub split_rejoins: Vec<(VehicleId, f64, f64)>,
    pub formation: Option<Formation>,
    pub timeline: Vec<ModeEvent>,
}

/// Summary statistics of a trace.
pub fn metrics(trace: &Trace, config: &ScenarioConfig) -> Result<Metrics, SimError> {
    if trace.rows.is_empty() {
        return Err(SimError::Config("empty trace".into()));
    }
    let d = config.safety.d;
    let steps = group_steps(&trace.rows);
    let mut min_sep = f64::INFINITY;
    let mut collisions = 0;
    let mut touching: BTreeMap<(VehicleId, VehicleId), bool> = BTreeMap::new();
    let mut breaches: BTreeMap<String, usize> = BTreeMap::new();
    let mut altitude_changes = 0;
    let mut last: BTreeMap<VehicleId, &TraceRow> = BTreeMap::new();
    let mut timeline = Vec::new();
    let mut fault_at: BTreeMap<VehicleId, (f64, Option<f64>)> = BTreeMap::new();
    for rows in &steps {
        for (a, ra) in rows.iter().enumerate() {
            for rb in &rows[a + 1..] {
                if ra.band != rb.band {
                    continue;
                }
                let sep = (ra.p[0] - rb.p[0]).abs().max((ra.p[1] - rb.p[1]).abs());
                min_sep = min_sep.min(sep);
                let now = sep <= d;
                let was = touching.insert((ra.id, rb.id), now).unwrap_or(false);
                if now && !was {
                    collisions += 1;
                }
            }
        }
        for r in rows {
            let e = breaches.entry(r.id.to_string()).or_insert(0);
            *e = (*e).max(r.breaches);
            if let Some(prev) = last.get(&r.id) {
                if prev.mode != r.mode {
                    timeline.push(ModeEvent {
                        t: r.t,
                        id: r.id,
                        from: prev.mode,
                        to: r.mode,
                    });
                }
                if prev.band != r.band && r.mode != Mode::Faulty {
                    altitude_changes += 1;
                }
            }
            if r.mode == Mode::Faulty {
                let entry = fault_at.entry(r.id).or_insert((r.t, None));
                if entry.1.is_none() && r.band != HIGHWAY_BAND {
                    entry.1 = Some(r.t);
                }
            }
            last.insert(r.id, r);
        }
    }
    // the run's own event log has exact fault times
    for e in &trace.events {
        if e.to == Mode::Faulty {
            if let Some(f) = fault_at.get_mut(&e.id) {
                f.0 = f.0.min(e.t);
            }
        }
    }
    let mut split_rejoins = Vec::new();
    let mut open: BTreeMap<VehicleId, f64> = BTreeMap::new();
    for e in &timeline {
        match (e.from, e.to) {
            (Mode::Follower, Mode::Leader) => {
                open.insert(e.id, e.t);
            }
            (Mode::Leader, Mode::Follower) => {
                if let Some(s) = open.remove(&e.id) {
                    split_rejoins.push((e.id, s, e.t));
                }
            }
            _ => {}
        }
    }
    Ok(Metrics {
        scenario: config.name.clone(),
        min_separation: min_sep,
        collisions,
        max_breaches: breaches.values().copied().max().unwrap_or(0),
        breaches,
        altitude_changes,
        faulty_exits: fault_at.into_iter().map(|(id, (a, b))| (id, a, b)).collect(),
        split_rejoins,
        formation: formation(&steps, config)?,
        timeline,
    })
}

fn group_steps(rows: &[TraceRow]) -> Vec<Vec<&TraceRow>> {
    let mut out: Vec<Vec<&TraceRow>> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(s) if s[0].t == r.t => s.push(r),
            _ => out.push(vec![r]),
        }
    }
    out
}

fn formation(steps: &[Vec<&TraceRow>], config: &ScenarioConfig) -> Result<Option<Formation>, SimError> {
    let h = config.highway_path()?;
    let (v, b) = (config.highway.speed, config.spacing);
    let start = steps.len() - steps.len() / 4;
    let mut out: Option<Formation> = None;
    for rows in &steps[start..] {
        let mut platoons: BTreeMap<PlatoonId, Vec<&TraceRow>> = BTreeMap::new();
        for r in rows {
            if let (Some(p), Some(_)) = (r.platoon, r.index) {
                platoons.entry(p).or_default().push(r);
            }
        }
        let Some(mut m) = platoons.into_values().max_by_key(|m| m.len()) else {
            return Ok(None);
        };
        m.sort_by_key(|r| r.index);
        let mut f = Formation {
            min_size: m.len(),
            speed_error: 0.0,
            gap_error: 0.0,
        };
        for (k, r) in m.iter().enumerate() {
            let dir = h.direction_at(h.project(r.p).arc);
            let along = r.v[0] * dir[0] + r.v[1] * dir[1];
            f.speed_error = f.speed_error.max((along - v).abs() / v);
            if k > 0 {
                let gap = (r.p[0] - m[k - 1].p[0]).hypot(r.p[1] - m[k - 1].p[1]);
                f.gap_error = f.gap_error.max((gap - b).abs() / b);
            }
        }
        out = Some(match out {
            None => f,
            Some(o) => Formation {
                min_size: o.min_size.min(f.min_size),
                speed_error: o.speed_error.max(f.speed_error),
                gap_error: o.gap_error.max(f.gap_error),
            },
        });
    }
    Ok(out)
}

/// Renders metrics as TOML.
pub fn summary_toml(m: &Metrics) -> String {
    toml::to_string(m).expect("metrics always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, id: VehicleId, p: [f64; 2], band: i32) -> TraceRow {
        TraceRow {
            t,
            id,
            mode: Mode::Free,
            platoon: None,
            index: None,
            band,
            p,
            v: [0.0; 2],
            u: [0.0; 2],
            breaches: 0,
            controller: Controller::Idle,
            vs: vec![],
        }
    }

    fn trace(rows: Vec<TraceRow>) -> Trace {
        Trace {
            columns: vec![],
            rows,
            events: vec![],
            restructures: vec![],
        }
    }

    #[test]
    fn collision_definition() {
        let c = ScenarioConfig::base("t");
        let m = metrics(&trace(vec![row(0.0, 1, [0.0, 0.0], 0), row(0.0, 2, [1.5, 1.5], 0)]), &c).unwrap();
        assert_eq!(m.collisions, 1);
        let m = metrics(&trace(vec![row(0.0, 1, [0.0, 0.0], 0), row(0.0, 2, [1.5, 10.0], 0)]), &c).unwrap();
        assert_eq!((m.collisions, m.min_separation), (0, 10.0));
        let m = metrics(&trace(vec![row(0.0, 1, [0.0, 0.0], 0), row(0.0, 2, [0.0, 0.0], 1)]), &c).unwrap();
        assert_eq!(m.collisions, 0);
    }

    #[test]
    fn builtin_scenarios_are_valid_and_round_trip() {
        for name in BUILTIN_SCENARIOS {
            let c = builtin_scenario(name).unwrap();
            c.validate().unwrap();
            assert_eq!(ScenarioConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        let c = scenario_form_platoon();
        let d = c.entry_direction().unwrap();
        assert!((d[0] - 2.0 / 5f64.sqrt()).abs() < 1e-12 && (d[1] - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        let t = c.highway_target().unwrap().center;
        assert!((t[1] - 3.0 * 2.0 / 5f64.sqrt()).abs() < 1e-12 && (t[3] - 3.0 / 5f64.sqrt()).abs() < 1e-12);
        assert_eq!((t[0], t[2]), (4.0, 2.0));
        assert_eq!(c.vehicles.len(), 5);
        assert_eq!(scenario_intruder().vehicles.len(), 4);
        match &scenario_intruder().events[0] {
            Event::Intruder { state, .. } => assert_eq!((state[0], state[2]), (40.0, 30.0)),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = scenario_malfunction();
        c.dt = 0.0;
        assert!(c.validate().is_err());
        let mut c = scenario_malfunction();
        c.events.push(Event::Fault { time: 1.0, vehicle: 42 });
        assert!(c.validate().is_err());
        let mut c = scenario_malfunction();
        c.safety.t_external = 1.0;
        assert!(c.validate().is_err());
        assert!(ScenarioConfig::from_toml("name = 1").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut r = row(0.0, 1, [1.25, -3.0], 0);
        r.vs = vec![Some(0.5), None];
        let t = Trace {
            columns: vec![1, 2],
            rows: vec![r],
            events: vec![],
            restructures: vec![],
        };
        let text = t.to_csv_string();
        assert!(text.starts_with("t,id,mode,platoon,index,band,px,py,vx,vy,ux,uy,breaches,controller,vs_1,vs_2\n"));
        let back = Trace::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.rows, t.rows);
        assert_eq!(back.columns, t.columns);
    }

    fn coarse(mut c: ScenarioConfig) -> ScenarioConfig {
        c.evaluators.highway.counts = [81, 36];
        c.evaluators.join.counts = [81, 36];
        c.evaluators.safety.counts = [41, 21, 13];
        c.evaluators.max_slabs = 60;
        c
    }

    #[test]
    fn lone_vehicle_merges_and_leads() {
        let mut c = coarse(ScenarioConfig::base("lone"));
        c.duration = 20.0;
        c.vehicles.push(VehicleConfig {
            id: 1,
            state: [-10.0, 0.0, -6.0, 0.0],
            release: 0.0,
            follow: None,
        });
        let ev = Evaluators::build(&c).unwrap();
        let tr = run(&c, &ev).unwrap();
        let m = metrics(&tr, &c).unwrap();
        assert_eq!(m.timeline.len(), 1, "{:?}", m.timeline);
        assert_eq!((m.timeline[0].from, m.timeline[0].to), (Mode::Free, Mode::Leader));
        // deterministic, and mismatched evaluators are refused
        assert_eq!(run(&c, &ev).unwrap().to_csv_string(), tr.to_csv_string());
        let mut other = c.clone();
        other.safety.d = 2.5;
        assert!(matches!(run(&other, &ev), Err(SimError::Mismatch { evaluator: "safety", .. })));
    }
}
