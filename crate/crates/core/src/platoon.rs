//! Hybrid modes, the platoon registry, and the per-vehicle control laws that
//! do not need a reachable set: follower tracking, highway travel, the
//! safety-check topology and safety/liveness arbitration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VehicleId = u32;
pub type PlatoonId = u32;

/// Below this leader speed the platoon heading is held instead of recomputed.
pub const MIN_LEADER_SPEED: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum PlatoonError {
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error("unknown platoon {0}")]
    UnknownPlatoon(PlatoonId),
    #[error("vehicle {id} cannot {action} while {mode:?}: {reason}")]
    Transition {
        id: VehicleId,
        action: &'static str,
        mode: Mode,
        reason: String,
    },
    #[error("invalid highway: {0}")]
    Highway(String),
    #[error("registry invariant violated: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Free,
    Leader,
    Follower,
    Faulty,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Free => "free",
            Self::Leader => "leader",
            Self::Follower => "follower",
            Self::Faulty => "faulty",
        }
    }
}

/// Band 0 is the highway altitude range; faulty vehicles descend below it,
/// escalations climb above it.
pub const HIGHWAY_BAND: i32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRecord {
    pub id: VehicleId,
    /// `(p_x, v_x, p_y, v_y)`.
    pub state: [f64; 4],
    pub mode: Mode,
    pub platoon: Option<PlatoonId>,
    /// 1-based position in the platoon; 1 is the leader.
    pub index: Option<usize>,
    pub band: i32,
    pub last_accel: [f64; 2],
    /// Seconds since the fault event (Faulty only).
    pub fault_clock: Option<f64>,
}

impl VehicleRecord {
    pub fn free(id: VehicleId, state: [f64; 4]) -> Self {
        Self {
            id,
            state,
            mode: Mode::Free,
            platoon: None,
            index: None,
            band: HIGHWAY_BAND,
            last_accel: [0.0; 2],
            fault_clock: None,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.state[0], self.state[2]]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.state[1], self.state[3]]
    }
}

/// Feedback gains of the tracking laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub kv: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self { kp: 2.0, kv: 3.0 }
    }
}

/// Where a point projects onto a highway.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length from the first vertex; negative or beyond the end when the
    /// point lies past an end segment.
    pub arc: f64,
    pub point: [f64; 2],
    pub direction: [f64; 2],
}

/// A polyline highway travelled at constant speed. The end segments are
/// treated as extending indefinitely.
#[derive(Debug, Clone, PartialEq)]
pub struct HighwayPath {
    vertices: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
    speed: f64,
}

impl HighwayPath {
    pub fn new(vertices: Vec<[f64; 2]>, speed: f64) -> Result<Self, PlatoonError> {
        if vertices.len() < 2 {
            return Err(PlatoonError::Highway("need at least two vertices".into()));
        }
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(PlatoonError::Highway(format!("speed must be positive, got {speed}")));
        }
        let mut cumulative = vec![0.0];
        for w in vertices.windows(2) {
            let len = dist(w[0], w[1]);
            if !(len > 1e-9) || !len.is_finite() {
                return Err(PlatoonError::Highway("consecutive vertices must be distinct".into()));
            }
            cumulative.push(cumulative.last().unwrap() + len);
        }
        Ok(Self {
            vertices,
            cumulative,
            speed,
        })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Same path travelled end to start.
    pub fn reversed(&self) -> Self {
        let mut v = self.vertices.clone();
        v.reverse();
        Self::new(v, self.speed).expect("reversal keeps a valid path")
    }

    fn segment_of(&self, arc: f64) -> usize {
        let n = self.vertices.len() - 1;
        match self.cumulative[1..n].iter().position(|&c| arc < c) {
            Some(k) => k,
            None => n - 1,
        }
    }

    fn segment_dir(&self, k: usize) -> [f64; 2] {
        let (a, b) = (self.vertices[k], self.vertices[k + 1]);
        let len = self.cumulative[k + 1] - self.cumulative[k];
        [(b[0] - a[0]) / len, (b[1] - a[1]) / len]
    }

    pub fn direction_at(&self, arc: f64) -> [f64; 2] {
        self.segment_dir(self.segment_of(arc))
    }

    pub fn point_at(&self, arc: f64) -> [f64; 2] {
        let k = self.segment_of(arc);
        let d = self.segment_dir(k);
        let a = self.vertices[k];
        let t = arc - self.cumulative[k];
        [a[0] + t * d[0], a[1] + t * d[1]]
    }

    /// Point at normalized parameter `s ∈ [0, 1]`.
    pub fn point_at_param(&self, s: f64) -> [f64; 2] {
        self.point_at(s.clamp(0.0, 1.0) * self.length())
    }

    pub fn project(&self, p: [f64; 2]) -> Projection {
        let n = self.vertices.len() - 1;
        let mut best: Option<(f64, Projection)> = None;
        for k in 0..n {
            let d = self.segment_dir(k);
            let a = self.vertices[k];
            let len = self.cumulative[k + 1] - self.cumulative[k];
            let mut t = (p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1];
            if k > 0 {
                t = t.max(0.0);
            }
            if k + 1 < n {
                t = t.min(len);
            }
            let q = [a[0] + t * d[0], a[1] + t * d[1]];
            let e = dist(p, q);
            if best.as_ref().is_none_or(|(b, _)| e < *b - 1e-12) {
                best = Some((
                    e,
                    Projection {
                        arc: self.cumulative[k] + t,
                        point: q,
                        direction: d,
                    },
                ));
            }
        }
        best.unwrap().1
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn saturate(u: [f64; 2], u_max: f64) -> [f64; 2] {
    [u[0].clamp(-u_max, u_max), u[1].clamp(-u_max, u_max)]
}

/// Unit heading of a leader, falling back to `hold` when it is nearly stopped.
pub fn heading(leader_velocity: [f64; 2], hold: [f64; 2]) -> [f64; 2] {
    let s = leader_velocity[0].hypot(leader_velocity[1]);
    if s > MIN_LEADER_SPEED {
        [leader_velocity[0] / s, leader_velocity[1] / s]
    } else {
        hold
    }
}

/// Nominal position of member `i` relative to the leader: `(i−1)·b` behind
/// it along `heading`.
pub fn nominal_offset(i: usize, b: f64, heading: [f64; 2]) -> [f64; 2] {
    let k = i.saturating_sub(1) as f64 * b;
    [-k * heading[0], -k * heading[1]]
}

/// Feedback on the nominal slot plus the leader's acceleration as feedforward.
pub fn follower_control(
    me: &[f64; 4],
    leader: &[f64; 4],
    leader_accel: [f64; 2],
    offset: [f64; 2],
    gains: Gains,
    u_max: f64,
) -> [f64; 2] {
    let ux = gains.kp * (leader[0] + offset[0] - me[0]) + gains.kv * (leader[1] - me[1]) + leader_accel[0];
    let uy = gains.kp * (leader[2] + offset[1] - me[2]) + gains.kv * (leader[3] - me[3]) + leader_accel[1];
    saturate([ux, uy], u_max)
}

/// Tracks the highway at its speed. The reference point is the projection
/// onto the path; the reference velocity points along the path `lookahead`
/// metres further on.
pub fn leader_highway_control(me: &[f64; 4], highway: &HighwayPath, lookahead: f64, gains: Gains, u_max: f64) -> [f64; 2] {
    let proj = highway.project([me[0], me[2]]);
    let ahead = proj.arc + lookahead;
    let target = highway.point_at(ahead);
    let dir = highway.direction_at(ahead);
    let v = highway.speed();
    let ex = target[0] - lookahead * dir[0] - me[0];
    let ey = target[1] - lookahead * dir[1] - me[2];
    let ux = gains.kp * ex + gains.kv * (v * dir[0] - me[1]);
    let uy = gains.kp * ey + gains.kv * (v * dir[1] - me[3]);
    saturate([ux, uy], u_max)
}

/// Straight-line approach toward a target state: the tracking law with the
/// position error clipped to `max_error` metres, which bounds the approach
/// speed to about `kp/kv · max_error` above the target speed.
pub fn approach_control(me: &[f64; 4], target: &[f64; 4], max_error: f64, gains: Gains, u_max: f64) -> [f64; 2] {
    let mut e = [target[0] - me[0], target[2] - me[2]];
    let n = e[0].hypot(e[1]);
    if n > max_error {
        e = [e[0] * max_error / n, e[1] * max_error / n];
    }
    let ux = gains.kp * e[0] + gains.kv * (target[1] - me[1]);
    let uy = gains.kp * e[1] + gains.kv * (target[3] - me[3]);
    saturate([ux, uy], u_max)
}

/// One platoon: members in single-file order, leader first.
#[derive(Debug, Clone, PartialEq)]
pub struct Platoon {
    pub id: PlatoonId,
    pub members: Vec<VehicleId>,
    /// Platoon this one split from; it rejoins that platoon's tail.
    pub origin: Option<PlatoonId>,
}

impl Platoon {
    pub fn leader(&self) -> VehicleId {
        self.members[0]
    }

    pub fn tail(&self) -> VehicleId {
        *self.members.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct PlatoonRegistry {
    platoons: BTreeMap<PlatoonId, Platoon>,
    spacing: f64,
    highway: HighwayPath,
    next_id: PlatoonId,
}

impl PlatoonRegistry {
    pub fn new(spacing: f64, highway: HighwayPath) -> Self {
        Self {
            platoons: BTreeMap::new(),
            spacing,
            highway,
            next_id: 1,
        }
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn highway(&self) -> &HighwayPath {
        &self.highway
    }

    pub fn platoons(&self) -> impl Iterator<Item = &Platoon> {
        self.platoons.values()
    }

    pub fn get(&self, id: PlatoonId) -> Option<&Platoon> {
        self.platoons.get(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.platoons.is_empty()
    }

    /// `(platoon, 1-based index)` of a member.
    pub fn locate(&self, v: VehicleId) -> Option<(PlatoonId, usize)> {
        self.platoons
            .values()
            .find_map(|p| p.members.iter().position(|&m| m == v).map(|k| (p.id, k + 1)))
    }

    /// Platoon that `id` split from, kept current across merges.
    pub fn resolve_origin(&self, id: PlatoonId) -> Option<PlatoonId> {
        self.platoons.get(&id).and_then(|p| p.origin)
    }

    fn create(&mut self, members: Vec<VehicleId>, origin: Option<PlatoonId>) -> PlatoonId {
        let id = self.next_id;
        self.next_id += 1;
        self.platoons.insert(id, Platoon { id, members, origin });
        id
    }

    /// Drops a member; trailing members move up one index. Empty platoons
    /// are deleted and anything that pointed at them inherits their origin.
    fn remove(&mut self, v: VehicleId) -> Option<PlatoonId> {
        let (pid, idx) = self.locate(v)?;
        let p = self.platoons.get_mut(&pid).unwrap();
        p.members.remove(idx - 1);
        if p.members.is_empty() {
            let origin = p.origin;
            self.platoons.remove(&pid);
            self.redirect(pid, origin);
        }
        Some(pid)
    }

    fn redirect(&mut self, from: PlatoonId, to: Option<PlatoonId>) {
        for p in self.platoons.values_mut() {
            if p.origin == Some(from) {
                p.origin = to.filter(|&t| t != p.id);
            }
        }
    }

    /// Checks the single-file invariant against the vehicle records.
    pub fn check(&self, vehicles: &[VehicleRecord]) -> Result<(), PlatoonError> {
        let mut seen = BTreeMap::new();
        for p in self.platoons.values() {
            if p.members.is_empty() {
                return Err(PlatoonError::Inconsistent(format!("platoon {} is empty", p.id)));
            }
            for (k, &m) in p.members.iter().enumerate() {
                if seen.insert(m, p.id).is_some() {
                    return Err(PlatoonError::Inconsistent(format!("vehicle {m} is in two platoons")));
                }
                let r = vehicles
                    .iter()
                    .find(|r| r.id == m)
                    .ok_or(PlatoonError::UnknownVehicle(m))?;
                let want = if k == 0 { Mode::Leader } else { Mode::Follower };
                if r.mode != want || r.platoon != Some(p.id) || r.index != Some(k + 1) {
                    return Err(PlatoonError::Inconsistent(format!(
                        "vehicle {m} record ({:?}, {:?}, {:?}) disagrees with slot {} of platoon {}",
                        r.mode,
                        r.platoon,
                        r.index,
                        k + 1,
                        p.id
                    )));
                }
            }
        }
        for r in vehicles {
            let in_platoon = seen.contains_key(&r.id);
            let platoon_mode = matches!(r.mode, Mode::Leader | Mode::Follower);
            if in_platoon != platoon_mode || (!in_platoon && (r.platoon.is_some() || r.index.is_some())) {
                return Err(PlatoonError::Inconsistent(format!(
                    "vehicle {} is {:?} but platoon membership is {:?}",
                    r.id, r.mode, r.platoon
                )));
            }
        }
        Ok(())
    }
}

/// A requested mode-automaton edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transition {
    /// Free → Leader of a new platoon (reached the highway target).
    FormPlatoon(VehicleId),
    /// Free → Follower at the tail of `platoon`.
    JoinTail { vehicle: VehicleId, platoon: PlatoonId },
    /// Follower → Leader of a platoon made of itself and everyone behind it.
    Split(VehicleId),
    /// Leader → Follower: its whole platoon is appended to `into`.
    Rejoin { leader: VehicleId, into: PlatoonId },
    /// Leader → Free; the next member, if any, takes over.
    LeaveHighway(VehicleId),
    /// Any → Faulty; removed from its platoon, clock started.
    Fault(VehicleId),
    /// Leaves the current band for `band`; platoon members drop out first.
    ChangeBand { vehicle: VehicleId, band: i32 },
}

/// A recorded mode change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeChange {
    pub id: VehicleId,
    pub from: Mode,
    pub to: Mode,
}

/// Vehicle records plus the registry; the only place modes change.
#[derive(Debug, Clone)]
pub struct Fleet {
    vehicles: Vec<VehicleRecord>,
    registry: PlatoonRegistry,
}

impl Fleet {
    /// Records are kept sorted by id.
    pub fn new(mut vehicles: Vec<VehicleRecord>, registry: PlatoonRegistry) -> Self {
        vehicles.sort_by_key(|r| r.id);
        Self { vehicles, registry }
    }

    /// Seeds a platoon from Free vehicles, leader first.
    pub fn with_platoon(mut self, members: &[VehicleId]) -> Result<Self, PlatoonError> {
        for &m in members {
            let r = self.get(m)?;
            if r.mode != Mode::Free || r.platoon.is_some() {
                return Err(self.refuse(m, "seed a platoon", "vehicle is already assigned"));
            }
        }
        self.registry.create(members.to_vec(), None);
        self.sync();
        Ok(self)
    }

    pub fn vehicles(&self) -> &[VehicleRecord] {
        &self.vehicles
    }

    pub fn registry(&self) -> &PlatoonRegistry {
        &self.registry
    }

    pub fn get(&self, id: VehicleId) -> Result<&VehicleRecord, PlatoonError> {
        self.vehicles
            .binary_search_by_key(&id, |r| r.id)
            .map(|k| &self.vehicles[k])
            .map_err(|_| PlatoonError::UnknownVehicle(id))
    }

    pub fn get_mut(&mut self, id: VehicleId) -> Result<&mut VehicleRecord, PlatoonError> {
        match self.vehicles.binary_search_by_key(&id, |r| r.id) {
            Ok(k) => Ok(&mut self.vehicles[k]),
            Err(_) => Err(PlatoonError::UnknownVehicle(id)),
        }
    }

    /// Adds a vehicle (e.g. an intruder) as Free.
    pub fn insert(&mut self, record: VehicleRecord) -> Result<(), PlatoonError> {
        match self.vehicles.binary_search_by_key(&record.id, |r| r.id) {
            Ok(_) => Err(PlatoonError::Inconsistent(format!("vehicle {} already exists", record.id))),
            Err(k) => {
                self.vehicles.insert(k, record);
                Ok(())
            }
        }
    }

    fn refuse(&self, id: VehicleId, action: &'static str, reason: &str) -> PlatoonError {
        PlatoonError::Transition {
            id,
            action,
            mode: self.get(id).map(|r| r.mode).unwrap_or(Mode::Free),
            reason: reason.into(),
        }
    }

    /// Rewrites mode/platoon/index of every record from the registry.
    fn sync(&mut self) {
        let slots: BTreeMap<VehicleId, (PlatoonId, usize)> = self
            .registry
            .platoons()
            .flat_map(|p| p.members.iter().enumerate().map(move |(k, &m)| (m, (p.id, k + 1))))
            .collect();
        for r in &mut self.vehicles {
            match slots.get(&r.id) {
                Some(&(pid, idx)) => {
                    r.platoon = Some(pid);
                    r.index = Some(idx);
                    r.mode = if idx == 1 { Mode::Leader } else { Mode::Follower };
                }
                None => {
                    r.platoon = None;
                    r.index = None;
                    if matches!(r.mode, Mode::Leader | Mode::Follower) {
                        r.mode = Mode::Free;
                    }
                }
            }
        }
    }

    /// Applies one automaton edge and returns every mode change it caused.
    pub fn apply(&mut self, t: Transition) -> Result<Vec<ModeChange>, PlatoonError> {
        let before: Vec<(VehicleId, Mode)> = self.vehicles.iter().map(|r| (r.id, r.mode)).collect();
        match t {
            Transition::FormPlatoon(v) => {
                let r = self.get(v)?;
                if r.mode != Mode::Free {
                    return Err(self.refuse(v, "form a platoon", "only free vehicles can"));
                }
                if r.band != HIGHWAY_BAND {
                    return Err(self.refuse(v, "form a platoon", "not in the highway band"));
                }
                self.registry.create(vec![v], None);
            }
            Transition::JoinTail { vehicle, platoon } => {
                let r = self.get(vehicle)?;
                if r.mode != Mode::Free || r.band != HIGHWAY_BAND {
                    return Err(self.refuse(vehicle, "join a platoon", "only free vehicles in the highway band can"));
                }
                self.registry
                    .platoons
                    .get_mut(&platoon)
                    .ok_or(PlatoonError::UnknownPlatoon(platoon))?
                    .members
                    .push(vehicle);
            }
            Transition::Split(v) => {
                let r = self.get(v)?;
                if r.mode != Mode::Follower {
                    return Err(self.refuse(v, "split", "only followers split"));
                }
                let (pid, idx) = self.registry.locate(v).ok_or(PlatoonError::UnknownVehicle(v))?;
                let tail = self.registry.platoons.get_mut(&pid).unwrap().members.split_off(idx - 1);
                self.registry.create(tail, Some(pid));
            }
            Transition::Rejoin { leader, into } => {
                let r = self.get(leader)?;
                if r.mode != Mode::Leader {
                    return Err(self.refuse(leader, "rejoin", "only leaders merge their platoon"));
                }
                let from = r.platoon.unwrap();
                if from == into {
                    return Err(self.refuse(leader, "rejoin", "cannot merge a platoon into itself"));
                }
                if !self.registry.platoons.contains_key(&into) {
                    return Err(PlatoonError::UnknownPlatoon(into));
                }
                let moved = self.registry.platoons.remove(&from).unwrap();
                self.registry.platoons.get_mut(&into).unwrap().members.extend(moved.members);
                self.registry.redirect(from, Some(into));
            }
            Transition::LeaveHighway(v) => {
                if self.get(v)?.mode != Mode::Leader {
                    return Err(self.refuse(v, "leave the highway", "only leaders leave"));
                }
                self.registry.remove(v);
            }
            Transition::Fault(v) => {
                if self.get(v)?.mode == Mode::Faulty {
                    return Err(self.refuse(v, "fault", "already faulty"));
                }
                self.registry.remove(v);
                let r = self.get_mut(v)?;
                r.mode = Mode::Faulty;
                r.fault_clock = Some(0.0);
            }
            Transition::ChangeBand { vehicle, band } => {
                let r = self.get(vehicle)?;
                if r.band == band {
                    return Err(self.refuse(vehicle, "change band", "already in that band"));
                }
                self.registry.remove(vehicle);
                self.get_mut(vehicle)?.band = band;
            }
        }
        self.sync();
        Ok(self
            .vehicles
            .iter()
            .zip(before)
            .filter(|(r, (_, m))| r.mode != *m)
            .map(|(r, (_, m))| ModeChange {
                id: r.id,
                from: m,
                to: r.mode,
            })
            .collect())
    }

    /// Advances fault clocks; a faulty vehicle still in the highway band
    /// descends once its clock reaches `t_internal`. Returns who descended.
    pub fn tick(&mut self, dt: f64, t_internal: f64) -> Vec<VehicleId> {
        let mut out = Vec::new();
        for r in &mut self.vehicles {
            if let Some(c) = r.fault_clock.as_mut() {
                *c += dt;
                if *c >= t_internal - 1e-9 && r.band == HIGHWAY_BAND {
                    r.band = HIGHWAY_BAND - 1;
                    out.push(r.id);
                }
            }
        }
        out
    }
}

/// Q(i): platoon neighbours (front and back) plus every external vehicle.
pub fn safety_check_set(me: VehicleId, registry: &PlatoonRegistry, externals: &[VehicleId]) -> Vec<VehicleId> {
    let mut out = Vec::new();
    if let Some((pid, idx)) = registry.locate(me) {
        let m = &registry.get(pid).unwrap().members;
        if idx >= 2 {
            out.push(m[idx - 2]);
        }
        if idx < m.len() {
            out.push(m[idx]);
        }
    }
    for &e in externals {
        if e != me && !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

/// Outcome of one safety check against vehicle `id`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Check {
    pub id: VehicleId,
    pub value: f64,
    pub inside: bool,
    /// Chebyshev distance between the two positions.
    pub distance: f64,
    pub safety_u: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arbitration {
    pub u: [f64; 2],
    pub breaches: usize,
    /// Breacher whose safety control is applied.
    pub avoiding: Option<VehicleId>,
    /// Two or more simultaneous breaches: altitude escalation is needed.
    pub escalate: bool,
}

/// Liveness control when nothing is breached, otherwise the safety control
/// against the nearest breacher.
pub fn arbitrate_control(liveness_u: [f64; 2], checks: &[Check]) -> Arbitration {
    let nearest = checks
        .iter()
        .filter(|c| c.inside)
        .min_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    let breaches = checks.iter().filter(|c| c.inside).count();
    match nearest {
        None => Arbitration {
            u: liveness_u,
            breaches: 0,
            avoiding: None,
            escalate: false,
        },
        Some(c) => Arbitration {
            u: c.safety_u,
            breaches,
            avoiding: Some(c.id),
            escalate: breaches >= 2,
        },
    }
}

/// Altitude assignment for multiple simultaneous breaches. `breaches` maps
/// a vehicle to its breachers, nearest first. A vehicle with K breaches
/// keeps avoiding the nearest one and the other K−1 leave the band, each to
/// its own fresh band. If any of those breachers cannot be sent away
/// (`movable` is false), the requesting vehicle leaves instead. Returns `(vehicle, band)` moves.
pub fn plan_escalation(
    breaches: &BTreeMap<VehicleId, Vec<VehicleId>>,
    movable: impl Fn(VehicleId) -> bool,
    occupied: &[i32],
) -> Vec<(VehicleId, i32)> {
    let mut moved: BTreeMap<VehicleId, i32> = BTreeMap::new();
    let mut next = occupied.iter().copied().max().unwrap_or(HIGHWAY_BAND).max(HIGHWAY_BAND) + 1;
    for (&me, list) in breaches {
        if moved.contains_key(&me) {
            continue;
        }
        let live: Vec<VehicleId> = list.iter().copied().filter(|j| !moved.contains_key(j)).collect();
        if live.len() < 2 {
            continue;
        }
        if live[1..].iter().all(|&j| movable(j)) {
            for &j in &live[1..] {
                moved.insert(j, next);
                next += 1;
            }
        } else {
            moved.insert(me, next);
            next += 1;
        }
    }
    moved.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dir() -> [f64; 2] {
        [2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt()]
    }

    fn highway() -> HighwayPath {
        HighwayPath::new(vec![[-40.0, -20.0], [400.0, 200.0]], 3.0).unwrap()
    }

    fn fleet(n: u32) -> Fleet {
        let recs = (1..=n).map(|i| VehicleRecord::free(i, [0.0; 4])).collect();
        Fleet::new(recs, PlatoonRegistry::new(4.0, highway()))
            .with_platoon(&(1..=n).collect::<Vec<_>>())
            .unwrap()
    }

    fn members(f: &Fleet, v: VehicleId) -> Vec<VehicleId> {
        let (pid, _) = f.registry().locate(v).unwrap();
        f.registry().get(pid).unwrap().members.clone()
    }

    #[test]
    fn offsets() {
        assert_eq!(nominal_offset(1, 4.0, [1.0, 0.0]), [0.0, 0.0]);
        assert_eq!(nominal_offset(3, 4.0, heading([3.0, 0.0], [0.0, 1.0])), [-8.0, 0.0]);
        let h = heading([2.0, 1.0], [1.0, 0.0]);
        let o = nominal_offset(2, 4.0, h);
        assert!((o[0] + 4.0 * 0.894_427_191).abs() < 1e-8 && (o[1] + 4.0 * 0.447_213_595).abs() < 1e-8);
        // a stopped leader keeps the held heading
        assert_eq!(heading([0.0, 1e-5], [0.0, -1.0]), [0.0, -1.0]);
    }

    #[test]
    fn follower_law() {
        let g = Gains { kp: 2.0, kv: 1.0 };
        let leader = [10.0, 3.0, 5.0, 0.0];
        let off = [-4.0, 0.0];
        let at_slot = [6.0, 3.0, 5.0, 0.0];
        assert_eq!(follower_control(&at_slot, &leader, [0.0; 2], off, g, 3.0), [0.0, 0.0]);
        let behind = [5.0, 3.0, 5.0, 0.0];
        assert_eq!(follower_control(&behind, &leader, [0.0; 2], off, g, 3.0), [2.0, 0.0]);
        let far = [1.0, 3.0, 5.0, 0.0];
        assert_eq!(follower_control(&far, &leader, [0.0; 2], off, g, 3.0), [3.0, 0.0]);
    }

    #[test]
    fn highway_law() {
        let h = highway();
        let g = Gains::default();
        let d = dir();
        let on = [4.0, 3.0 * d[0], 2.0, 3.0 * d[1]];
        let u = leader_highway_control(&on, &h, 2.0, g, 3.0);
        assert!(u[0].hypot(u[1]) < 0.05 * 3.0);
        let still = [4.0, 0.0, 2.0, 0.0];
        let u = leader_highway_control(&still, &h, 2.0, g, 3.0);
        assert!(u[0] * d[0] + u[1] * d[1] > 0.0);
        // one metre to the left of the path, moving with it
        let n = [-d[1], d[0]];
        let off = [4.0 + n[0], 3.0 * d[0], 2.0 + n[1], 3.0 * d[1]];
        let u = leader_highway_control(&off, &h, 2.0, g, 3.0);
        assert!(u[0] * n[0] + u[1] * n[1] < 0.0);
    }

    #[test]
    fn highway_geometry() {
        let h = HighwayPath::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]], 3.0).unwrap();
        assert_eq!(h.length(), 20.0);
        assert_eq!(h.point_at(15.0), [10.0, 5.0]);
        assert_eq!(h.direction_at(15.0), [0.0, 1.0]);
        assert_eq!(h.point_at_param(0.25), [5.0, 0.0]);
        let p = h.project([12.0, 4.0]);
        assert_eq!((p.arc, p.point), (14.0, [10.0, 4.0]));
        // past the end the last segment extends
        assert_eq!(h.project([10.0, 30.0]).arc, 40.0);
        let r = h.reversed();
        assert_eq!(r.direction_at(0.0), [0.0, -1.0]);
        assert!(HighwayPath::new(vec![[0.0, 0.0], [0.0, 0.0]], 3.0).is_err());
        assert!(HighwayPath::new(vec![[0.0, 0.0]], 3.0).is_err());
    }

    #[test]
    fn check_sets() {
        let f = fleet(5);
        let r = f.registry();
        assert_eq!(safety_check_set(3, r, &[]), vec![2, 4]);
        assert_eq!(safety_check_set(1, r, &[]), vec![2]);
        assert_eq!(safety_check_set(5, r, &[]), vec![4]);
        for v in 1..=5 {
            assert!(safety_check_set(v, r, &[0]).contains(&0));
        }
    }

    #[test]
    fn arbitration() {
        let c = |id, inside, distance| Check {
            id,
            value: if inside { -0.1 } else { 0.5 },
            inside,
            distance,
            safety_u: [id as f64, 0.0],
        };
        let a = arbitrate_control([1.0, 1.0], &[c(2, false, 4.0), c(4, false, 4.0)]);
        assert_eq!((a.u, a.breaches, a.escalate), ([1.0, 1.0], 0, false));
        let a = arbitrate_control([1.0, 1.0], &[c(2, false, 4.0), c(4, true, 4.0)]);
        assert_eq!((a.u, a.breaches, a.avoiding), ([4.0, 0.0], 1, Some(4)));
        let a = arbitrate_control([1.0, 1.0], &[c(2, true, 5.0), c(4, true, 3.0)]);
        assert_eq!((a.u, a.breaches, a.escalate), ([4.0, 0.0], 2, true));
    }

    #[test]
    fn escalation_uses_k_minus_one_bands() {
        let mut b = BTreeMap::new();
        b.insert(1, vec![2, 3, 4]);
        let moves = plan_escalation(&b, |_| true, &[0]);
        assert_eq!(moves, vec![(3, 1), (4, 2)]);
        // a single breach needs no band
        let mut b = BTreeMap::new();
        b.insert(1, vec![2]);
        assert!(plan_escalation(&b, |_| true, &[0]).is_empty());
        // externals cannot be commanded: the vehicle itself climbs
        let mut b = BTreeMap::new();
        b.insert(1, vec![0, 9]);
        assert_eq!(plan_escalation(&b, |j| j != 9, &[0, -1]), vec![(1, 1)]);
    }

    #[test]
    fn first_merger_leads() {
        let recs = vec![VehicleRecord::free(1, [0.0; 4])];
        let mut f = Fleet::new(recs, PlatoonRegistry::new(4.0, highway()));
        let ch = f.apply(Transition::FormPlatoon(1)).unwrap();
        assert_eq!(ch, vec![ModeChange { id: 1, from: Mode::Free, to: Mode::Leader }]);
        assert_eq!(f.get(1).unwrap().index, Some(1));
        f.registry().check(f.vehicles()).unwrap();
    }

    #[test]
    fn fault_renumbers_trailing_members() {
        let mut f = fleet(5);
        f.apply(Transition::Fault(3)).unwrap();
        assert_eq!(members(&f, 1), vec![1, 2, 4, 5]);
        assert_eq!(f.get(4).unwrap().index, Some(3));
        assert_eq!(f.get(5).unwrap().index, Some(4));
        let r = f.get(3).unwrap();
        assert_eq!((r.mode, r.platoon, r.fault_clock), (Mode::Faulty, None, Some(0.0)));
        f.registry().check(f.vehicles()).unwrap();
        // descends exactly when the clock reaches t_internal
        let mut out = Vec::new();
        for _ in 0..75 {
            out.extend(f.tick(0.02, 1.5));
        }
        assert_eq!(out, vec![3]);
        assert_eq!(f.get(3).unwrap().band, -1);
    }

    #[test]
    fn split_and_rejoin() {
        let recs = (1..=4).map(|i| VehicleRecord::free(i, [0.0; 4])).collect();
        let mut f = Fleet::new(recs, PlatoonRegistry::new(4.0, highway())).with_platoon(&[1, 2, 3, 4]).unwrap();
        let ch = f.apply(Transition::Split(2)).unwrap();
        assert_eq!(ch, vec![ModeChange { id: 2, from: Mode::Follower, to: Mode::Leader }]);
        assert_eq!(members(&f, 2), vec![2, 3, 4]);
        assert_eq!(members(&f, 1), vec![1]);
        let (orig, _) = f.registry().locate(1).unwrap();
        let (new, _) = f.registry().locate(2).unwrap();
        assert_eq!(f.registry().resolve_origin(new), Some(orig));
        // a cascade: 3 splits from 2's platoon, 2 rejoins, 3's origin follows
        f.apply(Transition::Split(3)).unwrap();
        f.apply(Transition::Rejoin { leader: 2, into: orig }).unwrap();
        let (third, _) = f.registry().locate(3).unwrap();
        assert_eq!(f.registry().resolve_origin(third), Some(orig));
        f.apply(Transition::Rejoin { leader: 3, into: orig }).unwrap();
        assert_eq!(members(&f, 1), vec![1, 2, 3, 4]);
        f.registry().check(f.vehicles()).unwrap();
    }

    #[test]
    fn illegal_edges_are_rejected() {
        let mut f = fleet(3);
        assert!(matches!(f.apply(Transition::Split(1)), Err(PlatoonError::Transition { .. })));
        assert!(matches!(f.apply(Transition::FormPlatoon(2)), Err(PlatoonError::Transition { .. })));
        assert!(matches!(f.apply(Transition::Rejoin { leader: 2, into: 1 }), Err(PlatoonError::Transition { .. })));
        assert_eq!(f.apply(Transition::Fault(9)), Err(PlatoonError::UnknownVehicle(9)));
        let before = members(&f, 1);
        assert!(f.apply(Transition::JoinTail { vehicle: 3, platoon: 1 }).is_err());
        assert_eq!(members(&f, 1), before);
    }

    #[test]
    fn leader_leaving_promotes_next() {
        let mut f = fleet(3);
        f.apply(Transition::LeaveHighway(1)).unwrap();
        assert_eq!(f.get(1).unwrap().mode, Mode::Free);
        assert_eq!(f.get(2).unwrap().mode, Mode::Leader);
        f.registry().check(f.vehicles()).unwrap();
    }

    #[test]
    fn steady_state_spacing() {
        // constant-velocity leader, two followers starting off their slots
        let g = Gains::default();
        let (b, u_max, dt) = (4.0, 3.0, 0.02);
        let d = dir();
        let v = [3.0 * d[0], 3.0 * d[1]];
        let mut x = [
            [0.0, v[0], 0.0, v[1]],
            [-6.0, 0.0, -1.0, 0.0],
            [-9.0, 1.0, -6.0, 0.0],
        ];
        let mut hold = d;
        for _ in 0..1500 {
            hold = heading([x[0][1], x[0][3]], hold);
            let leader = x[0];
            for i in 1..3 {
                let u = follower_control(&x[i], &leader, [0.0; 2], nominal_offset(i + 1, b, hold), g, u_max);
                x[i][1] += u[0] * dt;
                x[i][3] += u[1] * dt;
                x[i][0] += x[i][1] * dt;
                x[i][2] += x[i][3] * dt;
            }
            x[0][0] += x[0][1] * dt;
            x[0][2] += x[0][3] * dt;
        }
        for i in 1..3 {
            let gap = (x[i][0] - x[i - 1][0]).hypot(x[i][2] - x[i - 1][2]);
            assert!((gap - b).abs() < 0.05 * b, "gap {gap}");
            let dv = (x[i][1] - v[0]).hypot(x[i][3] - v[1]);
            assert!(dv < 0.02 * 3.0, "velocity error {dv}");
        }
    }

    proptest! {
        #[test]
        fn registry_stays_single_file(ops in proptest::collection::vec((0u8..4, 1u32..7), 1..30)) {
            let mut f = fleet(6);
            for (op, v) in ops {
                let t = match op {
                    0 => Transition::Split(v),
                    1 => Transition::Fault(v),
                    2 => {
                        let into = f.get(v).ok().and_then(|r| r.platoon).and_then(|p| f.registry().resolve_origin(p));
                        match into { Some(into) => Transition::Rejoin { leader: v, into }, None => continue }
                    }
                    _ => Transition::LeaveHighway(v),
                };
                let _ = f.apply(t);
                prop_assert!(f.registry().check(f.vehicles()).is_ok());
            }
        }

        #[test]
        fn neighbour_checks_are_symmetric(n in 1u32..9, cut in 0u32..9) {
            let mut f = fleet(n);
            if cut >= 2 && cut <= n {
                f.apply(Transition::Split(cut)).unwrap();
            }
            for i in 1..=n {
                for j in safety_check_set(i, f.registry(), &[]) {
                    prop_assert!(safety_check_set(j, f.registry(), &[]).contains(&i));
                }
            }
        }

        #[test]
        fn follower_fixed_point(p in -50.0..50.0f64, q in -50.0..50.0f64, vx in -4.0..4.0f64, vy in -4.0..4.0f64, i in 1usize..6) {
            let leader = [p, vx, q, vy];
            let h = heading([vx, vy], dir());
            let off = nominal_offset(i, 4.0, h);
            let me = [p + off[0], vx, q + off[1], vy];
            let u = follower_control(&me, &leader, [0.0; 2], off, Gains::default(), 3.0);
            prop_assert!(u[0].abs() < 1e-9 && u[1].abs() < 1e-9);
        }
    }
}
