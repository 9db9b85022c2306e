//! Plot data: 2D slices of a reachable set and per-vehicle trajectories.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use hjp_core::reach::{EvaluatorKind, ReachEvaluator};
use hjp_core::sim::Trace;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("dimension {dim} out of range: {kind} states have {len} components")]
    Dimension { dim: usize, kind: &'static str, len: usize },
    #[error("the two free dimensions must differ")]
    SameDimension,
    #[error("expected {expected} fixed values, got {got}")]
    StateLength { expected: usize, got: usize },
    #[error("{name} = {value} lies outside the grid range [{min}, {max}]")]
    OutOfRange { name: &'static str, value: f64, min: f64, max: f64 },
    #[error("tau {tau} outside the built horizon [0, {horizon}]")]
    Horizon { tau: f64, horizon: f64 },
    #[error(transparent)]
    Reach(#[from] hjp_core::reach::ReachError),
}

pub fn dim_names(kind: EvaluatorKind) -> &'static [&'static str] {
    match kind {
        EvaluatorKind::SafetyGame => &["px_r", "vx_r", "py_r", "vy_r", "vx_self", "vy_self"],
        _ => &["px", "vx", "py", "vy"],
    }
}

/// Grid coordinates along one full-state dimension.
fn dim_nodes(ev: &ReachEvaluator, dim: usize) -> Vec<f64> {
    // full-state dims 0,1,(4) live on the x axis grid, 2,3,(5) on the y grid
    let (series, k) = match dim {
        0 | 1 => (ev.coupled().x(), dim),
        2 | 3 => (ev.coupled().y(), dim - 2),
        4 => (ev.coupled().x(), 2),
        _ => (ev.coupled().y(), 2),
    };
    let g = series.grid();
    (0..g.counts()[k]).map(|i| g.coord(k, i)).collect()
}

pub struct Slice {
    pub names: [&'static str; 2],
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Row-major over `(a, b)`, `b` fastest.
    pub values: Vec<f64>,
    pub contours: Vec<Vec<[f64; 2]>>,
}

impl Slice {
    pub fn grid_csv(&self) -> String {
        let mut s = format!("{},{},value\n", self.names[0], self.names[1]);
        for (i, a) in self.a.iter().enumerate() {
            for (j, b) in self.b.iter().enumerate() {
                let _ = writeln!(s, "{a},{b},{}", self.values[i * self.b.len() + j]);
            }
        }
        s
    }

    pub fn contour_csv(&self) -> String {
        let mut s = format!("polyline,{},{}\n", self.names[0], self.names[1]);
        for (k, line) in self.contours.iter().enumerate() {
            for p in line {
                let _ = writeln!(s, "{k},{},{}", p[0], p[1]);
            }
        }
        s
    }
}

/// Reconstructed value over two free dimensions with the rest fixed at
/// `state`'s entries (the free entries of `state` are ignored).
pub fn set_slice(ev: &ReachEvaluator, free: [usize; 2], state: &[f64], tau: f64) -> Result<Slice, ExportError> {
    let kind = ev.kind();
    let names = dim_names(kind);
    let n = names.len();
    for &d in &free {
        if d >= n {
            return Err(ExportError::Dimension {
                dim: d,
                kind: kind.name(),
                len: n,
            });
        }
    }
    if free[0] == free[1] {
        return Err(ExportError::SameDimension);
    }
    if state.len() != n {
        return Err(ExportError::StateLength {
            expected: n,
            got: state.len(),
        });
    }
    if !(tau >= 0.0 && tau <= ev.horizon() + 1e-9) {
        return Err(ExportError::Horizon { tau, horizon: ev.horizon() });
    }
    for d in (0..n).filter(|d| !free.contains(d)) {
        let nodes = dim_nodes(ev, d);
        let (min, max) = (nodes[0], *nodes.last().expect("grid has nodes"));
        if !(state[d] >= min && state[d] <= max) {
            return Err(ExportError::OutOfRange {
                name: names[d],
                value: state[d],
                min,
                max,
            });
        }
    }
    let (a, b) = (dim_nodes(ev, free[0]), dim_nodes(ev, free[1]));
    let mut values = Vec::with_capacity(a.len() * b.len());
    let mut x = state.to_vec();
    for &va in &a {
        for &vb in &b {
            x[free[0]] = va;
            x[free[1]] = vb;
            values.push(ev.membership(&x, tau)?.value);
        }
    }
    let contours = zero_contours(&a, &b, &values);
    Ok(Slice {
        names: [names[free[0]], names[free[1]]],
        a,
        b,
        values,
        contours,
    })
}

/// Crossing point identity: edge from node (i, j) along a (0) or b (1).
type EdgeId = (usize, usize, u8);

/// Marching squares on a rectilinear grid; segments are chained into
/// polylines through their shared edge crossings.
pub fn zero_contours(a: &[f64], b: &[f64], v: &[f64]) -> Vec<Vec<[f64; 2]>> {
    let (na, nb) = (a.len(), b.len());
    if na < 2 || nb < 2 {
        return Vec::new();
    }
    let at = |i: usize, j: usize| v[i * nb + j];
    let inside = |i: usize, j: usize| at(i, j) <= 0.0;
    let point = |e: EdgeId| -> [f64; 2] {
        let (i, j, dir) = e;
        let (i2, j2) = if dir == 0 { (i + 1, j) } else { (i, j + 1) };
        let (v0, v1) = (at(i, j), at(i2, j2));
        let t = if v0 == v1 { 0.5 } else { (v0 / (v0 - v1)).clamp(0.0, 1.0) };
        [a[i] + t * (a[i2] - a[i]), b[j] + t * (b[j2] - b[j])]
    };
    let mut adj: BTreeMap<EdgeId, Vec<EdgeId>> = BTreeMap::new();
    let mut link = |p: EdgeId, q: EdgeId| {
        adj.entry(p).or_default().push(q);
        adj.entry(q).or_default().push(p);
    };
    for i in 0..na - 1 {
        for j in 0..nb - 1 {
            // corners counter-clockwise: (i,j) (i+1,j) (i+1,j+1) (i,j+1)
            let c = [inside(i, j), inside(i + 1, j), inside(i + 1, j + 1), inside(i, j + 1)];
            // cell edges in the same order: bottom, right, top, left
            let edges: [EdgeId; 4] = [(i, j, 0), (i + 1, j, 1), (i, j + 1, 0), (i, j, 1)];
            let crossed: Vec<usize> = (0..4).filter(|&k| c[k] != c[(k + 1) % 4]).collect();
            match crossed.len() {
                2 => link(edges[crossed[0]], edges[crossed[1]]),
                4 => {
                    // saddle: the cell centre decides which corners connect
                    let centre = 0.25 * (at(i, j) + at(i + 1, j) + at(i + 1, j + 1) + at(i, j + 1));
                    if (centre <= 0.0) == c[0] {
                        link(edges[0], edges[1]);
                        link(edges[2], edges[3]);
                    } else {
                        link(edges[3], edges[0]);
                        link(edges[1], edges[2]);
                    }
                }
                _ => {}
            }
        }
    }
    let mut used: BTreeMap<(EdgeId, EdgeId), bool> = BTreeMap::new();
    let take = |p: EdgeId, q: EdgeId, used: &mut BTreeMap<(EdgeId, EdgeId), bool>| -> bool {
        let key = if p < q { (p, q) } else { (q, p) };
        !std::mem::replace(used.entry(key).or_insert(false), true)
    };
    let mut lines = Vec::new();
    // open chains start at degree-1 crossings; closed loops are picked up after
    let mut starts: Vec<EdgeId> = adj.iter().filter(|(_, n)| n.len() == 1).map(|(e, _)| *e).collect();
    starts.extend(adj.keys().copied());
    for s in starts {
        let mut line = vec![point(s)];
        let mut cur = s;
        loop {
            let next = adj[&cur].iter().copied().find(|&n| take(cur, n, &mut used));
            match next {
                Some(n) => {
                    line.push(point(n));
                    cur = n;
                }
                None => break,
            }
        }
        if line.len() > 1 {
            lines.push(line);
        }
    }
    lines
}

/// Per-vehicle path polylines as `vehicle,t,px,py,mode,band` rows, grouped
/// by vehicle and ordered in time.
pub fn trajectory_csv(trace: &Trace) -> (String, BTreeMap<u32, Vec<&'static str>>) {
    let mut by_vehicle: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, r) in trace.rows.iter().enumerate() {
        by_vehicle.entry(r.id).or_default().push(k);
    }
    let mut s = String::from("vehicle,t,px,py,mode,band\n");
    let mut modes: BTreeMap<u32, Vec<&'static str>> = BTreeMap::new();
    for (id, rows) in &by_vehicle {
        let seen = modes.entry(*id).or_default();
        for &k in rows {
            let r = &trace.rows[k];
            let _ = writeln!(s, "{id},{},{},{},{},{}", r.t, r.p[0], r.p[1], r.mode.name(), r.band);
            if seen.last() != Some(&r.mode.name()) {
                seen.push(r.mode.name());
            }
        }
    }
    (s, modes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contour_of_a_disc_is_one_closed_loop_at_the_radius() {
        let a: Vec<f64> = (0..41).map(|i| -2.0 + 0.1 * i as f64).collect();
        let b = a.clone();
        let v: Vec<f64> = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| (x * x + y * y).sqrt() - 1.0))
            .collect();
        let lines = zero_contours(&a, &b, &v);
        assert_eq!(lines.len(), 1);
        let l = &lines[0];
        assert_eq!(l.first(), l.last(), "loop closes");
        for p in l {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 1.0).abs() < 0.01, "{r}");
        }
    }

    #[test]
    fn half_plane_gives_one_open_line() {
        let a: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let b = a.clone();
        let v: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |_| x - 1.5)).collect();
        let lines = zero_contours(&a, &b, &v);
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].len(), 5);
        assert!(lines[0].iter().all(|p| (p[0] - 1.5).abs() < 1e-12));
    }

    #[test]
    fn no_crossing_no_lines() {
        let a = [0.0, 1.0, 2.0];
        assert!(zero_contours(&a, &a, &[1.0; 9]).is_empty());
    }
}
