//! Cartesian grids and implicit surface functions sampled on them.
//!
//! Values are stored row-major with the last dimension varying fastest. The
//! same layout is used in memory and in the cache files written by
//! [`crate::hjsolver::cache`].

use std::sync::Arc;

use thiserror::Error;

/// Largest dimension any grid in this crate may have.
pub const MAX_DIM: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension mismatch: {what} has {got} entries, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("grid must have between 1 and {MAX_DIM} dimensions, got {0}")]
    BadDimension(usize),
    #[error("dimension {dim}: need at least 3 nodes, got {count}")]
    TooFewNodes { dim: usize, count: usize },
    #[error("dimension {dim}: extent [{min}, {max}] is empty or not finite")]
    BadExtent { dim: usize, min: f64, max: f64 },
    #[error("level sets live on different grids")]
    GridMismatch,
    #[error("level set has {got} values, grid has {expected} nodes")]
    ValueCount { expected: usize, got: usize },
    #[error("level set value at node {0} is not finite")]
    NonFinite(usize),
    #[error("half widths must be positive")]
    BadHalfWidth,
}

/// An axis-aligned, uniformly spaced Cartesian grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    mins: Vec<f64>,
    maxs: Vec<f64>,
    counts: Vec<usize>,
    spacings: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(mins: &[f64], maxs: &[f64], counts: &[usize]) -> Result<Self, GridError> {
        let dim = mins.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(GridError::BadDimension(dim));
        }
        for (what, got) in [("maxs", maxs.len()), ("counts", counts.len())] {
            if got != dim {
                return Err(GridError::DimensionMismatch {
                    what,
                    expected: dim,
                    got,
                });
            }
        }
        let mut spacings = Vec::with_capacity(dim);
        for k in 0..dim {
            if counts[k] < 3 {
                return Err(GridError::TooFewNodes {
                    dim: k,
                    count: counts[k],
                });
            }
            if !(mins[k].is_finite() && maxs[k].is_finite() && maxs[k] > mins[k]) {
                return Err(GridError::BadExtent {
                    dim: k,
                    min: mins[k],
                    max: maxs[k],
                });
            }
            spacings.push((maxs[k] - mins[k]) / (counts[k] - 1) as f64);
        }
        let mut strides = vec![1usize; dim];
        for k in (0..dim - 1).rev() {
            strides[k] = strides[k + 1] * counts[k + 1];
        }
        let len = counts.iter().product();
        Ok(Self {
            mins: mins.to_vec(),
            maxs: maxs.to_vec(),
            counts: counts.to_vec(),
            spacings,
            strides,
            len,
        })
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mins(&self) -> &[f64] {
        &self.mins
    }

    pub fn maxs(&self) -> &[f64] {
        &self.maxs
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn spacings(&self) -> &[f64] {
        &self.spacings
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Coordinate of node `i` along dimension `k`. Every node coordinate in the
    /// crate goes through this formula.
    #[inline]
    pub fn coord(&self, k: usize, i: usize) -> f64 {
        self.mins[k] + i as f64 * self.spacings[k]
    }

    /// Flat index of a multi-index.
    #[inline]
    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Writes the multi-index of `flat` into `idx`.
    #[inline]
    pub fn unravel(&self, mut flat: usize, idx: &mut [usize]) {
        for k in 0..self.dim() {
            idx[k] = flat / self.strides[k];
            flat %= self.strides[k];
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut idx = [0usize; MAX_DIM];
        self.unravel(flat, &mut idx);
        (0..self.dim()).map(|k| self.coord(k, idx[k])).collect()
    }

    /// Whether `point` lies inside the closed grid box.
    pub fn contains(&self, point: &[f64]) -> bool {
        point
            .iter()
            .enumerate()
            .all(|(k, &x)| x >= self.mins[k] && x <= self.maxs[k])
    }

    /// Samples `f` at every node.
    pub fn sample(self: &Arc<Self>, mut f: impl FnMut(&[f64]) -> f64) -> LevelSet {
        let mut idx = [0usize; MAX_DIM];
        let mut x = [0.0; MAX_DIM];
        let d = self.dim();
        let values = (0..self.len)
            .map(|n| {
                self.unravel(n, &mut idx);
                for k in 0..d {
                    x[k] = self.coord(k, idx[k]);
                }
                f(&x[..d])
            })
            .collect();
        LevelSet {
            grid: Arc::clone(self),
            values,
        }
    }

    /// Locates `x` along dimension `k`: returns the lower node of the
    /// enclosing cell and the fractional position inside it. Positions within
    /// a rounding error of a node snap onto it, so node queries are exact.
    #[inline]
    fn locate(&self, k: usize, x: f64) -> (usize, f64) {
        let n = self.counts[k];
        let r = (x - self.mins[k]) / self.spacings[k];
        let nearest = r.round();
        if (r - nearest).abs() < 1e-9 {
            let i = nearest.max(0.0) as usize;
            return if i >= n - 1 { (n - 2, 1.0) } else { (i, 0.0) };
        }
        let i = (r.floor().max(0.0) as usize).min(n - 2);
        (i, (r - i as f64).clamp(0.0, 1.0))
    }

    /// Clamps `point` into the grid box, returning the L1 distance moved.
    #[inline]
    fn clamp_point(&self, point: &[f64], out: &mut [f64]) -> f64 {
        let mut dist = 0.0;
        for k in 0..self.dim() {
            let c = point[k].clamp(self.mins[k], self.maxs[k]);
            dist += (point[k] - c).abs();
            out[k] = c;
        }
        dist
    }
}

/// A scalar field sampled on every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSet {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl LevelSet {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::ValueCount {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    /// Skips the finiteness scan; callers guarantee the length.
    pub(crate) fn from_parts(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn interpolate(&self, point: &[f64]) -> f64 {
        interpolate(self, point)
    }

    pub fn gradient_at(&self, point: &[f64]) -> Vec<f64> {
        gradient_at(self, point)
    }

    /// Central difference along `k` at a node, one-sided on the faces.
    #[inline]
    fn node_derivative(&self, idx: &[usize], flat: usize, k: usize) -> f64 {
        let g = &*self.grid;
        let s = g.strides[k];
        let h = g.spacings[k];
        let i = idx[k];
        let n = g.counts[k];
        if i == 0 {
            (self.values[flat + s] - self.values[flat]) / h
        } else if i == n - 1 {
            (self.values[flat] - self.values[flat - s]) / h
        } else {
            (self.values[flat + s] - self.values[flat - s]) / (2.0 * h)
        }
    }
}

/// Builds the level set of an axis-aligned box: `max_k(|x_k - c_k| - w_k)`.
pub fn signed_box(grid: &Arc<Grid>, center: &[f64], half_widths: &[f64]) -> Result<LevelSet, GridError> {
    let d = grid.dim();
    for (what, got) in [("center", center.len()), ("half_widths", half_widths.len())] {
        if got != d {
            return Err(GridError::DimensionMismatch {
                what,
                expected: d,
                got,
            });
        }
    }
    if half_widths.iter().any(|w| !(*w > 0.0)) {
        return Err(GridError::BadHalfWidth);
    }
    Ok(grid.sample(|x| box_value(x, center, half_widths)))
}

/// Box implicit function evaluated at an arbitrary point.
#[inline]
pub fn box_value(x: &[f64], center: &[f64], half_widths: &[f64]) -> f64 {
    x.iter()
        .zip(center)
        .zip(half_widths)
        .map(|((x, c), w)| (x - c).abs() - w)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetOp {
    Union,
    Intersection,
    Complement,
}

/// Pointwise set algebra on implicit surface functions. `b` is ignored for
/// [`SetOp::Complement`] and required otherwise.
pub fn combine(op: SetOp, a: &LevelSet, b: Option<&LevelSet>) -> Result<LevelSet, GridError> {
    let values = match op {
        SetOp::Complement => a.values.iter().map(|v| -v).collect(),
        SetOp::Union | SetOp::Intersection => {
            let b = b.ok_or(GridError::GridMismatch)?;
            if a.grid != b.grid && *a.grid != *b.grid {
                return Err(GridError::GridMismatch);
            }
            let f = if op == SetOp::Union { f64::min } else { f64::max };
            a.values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| f(*x, *y))
                .collect()
        }
    };
    Ok(LevelSet::from_parts(Arc::clone(&a.grid), values))
}

/// Multilinear interpolation. Points outside the box are clamped onto it and
/// the L1 distance to the clamp point is added.
pub fn interpolate(ls: &LevelSet, point: &[f64]) -> f64 {
    let g = &*ls.grid;
    let d = g.dim();
    assert_eq!(point.len(), d, "query dimension");
    let mut clamped = [0.0; MAX_DIM];
    let outside = g.clamp_point(point, &mut clamped);
    let mut base = [0usize; MAX_DIM];
    let mut frac = [0.0; MAX_DIM];
    let mut flat0 = 0;
    for k in 0..d {
        let (i, t) = g.locate(k, clamped[k]);
        base[k] = i;
        frac[k] = t;
        flat0 += i * g.strides[k];
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = flat0;
        for k in 0..d {
            if corner >> k & 1 == 1 {
                w *= frac[k];
                flat += g.strides[k];
            } else {
                w *= 1.0 - frac[k];
            }
        }
        if w != 0.0 {
            acc += w * ls.values[flat];
        }
    }
    acc + outside
}

/// Numerical gradient: central differences at the surrounding nodes (one-sided
/// on domain faces) blended multilinearly to the clamped query point.
pub fn gradient_at(ls: &LevelSet, point: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; ls.grid.dim()];
    gradient_into(ls, point, &mut out);
    out
}

/// Allocation-free variant of [`gradient_at`].
pub fn gradient_into(ls: &LevelSet, point: &[f64], out: &mut [f64]) {
    let g = &*ls.grid;
    let d = g.dim();
    assert_eq!(point.len(), d, "query dimension");
    let mut clamped = [0.0; MAX_DIM];
    g.clamp_point(point, &mut clamped);
    let mut base = [0usize; MAX_DIM];
    let mut frac = [0.0; MAX_DIM];
    for k in 0..d {
        let (i, t) = g.locate(k, clamped[k]);
        base[k] = i;
        frac[k] = t;
    }
    out[..d].iter_mut().for_each(|o| *o = 0.0);
    let mut idx = [0usize; MAX_DIM];
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        for k in 0..d {
            if corner >> k & 1 == 1 {
                w *= frac[k];
                idx[k] = base[k] + 1;
            } else {
                w *= 1.0 - frac[k];
                idx[k] = base[k];
            }
        }
        if w == 0.0 {
            continue;
        }
        let flat = g.flat(&idx[..d]);
        for k in 0..d {
            out[k] += w * ls.node_derivative(&idx[..d], flat, k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize) -> Arc<Grid> {
        Arc::new(Grid::new(&[-5.0, -5.0], &[5.0, 5.0], &[n, n]).unwrap())
    }

    #[test]
    fn spacings_follow_extent() {
        let g = Grid::new(&[-5.0, -5.0], &[5.0, 5.0], &[41, 41]).unwrap();
        assert_eq!(g.spacings(), &[0.25, 0.25]);
        assert_eq!(g.len(), 41 * 41);
        assert_eq!(g.coord(0, 40), 5.0);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(
            Grid::new(&[0.0], &[1.0], &[2]),
            Err(GridError::TooFewNodes { count: 2, .. })
        ));
        assert!(matches!(
            Grid::new(&[-1.0], &[-1.0], &[11]),
            Err(GridError::BadExtent { .. })
        ));
        assert!(matches!(
            Grid::new(&[0.0, 0.0], &[1.0], &[3, 3]),
            Err(GridError::DimensionMismatch { what: "maxs", .. })
        ));
    }

    #[test]
    fn row_major_last_fastest() {
        let g = Grid::new(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], &[3, 4, 5]).unwrap();
        assert_eq!(g.strides(), &[20, 5, 1]);
        let mut idx = [0; 3];
        g.unravel(27, &mut idx);
        assert_eq!(idx, [1, 1, 2]);
        assert_eq!(g.flat(&idx), 27);
    }

    #[test]
    fn signed_box_examples() {
        let g = Arc::new(Grid::new(&[-2.0, -2.0], &[2.0, 2.0], &[5, 5]).unwrap());
        let b = signed_box(&g, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let at = |i: usize, j: usize| b.values()[g.flat(&[i, j])];
        assert_eq!(at(2, 2), -1.0);
        assert_eq!(at(4, 2), 1.0);
        assert_eq!(at(3, 3), 0.0);
        assert!(signed_box(&g, &[0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn signed_box_zero_level_encloses_nodes_within_half_widths() {
        let g = square(41);
        let c = [0.3, -1.1];
        let w = [1.2, 2.0];
        let b = signed_box(&g, &c, &w).unwrap();
        for n in 0..g.len() {
            let x = g.node(n);
            let inside = (x[0] - c[0]).abs() <= w[0] && (x[1] - c[1]).abs() <= w[1];
            assert_eq!(b.values()[n] <= 0.0, inside, "node {x:?}");
        }
    }

    #[test]
    fn combine_examples() {
        let g = Arc::new(Grid::new(&[0.0], &[1.0], &[3]).unwrap());
        let a = LevelSet::new(g.clone(), vec![3.0, 3.0, -2.0]).unwrap();
        let b = LevelSet::new(g.clone(), vec![-1.0, 5.0, 0.0]).unwrap();
        let u = combine(SetOp::Union, &a, Some(&b)).unwrap();
        let i = combine(SetOp::Intersection, &a, Some(&b)).unwrap();
        let c = combine(SetOp::Complement, &a, None).unwrap();
        assert_eq!(u.values(), &[-1.0, 3.0, -2.0]);
        assert_eq!(i.values(), &[3.0, 5.0, 0.0]);
        assert_eq!(c.values(), &[-3.0, -3.0, 2.0]);
    }

    #[test]
    fn combine_rejects_grid_mismatch() {
        let g1 = Arc::new(Grid::new(&[0.0], &[1.0], &[3]).unwrap());
        let g2 = Arc::new(Grid::new(&[0.0], &[2.0], &[3]).unwrap());
        let a = LevelSet::new(g1, vec![0.0; 3]).unwrap();
        let b = LevelSet::new(g2, vec![0.0; 3]).unwrap();
        assert_eq!(
            combine(SetOp::Union, &a, Some(&b)).unwrap_err(),
            GridError::GridMismatch
        );
    }

    #[test]
    fn interpolation_examples() {
        let g = square(41);
        let ls = g.sample(|x| x[0] * x[0] + 3.0 * x[1]);
        for n in [0, 17, 800, g.len() - 1] {
            assert_eq!(ls.interpolate(&g.node(n)), ls.values()[n]);
        }
        let a = ls.values()[g.flat(&[10, 7])];
        let b = ls.values()[g.flat(&[11, 7])];
        let mid = [0.5 * (g.coord(0, 10) + g.coord(0, 11)), g.coord(1, 7)];
        assert!((ls.interpolate(&mid) - 0.5 * (a + b)).abs() < 1e-12);
        // clamp plus L1 distance
        let edge = ls.interpolate(&[5.0, 1.0]);
        assert!((ls.interpolate(&[7.0, 1.0]) - (edge + 2.0)).abs() < 1e-12);
        let corner = ls.interpolate(&[-5.0, -5.0]);
        assert!((ls.interpolate(&[-6.0, -5.5]) - (corner + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let g = square(21);
        let lin = g.sample(|x| x[0]);
        assert_eq!(lin.gradient_at(&[0.3, -1.7]), vec![1.0, 0.0]);
        let flat = g.sample(|_| 4.0);
        assert_eq!(flat.gradient_at(&[1.0, 2.0]), vec![0.0, 0.0]);
        let b = signed_box(&g, &[0.0, 0.0], &[2.0, 2.0]).unwrap();
        let gx = b.gradient_at(&[2.0, 0.0]);
        assert!((gx[0] - 1.0).abs() < 1e-12 && gx[1].abs() < 1e-12, "{gx:?}");
        let gy = b.gradient_at(&[0.0, -2.0]);
        assert!(gy[0].abs() < 1e-12 && (gy[1] + 1.0).abs() < 1e-12, "{gy:?}");
    }

    proptest! {
        #[test]
        fn gradient_of_affine_field_is_exact(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
            x in -4.9f64..4.9, y in -4.9f64..4.9,
        ) {
            let g = square(17);
            let ls = g.sample(|p| a * p[0] + b * p[1] + c);
            let grad = ls.gradient_at(&[x, y]);
            prop_assert!((grad[0] - a).abs() < 1e-12);
            prop_assert!((grad[1] - b).abs() < 1e-12);
        }

        #[test]
        fn interpolation_stays_within_cell_bounds(
            seed in prop::collection::vec(-10.0f64..10.0, 9),
            x in -5.0f64..5.0, y in -5.0f64..5.0,
        ) {
            let g = square(3);
            let ls = LevelSet::new(g.clone(), seed.clone()).unwrap();
            let v = ls.interpolate(&[x, y]);
            let lo = seed.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = seed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn union_and_intersection_are_exact_min_max(
            a in prop::collection::vec(-5.0f64..5.0, 9),
            b in prop::collection::vec(-5.0f64..5.0, 9),
        ) {
            let g = square(3);
            let la = LevelSet::new(g.clone(), a.clone()).unwrap();
            let lb = LevelSet::new(g.clone(), b.clone()).unwrap();
            let u = combine(SetOp::Union, &la, Some(&lb)).unwrap();
            let i = combine(SetOp::Intersection, &la, Some(&lb)).unwrap();
            for n in 0..9 {
                prop_assert_eq!(u.values()[n], a[n].min(b[n]));
                prop_assert_eq!(i.values()[n], a[n].max(b[n]));
            }
        }
    }
}
