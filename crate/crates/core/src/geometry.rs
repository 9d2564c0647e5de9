//! Point clouds, view projection and Chamfer distance.
//!
//! Chamfer distance here is the squared-distance, mean-per-side variant:
//!
//! ```text
//! CD(a, b) = 1/|a| * sum_{p in a} min_{q in b} |p - q|^2
//!          + 1/|b| * sum_{q in b} min_{p in a} |p - q|^2
//! ```
//!
//! Nearest-neighbour ties resolve to the lowest index. [`chamfer`] is the
//! O(nm) reference; [`chamfer_accelerated`] buckets the target set into a
//! uniform grid and searches expanding rings of cells, returning exactly the
//! same assignment.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered sequence of `D`-dimensional points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T, const D: usize> {
    points: Vec<[T; D]>,
}

pub type PointCloud2D<T> = PointCloud<T, 2>;
pub type PointCloud3D<T> = PointCloud<T, 3>;

impl<T: Scalar, const D: usize> PointCloud<T, D> {
    pub fn new(points: Vec<[T; D]>) -> Self {
        Self { points }
    }

    /// Builds a cloud from row-major `N x D` data.
    pub fn from_flat(data: &[T]) -> Result<Self> {
        if !data.len().is_multiple_of(D) {
            return Err(Error::shape(
                "point cloud",
                format!("{} values is not a multiple of {D}", data.len()),
            ));
        }
        Ok(Self {
            points: data
                .chunks_exact(D)
                .map(|c| std::array::from_fn(|i| c[i]))
                .collect(),
        })
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn points(&self) -> &[[T; D]] {
        &self.points
    }

    pub fn into_points(self) -> Vec<[T; D]> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, t: [T; D]) -> Self {
        Self::new(
            self.points
                .iter()
                .map(|p| std::array::from_fn(|i| p[i] + t[i]))
                .collect(),
        )
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self::new(
            self.points
                .iter()
                .map(|p| std::array::from_fn(|i| p[i] * factor))
                .collect(),
        )
    }

    pub fn centroid(&self) -> Option<[T; D]> {
        if self.points.is_empty() {
            return None;
        }
        let n = T::from_usize(self.points.len()).unwrap();
        let mut c = [T::zero(); D];
        for p in &self.points {
            for i in 0..D {
                c[i] = c[i] + p[i];
            }
        }
        Some(c.map(|v| v / n))
    }
}

/// Named coordinate pair kept by an axis-aligned projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisPair {
    Xy,
    Xz,
    Yz,
}

/// Orthographic viewing direction.
///
/// `Yaw(deg)` turns the viewer right-handedly about +y by `deg` degrees and
/// then drops the depth axis, so a point is mapped to
/// `(x cos - z sin, y)`. `Yaw(0)` coincides with `Axis(Xy)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ViewDirection {
    Axis(AxisPair),
    Yaw(f64),
}

impl ViewDirection {
    pub const FRONT: Self = ViewDirection::Axis(AxisPair::Xy);
    pub const SIDE: Self = ViewDirection::Yaw(90.0);
    pub const TOP: Self = ViewDirection::Axis(AxisPair::Xz);

    /// Projection as a row-major `3 x 2` matrix, for use on a tape.
    pub fn matrix<T: Scalar>(&self) -> [T; 6] {
        let (o, z) = (T::one(), T::zero());
        match self {
            ViewDirection::Axis(AxisPair::Xy) => [o, z, z, o, z, z],
            ViewDirection::Axis(AxisPair::Xz) => [o, z, z, z, z, o],
            ViewDirection::Axis(AxisPair::Yz) => [z, z, o, z, z, o],
            ViewDirection::Yaw(deg) => {
                let (s, c) = yaw_sin_cos::<T>(*deg);
                [c, z, z, o, -s, z]
            }
        }
    }

    /// Coordinate along the viewing axis, growing toward the viewer.
    pub fn depth<T: Scalar>(&self, p: [T; 3]) -> T {
        match self {
            ViewDirection::Axis(AxisPair::Xy) => p[2],
            ViewDirection::Axis(AxisPair::Xz) => p[1],
            ViewDirection::Axis(AxisPair::Yz) => p[0],
            ViewDirection::Yaw(deg) => {
                let (s, c) = yaw_sin_cos::<T>(*deg);
                p[0] * s + p[2] * c
            }
        }
    }

    pub fn project_point<T: Scalar>(&self, p: [T; 3]) -> [T; 2] {
        match self {
            ViewDirection::Axis(AxisPair::Xy) => [p[0], p[1]],
            ViewDirection::Axis(AxisPair::Xz) => [p[0], p[2]],
            ViewDirection::Axis(AxisPair::Yz) => [p[1], p[2]],
            ViewDirection::Yaw(deg) => {
                let (s, c) = yaw_sin_cos::<T>(*deg);
                [p[0] * c - p[2] * s, p[1]]
            }
        }
    }
}

fn yaw_sin_cos<T: Scalar>(deg: f64) -> (T, T) {
    let (s, c) = deg.to_radians().sin_cos();
    (T::lit(s), T::lit(c))
}

impl fmt::Display for ViewDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewDirection::Axis(AxisPair::Xy) => f.write_str("xy"),
            ViewDirection::Axis(AxisPair::Xz) => f.write_str("xz"),
            ViewDirection::Axis(AxisPair::Yz) => f.write_str("yz"),
            ViewDirection::Yaw(deg) => write!(f, "angle:{deg}"),
        }
    }
}

impl FromStr for ViewDirection {
    type Err = Error;

    /// Accepts `xy`, `xz`, `yz`, `angle:<deg>` and the aliases
    /// `front` (xy), `side` (angle:90) and `top` (xz).
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xy" | "front" => Ok(Self::FRONT),
            "xz" | "top" => Ok(Self::TOP),
            "yz" => Ok(ViewDirection::Axis(AxisPair::Yz)),
            "side" => Ok(Self::SIDE),
            other => other
                .strip_prefix("angle:")
                .and_then(|deg| deg.parse::<f64>().ok())
                .filter(|deg| deg.is_finite())
                .map(ViewDirection::Yaw)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown view {s:?}; expected xy, xz, yz, angle:<deg>, front, side or top"
                    ))
                }),
        }
    }
}

impl Serialize for ViewDirection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ViewDirection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Orthographic projection of a cloud at `view`; preserves point order.
pub fn project<T: Scalar>(cloud: &PointCloud3D<T>, view: ViewDirection) -> PointCloud2D<T> {
    PointCloud::new(cloud.points().iter().map(|&p| view.project_point(p)).collect())
}

/// Chamfer value together with the nearest-neighbour index of every point.
#[derive(Clone, Debug, PartialEq)]
pub struct ChamferOutcome<T> {
    pub value: T,
    /// For each point of `a`, index of its nearest point in `b`.
    pub nn_ab: Vec<usize>,
    /// For each point of `b`, index of its nearest point in `a`.
    pub nn_ba: Vec<usize>,
}

#[inline]
fn dist2<T: Scalar, const D: usize>(p: &[T; D], q: &[T; D]) -> T {
    let mut acc = T::zero();
    for i in 0..D {
        let d = p[i] - q[i];
        acc = acc + d * d;
    }
    acc
}

#[inline]
fn better<T: Scalar>(d: T, idx: usize, best: T, best_idx: usize) -> bool {
    d < best || (d == best && idx < best_idx)
}

fn nearest_brute<T: Scalar, const D: usize>(q: &[T; D], set: &[[T; D]]) -> (T, usize) {
    let mut best = (T::infinity(), usize::MAX);
    for (j, p) in set.iter().enumerate() {
        let d = dist2(q, p);
        if better(d, j, best.0, best.1) {
            best = (d, j);
        }
    }
    best
}

fn check_nonempty<T, const D: usize>(a: &[[T; D]], b: &[[T; D]]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud("chamfer"));
    }
    Ok(())
}

fn assemble<T: Scalar>(ab: Vec<(T, usize)>, ba: Vec<(T, usize)>) -> ChamferOutcome<T> {
    let mean = |v: &[(T, usize)]| {
        let s = v.iter().fold(T::zero(), |acc, &(d, _)| acc + d);
        s / T::from_usize(v.len()).unwrap()
    };
    ChamferOutcome {
        value: mean(&ab) + mean(&ba),
        nn_ab: ab.into_iter().map(|(_, j)| j).collect(),
        nn_ba: ba.into_iter().map(|(_, j)| j).collect(),
    }
}

/// Brute-force Chamfer distance with assignments.
pub fn chamfer_brute_force<T: Scalar, const D: usize>(
    a: &PointCloud<T, D>,
    b: &PointCloud<T, D>,
) -> Result<ChamferOutcome<T>> {
    let (pa, pb) = (a.points(), b.points());
    check_nonempty(pa, pb)?;
    let ab = pa.iter().map(|p| nearest_brute(p, pb)).collect();
    let ba = pb.iter().map(|q| nearest_brute(q, pa)).collect();
    Ok(assemble(ab, ba))
}

/// Chamfer distance, exact O(|a| |b|) evaluation.
pub fn chamfer<T: Scalar, const D: usize>(a: &PointCloud<T, D>, b: &PointCloud<T, D>) -> Result<T> {
    chamfer_brute_force(a, b).map(|o| o.value)
}

/// Grid-accelerated Chamfer distance with assignments.
pub fn chamfer_accelerated_with_assignment<T: Scalar, const D: usize>(
    a: &PointCloud<T, D>,
    b: &PointCloud<T, D>,
) -> Result<ChamferOutcome<T>> {
    let (pa, pb) = (a.points(), b.points());
    check_nonempty(pa, pb)?;
    let grid_b = Grid::build(pb);
    let grid_a = Grid::build(pa);
    let ab = pa.par_iter().map(|p| grid_b.nearest(p)).collect();
    let ba = pb.par_iter().map(|q| grid_a.nearest(q)).collect();
    Ok(assemble(ab, ba))
}

/// Chamfer distance through the uniform-grid search; same result as [`chamfer`].
pub fn chamfer_accelerated<T: Scalar, const D: usize>(
    a: &PointCloud<T, D>,
    b: &PointCloud<T, D>,
) -> Result<T> {
    chamfer_accelerated_with_assignment(a, b).map(|o| o.value)
}

/// Chamfer on row-major `N x dim` buffers, `dim` in {2, 3}.
pub fn chamfer_flat<T: Scalar>(a: &[T], b: &[T], dim: usize) -> Result<ChamferOutcome<T>> {
    match dim {
        2 => chamfer_accelerated_with_assignment(
            &PointCloud2D::from_flat(a)?,
            &PointCloud2D::from_flat(b)?,
        ),
        3 => chamfer_accelerated_with_assignment(
            &PointCloud3D::from_flat(a)?,
            &PointCloud3D::from_flat(b)?,
        ),
        d => Err(Error::shape("chamfer", format!("unsupported point dimension {d}"))),
    }
}

/// Uniform bucket grid over a point set, cells stored in CSR form with
/// point indices ascending inside each cell.
struct Grid<'a, T, const D: usize> {
    points: &'a [[T; D]],
    lo: [T; D],
    cell: T,
    dims: [usize; D],
    starts: Vec<usize>,
    indices: Vec<usize>,
}

impl<'a, T: Scalar, const D: usize> Grid<'a, T, D> {
    fn build(points: &'a [[T; D]]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for i in 0..D {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let extent = (0..D).map(|i| hi[i] - lo[i]).fold(T::zero(), T::max);
        let per_axis = (points.len() as f64).powf(1.0 / D as f64).ceil().max(1.0);
        let cell = if extent > T::zero() {
            extent / T::lit(per_axis)
        } else {
            T::one()
        };
        let dims: [usize; D] = std::array::from_fn(|i| {
            let n = ((hi[i] - lo[i]) / cell).floor().to_usize().unwrap_or(0) + 1;
            n.min(per_axis as usize + 1)
        });
        let mut grid = Self {
            points,
            lo,
            cell,
            dims,
            starts: Vec::new(),
            indices: Vec::new(),
        };
        let n_cells: usize = dims.iter().product();
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0usize; n_cells + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts.clone();
        let mut indices = vec![0usize; points.len()];
        for (idx, &k) in keys.iter().enumerate() {
            indices[cursor[k]] = idx;
            cursor[k] += 1;
        }
        grid.starts = counts;
        grid.indices = indices;
        grid
    }

    fn cell_of(&self, p: &[T; D]) -> [usize; D] {
        std::array::from_fn(|i| {
            let t = ((p[i] - self.lo[i]) / self.cell).floor();
            if t <= T::zero() {
                0
            } else {
                t.to_usize().unwrap_or(usize::MAX).min(self.dims[i] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; D]) -> usize {
        c.iter().zip(&self.dims).fold(0, |k, (&ci, &d)| k * d + ci)
    }

    fn scan_cell(&self, c: [usize; D], q: &[T; D], best: &mut (T, usize)) {
        let k = self.flat(c);
        for &j in &self.indices[self.starts[k]..self.starts[k + 1]] {
            let d = dist2(q, &self.points[j]);
            if better(d, j, best.0, best.1) {
                *best = (d, j);
            }
        }
    }

    /// Visits every in-grid cell at Chebyshev distance exactly `r` from `c`.
    fn scan_ring(&self, c: [usize; D], r: usize, q: &[T; D], best: &mut (T, usize)) {
        let lo: [usize; D] = std::array::from_fn(|i| c[i].saturating_sub(r));
        let hi: [usize; D] = std::array::from_fn(|i| (c[i] + r).min(self.dims[i] - 1));
        let mut cur = lo;
        loop {
            let on_ring = (0..D).any(|i| cur[i].abs_diff(c[i]) == r);
            if on_ring {
                self.scan_cell(cur, q, best);
            }
            let mut axis = D;
            while axis > 0 {
                axis -= 1;
                if cur[axis] < hi[axis] {
                    cur[axis] += 1;
                    break;
                }
                cur[axis] = lo[axis];
                if axis == 0 {
                    return;
                }
            }
        }
    }

    /// Lower bound on the distance from `q` to any cell outside the box of
    /// radius `r` around `c`; `None` once the box covers the whole grid.
    fn outside_bound(&self, c: [usize; D], r: usize, q: &[T; D]) -> Option<T> {
        let mut bound: Option<T> = None;
        for i in 0..D {
            if c[i] > r {
                let edge = self.lo[i] + T::from_usize(c[i] - r).unwrap() * self.cell;
                let d = (q[i] - edge).max(T::zero());
                bound = Some(bound.map_or(d, |b| b.min(d)));
            }
            if c[i] + r + 1 < self.dims[i] {
                let edge = self.lo[i] + T::from_usize(c[i] + r + 1).unwrap() * self.cell;
                let d = (edge - q[i]).max(T::zero());
                bound = Some(bound.map_or(d, |b| b.min(d)));
            }
        }
        bound
    }

    fn nearest(&self, q: &[T; D]) -> (T, usize) {
        let c = self.cell_of(q);
        let mut best = (T::infinity(), usize::MAX);
        // cell assignment can round across an edge; shave the bound accordingly
        let slack = self.cell * T::lit(1e-9);
        let mut r = 0;
        loop {
            self.scan_ring(c, r, q, &mut best);
            match self.outside_bound(c, r, q) {
                None => return best,
                Some(b) => {
                    let b = b - slack;
                    if b > T::zero() && b * b > best.0 {
                        return best;
                    }
                }
            }
            r += 1;
        }
    }
}
