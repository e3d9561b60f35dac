//! Planar, circular and temporal meshes with piecewise-linear bases.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{self, SparseMat};

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn inflate(&self, m: f64) -> Rect {
        Rect::new(self.x0 - m, self.y0 - m, self.x1 + m, self.y1 + m)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

/// Sparse evaluation of a piecewise-linear basis at one point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BasisVector {
    pub entries: Vec<(usize, f64)>,
}

impl BasisVector {
    fn from_weights(idx: &[usize], w: &[f64]) -> Self {
        let mut w: Vec<f64> = w.iter().map(|&v| v.max(0.0)).collect();
        for v in w.iter_mut() {
            if *v < 1e-12 {
                *v = 0.0;
            }
        }
        let s: f64 = w.iter().sum();
        let entries = idx
            .iter()
            .zip(&w)
            .filter(|(_, &v)| v > 0.0)
            .map(|(&i, &v)| (i, v / s))
            .collect();
        BasisVector { entries }
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * w[i]).sum()
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.entries.iter().filter(|e| e.0 == k).map(|e| e.1).sum()
    }
}

/// Lumped mass (diagonal) and stiffness matrices.
#[derive(Clone, Debug)]
pub struct MassStiffness {
    pub c: Vec<f64>,
    pub g: SparseMat,
}

pub trait FemMesh {
    fn node_count(&self) -> usize;
    fn measure(&self) -> f64;
    fn mass_stiffness(&self) -> MassStiffness;
}

#[derive(Clone, Debug)]
struct Buckets {
    origin: [f64; 2],
    cell: [f64; 2],
    dims: [usize; 2],
    items: Vec<Vec<usize>>,
}

impl Buckets {
    fn cell_of(&self, p: [f64; 2]) -> [usize; 2] {
        let f = |d: usize| {
            let c = ((p[d] - self.origin[d]) / self.cell[d]).floor();
            c.clamp(0.0, (self.dims[d] - 1) as f64) as usize
        };
        [f(0), f(1)]
    }

    fn range(&self, lo: [f64; 2], hi: [f64; 2]) -> impl Iterator<Item = usize> + '_ {
        let a = self.cell_of(lo);
        let b = self.cell_of(hi);
        (a[1]..=b[1]).flat_map(move |j| (a[0]..=b[0]).map(move |i| j * self.dims[0] + i))
    }
}

/// Conforming planar triangulation.
#[derive(Clone, Debug)]
pub struct TriMesh2D {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub arena: Rect,
    pub boundary_margin: f64,
    buckets: Buckets,
}

const GEOM_EPS: f64 = 1e-10;

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Builds a structured criss-cross triangulation of `arena` inflated by `margin`.
pub fn build_tri_mesh(arena: Rect, max_edge: f64, margin: f64) -> Result<TriMesh2D> {
    if !(max_edge > 0.0) || !(margin >= 0.0) {
        return Err(Error::invalid("max_edge must be positive and margin non-negative"));
    }
    if !(arena.width() > 0.0 && arena.height() > 0.0) {
        return Err(Error::invalid("arena has zero width or height"));
    }
    let dom = arena.inflate(margin);
    let side = max_edge / std::f64::consts::SQRT_2;
    let nx = ((dom.width() / side) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let ny = ((dom.height() / side) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let (hx, hy) = (dom.width() / nx as f64, dom.height() / ny as f64);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = if i == nx { dom.x1 } else { dom.x0 + i as f64 * hx };
            let y = if j == ny { dom.y1 } else { dom.y0 + j as f64 * hy };
            vertices.push([x, y]);
        }
    }
    let v = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1));
            if (i + j) % 2 == 0 {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }
    TriMesh2D::from_parts(vertices, triangles, arena, margin)
}

impl TriMesh2D {
    /// Validates orientation and builds the location index.
    pub fn from_parts(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        arena: Rect,
        boundary_margin: f64,
    ) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::invalid("mesh has no triangles"));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&k| k >= vertices.len()) {
                return Err(Error::invalid(format!("triangle {t} references a missing vertex")));
            }
            let a = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if !(a > 0.0) {
                return Err(Error::invalid(format!("triangle {t} has non-positive signed area")));
            }
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &vertices {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let nb = ((triangles.len() as f64 / 2.0).sqrt().ceil() as usize).max(1);
        let dims = [nb, nb];
        let cell = [
            ((hi[0] - lo[0]) / nb as f64).max(1e-300),
            ((hi[1] - lo[1]) / nb as f64).max(1e-300),
        ];
        let mut buckets = Buckets { origin: lo, cell, dims, items: vec![Vec::new(); nb * nb] };
        for (t, tri) in triangles.iter().enumerate() {
            let (mut tl, mut th) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for &k in tri {
                for d in 0..2 {
                    tl[d] = tl[d].min(vertices[k][d] - GEOM_EPS);
                    th[d] = th[d].max(vertices[k][d] + GEOM_EPS);
                }
            }
            let cells: Vec<usize> = buckets.range(tl, th).collect();
            for c in cells {
                buckets.items[c].push(t);
            }
        }
        Ok(TriMesh2D { vertices, triangles, arena, boundary_margin, buckets })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    fn corners(&self, t: usize) -> [[f64; 2]; 3] {
        let tri = self.triangles[t];
        [self.vertices[tri[0]], self.vertices[tri[1]], self.vertices[tri[2]]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        signed_area(a, b, c)
    }

    /// Raw barycentric coordinates of `p` with respect to triangle `t`.
    pub fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.corners(t);
        let area = signed_area(a, b, c);
        [signed_area(p, b, c) / area, signed_area(a, p, c) / area, signed_area(a, b, p) / area]
    }

    fn contains(&self, t: usize, p: [f64; 2]) -> bool {
        self.barycentric(t, p).iter().all(|&l| l >= -GEOM_EPS)
    }

    /// Smallest-index triangle containing `p`.
    pub fn locate(&self, p: [f64; 2]) -> Result<usize> {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::OutOfDomain { x: p[0], y: p[1] });
        }
        let b = self.buckets.cell_of(p);
        self.buckets.items[b[1] * self.buckets.dims[0] + b[0]]
            .iter()
            .copied()
            .filter(|&t| self.contains(t, p))
            .min()
            .ok_or(Error::OutOfDomain { x: p[0], y: p[1] })
    }

    /// Exhaustive scan; used as a test oracle.
    pub fn locate_brute_force(&self, p: [f64; 2]) -> Option<usize> {
        (0..self.triangles.len()).find(|&t| self.contains(t, p))
    }

    pub fn eval_in(&self, t: usize, p: [f64; 2]) -> BasisVector {
        BasisVector::from_weights(&self.triangles[t], &self.barycentric(t, p))
    }

    pub fn eval_basis(&self, p: [f64; 2]) -> Result<BasisVector> {
        Ok(self.eval_in(self.locate(p)?, p))
    }

    /// Parameters `s ∈ (0, 1)` where the segment `p → q` crosses a triangle edge.
    pub fn edge_crossings(&self, p: [f64; 2], q: [f64; 2]) -> Vec<f64> {
        let lo = [p[0].min(q[0]) - GEOM_EPS, p[1].min(q[1]) - GEOM_EPS];
        let hi = [p[0].max(q[0]) + GEOM_EPS, p[1].max(q[1]) + GEOM_EPS];
        let mut tris: Vec<usize> =
            self.buckets.range(lo, hi).flat_map(|c| self.buckets.items[c].iter().copied()).collect();
        tris.sort_unstable();
        tris.dedup();
        let d = [q[0] - p[0], q[1] - p[1]];
        let mut out = Vec::new();
        for t in tris {
            let tri = self.triangles[t];
            for k in 0..3 {
                let a = self.vertices[tri[k]];
                let b = self.vertices[tri[(k + 1) % 3]];
                let e = [b[0] - a[0], b[1] - a[1]];
                let den = d[0] * e[1] - d[1] * e[0];
                if den.abs() < 1e-14 * (d[0].hypot(d[1]) * e[0].hypot(e[1])).max(1e-300) {
                    continue;
                }
                let w = [a[0] - p[0], a[1] - p[1]];
                let s = (w[0] * e[1] - w[1] * e[0]) / den;
                let u = (w[0] * d[1] - w[1] * d[0]) / den;
                if s > 0.0 && s < 1.0 && (-GEOM_EPS..=1.0 + GEOM_EPS).contains(&u) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Indices of vertices lying inside the arena shrunk by `inset`.
    pub fn interior_nodes(&self, inset: f64) -> Vec<usize> {
        let r = self.arena.inflate(-inset);
        (0..self.vertices.len()).filter(|&k| r.contains(self.vertices[k])).collect()
    }

    pub fn max_edge_length(&self) -> f64 {
        let mut m: f64 = 0.0;
        for tri in &self.triangles {
            for k in 0..3 {
                let a = self.vertices[tri[k]];
                let b = self.vertices[tri[(k + 1) % 3]];
                m = m.max((a[0] - b[0]).hypot(a[1] - b[1]));
            }
        }
        m
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("vertices.csv"))?;
        w.write_record(["id", "x", "y"])?;
        for (i, v) in self.vertices.iter().enumerate() {
            w.write_record([i.to_string(), v[0].to_string(), v[1].to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("triangles.csv"))?;
        w.write_record(["id", "v0", "v1", "v2"])?;
        for (i, t) in self.triangles.iter().enumerate() {
            w.write_record([i, t[0], t[1], t[2]].map(|x| x.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a mesh written by [`TriMesh2D::write_csv`]. The arena is taken as the vertex bounding box.
    pub fn read_csv(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct V {
            id: usize,
            x: f64,
            y: f64,
        }
        #[derive(Deserialize)]
        struct T {
            id: usize,
            v0: usize,
            v1: usize,
            v2: usize,
        }
        let mut vertices = Vec::new();
        for (row, r) in csv::Reader::from_path(dir.join("vertices.csv"))?.deserialize::<V>().enumerate() {
            let r = r?;
            if r.id != row {
                return Err(Error::invalid(format!("vertices.csv: id {} at row {row}", r.id)));
            }
            vertices.push([r.x, r.y]);
        }
        let mut triangles = Vec::new();
        for (row, r) in csv::Reader::from_path(dir.join("triangles.csv"))?.deserialize::<T>().enumerate() {
            let r = r?;
            if r.id != row {
                return Err(Error::invalid(format!("triangles.csv: id {} at row {row}", r.id)));
            }
            triangles.push([r.v0, r.v1, r.v2]);
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &vertices {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        TriMesh2D::from_parts(vertices, triangles, Rect::new(lo[0], lo[1], hi[0], hi[1]), 0.0)
    }
}

impl FemMesh for TriMesh2D {
    fn node_count(&self) -> usize {
        self.vertices.len()
    }

    fn measure(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.area(t)).sum()
    }

    fn mass_stiffness(&self) -> MassStiffness {
        let mut c = vec![0.0; self.vertices.len()];
        let mut e = Vec::with_capacity(9 * self.triangles.len());
        for (t, tri) in self.triangles.iter().enumerate() {
            let [p0, p1, p2] = self.corners(t);
            let area = self.area(t);
            let b = [p1[1] - p2[1], p2[1] - p0[1], p0[1] - p1[1]];
            let cc = [p2[0] - p1[0], p0[0] - p2[0], p1[0] - p0[0]];
            for i in 0..3 {
                c[tri[i]] += area / 3.0;
                for j in 0..3 {
                    e.push((tri[i], tri[j], (b[i] * b[j] + cc[i] * cc[j]) / (4.0 * area)));
                }
            }
        }
        let n = self.vertices.len();
        MassStiffness { c, g: sparse::from_triplets(n, n, &e).expect("indices in range") }
    }
}

/// Knots on the circle `[0, 2π)`; arcs wrap from the last knot to the first.
#[derive(Clone, Debug, PartialEq)]
pub struct CircularMesh {
    pub knots: Vec<f64>,
}

pub fn build_circular_mesh(p: usize) -> Result<CircularMesh> {
    if p < 3 {
        return Err(Error::invalid(format!("circular mesh needs at least 3 knots, got {p}")));
    }
    CircularMesh::new((0..p).map(|k| TAU * k as f64 / p as f64).collect())
}

pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

impl CircularMesh {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 3 {
            return Err(Error::invalid("circular mesh needs at least 3 knots"));
        }
        if knots[0] < 0.0 || *knots.last().unwrap() >= TAU || knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("circular knots must increase strictly within [0, 2π)"));
        }
        Ok(CircularMesh { knots })
    }

    pub fn knot_count(&self) -> usize {
        self.knots.len()
    }

    /// Length of arc `k`, from knot `k` to knot `k + 1` (wrapping).
    pub fn arc_length(&self, k: usize) -> f64 {
        let p = self.knots.len();
        if k + 1 < p {
            self.knots[k + 1] - self.knots[k]
        } else {
            self.knots[0] + TAU - self.knots[p - 1]
        }
    }

    /// Arc containing `theta` (taken mod 2π).
    pub fn locate(&self, theta: f64) -> usize {
        let t = wrap_angle(theta);
        match self.knots.partition_point(|&k| k <= t) {
            0 => self.knots.len() - 1,
            i => i - 1,
        }
    }

    pub fn eval_in(&self, arc: usize, theta: f64) -> BasisVector {
        let p = self.knots.len();
        let mut off = wrap_angle(theta) - self.knots[arc];
        if off < 0.0 {
            off += TAU;
        }
        let f = (off / self.arc_length(arc)).clamp(0.0, 1.0);
        BasisVector::from_weights(&[arc, (arc + 1) % p], &[1.0 - f, f])
    }

    pub fn eval_basis(&self, theta: f64) -> BasisVector {
        self.eval_in(self.locate(theta), theta)
    }
}

impl FemMesh for CircularMesh {
    fn node_count(&self) -> usize {
        self.knots.len()
    }

    fn measure(&self) -> f64 {
        TAU
    }

    fn mass_stiffness(&self) -> MassStiffness {
        let p = self.knots.len();
        let mut c = vec![0.0; p];
        let mut e = Vec::with_capacity(4 * p);
        for k in 0..p {
            let (a, b, h) = (k, (k + 1) % p, self.arc_length(k));
            c[a] += h / 2.0;
            c[b] += h / 2.0;
            e.extend([(a, a, 1.0 / h), (b, b, 1.0 / h), (a, b, -1.0 / h), (b, a, -1.0 / h)]);
        }
        MassStiffness { c, g: sparse::from_triplets(p, p, &e).expect("indices in range") }
    }
}

/// Knots on `[0, T]` with Neumann ends.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalMesh {
    pub knots: Vec<f64>,
}

impl TemporalMesh {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("temporal knots must start at 0 and increase strictly"));
        }
        Ok(TemporalMesh { knots })
    }

    pub fn uniform(t_end: f64, cells: usize) -> Result<Self> {
        if cells == 0 || !(t_end > 0.0) {
            return Err(Error::invalid("uniform temporal mesh needs T > 0 and at least one cell"));
        }
        let mut k: Vec<f64> = (0..cells).map(|i| t_end * i as f64 / cells as f64).collect();
        k.push(t_end);
        TemporalMesh::new(k)
    }

    pub fn knot_count(&self) -> usize {
        self.knots.len()
    }

    pub fn duration(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Cell `[t_k, t_{k+1}]` containing `t`; knots resolve to the later cell except at `T`.
    pub fn locate(&self, t: f64) -> Result<usize> {
        let tol = 1e-12 * self.duration().max(1.0);
        if !(t >= -tol && t <= self.duration() + tol) {
            return Err(Error::invalid(format!("time {t} outside the temporal mesh")));
        }
        let i = self.knots.partition_point(|&k| k <= t);
        Ok(i.clamp(1, self.knots.len() - 1) - 1)
    }

    pub fn eval_in(&self, cell: usize, t: f64) -> BasisVector {
        let (a, b) = (self.knots[cell], self.knots[cell + 1]);
        let f = ((t - a) / (b - a)).clamp(0.0, 1.0);
        BasisVector::from_weights(&[cell, cell + 1], &[1.0 - f, f])
    }

    pub fn eval_basis(&self, t: f64) -> Result<BasisVector> {
        Ok(self.eval_in(self.locate(t)?, t))
    }
}

impl FemMesh for TemporalMesh {
    fn node_count(&self) -> usize {
        self.knots.len()
    }

    fn measure(&self) -> f64 {
        self.duration()
    }

    fn mass_stiffness(&self) -> MassStiffness {
        let p = self.knots.len();
        let mut c = vec![0.0; p];
        let mut e = Vec::with_capacity(4 * p);
        for k in 0..p - 1 {
            let h = self.knots[k + 1] - self.knots[k];
            c[k] += h / 2.0;
            c[k + 1] += h / 2.0;
            e.extend([(k, k, 1.0 / h), (k + 1, k + 1, 1.0 / h), (k, k + 1, -1.0 / h), (k + 1, k, -1.0 / h)]);
        }
        MassStiffness { c, g: sparse::from_triplets(p, p, &e).expect("indices in range") }
    }
}
