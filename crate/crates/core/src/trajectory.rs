//! Session ingestion, prism segmentation of the covariate path, quadrature
//! weights, temporal knot thinning and the kernel rate-map estimator.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{wrap_angle, BasisVector, CircularMesh, Rect, TemporalMesh, TriMesh2D};
use crate::model::ModelKind;
use crate::sparse::{self, SparseMat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub spike: bool,
}

impl Sample {
    pub fn pos(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionData {
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    pub times: Vec<f64>,
    /// Row of each spike in the session.
    pub sample_index: Vec<usize>,
}

impl SpikeTrain {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

impl SessionData {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("session has no samples"));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::NonMonotoneTime { path: "<memory>".into(), row: i + 2, time: w[1].t });
            }
        }
        Ok(SessionData { samples })
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    pub fn start(&self) -> f64 {
        self.samples.first().map_or(0.0, |s| s.t)
    }

    pub fn spike_train(&self) -> SpikeTrain {
        let sample_index: Vec<usize> = (0..self.samples.len()).filter(|&i| self.samples[i].spike).collect();
        SpikeTrain { times: sample_index.iter().map(|&i| self.samples[i].t).collect(), sample_index }
    }

    pub fn path_length(&self) -> f64 {
        self.samples.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum()
    }

    pub fn bounding_box(&self) -> Rect {
        let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for s in &self.samples {
            r.x0 = r.x0.min(s.x);
            r.y0 = r.y0.min(s.y);
            r.x1 = r.x1.max(s.x);
            r.y1 = r.y1.max(s.y);
        }
        r
    }

    /// Ratio of the largest to the smallest inter-sample gap.
    pub fn gap_ratio(&self) -> f64 {
        let gaps = self.samples.windows(2).map(|w| w[1].t - w[0].t);
        let (lo, hi) = gaps.fold((f64::INFINITY, 0.0f64), |(lo, hi), g| (lo.min(g), hi.max(g)));
        hi / lo
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time", "x", "y", "theta", "spike"])?;
        for s in &self.samples {
            w.write_record([
                format!("{}", s.t),
                format!("{}", s.x),
                format!("{}", s.y),
                format!("{}", s.theta),
                if s.spike { "1".into() } else { "0".into() },
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a `time,x,y,theta,spike` CSV. Row numbers in errors count the header as row 1.
pub fn load_session(path: &Path) -> Result<(SessionData, SpikeTrain)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    if header != ["time", "x", "y", "theta", "spike"] {
        return Err(Error::MalformedRow {
            path: path.into(),
            row: 1,
            message: format!("expected header time,x,y,theta,spike, found {}", header.join(",")),
        });
    }
    let mut samples: Vec<Sample> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::MalformedRow { path: path.into(), row, message: e.to_string() })?;
        if rec.len() != 5 {
            return Err(Error::MalformedRow { path: path.into(), row, message: format!("expected 5 fields, found {}", rec.len()) });
        }
        let num = |k: usize, name: &str| -> Result<f64> {
            let v: f64 = rec[k].parse().map_err(|_| Error::MalformedRow {
                path: path.into(),
                row,
                message: format!("{name} `{}` is not a number", &rec[k]),
            })?;
            if !v.is_finite() {
                return Err(Error::MalformedRow { path: path.into(), row, message: format!("{name} is not finite") });
            }
            Ok(v)
        };
        let (t, x, y, theta) = (num(0, "time")?, num(1, "x")?, num(2, "y")?, num(3, "theta")?);
        let spike = match &rec[4] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::MalformedRow { path: path.into(), row, message: format!("spike flag `{other}` is not 0 or 1") })
            }
        };
        if !(0.0..TAU).contains(&theta) {
            return Err(Error::AngleOutOfRange { path: path.into(), row, theta });
        }
        if let Some(prev) = samples.last() {
            if !(t > prev.t) {
                return Err(Error::NonMonotoneTime { path: path.into(), row, time: t });
            }
        }
        samples.push(Sample { t, x, y, theta, spike });
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!("{}: session has no samples", path.display())));
    }
    let data = SessionData { samples };
    let spikes = data.spike_train();
    Ok((data, spikes))
}

/// Meshes used to discretize the latent fields.
#[derive(Clone, Debug)]
pub struct Meshes {
    pub tri: TriMesh2D,
    pub circ: Option<CircularMesh>,
    pub temporal: Option<TemporalMesh>,
}

impl Meshes {
    pub fn p_omega(&self) -> usize {
        self.tri.vertex_count()
    }

    pub fn p_theta(&self) -> usize {
        self.circ.as_ref().map_or(0, |c| c.knot_count())
    }

    pub fn p_time(&self) -> usize {
        self.temporal.as_ref().map_or(0, |t| t.knot_count())
    }

    pub fn check(&self, kind: ModelKind) -> Result<()> {
        if kind.has_theta() && self.circ.is_none() {
            return Err(Error::MissingMesh { model: kind.code(), mesh: "circular" });
        }
        if kind.has_time() && self.temporal.is_none() {
            return Err(Error::MissingMesh { model: kind.code(), mesh: "temporal" });
        }
        Ok(())
    }

    /// Number of field weights for `kind`.
    pub fn field_dim(&self, kind: ModelKind) -> usize {
        if kind.has_theta() {
            self.p_omega() * self.p_theta()
        } else {
            self.p_omega()
        }
    }

    /// Field basis at `(s, θ)` given located cells, flattened as `θ_idx · p_Ω + ω_idx`.
    pub fn field_basis(&self, kind: ModelKind, tri: usize, arc: Option<usize>, p: [f64; 2], theta: f64) -> BasisVector {
        let bo = self.tri.eval_in(tri, p);
        if !kind.has_theta() {
            return bo;
        }
        let circ = self.circ.as_ref().expect("checked by Meshes::check");
        let arc = arc.unwrap_or_else(|| circ.locate(theta));
        let bt = circ.eval_in(arc, theta);
        let po = self.p_omega();
        let mut entries = Vec::with_capacity(bo.entries.len() * bt.entries.len());
        for &(r, wr) in &bt.entries {
            for &(c, wc) in &bo.entries {
                entries.push((r * po + c, wr * wc));
            }
        }
        BasisVector { entries }
    }
}

/// Piece of the path lying in a single prism.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub p0: [f64; 2],
    pub p1: [f64; 2],
    pub theta0: f64,
    pub theta1: f64,
    pub length: f64,
    pub tri: usize,
    pub arc: Option<usize>,
    pub cell: Option<usize>,
}

impl Segment {
    pub fn mid_time(&self) -> f64 {
        0.5 * (self.t0 + self.t1)
    }
}

#[derive(Clone, Debug)]
pub struct SegmentedPath {
    pub segments: Vec<Segment>,
}

impl SegmentedPath {
    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Signed shortest angular increment; exact antipodes go the positive way.
pub fn angular_step(from: f64, to: f64) -> f64 {
    let d = (to - from).rem_euclid(TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

fn knot_crossings(theta: f64, dtheta: f64, knots: &[f64], out: &mut Vec<f64>) {
    if dtheta == 0.0 {
        return;
    }
    for &k in knots {
        let off = if dtheta > 0.0 { (k - theta).rem_euclid(TAU) } else { (theta - k).rem_euclid(TAU) };
        let s = off / dtheta.abs();
        if s > 0.0 && s < 1.0 {
            out.push(s);
        }
    }
}

/// Splits each inter-sample step where it crosses a triangle edge, a circular
/// knot, a temporal knot or one of `breaks` (times), so every piece lies in one prism.
pub fn segment_path(
    data: &SessionData,
    tri: &TriMesh2D,
    circ: Option<&CircularMesh>,
    temporal: Option<&TemporalMesh>,
    breaks: &[f64],
) -> Result<SegmentedPath> {
    if data.samples.len() < 2 {
        return Err(Error::invalid("segmentation needs at least two samples"));
    }
    for s in &data.samples {
        tri.locate(s.pos())?;
    }
    let mut sorted_breaks: Vec<f64> = breaks.to_vec();
    if let Some(tm) = temporal {
        sorted_breaks.extend_from_slice(&tm.knots);
    }
    sorted_breaks.sort_by(|a, b| a.total_cmp(b));
    let mut segments = Vec::with_capacity(data.samples.len() * 2);
    let mut cuts = Vec::new();
    for w in data.samples.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (p, q) = (a.pos(), b.pos());
        let dt = b.t - a.t;
        let dth = angular_step(a.theta, b.theta);
        cuts.clear();
        cuts.push(0.0);
        cuts.push(1.0);
        if p != q {
            cuts.extend(tri.edge_crossings(p, q));
        }
        if let Some(c) = circ {
            knot_crossings(a.theta, dth, &c.knots, &mut cuts);
        }
        let lo = sorted_breaks.partition_point(|&t| t <= a.t);
        let hi = sorted_breaks.partition_point(|&t| t < b.t);
        cuts.extend(sorted_breaks[lo..hi].iter().map(|&t| (t - a.t) / dt));
        cuts.sort_by(|x, y| x.total_cmp(y));
        cuts.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
        if let Some(last) = cuts.last_mut() {
            *last = 1.0;
        }
        let chord = (q[0] - p[0]).hypot(q[1] - p[1]);
        let at = |s: f64| [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])];
        for k in 0..cuts.len() - 1 {
            let (s0, s1) = (cuts[k], cuts[k + 1]);
            let sm = 0.5 * (s0 + s1);
            let mid = at(sm);
            let theta_mid = wrap_angle(a.theta + sm * dth);
            let t_mid = a.t + sm * dt;
            segments.push(Segment {
                t0: if s0 == 0.0 { a.t } else { a.t + s0 * dt },
                t1: if s1 == 1.0 { b.t } else { a.t + s1 * dt },
                p0: if s0 == 0.0 { p } else { at(s0) },
                p1: if s1 == 1.0 { q } else { at(s1) },
                theta0: if s0 == 0.0 { a.theta } else { wrap_angle(a.theta + s0 * dth) },
                theta1: if s1 == 1.0 { b.theta } else { wrap_angle(a.theta + s1 * dth) },
                length: chord * (s1 - s0),
                tri: tri.locate(mid)?,
                arc: circ.map(|c| c.locate(theta_mid)),
                cell: match temporal {
                    Some(tm) => Some(tm.locate(t_mid)?),
                    None => None,
                },
            });
        }
    }
    Ok(SegmentedPath { segments })
}

/// Half-open time windows `[a, b)`; the window ending at the session end is closed.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeWindows {
    pub intervals: Vec<(f64, f64)>,
    pub end: f64,
}

impl TimeWindows {
    pub fn contains(&self, t: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| t >= a && (t < b || (b >= self.end && t <= b)))
    }
}

/// Quadrature vectors and observation matrices for one model kind.
#[derive(Clone, Debug)]
pub struct IntegrationWeights {
    pub kind: ModelKind,
    pub p_field: usize,
    pub p_time: usize,
    /// Field quadrature vector `b` (column sums of `B` for temporal kinds).
    pub b: Vec<f64>,
    /// `p_T × p_field` bilinear quadrature matrix for temporal kinds.
    pub bt: Option<SparseMat>,
    /// Spike rows of the field basis.
    pub a_obs: SparseMat,
    /// Spike rows of the temporal basis.
    pub a_obs_t: Option<SparseMat>,
    pub n_spikes: usize,
    pub total_length: f64,
}

impl IntegrationWeights {
    /// `A_obsᵀ 1`.
    pub fn spike_field_counts(&self) -> Vec<f64> {
        sparse::mul_transpose_vec(&self.a_obs, &vec![1.0; self.n_spikes])
    }

    pub fn spike_time_counts(&self) -> Option<Vec<f64>> {
        self.a_obs_t.as_ref().map(|a| sparse::mul_transpose_vec(a, &vec![1.0; self.n_spikes]))
    }
}

/// Assembles `b`, `B` and the spike basis rows. When `window` is given only
/// segments whose midpoint and spikes whose time fall inside it contribute.
pub fn integration_weights(
    segs: &SegmentedPath,
    meshes: &Meshes,
    kind: ModelKind,
    data: &SessionData,
    spikes: &SpikeTrain,
    window: Option<&TimeWindows>,
) -> Result<IntegrationWeights> {
    meshes.check(kind)?;
    let p_field = meshes.field_dim(kind);
    let p_time = if kind.has_time() { meshes.p_time() } else { 0 };
    let temporal = meshes.temporal.as_ref();
    let mut b = vec![0.0; p_field];
    let mut bt_entries = Vec::new();
    let mut total_length = 0.0;
    for seg in &segs.segments {
        if let Some(w) = window {
            if !w.contains(seg.mid_time()) {
                continue;
            }
        }
        if kind.has_theta() && seg.arc.is_none() {
            return Err(Error::MissingMesh { model: kind.code(), mesh: "circular" });
        }
        if kind.has_time() && seg.cell.is_none() {
            return Err(Error::MissingMesh { model: kind.code(), mesh: "temporal" });
        }
        total_length += seg.length;
        if seg.length == 0.0 {
            continue;
        }
        let half = 0.5 * seg.length;
        for (p, th, t) in [(seg.p0, seg.theta0, seg.t0), (seg.p1, seg.theta1, seg.t1)] {
            let f = meshes.field_basis(kind, seg.tri, seg.arc, p, th);
            for &(c, wc) in &f.entries {
                b[c] += half * wc;
            }
            if kind.has_time() {
                let tb = temporal.expect("checked").eval_in(seg.cell.expect("checked"), t);
                for &(r, wr) in &tb.entries {
                    for &(c, wc) in &f.entries {
                        bt_entries.push((r, c, half * wr * wc));
                    }
                }
            }
        }
    }
    let mut obs = Vec::new();
    let mut obs_t = Vec::new();
    let mut n = 0;
    for (&t, &i) in spikes.times.iter().zip(&spikes.sample_index) {
        if let Some(w) = window {
            if !w.contains(t) {
                continue;
            }
        }
        let s = &data.samples[i];
        let tri = meshes.tri.locate(s.pos())?;
        let f = meshes.field_basis(kind, tri, None, s.pos(), s.theta);
        obs.extend(f.entries.iter().map(|&(c, w)| (n, c, w)));
        if kind.has_time() {
            let tb = temporal.expect("checked").eval_basis(t)?;
            obs_t.extend(tb.entries.iter().map(|&(r, w)| (n, r, w)));
        }
        n += 1;
    }
    let bt = if kind.has_time() { Some(sparse::from_triplets(p_time, p_field, &bt_entries)?) } else { None };
    let a_obs_t = if kind.has_time() { Some(sparse::from_triplets(n, p_time, &obs_t)?) } else { None };
    Ok(IntegrationWeights {
        kind,
        p_field,
        p_time,
        b,
        bt,
        a_obs: sparse::from_triplets(n, p_field, &obs)?,
        a_obs_t,
        n_spikes: n,
        total_length,
    })
}

/// Greedy subsequence of segment boundary times with gaps of at least `spacing`,
/// always containing 0 and the session end.
pub fn thin_temporal_knots(segs: &SegmentedPath, spacing: f64) -> Result<TemporalMesh> {
    if !(spacing > 0.0) {
        return Err(Error::invalid("temporal knot spacing must be positive"));
    }
    let end = segs.segments.last().map(|s| s.t1).ok_or_else(|| Error::invalid("empty path"))?;
    let mut knots = vec![0.0];
    for s in &segs.segments {
        if s.t0 - knots.last().unwrap() >= spacing {
            knots.push(s.t0);
        }
    }
    if knots.len() > 1 && end - knots.last().unwrap() < spacing {
        knots.pop();
    }
    knots.push(end);
    TemporalMesh::new(knots)
}

/// Regular raster of cell centres over a rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub rect: Rect,
    pub nx: usize,
    pub ny: usize,
}

impl Raster {
    pub fn centre(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.rect.x0 + (i as f64 + 0.5) * self.rect.width() / self.nx as f64,
            self.rect.y0 + (j as f64 + 0.5) * self.rect.height() / self.ny as f64,
        ]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `x,y,value` rows, row-major with `x` varying fastest.
    pub fn write_csv(&self, values: &[f64], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "value"])?;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let c = self.centre(i, j);
                w.write_record([c[0].to_string(), c[1].to_string(), values[j * self.nx + i].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Kernel estimates of spikes per second, spikes per cm and local speed.
#[derive(Clone, Debug)]
pub struct RateMap {
    pub raster: Raster,
    pub bandwidth: f64,
    pub per_time: Vec<f64>,
    pub per_length: Vec<f64>,
    pub speed: Vec<f64>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 1e-300 {
        num / den
    } else {
        0.0
    }
}

/// Raster cells within 6h of `p` with their kernel values.
fn kernel_support(raster: &Raster, p: [f64; 2], h: f64, norm: f64) -> Vec<(usize, f64)> {
    let cut = 6.0 * h;
    let (dx, dy) = (raster.rect.width() / raster.nx as f64, raster.rect.height() / raster.ny as f64);
    let span = |lo: f64, hi: f64, origin: f64, d: f64, n: usize| {
        let a = ((lo - origin) / d - 0.5).floor().clamp(0.0, n as f64) as usize;
        let b = ((hi - origin) / d - 0.5).ceil().clamp(-1.0, n as f64 - 1.0) as i64 + 1;
        a..(b.max(0) as usize).max(a)
    };
    let mut out = Vec::new();
    for j in span(p[1] - cut, p[1] + cut, raster.rect.y0, dy, raster.ny) {
        for i in span(p[0] - cut, p[0] + cut, raster.rect.x0, dx, raster.nx) {
            let c = raster.centre(i, j);
            let r2 = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
            if r2 <= cut * cut {
                out.push((j * raster.nx + i, norm * (-0.5 * r2 / (h * h)).exp()));
            }
        }
    }
    out
}

/// Gaussian kernel smoother with trapezoid time and path integrals, truncated at 6h.
pub fn rate_map_kernel(data: &SessionData, spikes: &SpikeTrain, h: f64, raster: Raster) -> Result<RateMap> {
    if !(h > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    if data.samples.len() < 2 {
        return Err(Error::invalid("rate map needs at least two samples"));
    }
    if raster.nx == 0 || raster.ny == 0 {
        return Err(Error::invalid("raster must have at least one cell"));
    }
    let n = data.samples.len();
    let mut wt = vec![0.0; n];
    let mut wl = vec![0.0; n];
    for i in 0..n - 1 {
        let (a, b) = (&data.samples[i], &data.samples[i + 1]);
        let dt = 0.5 * (b.t - a.t);
        let dl = 0.5 * (b.x - a.x).hypot(b.y - a.y);
        wt[i] += dt;
        wt[i + 1] += dt;
        wl[i] += dl;
        wl[i + 1] += dl;
    }
    let m = raster.len();
    let mut den_t = vec![0.0; m];
    let mut den_l = vec![0.0; m];
    let mut num = vec![0.0; m];
    let norm = 1.0 / (TAU * h * h);
    for (i, s) in data.samples.iter().enumerate() {
        for (k, v) in kernel_support(&raster, s.pos(), h, norm) {
            den_t[k] += wt[i] * v;
            den_l[k] += wl[i] * v;
        }
    }
    for &i in &spikes.sample_index {
        for (k, v) in kernel_support(&raster, data.samples[i].pos(), h, norm) {
            num[k] += v;
        }
    }
    Ok(RateMap {
        raster,
        bandwidth: h,
        per_time: (0..m).map(|k| ratio(num[k], den_t[k])).collect(),
        per_length: (0..m).map(|k| ratio(num[k], den_l[k])).collect(),
        speed: (0..m).map(|k| ratio(den_l[k], den_t[k])).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_circular_mesh, build_tri_mesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn sample(t: f64, x: f64, y: f64, theta: f64) -> Sample {
        Sample { t, x, y, theta, spike: false }
    }

    fn wander(n: usize, seed: u64) -> SessionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = [50.0, 50.0];
        let mut th: f64 = 1.0;
        let mut s = Vec::new();
        for i in 0..n {
            s.push(Sample { t: i as f64 * 0.1, x: p[0], y: p[1], theta: wrap_angle(th), spike: rng.random_bool(0.1) });
            th += rng.random_range(-0.6..0.6);
            p[0] = (p[0] + 1.5 * th.cos()).clamp(1.0, 99.0);
            p[1] = (p[1] + 1.5 * th.sin()).clamp(1.0, 99.0);
        }
        SessionData::new(s).unwrap()
    }

    #[test]
    fn load_well_formed_and_rejects() {
        let f = write("time,x,y,theta,spike\n0,1,2,0.5,0\n0.1,1.5,2,0.6,1\n0.2,2,2,6.0,0\n");
        let (d, s) = load_session(f.path()).unwrap();
        assert_eq!(d.samples.len(), 3);
        assert_eq!(s.times, vec![0.1]);
        let f = write("time,x,y,theta,spike\n0,1,2,6.5,0\n");
        assert!(matches!(load_session(f.path()), Err(Error::AngleOutOfRange { row: 2, .. })));
        let f = write("time,x,y,theta,spike\n0,1,2,0.5,0\n0,1,2,0.5,0\n");
        assert!(matches!(load_session(f.path()), Err(Error::NonMonotoneTime { row: 3, .. })));
        let f = write("time,x,y,theta,spike\n0,1,abc,0.5,0\n");
        assert!(matches!(load_session(f.path()), Err(Error::MalformedRow { row: 2, .. })));
        let f = write("time,x,y,theta,spike\n0,1,2,0.5,2\n");
        assert!(matches!(load_session(f.path()), Err(Error::MalformedRow { row: 2, .. })));
    }

    #[test]
    fn single_triangle_single_segment() {
        let m = build_tri_mesh(Rect::new(0.0, 0.0, 10.0, 10.0), 5.0, 0.0).unwrap();
        let d = SessionData::new(vec![sample(0.0, 0.5, 0.2, 1.0), sample(1.0, 0.9, 0.3, 1.0)]).unwrap();
        let segs = segment_path(&d, &m, None, None, &[]).unwrap();
        assert_eq!(segs.len(), 1);
    }

    #[test]
    fn one_edge_crossing_gives_two_segments() {
        let m = build_tri_mesh(Rect::new(0.0, 0.0, 1.0, 1.0), 2f64.sqrt(), 0.0).unwrap();
        // Cross the shared diagonal of the single cell once.
        let d = SessionData::new(vec![sample(0.0, 0.7, 0.2, 1.0), sample(1.0, 0.3, 0.6, 1.0)]).unwrap();
        let segs = segment_path(&d, &m, None, None, &[]).unwrap();
        assert_eq!(segs.len(), 2);
        assert!((segs.total_length() - d.path_length()).abs() < 1e-15);
    }

    #[test]
    fn wrap_knot_split() {
        let m = build_tri_mesh(Rect::new(0.0, 0.0, 10.0, 10.0), 20.0, 0.0).unwrap();
        let c = build_circular_mesh(4).unwrap();
        let d = SessionData::new(vec![sample(0.0, 1.0, 1.0, 7.0 * PI / 4.0), sample(1.0, 1.2, 1.0, PI / 4.0)]).unwrap();
        let segs = segment_path(&d, &m, Some(&c), None, &[]).unwrap();
        assert_eq!(segs.len(), 2);
        assert!(segs.segments[0].theta1 == 0.0 || (segs.segments[0].theta1 - TAU).abs() < 1e-12);
        assert_eq!(segs.segments[0].arc, Some(3));
        assert_eq!(segs.segments[1].arc, Some(0));
        assert!((segs.segments[0].t1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn antipodal_step_goes_positive() {
        assert!((angular_step(0.0, PI) - PI).abs() < 1e-15);
        assert!((angular_step(PI, 0.0) - PI).abs() < 1e-15);
        assert!((angular_step(0.1, TAU - 0.1) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn segmentation_invariants() {
        let d = wander(600, 4);
        let m = build_tri_mesh(Rect::new(0.0, 0.0, 100.0, 100.0), 7.0, 5.0).unwrap();
        let c = build_circular_mesh(8).unwrap();
        let tm = TemporalMesh::uniform(d.duration(), 13).unwrap();
        let segs = segment_path(&d, &m, Some(&c), Some(&tm), &[]).unwrap();
        assert!((segs.total_length() - d.path_length()).abs() < 1e-9 * d.path_length());
        let mut t = 0.0;
        for s in &segs.segments {
            assert!((s.t0 - t).abs() < 1e-12);
            t = s.t1;
            // Prism purity: both ends lie in the recorded cells.
            for (p, th, tt) in [(s.p0, s.theta0, s.t0), (s.p1, s.theta1, s.t1)] {
                assert!(m.barycentric(s.tri, p).iter().all(|&l| l > -1e-9));
                let arc = s.arc.unwrap();
                let off = (th - c.knots[arc]).rem_euclid(TAU);
                assert!(off <= c.arc_length(arc) + 1e-9 || off > TAU - 1e-9);
                let cell = s.cell.unwrap();
                assert!(tt >= tm.knots[cell] - 1e-9 && tt <= tm.knots[cell + 1] + 1e-9);
            }
        }
        assert!((t - d.duration()).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_path_length() {
        let d = wander(500, 8);
        let spikes = d.spike_train();
        let meshes = Meshes {
            tri: build_tri_mesh(Rect::new(0.0, 0.0, 100.0, 100.0), 8.0, 5.0).unwrap(),
            circ: Some(build_circular_mesh(6).unwrap()),
            temporal: Some(TemporalMesh::uniform(d.duration(), 7).unwrap()),
        };
        let segs = segment_path(&d, &meshes.tri, meshes.circ.as_ref(), meshes.temporal.as_ref(), &[]).unwrap();
        let len = d.path_length();
        for kind in ModelKind::ALL {
            let iw = integration_weights(&segs, &meshes, kind, &d, &spikes, None).unwrap();
            let s: f64 = iw.b.iter().sum();
            assert!((s - len).abs() < 1e-10 * len, "{kind}");
            assert!(iw.b.iter().all(|&v| v >= 0.0));
            if let Some(bt) = &iw.bt {
                let total: f64 = sparse::entries(bt).iter().map(|e| e.2).sum();
                assert!((total - len).abs() < 1e-10 * len);
                let colsum = sparse::mul_transpose_vec(bt, &vec![1.0; iw.p_time]);
                for (a, b) in colsum.iter().zip(&iw.b) {
                    assert!((a - b).abs() < 1e-9 * len);
                }
            }
            let rows = sparse::mul_vec(&iw.a_obs, &vec![1.0; iw.p_field]);
            assert!(rows.iter().all(|r| (r - 1.0).abs() < 1e-12));
            assert_eq!(iw.n_spikes, spikes.len());
        }
        let iw = integration_weights(&segs, &meshes, ModelKind::Omega, &d, &spikes, None).unwrap();
        let iw2 = integration_weights(&segs, &meshes, ModelKind::OmegaTheta, &d, &spikes, None).unwrap();
        let po = meshes.p_omega();
        for k in 0..po {
            let folded: f64 = (0..meshes.p_theta()).map(|r| iw2.b[r * po + k]).sum();
            assert!((folded - iw.b[k]).abs() < 1e-9 * len);
        }
    }

    #[test]
    fn single_segment_weights_by_hand() {
        let m = build_tri_mesh(Rect::new(0.0, 0.0, 10.0, 10.0), 5.0, 0.0).unwrap();
        let d = SessionData::new(vec![sample(0.0, 0.5, 0.2, 1.0), sample(1.0, 0.9, 0.3, 1.0)]).unwrap();
        let meshes = Meshes { tri: m, circ: None, temporal: None };
        let segs = segment_path(&d, &meshes.tri, None, None, &[]).unwrap();
        let iw = integration_weights(&segs, &meshes, ModelKind::Omega, &d, &d.spike_train(), None).unwrap();
        let l = d.path_length();
        let (b0, b1) = (meshes.tri.eval_basis([0.5, 0.2]).unwrap(), meshes.tri.eval_basis([0.9, 0.3]).unwrap());
        for k in 0..meshes.p_omega() {
            let want = 0.5 * l * (b0.weight(k) + b1.weight(k));
            assert!((iw.b[k] - want).abs() < 1e-15);
        }
        assert_eq!(iw.b.iter().filter(|&&v| v > 0.0).count(), 3);
        assert!(matches!(
            integration_weights(&segs, &meshes, ModelKind::OmegaTheta, &d, &d.spike_train(), None),
            Err(Error::MissingMesh { .. })
        ));
    }

    #[test]
    fn refinement_keeps_weights() {
        let d = wander(300, 2);
        let mut fine = Vec::new();
        for w in d.samples.windows(2) {
            fine.push(w[0]);
            let dth = angular_step(w[0].theta, w[1].theta);
            fine.push(Sample {
                t: 0.5 * (w[0].t + w[1].t),
                x: 0.5 * (w[0].x + w[1].x),
                y: 0.5 * (w[0].y + w[1].y),
                theta: wrap_angle(w[0].theta + 0.5 * dth),
                spike: false,
            });
        }
        fine.push(*d.samples.last().unwrap());
        let df = SessionData::new(fine).unwrap();
        let meshes = Meshes { tri: build_tri_mesh(Rect::new(0.0, 0.0, 100.0, 100.0), 8.0, 5.0).unwrap(), circ: None, temporal: None };
        let w = |d: &SessionData| {
            let s = segment_path(d, &meshes.tri, None, None, &[]).unwrap();
            integration_weights(&s, &meshes, ModelKind::Omega, d, &d.spike_train(), None).unwrap().b
        };
        let (a, b) = (w(&d), w(&df));
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        assert!((sa - sb).abs() < 1e-9 * sa);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-300) || (x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn thinning_rules() {
        let d = wander(601, 1);
        let m = build_tri_mesh(Rect::new(0.0, 0.0, 100.0, 100.0), 3.0, 5.0).unwrap();
        let segs = segment_path(&d, &m, None, None, &[]).unwrap();
        let tm = thin_temporal_knots(&segs, 1000.0).unwrap();
        assert_eq!(tm.knots, vec![0.0, d.duration()]);
        let tm = thin_temporal_knots(&segs, 0.5).unwrap();
        for w in tm.knots.windows(2) {
            let g = w[1] - w[0];
            assert!((0.5 - 1e-12..=1.0).contains(&g), "gap {g}");
        }
        let s2 = segment_path(&d, &m, None, Some(&tm), &[]).unwrap();
        assert!((s2.total_length() - segs.total_length()).abs() < 1e-9 * segs.total_length());
    }

    #[test]
    fn rate_map_identities() {
        let d = wander(800, 3);
        let spikes = d.spike_train();
        let raster = Raster { rect: Rect::new(0.0, 0.0, 100.0, 100.0), nx: 25, ny: 25 };
        let rm = rate_map_kernel(&d, &spikes, 3.0, raster).unwrap();
        for k in 0..raster.len() {
            if rm.speed[k] > 0.0 && rm.per_length[k] > 0.0 {
                assert!((rm.per_time[k] - rm.per_length[k] * rm.speed[k]).abs() <= 1e-10 * rm.per_time[k].max(1e-300));
            }
        }
        let empty = SpikeTrain { times: vec![], sample_index: vec![] };
        let rm = rate_map_kernel(&d, &empty, 3.0, raster).unwrap();
        assert!(rm.per_time.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rate_map_recovers_homogeneous_rate() {
        // Back-and-forth at constant speed along y = 50; spikes Poisson in time at rate 2/s.
        let lambda = 2.0;
        let mut acc = Vec::new();
        for rep in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + rep);
            let dt = 0.05;
            let mut s = Vec::new();
            for i in 0..4000 {
                let t = i as f64 * dt;
                let phase = (t * 10.0) % 160.0;
                let x = 10.0 + if phase < 80.0 { phase } else { 160.0 - phase };
                s.push(Sample { t, x, y: 50.0, theta: 0.0, spike: rng.random_bool(lambda * dt) });
            }
            let d = SessionData::new(s).unwrap();
            let raster = Raster { rect: Rect::new(30.0, 49.0, 70.0, 51.0), nx: 10, ny: 1 };
            let rm = rate_map_kernel(&d, &d.spike_train(), 3.0, raster).unwrap();
            acc.push(rm.per_time.iter().sum::<f64>() / 10.0);
        }
        let m = acc.iter().sum::<f64>() / acc.len() as f64;
        assert!((m - lambda).abs() < 0.1 * lambda, "mean {m}");
    }

    #[test]
    fn windows_filter_spikes_and_segments() {
        let d = wander(400, 5);
        let spikes = d.spike_train();
        let meshes = Meshes { tri: build_tri_mesh(Rect::new(0.0, 0.0, 100.0, 100.0), 8.0, 5.0).unwrap(), circ: None, temporal: None };
        let end = d.duration();
        let cut = 17.3;
        let segs = segment_path(&d, &meshes.tri, None, None, &[cut]).unwrap();
        let wa = TimeWindows { intervals: vec![(0.0, cut)], end };
        let wb = TimeWindows { intervals: vec![(cut, end)], end };
        let full = integration_weights(&segs, &meshes, ModelKind::Omega, &d, &spikes, None).unwrap();
        let a = integration_weights(&segs, &meshes, ModelKind::Omega, &d, &spikes, Some(&wa)).unwrap();
        let b = integration_weights(&segs, &meshes, ModelKind::Omega, &d, &spikes, Some(&wb)).unwrap();
        assert_eq!(a.n_spikes + b.n_spikes, full.n_spikes);
        for k in 0..full.p_field {
            assert!((a.b[k] + b.b[k] - full.b[k]).abs() < 1e-9);
        }
    }
}
