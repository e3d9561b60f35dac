//! Synthetic trajectories, ground-truth latent fields and Cox-process spike
//! simulation by thinning.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{build_circular_mesh, build_tri_mesh, wrap_angle, Rect, TemporalMesh};
use crate::model::{Hyperparameters, ModelKind, ModelSpec, PosteriorFit, PriorConfig};
use crate::spde::sample_with_factor;
use crate::sparse::Cholesky;
use crate::trajectory::{angular_step, segment_path, Meshes, RateMap, Sample, Segment, SegmentedPath, SessionData, SpikeTrain};

/// Reflected correlated random walk settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkConfig {
    /// Mean speed in cm/s; each step draws uniformly from `[0.5, 1.5]` times this.
    pub speed: f64,
    /// In `[0, 1)`: 0 gives independent step directions.
    pub persistence: f64,
    /// Standard deviation (rad) of the angular noise added to the heading to form `θ`.
    pub heading_noise: f64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig { speed: 20.0, persistence: 0.9, heading_noise: 0.3 }
    }
}

fn reflect(v: f64, lo: f64, hi: f64) -> (f64, bool) {
    let mut v = v;
    let mut flipped = false;
    for _ in 0..8 {
        if v < lo {
            v = 2.0 * lo - v;
            flipped = !flipped;
        } else if v > hi {
            v = 2.0 * hi - v;
            flipped = !flipped;
        } else {
            break;
        }
    }
    (v.clamp(lo, hi), flipped)
}

/// Samples every `dt` seconds on `[0, duration]` of a walk reflected at the
/// arena walls. `θ` is the movement heading plus wrapped Gaussian noise.
pub fn random_walk_trajectory(duration: f64, dt: f64, arena: Rect, walk: &WalkConfig, seed: u64) -> Result<SessionData> {
    if !(dt > 0.0) || !(duration > dt) {
        return Err(Error::invalid(format!("need 0 < dt < T, got dt={dt}, T={duration}")));
    }
    if !(0.0..1.0).contains(&walk.persistence) || !(walk.speed >= 0.0) || !(walk.heading_noise >= 0.0) {
        return Err(Error::invalid("walk needs persistence in [0, 1), non-negative speed and noise"));
    }
    if !(arena.width() > 0.0 && arena.height() > 0.0) {
        return Err(Error::invalid("arena must have positive area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, walk.heading_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let eps = 1e-9 * arena.width().max(arena.height());
    let (lo_x, hi_x, lo_y, hi_y) = (arena.x0 + eps, arena.x1 - eps, arena.y0 + eps, arena.y1 - eps);
    let n = (duration / dt).round() as usize + 1;
    let mut p = [rng.random_range(lo_x..hi_x), rng.random_range(lo_y..hi_y)];
    let mut heading: f64 = rng.random_range(-PI..PI);
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        samples.push(Sample { t, x: p[0], y: p[1], theta: wrap_angle(heading + noise.sample(&mut rng)), spike: false });
        heading += (1.0 - walk.persistence) * rng.random_range(-PI..PI);
        let step = walk.speed * dt * rng.random_range(0.5..1.5);
        let (x, fx) = reflect(p[0] + step * heading.cos(), lo_x, hi_x);
        let (y, fy) = reflect(p[1] + step * heading.sin(), lo_y, hi_y);
        let (mut dx, mut dy) = (heading.cos(), heading.sin());
        if fx {
            dx = -dx;
        }
        if fy {
            dy = -dy;
        }
        heading = dy.atan2(dx);
        p = [x, y];
    }
    SessionData::new(samples)
}

/// Intensity per unit path length at fraction `s ∈ [0, 1]` along a segment.
pub trait IntensitySource {
    fn per_length(&self, seg: &Segment, s: f64) -> f64;
}

/// `exp(β + field + time)` from a latent vector on meshes.
#[derive(Clone, Copy, Debug)]
pub struct LatentIntensity<'a> {
    pub meshes: &'a Meshes,
    pub kind: ModelKind,
    pub latent: &'a [f64],
}

impl LatentIntensity<'_> {
    pub fn log_intensity(&self, seg: &Segment, s: f64) -> f64 {
        let p = [seg.p0[0] + s * (seg.p1[0] - seg.p0[0]), seg.p0[1] + s * (seg.p1[1] - seg.p0[1])];
        let theta = wrap_angle(seg.theta0 + s * angular_step(seg.theta0, seg.theta1));
        let pf = self.meshes.field_dim(self.kind);
        let f = self.meshes.field_basis(self.kind, seg.tri, seg.arc, p, theta);
        let mut eta = self.latent[0] + f.dot(&self.latent[1..1 + pf]);
        if self.kind.has_time() {
            let t = seg.t0 + s * (seg.t1 - seg.t0);
            let tm = self.meshes.temporal.as_ref().expect("temporal model has a temporal mesh");
            let b = match seg.cell {
                Some(c) => tm.eval_in(c, t),
                None => tm.eval_basis(t).expect("segment inside the temporal mesh"),
            };
            eta += b.dot(&self.latent[1 + pf..]);
        }
        eta
    }
}

impl IntensitySource for LatentIntensity<'_> {
    fn per_length(&self, seg: &Segment, s: f64) -> f64 {
        self.log_intensity(seg, s).exp()
    }
}

/// Bilinear interpolation of a per-length rate map between cell centres.
#[derive(Clone, Copy, Debug)]
pub struct RasterIntensity<'a> {
    pub map: &'a RateMap,
}

impl RasterIntensity<'_> {
    pub fn at(&self, p: [f64; 2]) -> f64 {
        let r = &self.map.raster;
        let (dx, dy) = (r.rect.width() / r.nx as f64, r.rect.height() / r.ny as f64);
        let fx = ((p[0] - r.rect.x0) / dx - 0.5).clamp(0.0, (r.nx - 1) as f64);
        let fy = ((p[1] - r.rect.y0) / dy - 0.5).clamp(0.0, (r.ny - 1) as f64);
        let (i0, j0) = (fx.floor() as usize, fy.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(r.nx - 1), (j0 + 1).min(r.ny - 1));
        let (u, v) = (fx - i0 as f64, fy - j0 as f64);
        let g = |i: usize, j: usize| self.map.per_length[j * r.nx + i];
        (1.0 - v) * ((1.0 - u) * g(i0, j0) + u * g(i1, j0)) + v * ((1.0 - u) * g(i0, j1) + u * g(i1, j1))
    }
}

impl IntensitySource for RasterIntensity<'_> {
    fn per_length(&self, seg: &Segment, s: f64) -> f64 {
        self.at([seg.p0[0] + s * (seg.p1[0] - seg.p0[0]), seg.p0[1] + s * (seg.p1[1] - seg.p0[1])])
    }
}

/// Per-length intensity at both endpoints of every segment.
pub fn intensity_on_path<S: IntensitySource>(src: &S, segs: &SegmentedPath) -> Vec<(f64, f64)> {
    segs.segments.iter().map(|s| (src.per_length(s, 0.0), src.per_length(s, 1.0))).collect()
}

/// Time interval with a temporal rate (events/s) linear between its endpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatePiece {
    pub t0: f64,
    pub t1: f64,
    pub r0: f64,
    pub r1: f64,
}

impl RatePiece {
    pub fn integral(&self) -> f64 {
        0.5 * (self.r0 + self.r1) * (self.t1 - self.t0)
    }

    /// `∫_{t0}^{t} r`.
    pub fn partial(&self, t: f64) -> f64 {
        let d = self.t1 - self.t0;
        if d <= 0.0 {
            return 0.0;
        }
        let u = ((t - self.t0) / d).clamp(0.0, 1.0);
        d * (self.r0 * u + 0.5 * (self.r1 - self.r0) * u * u)
    }
}

const MAX_DEPTH: usize = 24;

/// Piecewise-linear temporal rate along the path: speed times per-length intensity,
/// with segments halved until the endpoint log-intensity gap is below `max_log_gap`.
pub fn rate_pieces<S: IntensitySource>(src: &S, segs: &SegmentedPath, max_log_gap: f64) -> Vec<RatePiece> {
    let mut out = Vec::with_capacity(segs.len());
    for seg in &segs.segments {
        let dt = seg.t1 - seg.t0;
        if !(dt > 0.0) {
            continue;
        }
        let speed = seg.length / dt;
        if speed == 0.0 {
            out.push(RatePiece { t0: seg.t0, t1: seg.t1, r0: 0.0, r1: 0.0 });
            continue;
        }
        let i0 = src.per_length(seg, 0.0);
        let i1 = src.per_length(seg, 1.0);
        split(src, seg, speed, (0.0, i0), (1.0, i1), max_log_gap, 0, &mut out);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn split<S: IntensitySource>(
    src: &S,
    seg: &Segment,
    speed: f64,
    a: (f64, f64),
    b: (f64, f64),
    gap: f64,
    depth: usize,
    out: &mut Vec<RatePiece>,
) {
    let close = (a.1 == 0.0 && b.1 == 0.0) || (a.1 > 0.0 && b.1 > 0.0 && (a.1.ln() - b.1.ln()).abs() < gap);
    if close || depth >= MAX_DEPTH {
        let t = |s: f64| if s == 1.0 { seg.t1 } else { seg.t0 + s * (seg.t1 - seg.t0) };
        out.push(RatePiece { t0: t(a.0), t1: t(b.0), r0: speed * a.1, r1: speed * b.1 });
        return;
    }
    let sm = 0.5 * (a.0 + b.0);
    let m = (sm, src.per_length(seg, sm));
    split(src, seg, speed, a, m, gap, depth + 1, out);
    split(src, seg, speed, m, b, gap, depth + 1, out);
}

/// Compensator `Λ(t) = ∫_0^t r` over sorted pieces.
#[derive(Clone, Debug)]
pub struct Compensator {
    pieces: Vec<RatePiece>,
    prefix: Vec<f64>,
}

impl Compensator {
    pub fn new(pieces: Vec<RatePiece>) -> Self {
        let mut prefix = Vec::with_capacity(pieces.len() + 1);
        prefix.push(0.0);
        for p in &pieces {
            prefix.push(prefix.last().unwrap() + p.integral());
        }
        Compensator { pieces, prefix }
    }

    pub fn total(&self) -> f64 {
        *self.prefix.last().unwrap()
    }

    pub fn at(&self, t: f64) -> f64 {
        let k = self.pieces.partition_point(|p| p.t1 <= t);
        if k == self.pieces.len() {
            return self.total();
        }
        self.prefix[k] + self.pieces[k].partial(t)
    }
}

/// Event times of a Poisson process with the given piecewise-linear rate, by thinning
/// against each piece's endpoint maximum.
pub fn simulate_on_pieces(pieces: &[RatePiece], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::new();
    for p in pieces {
        let d = p.t1 - p.t0;
        let m = p.r0.max(p.r1);
        if !(d > 0.0 && m > 0.0) {
            continue;
        }
        let n = Poisson::new(m * d).map(|po| po.sample(&mut rng) as usize).unwrap_or(0);
        let start = times.len();
        for _ in 0..n {
            let u: f64 = rng.random();
            let r = p.r0 + u * (p.r1 - p.r0);
            if rng.random::<f64>() * m < r {
                times.push(p.t0 + u * d);
            }
        }
        times[start..].sort_by(|a, b| a.total_cmp(b));
    }
    times.sort_by(|a, b| a.total_cmp(b));
    times
}

/// Copy of `data` whose spike flags mark exactly `times`. Times between samples get
/// a new sample interpolated along the straight step (and the shortest arc for `θ`).
pub fn insert_spikes(data: &SessionData, times: &[f64]) -> Result<(SessionData, SpikeTrain)> {
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (t_first, t_last) = (data.start(), data.duration());
    if sorted.first().is_some_and(|&t| t < t_first) || sorted.last().is_some_and(|&t| t > t_last) {
        return Err(Error::invalid("spike time outside the session"));
    }
    let mut out: Vec<Sample> = Vec::with_capacity(data.samples.len() + sorted.len());
    let mut k = 0;
    for (i, s) in data.samples.iter().enumerate() {
        while k < sorted.len() && sorted[k] < s.t {
            let a = &data.samples[i - 1];
            let f = (sorted[k] - a.t) / (s.t - a.t);
            let prev_t = out.last().map_or(f64::NEG_INFINITY, |p| p.t);
            if sorted[k] > prev_t {
                out.push(Sample {
                    t: sorted[k],
                    x: a.x + f * (s.x - a.x),
                    y: a.y + f * (s.y - a.y),
                    theta: wrap_angle(a.theta + f * angular_step(a.theta, s.theta)),
                    spike: true,
                });
            }
            k += 1;
        }
        let mut s = *s;
        s.spike = false;
        while k < sorted.len() && sorted[k] == s.t {
            s.spike = true;
            k += 1;
        }
        out.push(s);
    }
    let d = SessionData::new(out)?;
    let st = d.spike_train();
    Ok((d, st))
}

/// Simulates spikes along the recorded path under `src` and returns the session with
/// its spike flags replaced.
pub fn simulate_spikes<S: IntensitySource>(
    src: &S,
    data: &SessionData,
    segs: &SegmentedPath,
    seed: u64,
) -> Result<(SessionData, SpikeTrain)> {
    let pieces = rate_pieces(src, segs, 0.05);
    if pieces.iter().any(|p| !(p.r0.is_finite() && p.r1.is_finite())) {
        return Err(Error::invalid("intensity is not finite along the path"));
    }
    insert_spikes(data, &simulate_on_pieces(&pieces, seed))
}

/// Where the replayed intensity comes from.
#[derive(Clone, Copy, Debug)]
pub enum ReplaySource<'a> {
    RateMap(&'a RateMap),
    Fit { fit: &'a PosteriorFit, meshes: &'a Meshes },
}

/// Simulates a spike train on the recorded trajectory under an estimated intensity.
pub fn replay_on_path(source: ReplaySource<'_>, data: &SessionData, seed: u64) -> Result<(SessionData, SpikeTrain)> {
    match source {
        ReplaySource::RateMap(map) => {
            // Any covering mesh works for segmentation; the raster ignores cell indices.
            let bb = data.bounding_box();
            let side = bb.width().max(bb.height()).max(1.0);
            let tri = build_tri_mesh(bb.inflate(0.01 * side), 4.0 * side, 0.0)?;
            let segs = segment_path(data, &tri, None, None, &[])?;
            simulate_spikes(&RasterIntensity { map }, data, &segs, seed)
        }
        ReplaySource::Fit { fit, meshes } => {
            meshes.check(fit.kind)?;
            let segs = segment_path(
                data,
                &meshes.tri,
                if fit.kind.has_theta() { meshes.circ.as_ref() } else { None },
                if fit.kind.has_time() { meshes.temporal.as_ref() } else { None },
                &[],
            )?;
            let src = LatentIntensity { meshes, kind: fit.kind, latent: &fit.mode };
            simulate_spikes(&src, data, &segs, seed)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSettings {
    pub rho: f64,
    pub s: f64,
    #[serde(default = "one")]
    pub phi: f64,
}

fn one() -> f64 {
    1.0
}

/// Ground-truth description for `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthConfig {
    pub model: ModelKind,
    pub arena: Rect,
    pub max_edge: f64,
    pub margin: f64,
    pub p_theta: usize,
    pub temporal_cells: usize,
    /// Log intensity per cm.
    pub beta: f64,
    pub omega: FieldSettings,
    pub theta: Option<FieldSettings>,
    pub time: Option<FieldSettings>,
    pub walk: WalkConfig,
    pub field_seed: u64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            model: ModelKind::Omega,
            arena: Rect::new(0.0, 0.0, 100.0, 100.0),
            max_edge: 5.0,
            margin: 20.0,
            p_theta: 16,
            temporal_cells: 30,
            beta: 0.25f64.ln(),
            omega: FieldSettings { rho: 20.0, s: 1.0, phi: -0.8 },
            theta: None,
            time: None,
            walk: WalkConfig::default(),
            field_seed: 1,
        }
    }
}

/// Meshes, hyperparameters and one latent draw.
#[derive(Clone, Debug)]
pub struct SyntheticTruth {
    pub kind: ModelKind,
    pub meshes: Meshes,
    pub hyper: Hyperparameters,
    pub latent: Vec<f64>,
}

impl SyntheticTruth {
    pub fn intensity(&self) -> LatentIntensity<'_> {
        LatentIntensity { meshes: &self.meshes, kind: self.kind, latent: &self.latent }
    }
}

/// Builds meshes for `cfg` and draws the latent fields from their GMRF priors.
pub fn sample_truth(cfg: &TruthConfig, duration: f64) -> Result<SyntheticTruth> {
    let kind = cfg.model;
    let theta = match (kind.has_theta(), cfg.theta) {
        (true, Some(t)) => Some((t.rho, t.s)),
        (true, None) => return Err(Error::Config("truth.theta is required for this model".into())),
        _ => None,
    };
    let time = match (kind.has_time(), cfg.time) {
        (true, Some(t)) => Some((t.rho, t.s)),
        (true, None) => return Err(Error::Config("truth.time is required for this model".into())),
        _ => None,
    };
    let hyper = Hyperparameters::new(kind, (cfg.omega.rho, cfg.omega.s, cfg.omega.phi), theta, time)?;
    let meshes = Meshes {
        tri: build_tri_mesh(cfg.arena, cfg.max_edge, cfg.margin)?,
        circ: if kind.has_theta() { Some(build_circular_mesh(cfg.p_theta)?) } else { None },
        temporal: if kind.has_time() { Some(TemporalMesh::uniform(duration, cfg.temporal_cells)?) } else { None },
    };
    let spec = ModelSpec::new(kind, PriorConfig::default(), meshes)?;
    let prior = spec.latent_prior(&hyper)?;
    let ch = Cholesky::factor(&prior.precision)?;
    let mut latent = sample_with_factor(&ch, 1, cfg.field_seed).remove(0);
    latent[0] = cfg.beta;
    Ok(SyntheticTruth { kind, meshes: spec.meshes, hyper, latent })
}

/// Trajectory plus spikes drawn under `truth`.
pub fn simulate_session(
    truth: &SyntheticTruth,
    cfg: &TruthConfig,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<(SessionData, SpikeTrain)> {
    let path = random_walk_trajectory(duration, dt, cfg.arena, &cfg.walk, seed)?;
    let segs = segment_path(&path, &truth.meshes.tri, truth.meshes.circ.as_ref(), truth.meshes.temporal.as_ref(), &[])?;
    simulate_spikes(&truth.intensity(), &path, &segs, seed.wrapping_add(0x5EED))
}
