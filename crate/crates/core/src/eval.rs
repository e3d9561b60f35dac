//! Cross-validation folds, predictive count moments, proper scores and the
//! sign-flip permutation test.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{expected_count, for_each_posterior_draw, optimize_hyper, ModelKind, ModelSpec, PosteriorFit, PriorConfig, SearchConfig};
use crate::trajectory::{integration_weights, segment_path, IntegrationWeights, Meshes, SegmentedPath, SessionData, SpikeTrain, TimeWindows};

/// Consecutive intervals of length `tau` covering `[0, duration]`, split into two folds
/// by alternation.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSpec {
    pub duration: f64,
    pub tau: f64,
    pub intervals: Vec<(f64, f64)>,
}

pub fn make_folds(duration: f64, tau: f64) -> Result<FoldSpec> {
    if !(tau > 0.0 && tau.is_finite()) || !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::invalid(format!("interval length {tau} and duration {duration} must be positive")));
    }
    let mut intervals = Vec::new();
    let mut k = 0usize;
    loop {
        let a = k as f64 * tau;
        // Absorb a remainder that is only rounding noise.
        if a >= duration - 1e-9 * tau {
            break;
        }
        let b = ((k + 1) as f64 * tau).min(duration);
        intervals.push((a, if b >= duration - 1e-9 * tau { duration } else { b }));
        k += 1;
    }
    if intervals.len() < 2 {
        return Err(Error::invalid(format!("interval length {tau} leaves a fold empty for duration {duration}")));
    }
    Ok(FoldSpec { duration, tau, intervals })
}

impl FoldSpec {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Index of the interval containing `t` (half-open, last closed); `None` outside.
    pub fn interval_of(&self, t: f64) -> Option<usize> {
        if !(t >= 0.0 && t <= self.duration) {
            return None;
        }
        let k = self.intervals.partition_point(|&(a, _)| a <= t);
        Some(k.saturating_sub(1))
    }

    /// Intervals held out in `fold` (0 tests on A_2, A_4, …; 1 on A_1, A_3, …).
    pub fn test_intervals(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|i| i % 2 != fold % 2).collect()
    }

    pub fn train_intervals(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|i| i % 2 == fold % 2).collect()
    }

    pub fn windows(&self, idx: &[usize]) -> TimeWindows {
        TimeWindows { intervals: idx.iter().map(|&i| self.intervals[i]).collect(), end: self.duration }
    }

    /// Interior interval boundaries, used as extra segmentation cuts.
    pub fn breaks(&self) -> Vec<f64> {
        self.intervals.iter().skip(1).map(|&(a, _)| a).collect()
    }
}

/// Trapezoid quadrature restricted to each interval, as sparse `(field, time, weight)` terms.
#[derive(Clone, Debug)]
pub struct IntervalQuadrature {
    pub kind: ModelKind,
    pub p_field: usize,
    pub terms: Vec<Vec<(usize, Option<usize>, f64)>>,
    pub counts: Vec<usize>,
}

impl IntervalQuadrature {
    /// Expected count in interval `i` under latent vector `x`.
    pub fn expected(&self, i: usize, x: &[f64]) -> f64 {
        let off = 1 + self.p_field;
        self.terms[i]
            .iter()
            .map(|&(c, r, w)| w * (x[0] + x[1 + c] + r.map_or(0.0, |r| x[off + r])).exp())
            .sum()
    }
}

/// Splits the quadrature of `segs` by the interval containing each segment midpoint,
/// and counts spikes per interval.
pub fn interval_quadrature(
    segs: &SegmentedPath,
    meshes: &Meshes,
    kind: ModelKind,
    spikes: &SpikeTrain,
    folds: &FoldSpec,
) -> Result<IntervalQuadrature> {
    meshes.check(kind)?;
    let mut raw: Vec<Vec<(usize, Option<usize>, f64)>> = vec![Vec::new(); folds.len()];
    for seg in &segs.segments {
        if seg.length == 0.0 {
            continue;
        }
        let Some(i) = folds.interval_of(seg.mid_time()) else { continue };
        if kind.has_theta() && seg.arc.is_none() || kind.has_time() && seg.cell.is_none() {
            return Err(Error::invalid("segmentation lacks the meshes this model needs"));
        }
        let half = 0.5 * seg.length;
        for (p, th, t) in [(seg.p0, seg.theta0, seg.t0), (seg.p1, seg.theta1, seg.t1)] {
            let f = meshes.field_basis(kind, seg.tri, seg.arc, p, th);
            if kind.has_time() {
                let tb = meshes.temporal.as_ref().expect("checked").eval_in(seg.cell.expect("checked"), t);
                for &(r, wr) in &tb.entries {
                    raw[i].extend(f.entries.iter().map(|&(c, wc)| (c, Some(r), half * wr * wc)));
                }
            } else {
                raw[i].extend(f.entries.iter().map(|&(c, wc)| (c, None, half * wc)));
            }
        }
    }
    let terms = raw
        .into_iter()
        .map(|mut v| {
            v.sort_by_key(|a| (a.0, a.1));
            let mut merged: Vec<(usize, Option<usize>, f64)> = Vec::with_capacity(v.len());
            for t in v {
                match merged.last_mut() {
                    Some(m) if m.0 == t.0 && m.1 == t.1 => m.2 += t.2,
                    _ => merged.push(t),
                }
            }
            merged
        })
        .collect();
    let mut counts = vec![0; folds.len()];
    for &t in &spikes.times {
        if let Some(i) = folds.interval_of(t) {
            counts[i] += 1;
        }
    }
    Ok(IntervalQuadrature { kind, p_field: meshes.field_dim(kind), terms, counts })
}

/// Monte Carlo predictive mean and variance of a count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMoments {
    pub mean: f64,
    pub variance: f64,
    pub draws: usize,
}

/// Moments from per-draw conditional expected counts: mean of the draws, and
/// that mean plus their sample variance (the Poisson part plus the latent part).
pub fn predictive_moments(expected: &[f64]) -> Result<PredictiveMoments> {
    if expected.len() < 2 {
        return Err(Error::invalid("predictive moments need at least two draws"));
    }
    let mean = crate::numeric::mean(expected);
    let var = crate::numeric::variance(expected);
    Ok(PredictiveMoments { mean, variance: mean + var, draws: expected.len() })
}

/// Predictive moments of the count over the region described by `iw`.
pub fn predictive_counts(fit: &PosteriorFit, iw: &IntegrationWeights, draws: usize, seed: u64) -> Result<PredictiveMoments> {
    if draws < 2 {
        return Err(Error::invalid("predictive moments need at least two draws"));
    }
    let mut e = Vec::with_capacity(draws);
    for_each_posterior_draw(fit, draws, seed, 64, |x| e.push(expected_count(iw, x)));
    predictive_moments(&e)
}

/// Predictive moments for several intervals from one set of posterior draws.
pub fn predictive_counts_intervals(
    fit: &PosteriorFit,
    iq: &IntervalQuadrature,
    intervals: &[usize],
    draws: usize,
    seed: u64,
) -> Result<Vec<PredictiveMoments>> {
    if draws < 2 {
        return Err(Error::invalid("predictive moments need at least two draws"));
    }
    if iq.kind != fit.kind {
        return Err(Error::Shape(format!("quadrature for {} used with a {} fit", iq.kind, fit.kind)));
    }
    let mut e = vec![Vec::with_capacity(draws); intervals.len()];
    for_each_posterior_draw(fit, draws, seed, 64, |x| {
        for (k, &i) in intervals.iter().enumerate() {
            e[k].push(iq.expected(i, x));
        }
    });
    e.iter().map(|v| predictive_moments(v)).collect()
}

/// Squared-error score `(n − μ)²`.
pub fn score_se(m: &PredictiveMoments, n: f64) -> f64 {
    (n - m.mean).powi(2)
}

/// Dawid–Sebastiani score `((n − μ)/σ)² + ln σ²`.
pub fn score_ds(m: &PredictiveMoments, n: f64) -> Result<f64> {
    if !(m.variance > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok((n - m.mean).powi(2) / m.variance + m.variance.ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed: f64,
    /// Fraction of sign-flipped means at or below the observed mean.
    pub p_lower: f64,
    /// Fraction at or above.
    pub p_upper: f64,
    pub p_two_sided: f64,
    pub permutations: usize,
}

/// Randomized sign-flip test for a mean score difference.
pub fn permutation_test(diffs: &[f64], permutations: usize, seed: u64) -> Result<PermutationResult> {
    if diffs.is_empty() || permutations == 0 {
        return Err(Error::invalid("permutation test needs differences and at least one permutation"));
    }
    let m = diffs.len() as f64;
    let observed = diffs.iter().sum::<f64>() / m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut below, mut above) = (0usize, 0usize);
    for _ in 0..permutations {
        let mut sum = 0.0;
        for chunk in diffs.chunks(64) {
            let bits = rng.next_u64();
            for (k, d) in chunk.iter().enumerate() {
                if bits >> k & 1 == 1 {
                    sum -= d;
                } else {
                    sum += d;
                }
            }
        }
        let t = sum / m;
        below += (t <= observed) as usize;
        above += (t >= observed) as usize;
    }
    let p_lower = below as f64 / permutations as f64;
    let p_upper = above as f64 / permutations as f64;
    Ok(PermutationResult {
        observed,
        p_lower,
        p_upper,
        p_two_sided: (2.0 * p_lower.min(1.0 - p_lower)).clamp(0.0, 1.0),
        permutations,
    })
}

/// Scores of one model on the held-out intervals of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model: ModelKind,
    pub moments: Vec<PredictiveMoments>,
    pub se: Vec<f64>,
    pub ds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub tau: f64,
    /// 1 or 2.
    pub fold: usize,
    pub intervals: Vec<usize>,
    pub observed: Vec<usize>,
    pub models: Vec<ModelScores>,
}

impl FoldScores {
    pub fn scores(&self, model: ModelKind) -> Option<&ModelScores> {
        self.models.iter().find(|m| m.model == model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "DS")]
    Ds,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Se => "SE",
            ScoreKind::Ds => "DS",
        }
    }
}

/// One cell group of the score-difference tables. `fold` is `"1"`, `"2"` or `"combined"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceRow {
    pub tau: f64,
    pub fold: String,
    pub model: ModelKind,
    pub baseline: ModelKind,
    pub score: ScoreKind,
    pub n: usize,
    pub mean_difference: f64,
    /// Ties count as not negative.
    pub proportion_negative: f64,
    /// Root mean square of the differences; the combined row averages the two folds.
    pub conservative_sd: f64,
    pub p_value: f64,
    pub p_two_sided: f64,
}

#[allow(clippy::too_many_arguments)]
fn difference_row(
    tau: f64,
    fold: String,
    model: ModelKind,
    baseline: ModelKind,
    score: ScoreKind,
    d: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<DifferenceRow> {
    let n = d.len();
    let perm = permutation_test(d, permutations, seed)?;
    Ok(DifferenceRow {
        tau,
        fold,
        model,
        baseline,
        score,
        n,
        mean_difference: perm.observed,
        proportion_negative: d.iter().filter(|&&x| x < 0.0).count() as f64 / n as f64,
        conservative_sd: (d.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt(),
        p_value: perm.p_lower,
        p_two_sided: perm.p_two_sided,
    })
}

/// Differences `S(model) − S(baseline)` per fold and combined, for every model other than the baseline.
pub fn score_differences(folds: &[FoldScores], baseline: ModelKind, permutations: usize, seed: u64) -> Result<Vec<DifferenceRow>> {
    let mut taus: Vec<f64> = folds.iter().map(|f| f.tau).collect();
    taus.sort_by(|a, b| a.total_cmp(b));
    taus.dedup();
    let mut rows = Vec::new();
    for (ti, &tau) in taus.iter().enumerate() {
        let group: Vec<&FoldScores> = folds.iter().filter(|f| f.tau == tau).collect();
        let models: Vec<ModelKind> = group[0].models.iter().map(|m| m.model).filter(|&m| m != baseline).collect();
        for (mi, &model) in models.iter().enumerate() {
            for (si, score) in [ScoreKind::Se, ScoreKind::Ds].into_iter().enumerate() {
                let mut pooled = Vec::new();
                let mut fold_rows = Vec::new();
                for f in &group {
                    let (a, b) = match (f.scores(model), f.scores(baseline)) {
                        (Some(a), Some(b)) => (a, b),
                        _ => return Err(Error::invalid(format!("fold {} lacks scores for {model} or {baseline}", f.fold))),
                    };
                    let (sa, sb) = match score {
                        ScoreKind::Se => (&a.se, &b.se),
                        ScoreKind::Ds => (&a.ds, &b.ds),
                    };
                    if sa.len() != sb.len() {
                        return Err(Error::Shape(format!("{} vs {} held-out intervals", sa.len(), sb.len())));
                    }
                    let d: Vec<f64> = sa.iter().zip(sb).map(|(x, y)| x - y).collect();
                    let s = derive_seed(seed, &[ti as u64, mi as u64, si as u64, f.fold as u64]);
                    fold_rows.push(difference_row(tau, f.fold.to_string(), model, baseline, score, &d, permutations, s)?);
                    pooled.extend(d);
                }
                let s = derive_seed(seed, &[ti as u64, mi as u64, si as u64, 0]);
                let mut combined = difference_row(tau, "combined".into(), model, baseline, score, &pooled, permutations, s)?;
                combined.conservative_sd =
                    fold_rows.iter().map(|r| r.conservative_sd).sum::<f64>() / fold_rows.len() as f64;
                rows.extend(fold_rows);
                rows.push(combined);
            }
        }
    }
    Ok(rows)
}

/// Mixes tags into a root seed (SplitMix64 finalizer).
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut z = root;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Writes `differences.csv` (long form) and one wide table per statistic
/// (`mean_difference.csv`, `p_value.csv`, `proportion_negative.csv`, `conservative_sd.csv`)
/// with rows `fold,interval` and columns `<score>_<model>`.
pub fn write_score_tables(rows: &[DifferenceRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("differences.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut cols: Vec<(ScoreKind, ModelKind)> = Vec::new();
    for score in [ScoreKind::Se, ScoreKind::Ds] {
        for r in rows.iter().filter(|r| r.score == score) {
            if !cols.contains(&(score, r.model)) {
                cols.push((score, r.model));
            }
        }
    }
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(f, t)| *f == r.fold && *t == r.tau) {
            keys.push((r.fold.clone(), r.tau));
        }
    }
    let fold_rank = |f: &str| match f {
        "combined" => 99,
        s => s.parse::<usize>().unwrap_or(50),
    };
    keys.sort_by(|a, b| fold_rank(&a.0).cmp(&fold_rank(&b.0)).then(a.1.total_cmp(&b.1)));
    type Getter = fn(&DifferenceRow) -> f64;
    let stats: [(&str, Getter); 4] = [
        ("mean_difference", |r| r.mean_difference),
        ("p_value", |r| r.p_value),
        ("proportion_negative", |r| r.proportion_negative),
        ("conservative_sd", |r| r.conservative_sd),
    ];
    for (name, get) in stats {
        let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
        let mut header = vec!["fold".to_string(), "interval".to_string()];
        header.extend(cols.iter().map(|(s, m)| format!("{}_{}", s.name(), m)));
        w.write_record(&header)?;
        for (fold, tau) in &keys {
            let mut rec = vec![fold.clone(), tau.to_string()];
            for &(s, m) in &cols {
                let v = rows.iter().find(|r| r.fold == *fold && r.tau == *tau && r.score == s && r.model == m);
                rec.push(v.map_or(String::new(), |r| get(r).to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossvalConfig {
    pub search: SearchConfig,
    /// Posterior draws per fit for predictive moments.
    pub draws: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig { search: SearchConfig::default(), draws: 2000, permutations: 1_000_000, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub folds: Vec<FoldScores>,
    pub rows: Vec<DifferenceRow>,
}

/// Two-fold cross-validation of `models` for every interval length in `taus`.
/// Hyperparameters and latent fields are refitted on each training fold.
/// The first model is the baseline of the difference tables.
pub fn crossval(
    data: &SessionData,
    spikes: &SpikeTrain,
    meshes: &Meshes,
    models: &[ModelKind],
    priors: &PriorConfig,
    taus: &[f64],
    cfg: &CrossvalConfig,
) -> Result<CrossvalReport> {
    if models.is_empty() {
        return Err(Error::invalid("no models to cross-validate"));
    }
    if cfg.draws < 2 {
        return Err(Error::invalid("predictive moments need at least two draws"));
    }
    for &m in models {
        meshes.check(m)?;
    }
    let need_theta = models.iter().any(|m| m.has_theta());
    let need_time = models.iter().any(|m| m.has_time());
    let mut out = Vec::new();
    for (ti, &tau) in taus.iter().enumerate() {
        let folds = make_folds(data.duration(), tau)?;
        let segs = segment_path(
            data,
            &meshes.tri,
            if need_theta { meshes.circ.as_ref() } else { None },
            if need_time { meshes.temporal.as_ref() } else { None },
            &folds.breaks(),
        )?;
        for fold in 0..2 {
            let train = folds.windows(&folds.train_intervals(fold));
            let test = folds.test_intervals(fold);
            let mut scores = Vec::new();
            let mut observed = Vec::new();
            for (mi, &kind) in models.iter().enumerate() {
                let iw = integration_weights(&segs, meshes, kind, data, spikes, Some(&train))?;
                let spec = ModelSpec::new(kind, priors.clone(), meshes.clone())?;
                let mut search = cfg.search.clone();
                search.seed = derive_seed(cfg.search.seed, &[ti as u64, fold as u64, mi as u64]);
                let (fit, _) = optimize_hyper(&spec, &iw, &search, None)?;
                let iq = interval_quadrature(&segs, meshes, kind, spikes, &folds)?;
                let s = derive_seed(cfg.seed, &[ti as u64, fold as u64, mi as u64, 1]);
                let moments = predictive_counts_intervals(&fit, &iq, &test, cfg.draws, s)?;
                observed = test.iter().map(|&i| iq.counts[i]).collect();
                let se = moments.iter().zip(&observed).map(|(m, &n)| score_se(m, n as f64)).collect();
                let ds = moments.iter().zip(&observed).map(|(m, &n)| score_ds(m, n as f64)).collect::<Result<_>>()?;
                scores.push(ModelScores { model: kind, moments, se, ds });
            }
            out.push(FoldScores { tau, fold: fold + 1, intervals: test, observed, models: scores });
        }
    }
    let rows = score_differences(&out, models[0], cfg.permutations, cfg.seed)?;
    Ok(CrossvalReport { folds: out, rows })
}
