//! Model kinds, likelihoods, priors and MAP/Laplace inference.

use std::cell::RefCell;
use std::path::Path;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous, ContinuousCDF};

use crate::error::{Error, Result};
use crate::mesh::{FemMesh, MassStiffness};
use crate::sparse::{self, Cholesky, SparseMat, Symbolic};
use crate::spde::{assemble_precision, kron_precision, DomainKind, SpdeParams};
use crate::trajectory::{IntegrationWeights, Meshes};

/// Which latent effects enter the log-intensity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// Spatial field only.
    #[serde(rename = "m0")]
    Omega,
    /// Spatial field plus temporal modulation.
    #[serde(rename = "m0t")]
    OmegaT,
    /// Space × head-direction interaction field.
    #[serde(rename = "mxt")]
    OmegaTheta,
    /// Interaction field plus temporal modulation.
    #[serde(rename = "mxtt")]
    OmegaThetaT,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Omega, ModelKind::OmegaT, ModelKind::OmegaTheta, ModelKind::OmegaThetaT];

    pub fn has_theta(self) -> bool {
        matches!(self, ModelKind::OmegaTheta | ModelKind::OmegaThetaT)
    }

    pub fn has_time(self) -> bool {
        matches!(self, ModelKind::OmegaT | ModelKind::OmegaThetaT)
    }

    pub fn code(self) -> &'static str {
        match self {
            ModelKind::Omega => "m0",
            ModelKind::OmegaT => "m0t",
            ModelKind::OmegaTheta => "mxt",
            ModelKind::OmegaThetaT => "mxtt",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.code() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model `{s}` (expected m0, m0t, mxt or mxtt)")))
    }
}

/// Hyperprior settings. `mu_omega` is the median of the log-normal range prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub mu_omega: f64,
    pub varsigma_omega: f64,
    pub eta_theta: f64,
    pub eta_time: f64,
    pub nu_omega: f64,
    pub nu_theta: f64,
    pub nu_time: f64,
    pub a_omega: f64,
    pub b_omega: f64,
    pub beta_mean: f64,
    pub beta_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            mu_omega: 20.0,
            varsigma_omega: 0.4,
            eta_theta: 1.0 / (2.0 * std::f64::consts::PI),
            eta_time: 1.0 / 100.0,
            nu_omega: 0.5,
            nu_theta: 1.0,
            nu_time: 1.0 / 3.0,
            a_omega: 2.0,
            b_omega: 20.0,
            beta_mean: 0.0,
            beta_sd: 10.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mu_omega", self.mu_omega),
            ("varsigma_omega", self.varsigma_omega),
            ("eta_theta", self.eta_theta),
            ("eta_time", self.eta_time),
            ("nu_omega", self.nu_omega),
            ("nu_theta", self.nu_theta),
            ("nu_time", self.nu_time),
            ("a_omega", self.a_omega),
            ("b_omega", self.b_omega),
            ("beta_sd", self.beta_sd),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("priors.{name} must be positive, got {v}")));
            }
        }
        if !self.beta_mean.is_finite() {
            return Err(Error::Config("priors.beta_mean must be finite".into()));
        }
        Ok(())
    }
}

fn ln_exponential(x: f64, rate: f64) -> f64 {
    if x > 0.0 {
        rate.ln() - rate * x
    } else {
        f64::NEG_INFINITY
    }
}

fn ln_lognormal(x: f64, median: f64, sd: f64) -> f64 {
    if x > 0.0 {
        let z = (x.ln() - median.ln()) / sd;
        -x.ln() - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z
    } else {
        f64::NEG_INFINITY
    }
}

/// Beta(a, b) rescaled to (-1, 1).
fn ln_scaled_beta(phi: f64, a: f64, b: f64) -> f64 {
    let x = 0.5 * (phi + 1.0);
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    match Beta::new(a, b) {
        Ok(d) => d.ln_pdf(x) - std::f64::consts::LN_2,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Field hyperparameters of one model. `theta` and `time` are present exactly
/// when the model has those effects; their damping is fixed at 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub omega: SpdeParams,
    pub theta: Option<SpdeParams>,
    pub time: Option<SpdeParams>,
}

impl Hyperparameters {
    /// `omega = (ρ, s, φ)`, `theta` and `time` as `(ρ, s)`.
    pub fn new(kind: ModelKind, omega: (f64, f64, f64), theta: Option<(f64, f64)>, time: Option<(f64, f64)>) -> Result<Self> {
        let h = Hyperparameters {
            omega: SpdeParams::new(DomainKind::Plane, omega.0, omega.1, omega.2)?,
            theta: theta.map(|(r, s)| SpdeParams::new(DomainKind::Circle, r, s, 1.0)).transpose()?,
            time: time.map(|(r, s)| SpdeParams::new(DomainKind::Line, r, s, 1.0)).transpose()?,
        };
        h.check(kind)?;
        Ok(h)
    }

    pub fn check(&self, kind: ModelKind) -> Result<()> {
        if kind.has_theta() != self.theta.is_some() || kind.has_time() != self.time.is_some() {
            return Err(Error::invalid(format!("hyperparameters do not match model {kind}")));
        }
        Ok(())
    }

    /// Medians of the marginal hyperpriors.
    pub fn prior_median(kind: ModelKind, pr: &PriorConfig) -> Result<Self> {
        pr.validate()?;
        let ln2 = std::f64::consts::LN_2;
        let beta = Beta::new(pr.a_omega, pr.b_omega).map_err(|e| Error::Config(e.to_string()))?;
        let phi = 2.0 * beta.inverse_cdf(0.5) - 1.0;
        Self::new(
            kind,
            (pr.mu_omega, ln2 / pr.nu_omega, phi),
            kind.has_theta().then(|| (ln2 / pr.eta_theta, ln2 / pr.nu_theta)),
            kind.has_time().then(|| (ln2 / pr.eta_time, ln2 / pr.nu_time)),
        )
    }

    /// `[ln ρ_Ω, ln s_Ω, logit((φ+1)/2), ln ρ_Θ, ln s_Θ, ln ρ_T, ln s_T]`, absent blocks skipped.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let x = 0.5 * (self.omega.phi + 1.0);
        let mut u = vec![self.omega.rho.ln(), self.omega.s.ln(), (x / (1.0 - x)).ln()];
        for p in [self.theta, self.time].into_iter().flatten() {
            u.push(p.rho.ln());
            u.push(p.s.ln());
        }
        u
    }

    pub fn from_unconstrained(kind: ModelKind, u: &[f64]) -> Result<Self> {
        let n = 3 + 2 * kind.has_theta() as usize + 2 * kind.has_time() as usize;
        if u.len() != n {
            return Err(Error::Shape(format!("{kind} has {n} hyperparameters, got {}", u.len())));
        }
        let phi = 2.0 / (1.0 + (-u[2]).exp()) - 1.0;
        let mut k = 3;
        let mut pair = |on: bool| {
            on.then(|| {
                k += 2;
                (u[k - 2].exp(), u[k - 1].exp())
            })
        };
        let theta = pair(kind.has_theta());
        let time = pair(kind.has_time());
        Self::new(kind, (u[0].exp(), u[1].exp(), phi), theta, time)
    }

    /// Log Jacobian of the map from unconstrained coordinates.
    pub fn log_jacobian(&self) -> f64 {
        let x = 0.5 * (self.omega.phi + 1.0);
        let mut j = self.omega.rho.ln() + self.omega.s.ln() + (2.0 * x * (1.0 - x)).ln();
        for p in [self.theta, self.time].into_iter().flatten() {
            j += p.rho.ln() + p.s.ln();
        }
        j
    }
}

/// Log hyperprior density in natural coordinates; `-inf` outside the support.
pub fn log_prior_density(h: &Hyperparameters, pr: &PriorConfig) -> f64 {
    let mut lp = ln_lognormal(h.omega.rho, pr.mu_omega, pr.varsigma_omega)
        + ln_exponential(h.omega.s, pr.nu_omega)
        + ln_scaled_beta(h.omega.phi, pr.a_omega, pr.b_omega);
    if let Some(t) = h.theta {
        lp += ln_exponential(t.rho, pr.eta_theta) + ln_exponential(t.s, pr.nu_theta);
    }
    if let Some(t) = h.time {
        lp += ln_exponential(t.rho, pr.eta_time) + ln_exponential(t.s, pr.nu_time);
    }
    lp
}

/// Log-likelihood of the latent vector, concave, with sparse curvature.
pub trait LatentLikelihood {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// Entries of the negative Hessian (both triangles). The pattern must not depend on `x`.
    fn neg_hessian(&self, x: &[f64]) -> Vec<(usize, usize, f64)>;
}

/// Gaussian prior `N(mean, precision⁻¹)`.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    pub precision: SparseMat,
    pub mean: Vec<f64>,
    pub log_det: f64,
}

impl GaussianPrior {
    pub fn new(precision: SparseMat, mean: Vec<f64>) -> Result<Self> {
        let log_det = Cholesky::factor(&precision)?.log_det();
        Ok(GaussianPrior { precision, mean, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn centred(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).map(|(a, m)| a - m).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonOptions {
    /// Stop when `max|∇| < tolerance · max(1, |objective|)`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tolerance: 1e-6, max_iterations: 100 }
    }
}

/// Posterior mode with the factored negative Hessian there.
#[derive(Clone, Debug)]
pub struct MapEstimate {
    pub mode: Vec<f64>,
    pub log_likelihood: f64,
    /// `ℓ(x̂) − ½(x̂−m)ᵀQ(x̂−m)`.
    pub objective: f64,
    pub factor: Cholesky,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Damped Newton ascent on `ℓ(x) − ½(x−m)ᵀQ(x−m)`.
pub fn newton_map<L: LatentLikelihood>(
    lik: &L,
    prior: &GaussianPrior,
    start: &[f64],
    opts: &NewtonOptions,
    symbolic: Option<&Symbolic>,
) -> Result<MapEstimate> {
    let n = prior.dim();
    if lik.dim() != n || start.len() != n || prior.precision.nrows() != n {
        return Err(Error::Shape(format!("latent dimension mismatch ({n}, {}, {})", lik.dim(), start.len())));
    }
    let prior_trip = sparse::entries(&prior.precision);
    let objective = |x: &[f64]| {
        let l = lik.value(x);
        (l - 0.5 * sparse::quad_form(&prior.precision, &prior.centred(x)), l)
    };
    let mut sym = symbolic.cloned();
    let mut x = start.to_vec();
    let (mut obj, mut ll) = objective(&x);
    if !obj.is_finite() {
        return Err(Error::invalid("objective is not finite at the Newton start"));
    }
    let mut gn = f64::INFINITY;
    for it in 0..=opts.max_iterations {
        let qx = sparse::mul_vec(&prior.precision, &prior.centred(&x));
        let g: Vec<f64> = lik.gradient(&x).iter().zip(&qx).map(|(a, b)| a - b).collect();
        gn = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut trip = prior_trip.clone();
        trip.extend(lik.neg_hessian(&x));
        let h = sparse::from_triplets(n, n, &trip)?;
        let sym_ref = match &sym {
            Some(s) => s.clone(),
            None => Symbolic::analyze(&h)?,
        };
        let factor = factor_boosted(&sym_ref, &h, &trip)?;
        sym = Some(factor.symbolic().clone());
        if gn < opts.tolerance * obj.abs().max(1.0) {
            return Ok(MapEstimate { mode: x, log_likelihood: ll, objective: obj, factor, iterations: it, gradient_norm: gn });
        }
        if it == opts.max_iterations {
            break;
        }
        let d = factor.solve(&g);
        let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let slack = 1e-12 * obj.abs().max(1.0);
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-10 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            let (on, ln) = objective(&xn);
            if on.is_finite() && on >= obj + 1e-4 * alpha * slope - slack {
                x = xn;
                obj = on;
                ll = ln;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Err(Error::NotConverged { iterations: opts.max_iterations, gradient_norm: gn })
}

/// Factors `h`, adding a growing multiple of the identity if it is not numerically SPD.
fn factor_boosted(sym: &Symbolic, h: &SparseMat, trip: &[(usize, usize, f64)]) -> Result<Cholesky> {
    match Cholesky::factor_with(sym, h) {
        Ok(f) => return Ok(f),
        Err(Error::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    let n = h.nrows();
    let scale = trip.iter().filter(|t| t.0 == t.1).fold(0.0f64, |m, t| m.max(t.2.abs())).max(1.0);
    let mut lambda = 1e-10 * scale;
    for _ in 0..12 {
        let mut boosted = trip.to_vec();
        boosted.extend((0..n).map(|i| (i, i, lambda)));
        if let Ok(f) = Cholesky::factor_with(sym, &sparse::from_triplets(n, n, &boosted)?) {
            return Ok(f);
        }
        lambda *= 10.0;
    }
    Err(Error::NotPositiveDefinite { context: "Newton Hessian after diagonal boost".into() })
}

/// Laplace approximation of `log ∫ p(y|x) p(x) dx` at a MAP estimate.
pub fn laplace_from_map(prior: &GaussianPrior, map: &MapEstimate) -> f64 {
    map.objective + 0.5 * prior.log_det - 0.5 * map.factor.log_det()
}

/// Cox process log-likelihood `−Σ_c b_c e^{η_c} + Σ_spikes η` on the latent
/// vector `[β, field, time]`.
#[derive(Clone, Debug)]
pub struct CoxLikelihood<'a> {
    iw: &'a IntegrationWeights,
    a: Vec<f64>,
    a_t: Option<Vec<f64>>,
}

struct CoxTerms {
    e: f64,
    u: Vec<f64>,
    v: Vec<f64>,
    /// Per stored entry of `bt` (temporal) or per field node.
    t: Vec<f64>,
}

impl<'a> CoxLikelihood<'a> {
    pub fn new(iw: &'a IntegrationWeights) -> Self {
        CoxLikelihood { iw, a: iw.spike_field_counts(), a_t: iw.spike_time_counts() }
    }

    fn off_t(&self) -> usize {
        1 + self.iw.p_field
    }

    fn terms(&self, x: &[f64]) -> CoxTerms {
        let iw = self.iw;
        let beta = x[0];
        let w = &x[1..1 + iw.p_field];
        let mut u = vec![0.0; iw.p_field];
        let mut v = vec![0.0; iw.p_time];
        let mut e = 0.0;
        let t = match &iw.bt {
            Some(bt) => {
                let z = &x[self.off_t()..];
                let (cp, ri, val) = (bt.col_ptr(), bt.row_idx(), bt.val());
                let mut t = Vec::with_capacity(val.len());
                for c in 0..iw.p_field {
                    for k in cp[c]..cp[c + 1] {
                        let r = ri[k];
                        let tk = val[k] * (beta + w[c] + z[r]).exp();
                        u[c] += tk;
                        v[r] += tk;
                        e += tk;
                        t.push(tk);
                    }
                }
                t
            }
            None => {
                for c in 0..iw.p_field {
                    if iw.b[c] != 0.0 {
                        u[c] = iw.b[c] * (beta + w[c]).exp();
                        e += u[c];
                    }
                }
                u.clone()
            }
        };
        CoxTerms { e, u, v, t }
    }
}

impl LatentLikelihood for CoxLikelihood<'_> {
    fn dim(&self) -> usize {
        1 + self.iw.p_field + self.iw.p_time
    }

    fn value(&self, x: &[f64]) -> f64 {
        let tm = self.terms(x);
        let mut l = -tm.e + self.iw.n_spikes as f64 * x[0];
        l += self.a.iter().zip(&x[1..self.off_t()]).map(|(a, w)| a * w).sum::<f64>();
        if let Some(at) = &self.a_t {
            l += at.iter().zip(&x[self.off_t()..]).map(|(a, z)| a * z).sum::<f64>();
        }
        if l.is_nan() {
            f64::NEG_INFINITY
        } else {
            l
        }
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let tm = self.terms(x);
        let mut g = Vec::with_capacity(self.dim());
        g.push(self.iw.n_spikes as f64 - tm.e);
        g.extend(self.a.iter().zip(&tm.u).map(|(a, u)| a - u));
        if let Some(at) = &self.a_t {
            g.extend(at.iter().zip(&tm.v).map(|(a, v)| a - v));
        }
        g
    }

    fn neg_hessian(&self, x: &[f64]) -> Vec<(usize, usize, f64)> {
        let tm = self.terms(x);
        let mut out = Vec::with_capacity(1 + 3 * tm.u.len() + 3 * tm.v.len() + 2 * tm.t.len());
        out.push((0, 0, tm.e));
        for (c, &uc) in tm.u.iter().enumerate() {
            if self.iw.b[c] == 0.0 && self.iw.bt.is_none() {
                continue;
            }
            out.extend([(0, 1 + c, uc), (1 + c, 0, uc), (1 + c, 1 + c, uc)]);
        }
        let off = self.off_t();
        for (r, &vr) in tm.v.iter().enumerate() {
            out.extend([(0, off + r, vr), (off + r, 0, vr), (off + r, off + r, vr)]);
        }
        if let Some(bt) = &self.iw.bt {
            let (cp, ri) = (bt.col_ptr(), bt.row_idx());
            for c in 0..self.iw.p_field {
                for (&r, &t) in ri[cp[c]..cp[c + 1]].iter().zip(&tm.t[cp[c]..cp[c + 1]]) {
                    out.extend([(1 + c, off + r, t), (off + r, 1 + c, t)]);
                }
            }
        }
        out
    }
}

/// Approximate log-likelihood of a latent state.
pub fn log_likelihood(spec: &ModelSpec, latent: &LatentState, iw: &IntegrationWeights) -> Result<f64> {
    spec.check_weights(iw)?;
    if latent.field.len() != iw.p_field || latent.time.len() != iw.p_time {
        return Err(Error::Shape(format!(
            "latent blocks ({}, {}) do not match weights ({}, {})",
            latent.field.len(),
            latent.time.len(),
            iw.p_field,
            iw.p_time
        )));
    }
    Ok(CoxLikelihood::new(iw).value(&latent.to_flat()))
}

/// Expected spike count `∫ λ` under latent vector `x`.
pub fn expected_count(iw: &IntegrationWeights, x: &[f64]) -> f64 {
    CoxLikelihood::new(iw).terms(x).e
}

/// Latent vector split into its blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub beta: f64,
    pub field: Vec<f64>,
    pub time: Vec<f64>,
}

impl LatentState {
    pub fn from_flat(x: &[f64], p_field: usize) -> Self {
        LatentState { beta: x[0], field: x[1..1 + p_field].to_vec(), time: x[1 + p_field..].to_vec() }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(1 + self.field.len() + self.time.len());
        x.push(self.beta);
        x.extend(&self.field);
        x.extend(&self.time);
        x
    }
}

/// Model structure: kind, hyperpriors, meshes and their FEM matrices.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub priors: PriorConfig,
    pub meshes: Meshes,
    fem_omega: MassStiffness,
    fem_theta: Option<MassStiffness>,
    fem_time: Option<MassStiffness>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, priors: PriorConfig, meshes: Meshes) -> Result<Self> {
        meshes.check(kind)?;
        priors.validate()?;
        let fem_omega = meshes.tri.mass_stiffness();
        let fem_theta = if kind.has_theta() { meshes.circ.as_ref().map(|c| c.mass_stiffness()) } else { None };
        let fem_time = if kind.has_time() { meshes.temporal.as_ref().map(|t| t.mass_stiffness()) } else { None };
        Ok(ModelSpec { kind, priors, meshes, fem_omega, fem_theta, fem_time })
    }

    pub fn p_field(&self) -> usize {
        self.meshes.field_dim(self.kind)
    }

    pub fn p_time(&self) -> usize {
        if self.kind.has_time() {
            self.meshes.p_time()
        } else {
            0
        }
    }

    pub fn latent_dim(&self) -> usize {
        1 + self.p_field() + self.p_time()
    }

    /// Block-diagonal prior of `[β, field, time]` given hyperparameters.
    pub fn latent_prior(&self, h: &Hyperparameters) -> Result<GaussianPrior> {
        h.check(self.kind)?;
        let q_omega = assemble_precision(&self.fem_omega, &h.omega)?;
        let ch_omega = Cholesky::factor(&q_omega.q)?;
        let (q_field, ld_field) = match (&self.fem_theta, h.theta) {
            (Some(ft), Some(ht)) => {
                let q_theta = assemble_precision(ft, &ht)?;
                let ld_theta = Cholesky::factor(&q_theta.q)?.log_det();
                let (po, pt) = (q_omega.dim() as f64, q_theta.dim() as f64);
                (kron_precision(&q_theta, &q_omega).q, po * ld_theta + pt * ch_omega.log_det())
            }
            _ => (q_omega.q.clone(), ch_omega.log_det()),
        };
        let (q_time, ld_time) = match (&self.fem_time, h.time) {
            (Some(ft), Some(ht)) => {
                let q = assemble_precision(ft, &ht)?.q;
                let ld = Cholesky::factor(&q)?.log_det();
                (Some(q), ld)
            }
            _ => (None, 0.0),
        };
        let pf = q_field.nrows();
        let pt = q_time.as_ref().map_or(0, |q| q.nrows());
        let n = 1 + pf + pt;
        let prec_beta = 1.0 / (self.priors.beta_sd * self.priors.beta_sd);
        let mut trip = vec![(0, 0, prec_beta)];
        trip.extend(sparse::entries(&q_field).into_iter().map(|(i, j, v)| (1 + i, 1 + j, v)));
        if let Some(q) = &q_time {
            trip.extend(sparse::entries(q).into_iter().map(|(i, j, v)| (1 + pf + i, 1 + pf + j, v)));
        }
        let mut mean = vec![0.0; n];
        mean[0] = self.priors.beta_mean;
        Ok(GaussianPrior {
            precision: sparse::from_triplets(n, n, &trip)?,
            mean,
            log_det: prec_beta.ln() + ld_field + ld_time,
        })
    }

    fn check_weights(&self, iw: &IntegrationWeights) -> Result<()> {
        if iw.kind != self.kind || iw.p_field != self.p_field() || iw.p_time != self.p_time() {
            return Err(Error::Shape(format!(
                "integration weights ({}, {}, {}) do not match model ({}, {}, {})",
                iw.kind,
                iw.p_field,
                iw.p_time,
                self.kind,
                self.p_field(),
                self.p_time()
            )));
        }
        Ok(())
    }

    /// Start with `β = ln(n / L)` and zero fields.
    pub fn default_start(&self, iw: &IntegrationWeights) -> Vec<f64> {
        let mut x = vec![0.0; self.latent_dim()];
        if iw.total_length > 0.0 {
            x[0] = ((iw.n_spikes.max(1)) as f64 / iw.total_length).ln();
        }
        x
    }
}

/// Result of fitting one model at fixed hyperparameters.
#[derive(Clone, Debug)]
pub struct PosteriorFit {
    pub kind: ModelKind,
    pub hyper: Hyperparameters,
    pub mode: Vec<f64>,
    /// Factor of the negative Hessian of the log posterior at the mode.
    pub factor: Cholesky,
    /// Laplace log marginal likelihood.
    pub log_marginal_likelihood: f64,
    /// Log marginal plus log hyperprior and Jacobian; the search objective.
    pub log_hyper_posterior: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub p_field: usize,
    pub p_time: usize,
}

impl PosteriorFit {
    pub fn state(&self) -> LatentState {
        LatentState::from_flat(&self.mode, self.p_field)
    }
}

/// MAP and Laplace approximation at fixed hyperparameters.
pub fn fit_map(
    spec: &ModelSpec,
    iw: &IntegrationWeights,
    h: &Hyperparameters,
    opts: &NewtonOptions,
    start: Option<&[f64]>,
    symbolic: Option<&Symbolic>,
) -> Result<PosteriorFit> {
    spec.check_weights(iw)?;
    let prior = spec.latent_prior(h)?;
    let lik = CoxLikelihood::new(iw);
    let x0 = match start {
        Some(s) => s.to_vec(),
        None => spec.default_start(iw),
    };
    let map = newton_map(&lik, &prior, &x0, opts, symbolic)?;
    let lml = laplace_from_map(&prior, &map);
    Ok(PosteriorFit {
        kind: spec.kind,
        hyper: *h,
        log_hyper_posterior: lml + log_prior_density(h, &spec.priors) + h.log_jacobian(),
        log_marginal_likelihood: lml,
        log_likelihood: map.log_likelihood,
        mode: map.mode,
        factor: map.factor,
        iterations: map.iterations,
        gradient_norm: map.gradient_norm,
        p_field: spec.p_field(),
        p_time: spec.p_time(),
    })
}

/// Laplace log marginal likelihood `log p(y | hyper)`.
pub fn laplace_log_marginal(spec: &ModelSpec, iw: &IntegrationWeights, h: &Hyperparameters) -> Result<f64> {
    Ok(fit_map(spec, iw, h, &NewtonOptions::default(), None, None)?.log_marginal_likelihood)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Cap on objective evaluations per simplex run.
    pub max_evaluations: usize,
    /// Extra runs started from the incumbent with jitter.
    pub restarts: usize,
    pub seed: u64,
    /// Initial simplex step for log coordinates; the logit coordinate uses `logit_step`.
    pub log_step: f64,
    pub logit_step: f64,
    pub sd_tolerance: f64,
    pub newton: NewtonOptions,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_evaluations: 200,
            restarts: 3,
            seed: 1,
            log_step: 0.3,
            logit_step: 0.5,
            sd_tolerance: 1e-4,
            newton: NewtonOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub evaluations: usize,
    pub failed_evaluations: usize,
    pub runs: usize,
    /// Runs stopped by the evaluation cap.
    pub capped_runs: usize,
    pub start_objective: f64,
    pub best_objective: f64,
    pub best_unconstrained: Vec<f64>,
}

struct SearchState {
    evals_in_run: usize,
    evaluations: usize,
    failed: usize,
    best: Option<(f64, Vec<f64>, PosteriorFit)>,
    symbolic: Option<Symbolic>,
}

struct HyperObjective<'a> {
    spec: &'a ModelSpec,
    iw: &'a IntegrationWeights,
    cfg: &'a SearchConfig,
    state: &'a RefCell<SearchState>,
}

impl CostFunction for HyperObjective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let mut st = self.state.borrow_mut();
        if st.evals_in_run >= self.cfg.max_evaluations {
            return Err(argmin::core::Error::msg("evaluation cap reached"));
        }
        st.evals_in_run += 1;
        st.evaluations += 1;
        let warm = st.best.as_ref().map(|b| b.2.mode.clone());
        let sym = st.symbolic.clone();
        let fit = Hyperparameters::from_unconstrained(self.spec.kind, u).and_then(|h| {
            fit_map(self.spec, self.iw, &h, &self.cfg.newton, warm.as_deref(), sym.as_ref())
        });
        match fit {
            Ok(f) if f.log_hyper_posterior.is_finite() => {
                let c = -f.log_hyper_posterior;
                st.symbolic = Some(f.factor.symbolic().clone());
                if st.best.as_ref().is_none_or(|b| c < b.0) {
                    st.best = Some((c, u.clone(), f));
                }
                Ok(c)
            }
            _ => {
                st.failed += 1;
                Ok(f64::INFINITY)
            }
        }
    }
}

/// Maximizes the Laplace hyper-posterior with restarted Nelder–Mead, starting
/// from the prior medians (or `start`).
pub fn optimize_hyper(
    spec: &ModelSpec,
    iw: &IntegrationWeights,
    cfg: &SearchConfig,
    start: Option<&Hyperparameters>,
) -> Result<(PosteriorFit, SearchReport)> {
    spec.check_weights(iw)?;
    let h0 = match start {
        Some(h) => *h,
        None => Hyperparameters::prior_median(spec.kind, &spec.priors)?,
    };
    let u0 = h0.to_unconstrained();
    let d = u0.len();
    if cfg.max_evaluations < d + 2 {
        return Err(Error::Config(format!("max_evaluations must be at least {}", d + 2)));
    }
    let state = RefCell::new(SearchState { evals_in_run: 0, evaluations: 0, failed: 0, best: None, symbolic: None });
    let problem = HyperObjective { spec, iw, cfg, state: &state };
    let start_objective = problem.cost(&u0).unwrap_or(f64::INFINITY);
    if !start_objective.is_finite() {
        return Err(Error::invalid("model cannot be fitted at the starting hyperparameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut capped = 0;
    let mut runs = 0;
    for run in 0..=cfg.restarts {
        let centre = state.borrow().best.as_ref().expect("start evaluated").1.clone();
        let mut base = centre.clone();
        if run > 0 {
            for (k, b) in base.iter_mut().enumerate() {
                let step = if k == 2 { cfg.logit_step } else { cfg.log_step };
                *b += step * Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
            }
        }
        let mut simplex = vec![base.clone()];
        for k in 0..d {
            let mut v = base.clone();
            v[k] += if k == 2 { cfg.logit_step } else { cfg.log_step };
            simplex.push(v);
        }
        state.borrow_mut().evals_in_run = 0;
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(cfg.sd_tolerance)
            .map_err(|e| Error::Config(e.to_string()))?;
        let problem = HyperObjective { spec, iw, cfg, state: &state };
        runs += 1;
        let res = Executor::new(problem, solver).configure(|s| s.max_iters(cfg.max_evaluations as u64)).run();
        if res.is_err() {
            capped += 1;
        }
    }
    let st = state.into_inner();
    let (best_objective, best_u, fit) = st.best.expect("start evaluated");
    Ok((
        fit,
        SearchReport {
            evaluations: st.evaluations,
            failed_evaluations: st.failed,
            runs,
            capped_runs: capped,
            start_objective,
            best_objective,
            best_unconstrained: best_u,
        },
    ))
}

/// Streams `count` posterior draws of the latent vector in chunks of at most
/// `chunk`, so large models need not hold every draw at once. The draw sequence
/// does not depend on `chunk`.
pub fn for_each_posterior_draw<F: FnMut(&[f64])>(fit: &PosteriorFit, count: usize, seed: u64, chunk: usize, mut f: F) {
    let n = fit.mode.len();
    let chunk = chunk.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    let mut draw = vec![0.0; n];
    while done < count {
        let m = chunk.min(count - done);
        let mut z = Mat::zeros(n, m);
        for j in 0..m {
            for i in 0..n {
                z[(i, j)] = StandardNormal.sample(&mut rng);
            }
        }
        let x = fit.factor.color(&z);
        for j in 0..m {
            for i in 0..n {
                draw[i] = fit.mode[i] + x[(i, j)];
            }
            f(&draw);
        }
        done += m;
    }
}

/// `count` draws from the Gaussian approximation to the latent posterior.
pub fn sample_posterior(fit: &PosteriorFit, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    for_each_posterior_draw(fit, count, seed, 256, |d| out.push(d.to_vec()));
    out
}

/// Names of latent coordinates: `beta`, `w<k>`, `t<k>`.
pub fn latent_names(p_field: usize, p_time: usize) -> Vec<String> {
    let mut v = vec!["beta".to_string()];
    v.extend((0..p_field).map(|k| format!("w{k}")));
    v.extend((0..p_time).map(|k| format!("t{k}")));
    v
}

#[derive(Serialize)]
struct HyperFile<'a> {
    model: ModelKind,
    hyper: &'a Hyperparameters,
    log_marginal_likelihood: f64,
    log_hyper_posterior: f64,
    log_likelihood: f64,
    newton_iterations: usize,
    gradient_norm: f64,
}

/// Writes `hyper.json`, `latent.csv` (`index,name,mode`) and, when given, `report.json`.
pub fn write_fit(dir: &Path, fit: &PosteriorFit, report: Option<&SearchReport>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let hf = HyperFile {
        model: fit.kind,
        hyper: &fit.hyper,
        log_marginal_likelihood: fit.log_marginal_likelihood,
        log_hyper_posterior: fit.log_hyper_posterior,
        log_likelihood: fit.log_likelihood,
        newton_iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
    };
    std::fs::write(dir.join("hyper.json"), serde_json::to_string_pretty(&hf)?)?;
    let mut w = csv::Writer::from_path(dir.join("latent.csv"))?;
    w.write_record(["index", "name", "mode"])?;
    for (i, (name, v)) in latent_names(fit.p_field, fit.p_time).iter().zip(&fit.mode).enumerate() {
        w.write_record([i.to_string(), name.clone(), format!("{v:.17e}")])?;
    }
    w.flush()?;
    if let Some(r) = report {
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(r)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_circular_mesh, build_tri_mesh, wrap_angle, Rect, TemporalMesh};
    use crate::sparse::to_dense;
    use crate::trajectory::{integration_weights, segment_path, Sample, SessionData};
    use faer::linalg::solvers::{DenseSolveCore, Solve};
    use faer::Side;
    use rand::{Rng, SeedableRng};

    fn wander(n: usize, seed: u64) -> SessionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = [50.0, 50.0];
        let mut th: f64 = 1.0;
        let mut s = Vec::new();
        for i in 0..n {
            let spike = rng.random_bool(if p[0] < 50.0 { 0.15 } else { 0.05 });
            s.push(Sample { t: i as f64 * 0.1, x: p[0], y: p[1], theta: wrap_angle(th), spike });
            th += rng.random_range(-0.6..0.6);
            p[0] = (p[0] + 1.5 * th.cos()).clamp(1.0, 99.0);
            p[1] = (p[1] + 1.5 * th.sin()).clamp(1.0, 99.0);
        }
        SessionData::new(s).unwrap()
    }

    fn setup(kind: ModelKind, priors: PriorConfig) -> (ModelSpec, IntegrationWeights) {
        let data = wander(400, 3);
        let tri = build_tri_mesh(Rect::new(0.0, 0.0, 100.0, 100.0), 30.0, 10.0).unwrap();
        let circ = build_circular_mesh(6).unwrap();
        let temporal = TemporalMesh::uniform(data.duration(), 4).unwrap();
        let meshes = Meshes { tri, circ: Some(circ), temporal: Some(temporal) };
        let segs = segment_path(
            &data,
            &meshes.tri,
            kind.has_theta().then_some(meshes.circ.as_ref().unwrap()),
            kind.has_time().then_some(meshes.temporal.as_ref().unwrap()),
            &[],
        )
        .unwrap();
        let iw = integration_weights(&segs, &meshes, kind, &data, &data.spike_train(), None).unwrap();
        (ModelSpec::new(kind, priors, meshes).unwrap(), iw)
    }

    fn median(kind: ModelKind) -> Hyperparameters {
        Hyperparameters::prior_median(kind, &PriorConfig::default()).unwrap()
    }

    #[test]
    fn model_codes_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.code().parse::<ModelKind>().unwrap(), k);
        }
        assert!("m1".parse::<ModelKind>().is_err());
    }

    #[test]
    fn hyperprior_values_and_transforms() {
        let pr = PriorConfig::default();
        let h = median(ModelKind::OmegaThetaT);
        assert!((h.omega.rho - 20.0).abs() < 1e-12);
        assert!((h.omega.s - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let x = 0.5 * (h.omega.phi + 1.0);
        assert!((Beta::new(2.0, 20.0).unwrap().cdf(x) - 0.5).abs() < 1e-9);
        // Independent evaluation of each factor.
        let ln_ln = |x: f64, mu: f64, sd: f64| {
            let z = (x.ln() - mu.ln()) / sd;
            (1.0 / (x * sd * (2.0 * std::f64::consts::PI).sqrt()) * (-0.5 * z * z).exp()).ln()
        };
        let ln_exp = |x: f64, r: f64| (r * (-r * x).exp()).ln();
        let bx = 0.5 * (h.omega.phi + 1.0);
        let ln_beta = (bx * (1.0 - bx).powi(19) / (1.0 / 420.0) / 2.0).ln();
        let t = h.theta.unwrap();
        let tt = h.time.unwrap();
        let want = ln_ln(20.0, 20.0, 0.4)
            + ln_exp(h.omega.s, 0.5)
            + ln_beta
            + ln_exp(t.rho, pr.eta_theta)
            + ln_exp(t.s, 1.0)
            + ln_exp(tt.rho, 0.01)
            + ln_exp(tt.s, 1.0 / 3.0);
        assert!((log_prior_density(&h, &pr) - want).abs() < 1e-10);

        let u = h.to_unconstrained();
        let back = Hyperparameters::from_unconstrained(ModelKind::OmegaThetaT, &u).unwrap();
        for (a, b) in back.to_unconstrained().iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
        // Jacobian of φ(u) by finite differences.
        let eps = 1e-6;
        let mut up = u.clone();
        up[2] += eps;
        let hp = Hyperparameters::from_unconstrained(ModelKind::OmegaThetaT, &up).unwrap();
        let dphi = (hp.omega.phi - h.omega.phi) / eps;
        let want_j = h.omega.rho.ln() + h.omega.s.ln() + dphi.ln() + t.rho.ln() + t.s.ln() + tt.rho.ln() + tt.s.ln();
        assert!((h.log_jacobian() - want_j).abs() < 1e-5);

        let mut bad = h;
        bad.omega.phi = 1.5;
        assert_eq!(log_prior_density(&bad, &pr), f64::NEG_INFINITY);
        assert!(Hyperparameters::new(ModelKind::Omega, (20.0, 1.0, 0.0), Some((1.0, 1.0)), None).is_err());
    }

    #[test]
    fn cox_gradient_and_hessian_match_finite_differences() {
        for kind in ModelKind::ALL {
            let (spec, iw) = setup(kind, PriorConfig::default());
            let lik = CoxLikelihood::new(&iw);
            let n = lik.dim();
            assert_eq!(n, spec.latent_dim());
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x: Vec<f64> = (0..n).map(|i| if i == 0 { -2.0 } else { rng.random_range(-0.5..0.5) }).collect();
            let g = lik.gradient(&x);
            let h = to_dense(&sparse::from_triplets(n, n, &lik.neg_hessian(&x)).unwrap());
            let eps = 1e-5;
            for i in (0..n).step_by(7).chain([0, n - 1]) {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += eps;
                xm[i] -= eps;
                let fd = (lik.value(&xp) - lik.value(&xm)) / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "{kind} grad {i}: {fd} vs {}", g[i]);
                let (gp, gm) = (lik.gradient(&xp), lik.gradient(&xm));
                for j in 0..n {
                    let fd = -(gp[j] - gm[j]) / (2.0 * eps);
                    assert!((fd - h[(j, i)]).abs() < 1e-5 * (1.0 + h[(j, i)].abs()), "{kind} hess {j},{i}");
                }
            }
        }
    }

    #[test]
    fn likelihood_identities() {
        let (spec, iw) = setup(ModelKind::Omega, PriorConfig::default());
        let zero = LatentState { beta: 0.0, field: vec![0.0; iw.p_field], time: vec![] };
        let l0 = log_likelihood(&spec, &zero, &iw).unwrap();
        assert!((l0 + iw.total_length).abs() < 1e-9 * iw.total_length);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = LatentState { beta: -1.0, field: (0..iw.p_field).map(|_| rng.random_range(-1.0..1.0)).collect(), time: vec![] };
        let e = expected_count(&iw, &x.to_flat());
        let c = 0.3;
        let shifted = LatentState { beta: x.beta + c, ..x.clone() };
        let d = log_likelihood(&spec, &shifted, &iw).unwrap() - log_likelihood(&spec, &x, &iw).unwrap();
        let want = iw.n_spikes as f64 * c - (c.exp() - 1.0) * e;
        assert!((d - want).abs() < 1e-9 * want.abs().max(1.0));

        // Zero temporal weights reduce the temporal model to the spatial one.
        let (st, iwt) = setup(ModelKind::OmegaT, PriorConfig::default());
        let xt = LatentState { time: vec![0.0; iwt.p_time], ..x.clone() };
        let lt = log_likelihood(&st, &xt, &iwt).unwrap();
        let l = log_likelihood(&spec, &x, &iw).unwrap();
        assert!((lt - l).abs() < 1e-10 * l.abs());
        assert!(log_likelihood(&spec, &xt, &iw).is_err());
    }

    #[test]
    fn cox_likelihood_is_concave() {
        for kind in ModelKind::ALL {
            let (_, iw) = setup(kind, PriorConfig::default());
            let lik = CoxLikelihood::new(&iw);
            let n = lik.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..5 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
                assert!(lik.value(&mid) >= 0.5 * (lik.value(&x) + lik.value(&y)) - 1e-9);
                let m = sparse::from_triplets(n, n, &lik.neg_hessian(&x)).unwrap();
                assert!(sparse::quad_form(&m, &y) >= -1e-9);
            }
        }
    }

    struct GaussianObs {
        y: Vec<f64>,
        noise_var: f64,
    }

    impl LatentLikelihood for GaussianObs {
        fn dim(&self) -> usize {
            self.y.len()
        }
        fn value(&self, x: &[f64]) -> f64 {
            let n = self.y.len() as f64;
            -0.5 * n * (2.0 * std::f64::consts::PI * self.noise_var).ln()
                - self.y.iter().zip(x).map(|(y, x)| (y - x).powi(2)).sum::<f64>() / (2.0 * self.noise_var)
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            self.y.iter().zip(x).map(|(y, x)| (y - x) / self.noise_var).collect()
        }
        fn neg_hessian(&self, _: &[f64]) -> Vec<(usize, usize, f64)> {
            (0..self.y.len()).map(|i| (i, i, 1.0 / self.noise_var)).collect()
        }
    }

    #[test]
    fn laplace_is_exact_for_conjugate_gaussian() {
        let n = 12;
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, 2.5));
            if i + 1 < n {
                trip.push((i, i + 1, -1.0));
                trip.push((i + 1, i, -1.0));
            }
        }
        let q = sparse::from_triplets(n, n, &trip).unwrap();
        let mean: Vec<f64> = (0..n).map(|i| 0.1 * i as f64).collect();
        let prior = GaussianPrior::new(q.clone(), mean.clone()).unwrap();
        let y: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let lik = GaussianObs { y: y.clone(), noise_var: 0.7 };
        let map = newton_map(&lik, &prior, &vec![0.0; n], &NewtonOptions::default(), None).unwrap();
        let got = laplace_from_map(&prior, &map);

        // y ~ N(m, Q⁻¹ + σ²I).
        let cov = to_dense(&q).llt(Side::Lower).unwrap().inverse();
        let s = faer::Mat::from_fn(n, n, |i, j| cov[(i, j)] + if i == j { 0.7 } else { 0.0 });
        let llt = s.llt(Side::Lower).unwrap();
        let r: Vec<f64> = y.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let rm = faer::Mat::from_fn(n, 1, |i, _| r[i]);
        let sol = llt.solve(&rm);
        let quad: f64 = (0..n).map(|i| r[i] * sol[(i, 0)]).sum();
        let l = llt.L();
        let logdet: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        let want = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn refit_from_mode_is_immediate() {
        for kind in ModelKind::ALL {
            let (spec, iw) = setup(kind, PriorConfig::default());
            let h = median(kind);
            let fit = fit_map(&spec, &iw, &h, &NewtonOptions::default(), None, None).unwrap();
            assert!(fit.iterations > 0);
            let again = fit_map(&spec, &iw, &h, &NewtonOptions::default(), Some(&fit.mode), None).unwrap();
            assert!(again.iterations <= 2, "{kind}: {}", again.iterations);
            assert!((again.log_marginal_likelihood - fit.log_marginal_likelihood).abs() < 1e-6);
        }
    }

    #[test]
    fn rescaled_exposure_shifts_intercept() {
        let pr = PriorConfig { beta_sd: 1e6, ..PriorConfig::default() };
        let (spec, iw) = setup(ModelKind::Omega, pr);
        let h = median(ModelKind::Omega);
        let a = fit_map(&spec, &iw, &h, &NewtonOptions::default(), None, None).unwrap();
        let c: f64 = 0.8;
        let mut iw2 = iw.clone();
        iw2.b.iter_mut().for_each(|b| *b *= (-c).exp());
        let b = fit_map(&spec, &iw2, &h, &NewtonOptions::default(), None, None).unwrap();
        assert!((b.mode[0] - a.mode[0] - c).abs() < 1e-5);
        for (x, y) in a.mode[1..].iter().zip(&b.mode[1..]) {
            assert!((x - y).abs() < 1e-5);
        }
        let shift = iw.n_spikes as f64 * c;
        assert!((b.log_marginal_likelihood - a.log_marginal_likelihood - shift).abs() < 1e-4);
    }

    #[test]
    fn vanishing_temporal_effect_collapses_to_spatial_model() {
        let (s0, iw0) = setup(ModelKind::Omega, PriorConfig::default());
        let (st, iwt) = setup(ModelKind::OmegaT, PriorConfig::default());
        let h0 = median(ModelKind::Omega);
        let mut ht = median(ModelKind::OmegaT);
        ht.time = Some(SpdeParams::new(DomainKind::Line, 30.0, 1e-5, 1.0).unwrap());
        let f0 = fit_map(&s0, &iw0, &h0, &NewtonOptions::default(), None, None).unwrap();
        let ft = fit_map(&st, &iwt, &ht, &NewtonOptions::default(), None, None).unwrap();
        assert!((f0.log_marginal_likelihood - ft.log_marginal_likelihood).abs() < 1e-3);
        for (a, b) in f0.mode.iter().zip(&ft.mode) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn posterior_draws_have_laplace_covariance() {
        let (spec, iw) = setup(ModelKind::Omega, PriorConfig::default());
        let fit = fit_map(&spec, &iw, &median(ModelKind::Omega), &NewtonOptions::default(), None, None).unwrap();
        let draws = sample_posterior(&fit, 4000, 2);
        let var = fit.factor.inverse_diagonal();
        for i in [0, 5, 20] {
            let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            let m = crate::numeric::mean(&col);
            let v = crate::numeric::variance(&col);
            assert!((m - fit.mode[i]).abs() < 4.0 * (var[i] / 4000.0).sqrt());
            assert!((v / var[i] - 1.0).abs() < 0.1, "{i}: {v} vs {}", var[i]);
        }
        let mut streamed = Vec::new();
        for_each_posterior_draw(&fit, 10, 2, 3, |d| streamed.push(d.to_vec()));
        assert_eq!(streamed, draws[..10].to_vec());
    }

    #[test]
    fn hyper_search_improves_and_respects_cap() {
        let (spec, iw) = setup(ModelKind::Omega, PriorConfig::default());
        let cfg = SearchConfig { max_evaluations: 40, restarts: 1, ..SearchConfig::default() };
        let (fit, rep) = optimize_hyper(&spec, &iw, &cfg, None).unwrap();
        assert!(rep.best_objective <= rep.start_objective);
        assert!((rep.best_objective + fit.log_hyper_posterior).abs() < 1e-9);
        assert!(rep.evaluations <= 1 + 2 * 40);
        assert_eq!(rep.runs, 2);

        let tight = SearchConfig { max_evaluations: 6, restarts: 0, ..SearchConfig::default() };
        let (_, rep) = optimize_hyper(&spec, &iw, &tight, None).unwrap();
        assert_eq!(rep.capped_runs, 1);
        assert!(rep.evaluations <= 7);
        let again = optimize_hyper(&spec, &iw, &tight, None).unwrap().1;
        assert_eq!(again, rep);
    }

    #[test]
    fn fit_artifacts_are_written() {
        let (spec, iw) = setup(ModelKind::OmegaT, PriorConfig::default());
        let fit = fit_map(&spec, &iw, &median(ModelKind::OmegaT), &NewtonOptions::default(), None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_fit(dir.path(), &fit, None).unwrap();
        let text = std::fs::read_to_string(dir.path().join("latent.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + spec.latent_dim());
        assert!(text.lines().nth(1).unwrap().starts_with("0,beta,"));
        let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("hyper.json")).unwrap()).unwrap();
        assert_eq!(json["model"], "m0t");
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let (spec, _) = setup(ModelKind::Omega, PriorConfig::default());
        let (_, iwt) = setup(ModelKind::OmegaT, PriorConfig::default());
        assert!(fit_map(&spec, &iwt, &median(ModelKind::Omega), &NewtonOptions::default(), None, None).is_err());
    }
}
