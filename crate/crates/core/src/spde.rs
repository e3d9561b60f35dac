//! Oscillatory Whittle–Matérn fields: GMRF precision assembly, closed-form
//! spectral densities, covariances and marginal variances.

use std::f64::consts::{PI, TAU};

use faer::Mat;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::MassStiffness;
use crate::numeric::integrate;
use crate::sparse::{self, Cholesky, SparseMat};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Plane,
    Circle,
    Line,
}

impl DomainKind {
    pub const ALL: [DomainKind; 3] = [DomainKind::Plane, DomainKind::Circle, DomainKind::Line];

    /// `κρ` for this domain: √8 on the plane, √12 on one-dimensional domains.
    pub fn range_constant(self) -> f64 {
        match self {
            DomainKind::Plane => 8f64.sqrt(),
            DomainKind::Circle | DomainKind::Line => 12f64.sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Plane => "plane",
            DomainKind::Circle => "circle",
            DomainKind::Line => "line",
        }
    }
}

impl std::str::FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(DomainKind::Plane),
            "circle" => Ok(DomainKind::Circle),
            "line" => Ok(DomainKind::Line),
            _ => Err(Error::invalid(format!("unknown domain `{s}`"))),
        }
    }
}

/// Field hyperparameters in both the interpretable `(ρ, s, φ)` and the
/// operator `(κ, τ)` parameterizations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdeParams {
    pub kind: DomainKind,
    pub rho: f64,
    pub s: f64,
    pub phi: f64,
    pub kappa: f64,
    pub tau: f64,
}

impl SpdeParams {
    pub fn new(kind: DomainKind, rho: f64, s: f64, phi: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) || !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("range {rho} and std {s} must be positive")));
        }
        if !(phi > -1.0 && phi.is_finite()) {
            return Err(Error::invalid(format!("damping {phi} must exceed -1")));
        }
        let kappa = kind.range_constant() / rho;
        normalize_tau(SpdeParams { kind, rho, s, phi, kappa, tau: f64::NAN })
    }
}

/// Sets `τ = √v / s` with `v` the unit-σ marginal variance, so the field has standard deviation `s`.
pub fn normalize_tau(mut p: SpdeParams) -> Result<SpdeParams> {
    let v = marginal_variance(p.kind, p.kappa, p.phi, 1.0)?;
    p.tau = v.sqrt() / p.s;
    Ok(p)
}

#[derive(Clone, Debug)]
pub struct PrecisionMatrix {
    pub q: SparseMat,
    /// `None` for Kronecker products.
    pub domain: Option<DomainKind>,
}

impl PrecisionMatrix {
    pub fn dim(&self) -> usize {
        self.q.nrows()
    }
}

/// `τ²(κ⁴C + 2φκ²G + G C⁻¹ G)`.
pub fn assemble_precision(ms: &MassStiffness, p: &SpdeParams) -> Result<PrecisionMatrix> {
    let n = ms.c.len();
    if ms.g.nrows() != n || ms.g.ncols() != n {
        return Err(Error::Shape(format!("mass has {n} nodes, stiffness is {}x{}", ms.g.nrows(), ms.g.ncols())));
    }
    if !(p.phi > -1.0) || !(p.kappa > 0.0) || !(p.tau > 0.0) {
        return Err(Error::invalid("precision needs κ > 0, τ > 0, φ > -1"));
    }
    let k2 = p.kappa * p.kappa;
    let t2 = p.tau * p.tau;
    let cinv: Vec<f64> = ms.c.iter().map(|c| 1.0 / c).collect();
    let c = sparse::diagonal(&ms.c);
    let gcg = sparse::sandwich_diag(&ms.g, &cinv)?;
    let q = sparse::linear_combination(&[(t2 * k2 * k2, &c), (t2 * 2.0 * p.phi * k2, &ms.g), (t2, &gcg)])?;
    Ok(PrecisionMatrix { q, domain: Some(p.kind) })
}

/// Precision of the interaction field flattened with index `θ_idx · p_b + b_idx`.
pub fn kron_precision(qa: &PrecisionMatrix, qb: &PrecisionMatrix) -> PrecisionMatrix {
    PrecisionMatrix { q: sparse::kron(&qa.q, &qb.q), domain: None }
}

/// Spectral density (plane, line) or Fourier mass (circle, integer `omega`).
pub fn spectral_density(kind: DomainKind, omega: f64, kappa: f64, phi: f64, sigma: f64) -> f64 {
    let k2 = kappa * kappa;
    let w2 = omega * omega;
    let den = k2 * k2 + 2.0 * phi * k2 * w2 + w2 * w2;
    let norm = match kind {
        DomainKind::Plane => TAU * TAU,
        DomainKind::Circle | DomainKind::Line => TAU,
    };
    sigma * sigma / (norm * den)
}

fn check_params(kappa: f64, phi: f64, sigma: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa.is_finite()) || !(sigma > 0.0) || !(phi > -1.0 && phi.is_finite()) {
        return Err(Error::invalid(format!("need κ > 0, σ > 0, φ > -1 (got κ={kappa}, σ={sigma}, φ={phi})")));
    }
    Ok(())
}

/// `arccos(φ)/√(1−φ²)` continued analytically through `φ = 1`.
fn damping_ratio(phi: f64) -> f64 {
    let d = phi - 1.0;
    if d.abs() < 1e-6 {
        1.0 - d / 3.0 + 2.0 * d * d / 15.0
    } else if phi < 1.0 {
        phi.acos() / (1.0 - phi * phi).sqrt()
    } else {
        phi.acosh() / (phi * phi - 1.0).sqrt()
    }
}

/// `coth(z)` and `csch²(z)` for `Re z > 0` without overflow.
fn coth_csch2(z: Complex64) -> (Complex64, Complex64) {
    let e = (-2.0 * z).exp();
    let one = Complex64::new(1.0, 0.0);
    ((one + e) / (one - e), 4.0 * e / ((one - e) * (one - e)))
}

/// Derivative of `h(x) = coth(πx)/x`.
fn h_prime(x: Complex64) -> Complex64 {
    let (coth, csch2) = coth_csch2(PI * x);
    -PI * csch2 / x - coth / (x * x)
}

fn h(x: Complex64) -> Complex64 {
    coth_csch2(PI * x).0 / x
}

/// `(1/2π) Σ_n 1/(κ⁴ + 2φκ²n² + n⁴)` by partial fractions over the roots `a², b²`.
fn circle_variance(kappa: f64, phi: f64) -> f64 {
    let k2 = kappa * kappa;
    let disc = Complex64::new(phi * phi - 1.0, 0.0).sqrt();
    let a = (k2 * (phi + disc)).sqrt();
    let b = (k2 * (phi - disc)).sqrt();
    let v = if (phi - 1.0).abs() >= 1e-2 {
        0.5 * (h(a) - h(b)) / (b * b - a * a)
    } else {
        // Divided difference as an integral of h' along the segment a → b.
        let (nodes, weights) = gauss_legendre_10();
        let mut acc = Complex64::new(0.0, 0.0);
        for (x, w) in nodes.iter().zip(weights) {
            acc += w * h_prime(a + (b - a) * (0.5 * (x + 1.0)));
        }
        -0.5 * (0.5 * acc) / (a + b)
    };
    v.re
}

fn gauss_legendre_10() -> ([f64; 10], [f64; 10]) {
    let x = [
        0.148_874_338_981_631_2,
        0.433_395_394_129_247_2,
        0.679_409_568_299_024_4,
        0.865_063_366_688_984_5,
        0.973_906_528_517_171_7,
    ];
    let w = [
        0.295_524_224_714_752_9,
        0.269_266_719_309_996_4,
        0.219_086_362_515_982_0,
        0.149_451_349_150_580_6,
        0.066_671_344_308_688_1,
    ];
    let mut nodes = [0.0; 10];
    let mut weights = [0.0; 10];
    for i in 0..5 {
        nodes[2 * i] = -x[i];
        nodes[2 * i + 1] = x[i];
        weights[2 * i] = w[i];
        weights[2 * i + 1] = w[i];
    }
    (nodes, weights)
}

/// Closed-form marginal variance of the continuum field.
pub fn marginal_variance(kind: DomainKind, kappa: f64, phi: f64, sigma: f64) -> Result<f64> {
    check_params(kappa, phi, sigma)?;
    let s2 = sigma * sigma;
    Ok(match kind {
        DomainKind::Plane => s2 * damping_ratio(phi) / (4.0 * PI * kappa * kappa),
        DomainKind::Line => s2 / (4.0 * kappa.powi(3)) * (2.0 / (1.0 + phi)).sqrt(),
        DomainKind::Circle => s2 * circle_variance(kappa, phi),
    })
}

/// Marginal variance by direct quadrature (plane, line) or summation (circle) of the spectral density.
pub fn marginal_variance_numeric(kind: DomainKind, kappa: f64, phi: f64, sigma: f64) -> Result<f64> {
    check_params(kappa, phi, sigma)?;
    Ok(match kind {
        DomainKind::Circle => {
            let mut acc = 0.0;
            for n in (1..=1_000_000u64).rev() {
                acc += spectral_density(kind, n as f64, kappa, phi, sigma);
            }
            2.0 * acc + spectral_density(kind, 0.0, kappa, phi, sigma)
        }
        DomainKind::Line | DomainKind::Plane => {
            // ω = κ tan(x) maps [0, π/2) onto [0, ∞).
            let f = |x: f64| {
                let (s, c) = x.sin_cos();
                if c <= 0.0 {
                    return 0.0;
                }
                let w = kappa * s / c;
                let jac = kappa / (c * c);
                let radial = if kind == DomainKind::Plane { TAU * w } else { 2.0 };
                radial * spectral_density(kind, w, kappa, phi, sigma) * jac
            };
            integrate(f, 0.0, PI / 2.0, 1e-13)
        }
    })
}

/// Modified Bessel function `K_ν(z)` for `ν ∈ {0, 1}` and `Re z > 0`.
pub fn bessel_k(nu: u32, z: Complex64) -> Complex64 {
    assert!(nu <= 1, "only orders 0 and 1 are supported");
    if z.norm() <= 4.0 {
        bessel_k_series(nu, z)
    } else {
        bessel_k_integral(nu, z)
    }
}

fn bessel_k_series(nu: u32, z: Complex64) -> Complex64 {
    let q = z * z / 4.0;
    let log_half = (z / 2.0).ln();
    let mut term = Complex64::new(1.0, 0.0);
    let mut harmonic = 0.0;
    if nu == 0 {
        let mut i0 = term;
        let mut tail = Complex64::new(0.0, 0.0);
        for k in 1..200 {
            let kf = k as f64;
            term *= q / (kf * kf);
            harmonic += 1.0 / kf;
            i0 += term;
            tail += term * harmonic;
            if term.norm() * (1.0 + harmonic) < 1e-18 * i0.norm() {
                break;
            }
        }
        -(log_half + EULER_GAMMA) * i0 + tail
    } else {
        // term_k = q^k / (k! (k+1)!)
        let mut i1_sum = term;
        let mut psi_sum = term * (2.0 * -EULER_GAMMA + 1.0);
        for k in 1..200 {
            let kf = k as f64;
            term *= q / (kf * (kf + 1.0));
            harmonic += 1.0 / kf;
            let psi = 2.0 * -EULER_GAMMA + 2.0 * harmonic + 1.0 / (kf + 1.0);
            i1_sum += term;
            psi_sum += term * psi;
            if term.norm() * psi.abs().max(1.0) < 1e-18 * i1_sum.norm() {
                break;
            }
        }
        1.0 / z + log_half * (z / 2.0) * i1_sum - z / 4.0 * psi_sum
    }
}

fn bessel_k_integral(nu: u32, z: Complex64) -> Complex64 {
    // K_ν(z) = ∫₀^∞ exp(−z cosh t) cosh(νt) dt, trapezoid rule on the analytic strip.
    // The strip half-width trades discretization error against growth of the
    // integrand off the real axis, which scales like exp(Re z (1 - cos d)).
    let margin = (PI / 2.0 - z.arg().abs()).max(1e-3);
    let d = (0.9 * margin).min((4.0 / z.re.max(1e-3)).sqrt());
    let h = (TAU * d / 40.0).min(0.25);
    let f = |t: f64| (-z * t.cosh()).exp() * (nu as f64 * t).cosh();
    let mut acc = 0.5 * f(0.0);
    let mut k = 1;
    loop {
        let t = k as f64 * h;
        let v = f(t);
        acc += v;
        if z.re * t.cosh() > 60.0 + z.re && v.norm() < 1e-20 * acc.norm() {
            break;
        }
        k += 1;
        if k > 200_000 {
            break;
        }
    }
    acc * h
}

/// Closed-form stationary covariance at `lag` (distance on the plane, signed
/// or unsigned time on the line, angle on the circle).
pub fn covariance(kind: DomainKind, lag: f64, kappa: f64, phi: f64, sigma: f64) -> Result<f64> {
    check_params(kappa, phi, sigma)?;
    let s2 = sigma * sigma;
    match kind {
        DomainKind::Line => {
            if phi > 1.0 {
                return Err(Error::NoClosedForm(format!("line covariance with φ = {phi} > 1")));
            }
            let t = lag.abs();
            if 1.0 - phi < 1e-14 {
                return Ok(s2 * (1.0 + kappa * t) * (-kappa * t).exp() / (4.0 * kappa.powi(3)));
            }
            let half = 0.5 * phi.acos();
            Ok(s2 / (2.0 * (2.0 * half).sin() * kappa.powi(3))
                * (-kappa * half.cos() * t).exp()
                * (half + kappa * half.sin() * t).sin())
        }
        DomainKind::Plane => {
            if phi > 1.0 {
                return Err(Error::NoClosedForm(format!("plane covariance with φ = {phi} > 1")));
            }
            let r = lag.abs();
            if r == 0.0 {
                return marginal_variance(kind, kappa, phi, sigma);
            }
            let x = kappa * r;
            if 1.0 - phi < 1e-14 {
                let k1 = bessel_k(1, Complex64::new(x, 0.0)).re;
                return Ok(s2 * x * k1 / (4.0 * PI * kappa * kappa));
            }
            let half = 0.5 * phi.acos();
            let z = Complex64::from_polar(x, half);
            Ok(-s2 * bessel_k(0, z).im / (TAU * (2.0 * half).sin() * kappa * kappa))
        }
        DomainKind::Circle => {
            if phi != 1.0 {
                return Err(Error::NoClosedForm(format!("circle covariance with φ = {phi} ≠ 1")));
            }
            let theta = crate::mesh::wrap_angle(lag);
            let u = PI - theta;
            let k = kappa;
            let d = 1.0 - (-TAU * k).exp();
            let a = ((k * (u - PI)).exp() + (-k * (u + PI)).exp()) / d;
            let s = ((k * (u - PI)).exp() - (-k * (u + PI)).exp()) / d;
            let coth = (1.0 + (-TAU * k).exp()) / d;
            Ok(s2 * (a * (1.0 + PI * k * coth) - k * u * s) / (4.0 * k.powi(3)))
        }
    }
}

/// One draw with precision `q`.
pub fn sample_gmrf(q: &PrecisionMatrix, seed: u64) -> Result<Vec<f64>> {
    let ch = Cholesky::factor(&q.q)?;
    Ok(sample_with_factor(&ch, 1, seed).remove(0))
}

/// `count` independent draws with covariance equal to the inverse of the factored matrix.
pub fn sample_with_factor(ch: &Cholesky, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = ch.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Mat::from_fn(n, count, |_, _| 0.0);
    let mut z = z;
    for j in 0..count {
        for i in 0..n {
            z[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    let x = ch.color(&z);
    (0..count).map(|j| (0..n).map(|i| x[(i, j)]).collect()).collect()
}
