//! Plain-Rust versions of the exported operations, testable off the browser.

use gridcox::mesh::{build_tri_mesh, FemMesh, Rect};
use gridcox::sim::{sample_truth, simulate_session, FieldSettings, TruthConfig};
use gridcox::spde::{assemble_precision, covariance, marginal_variance, sample_gmrf, spectral_density, DomainKind, SpdeParams};
use gridcox::trajectory::{rate_map_kernel, Raster};
use gridcox::{Error, Result};

pub fn variance_curve(d: DomainKind, kappa: f64, phis: &[f64]) -> Result<Vec<f64>> {
    phis.iter().map(|&p| marginal_variance(d, kappa, p, 1.0)).collect()
}

/// Closed form where one exists; Fourier series on the circle otherwise; NaN elsewhere.
pub fn covariance_curve(d: DomainKind, kappa: f64, phi: f64, lags: &[f64]) -> Result<Vec<f64>> {
    lags.iter()
        .map(|&h| match covariance(d, h, kappa, phi, 1.0) {
            Err(Error::NoClosedForm(_)) if d == DomainKind::Circle => Ok(circle_series(h, kappa, phi)),
            Err(Error::NoClosedForm(_)) => Ok(f64::NAN),
            r => r,
        })
        .collect()
}

fn circle_series(theta: f64, kappa: f64, phi: f64) -> f64 {
    let s = |n: f64| spectral_density(DomainKind::Circle, n, kappa, phi, 1.0);
    (1..=4000).rev().map(|n| 2.0 * s(n as f64) * (n as f64 * theta).cos()).sum::<f64>() + s(0.0)
}

pub fn field_sample(size: f64, max_edge: f64, rho: f64, s: f64, phi: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    let arena = Rect::new(0.0, 0.0, size, size);
    let mesh = build_tri_mesh(arena, max_edge, 0.2 * size)?;
    let params = SpdeParams::new(DomainKind::Plane, rho, s, phi)?;
    let q = assemble_precision(&mesh.mass_stiffness(), &params)?;
    let w = sample_gmrf(&q, seed)?;
    let raster = Raster { rect: arena, nx: n, ny: n };
    let mut out = Vec::with_capacity(raster.len());
    for j in 0..n {
        for i in 0..n {
            out.push(mesh.eval_basis(raster.centre(i, j))?.dot(&w));
        }
    }
    Ok(out)
}

pub struct RateMapOutput {
    pub path: Vec<f64>,
    pub spikes: Vec<f64>,
    pub per_time: Vec<f64>,
}

pub fn simulate_rate_map(seconds: f64, rho: f64, phi: f64, h: f64, n: usize, seed: u64) -> Result<RateMapOutput> {
    let cfg = TruthConfig {
        max_edge: 8.0,
        margin: 15.0,
        omega: FieldSettings { rho, s: 1.0, phi },
        field_seed: seed,
        ..TruthConfig::default()
    };
    let truth = sample_truth(&cfg, seconds)?;
    let (data, spikes) = simulate_session(&truth, &cfg, seconds, 0.05, seed.wrapping_add(1))?;
    let map = rate_map_kernel(&data, &spikes, h, Raster { rect: cfg.arena, nx: n, ny: n })?;
    Ok(RateMapOutput {
        path: data.samples.iter().flat_map(|s| [s.x, s.y]).collect(),
        spikes: data.samples.iter().filter(|s| s.spike).flat_map(|s| [s.x, s.y]).collect(),
        per_time: map.per_time,
    })
}
