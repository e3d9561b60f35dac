//! WebAssembly bindings for the static demo page in `www/`.

pub mod demo;

use gridcox::spde::DomainKind;
use wasm_bindgen::prelude::*;

fn js(e: gridcox::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn domain(name: &str) -> Result<DomainKind, JsError> {
    name.parse().map_err(js)
}

/// Marginal variance (σ = 1) for each damping value in `phis`.
#[wasm_bindgen]
pub fn variance_curve(domain_name: &str, kappa: f64, phis: Vec<f64>) -> Result<Vec<f64>, JsError> {
    demo::variance_curve(domain(domain_name)?, kappa, &phis).map_err(js)
}

/// Covariance (σ = 1) at each lag; NaN where no closed form is available.
#[wasm_bindgen]
pub fn covariance_curve(domain_name: &str, kappa: f64, phi: f64, lags: Vec<f64>) -> Result<Vec<f64>, JsError> {
    demo::covariance_curve(domain(domain_name)?, kappa, phi, &lags).map_err(js)
}

/// One GMRF draw on a square of side `size`, evaluated on an `n × n` raster (row-major, x fastest).
#[wasm_bindgen]
pub fn field_sample(size: f64, max_edge: f64, rho: f64, s: f64, phi: f64, n: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    demo::field_sample(size, max_edge, rho, s, phi, n, seed).map_err(js)
}

/// Simulated session and its kernel rate map per unit time.
#[wasm_bindgen]
pub struct RateMapDemo(demo::RateMapOutput);

#[wasm_bindgen]
impl RateMapDemo {
    /// Flat `[x0, y0, x1, y1, ...]` trajectory.
    #[wasm_bindgen(getter)]
    pub fn path(&self) -> Vec<f64> {
        self.0.path.clone()
    }

    /// Flat spike positions.
    #[wasm_bindgen(getter)]
    pub fn spikes(&self) -> Vec<f64> {
        self.0.spikes.clone()
    }

    /// `n × n` raster of spikes per second.
    #[wasm_bindgen(getter)]
    pub fn rate(&self) -> Vec<f64> {
        self.0.per_time.clone()
    }
}

/// Simulates `seconds` of movement in a 100 cm box under a random oscillatory
/// field and smooths the spikes with bandwidth `h`.
#[wasm_bindgen]
pub fn simulate_rate_map(seconds: f64, rho: f64, phi: f64, h: f64, n: usize, seed: u64) -> Result<RateMapDemo, JsError> {
    demo::simulate_rate_map(seconds, rho, phi, h, n, seed).map(RateMapDemo).map_err(js)
}
