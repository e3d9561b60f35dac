//! Run configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::CrossvalConfig;
use crate::mesh::{build_circular_mesh, build_tri_mesh};
use crate::model::{ModelKind, NewtonOptions, PriorConfig, SearchConfig};
use crate::trajectory::{segment_path, thin_temporal_knots, Meshes, SessionData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Longest triangle edge (cm).
    pub max_edge: f64,
    /// Extension of the mesh beyond the path bounding box (cm).
    pub margin: f64,
    pub p_theta: usize,
    /// Minimum spacing of temporal knots (s).
    pub temporal_spacing: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { max_edge: 5.0, margin: 20.0, p_theta: 16, temporal_spacing: 60.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub newton_tolerance: f64,
    pub newton_max_iterations: usize,
    pub max_evaluations: usize,
    pub restarts: usize,
    pub log_step: f64,
    pub logit_step: f64,
    pub sd_tolerance: f64,
    /// Posterior draws for predictive moments.
    pub draws: usize,
    /// Sign-flip permutations per test.
    pub permutations: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let s = SearchConfig::default();
        let c = CrossvalConfig::default();
        InferenceConfig {
            newton_tolerance: s.newton.tolerance,
            newton_max_iterations: s.newton.max_iterations,
            max_evaluations: s.max_evaluations,
            restarts: s.restarts,
            log_step: s.log_step,
            logit_step: s.logit_step,
            sd_tolerance: s.sd_tolerance,
            draws: c.draws,
            permutations: c.permutations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub search: u64,
    pub posterior: u64,
    pub simulation: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { search: 1, posterior: 2, simulation: 7 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub meshes: MeshConfig,
    pub priors: PriorConfig,
    pub inference: InferenceConfig,
    pub seeds: SeedConfig,
}

impl RunConfig {
    /// Parses JSON; unknown keys and invalid values are reported with their path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meshes;
        let positive = [
            ("meshes.max_edge", m.max_edge),
            ("meshes.temporal_spacing", m.temporal_spacing),
            ("inference.newton_tolerance", self.inference.newton_tolerance),
            ("inference.log_step", self.inference.log_step),
            ("inference.logit_step", self.inference.logit_step),
            ("inference.sd_tolerance", self.inference.sd_tolerance),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(m.margin >= 0.0) {
            return Err(Error::Config(format!("meshes.margin must be non-negative, got {}", m.margin)));
        }
        if m.p_theta < 3 {
            return Err(Error::Config("meshes.p_theta must be at least 3".into()));
        }
        if self.inference.draws < 2 {
            return Err(Error::Config("inference.draws must be at least 2".into()));
        }
        if self.inference.permutations < 1 {
            return Err(Error::Config("inference.permutations must be at least 1".into()));
        }
        if self.inference.max_evaluations < 10 {
            return Err(Error::Config("inference.max_evaluations must be at least 10".into()));
        }
        self.priors.validate()
    }

    pub fn search(&self) -> SearchConfig {
        let i = &self.inference;
        SearchConfig {
            max_evaluations: i.max_evaluations,
            restarts: i.restarts,
            seed: self.seeds.search,
            log_step: i.log_step,
            logit_step: i.logit_step,
            sd_tolerance: i.sd_tolerance,
            newton: NewtonOptions { tolerance: i.newton_tolerance, max_iterations: i.newton_max_iterations },
        }
    }

    pub fn crossval(&self) -> CrossvalConfig {
        CrossvalConfig {
            search: self.search(),
            draws: self.inference.draws,
            permutations: self.inference.permutations,
            seed: self.seeds.posterior,
        }
    }

    /// Meshes covering the session for the given models. The temporal mesh is
    /// thinned from the segment boundaries of the full path.
    pub fn build_meshes(&self, data: &SessionData, models: &[ModelKind]) -> Result<Meshes> {
        let m = &self.meshes;
        let bb = data.bounding_box();
        let tri = build_tri_mesh(bb, m.max_edge, m.margin)?;
        let circ = if models.iter().any(|k| k.has_theta()) { Some(build_circular_mesh(m.p_theta)?) } else { None };
        let temporal = if models.iter().any(|k| k.has_time()) {
            let segs = segment_path(data, &tri, circ.as_ref(), None, &[])?;
            Some(thin_temporal_knots(&segs, m.temporal_spacing)?)
        } else {
            None
        };
        Ok(Meshes { tri, circ, temporal })
    }
}
