//! Run configuration read from a JSON file.
//!
//! File paths inside the configuration are resolved against the directory of
//! the configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use periodic_lap::lap::LapConfig;
use periodic_lap::medium::{MediumSpec, SourceSpec};
use serde::Deserialize;

/// Contour parameters; omitted fields take the solver defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourConfig {
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
    pub halo: Option<f64>,
    pub slices: Option<usize>,
    pub nodes_per_slice: Option<usize>,
    pub abs_tol: Option<f64>,
    pub rel_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dimension: usize,
    /// Medium JSON file; free space when omitted.
    pub medium: Option<PathBuf>,
    /// Source JSON file; the point source when omitted.
    pub source: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub direction: Option<Vec<f64>>,
    pub j_max: usize,
    #[serde(default = "default_grid")]
    pub grid_n: usize,
    /// Bands written by `bands`; 0 lets `solve` choose.
    #[serde(default)]
    pub num_bands: usize,
    pub contour: Option<ContourConfig>,
    #[serde(default)]
    pub eval_points: Vec<Vec<f64>>,
    #[serde(default)]
    pub epsilon_ladder: Vec<f64>,
    /// Minimum trapezoid nodes per axis for damped solves.
    #[serde(default = "default_n_alpha")]
    pub n_alpha: usize,
    /// Criteria run by `verify`; all when omitted.
    pub criteria: Option<Vec<String>>,
    pub output_dir: Option<PathBuf>,
    pub format: Option<Format>,
}

fn default_grid() -> usize {
    32
}

fn default_n_alpha() -> usize {
    256
}

/// Failure to read or validate a configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// A validated configuration with its input files loaded.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub medium: MediumSpec,
    pub source: SourceSpec,
}

impl Loaded {
    pub fn lambda(&self) -> Result<f64, ConfigError> {
        self.config.lambda.ok_or_else(|| ConfigError("lambda is required".into()))
    }

    pub fn direction(&self) -> Result<Vec<f64>, ConfigError> {
        self.config
            .direction
            .clone()
            .ok_or_else(|| ConfigError("direction is required".into()))
    }

    pub fn eval_points(&self) -> Result<&[Vec<f64>], ConfigError> {
        if self.config.eval_points.is_empty() {
            return bad("eval_points must not be empty");
        }
        Ok(&self.config.eval_points)
    }

    pub fn lap_config(&self) -> LapConfig {
        let c = &self.config;
        let mut cfg = LapConfig {
            j_max: c.j_max,
            grid_n: c.grid_n,
            num_bands: c.num_bands,
            ..Default::default()
        };
        if let Some(k) = &c.contour {
            cfg.sigma1 = k.sigma1.unwrap_or(cfg.sigma1);
            cfg.sigma2 = k.sigma2.unwrap_or(cfg.sigma2);
            cfg.halo = k.halo.unwrap_or(cfg.halo);
            cfg.slices = k.slices.unwrap_or(cfg.slices);
            cfg.nodes_per_slice = k.nodes_per_slice.unwrap_or(cfg.nodes_per_slice);
            cfg.abs_tol = k.abs_tol.unwrap_or(cfg.abs_tol);
            cfg.rel_tol = k.rel_tol.unwrap_or(cfg.rel_tol);
        }
        cfg
    }
}

fn positive(name: &str, v: Option<f64>) -> Result<(), ConfigError> {
    match v {
        Some(x) if !(x.is_finite() && x > 0.0) => bad(format!("{name} must be positive, got {x}")),
        _ => Ok(()),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.dimension == 1 || self.dimension == 2) {
            return bad(format!("dimension must be 1 or 2, got {}", self.dimension));
        }
        if self.j_max == 0 {
            return bad("j_max must be at least 1");
        }
        if self.grid_n < 8 {
            return bad("grid_n must be at least 8");
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() {
                return bad("lambda must be finite");
            }
        }
        if let Some(d) = &self.direction {
            if d.len() != self.dimension {
                return bad(format!("direction must have {} components", self.dimension));
            }
            if d.iter().any(|v| !v.is_finite()) || d.iter().all(|v| *v == 0.0) {
                return bad("direction must be finite and nonzero");
            }
        }
        if let Some(c) = &self.contour {
            positive("contour.sigma1", c.sigma1)?;
            positive("contour.sigma2", c.sigma2)?;
            positive("contour.halo", c.halo)?;
            positive("contour.abs_tol", c.abs_tol)?;
            positive("contour.rel_tol", c.rel_tol)?;
            if c.slices == Some(0) || c.nodes_per_slice == Some(0) {
                return bad("contour.slices and contour.nodes_per_slice must be positive");
            }
        }
        for x in &self.eval_points {
            if x.len() != self.dimension || x.iter().any(|v| !v.is_finite()) {
                return bad(format!("evaluation point {x:?} must have {} finite components", self.dimension));
            }
        }
        for e in &self.epsilon_ladder {
            positive("epsilon", Some(*e))?;
        }
        if self.n_alpha == 0 {
            return bad("n_alpha must be positive");
        }
        Ok(())
    }
}

pub fn load(path: &Path) -> Result<Loaded, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))?;
    config.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let read = |p: &Path| -> Result<String, ConfigError> {
        let full = base.join(p);
        fs::read_to_string(&full).map_err(|e| ConfigError(format!("cannot read {}: {e}", full.display())))
    };
    let dim = config.dimension;
    let medium = match &config.medium {
        Some(p) => MediumSpec::from_json(&read(p)?).map_err(|e| ConfigError(e.to_string()))?,
        None => MediumSpec::free_space(dim),
    };
    if medium.dim != dim {
        return bad(format!("medium has dimension {}, config has {dim}", medium.dim));
    }
    let source = match &config.source {
        Some(p) => SourceSpec::from_json(&read(p)?, dim).map_err(|e| ConfigError(e.to_string()))?,
        None => SourceSpec::delta(dim),
    };
    Ok(Loaded { config, medium, source })
}
