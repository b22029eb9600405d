use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use super::{read_observations, IoError};
use crate::kernels::KernelKind;
use crate::ode::{builtin_model, parse_ode_dsl, OdeSystem};
use crate::pipeline::{set_discretization_by, set_discretization_level, ObservationSet, SolveControl};

const TOP_KEYS: &[&str] = &["output_dir", "seed", "model", "data", "control"];
const MODEL_KEYS: &[&str] = &["builtin", "dsl"];
const DATA_KEYS: &[&str] = &["path", "level", "by"];
pub const CONTROL_KEYS: &[&str] = &[
    "sigma",
    "useFixedSigma",
    "xInit",
    "theta",
    "priorTemperature",
    "kerneltype",
    "phi",
    "mu",
    "dotmu",
    "bandSize",
    "niterHmc",
    "nstepsHmc",
    "burninRatio",
    "stepSizeFactor",
    "skipMissingComponentOptimization",
    "positiveSystem",
    "verbose",
];

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Builtin(String),
    Dsl(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Discretization {
    Observed,
    Level(u32),
    By(f64),
}

/// A validated run configuration. Relative paths are resolved against the
/// directory of the configuration file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelSource,
    pub data_path: PathBuf,
    pub discretization: Discretization,
    pub output_dir: PathBuf,
    pub control: SolveControl,
    /// The configuration text as read, kept for the run manifest.
    pub source: String,
}

#[derive(Deserialize)]
struct RawConfig {
    output_dir: Option<PathBuf>,
    seed: Option<u64>,
    model: RawModel,
    data: RawData,
    #[serde(default)]
    control: RawControl,
}

#[derive(Deserialize)]
struct RawModel {
    builtin: Option<String>,
    dsl: Option<PathBuf>,
}

#[derive(Deserialize)]
struct RawData {
    path: PathBuf,
    level: Option<u32>,
    by: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "camelCase")]
struct RawControl {
    sigma: Option<Vec<f64>>,
    use_fixed_sigma: Option<bool>,
    x_init: Option<Vec<Vec<f64>>>,
    theta: Option<Vec<f64>>,
    prior_temperature: Option<f64>,
    #[serde(rename = "kerneltype")]
    kernel_type: Option<String>,
    phi: Option<Vec<Vec<f64>>>,
    mu: Option<Vec<Vec<f64>>>,
    dotmu: Option<Vec<Vec<f64>>>,
    band_size: Option<usize>,
    niter_hmc: Option<usize>,
    nsteps_hmc: Option<usize>,
    burnin_ratio: Option<f64>,
    step_size_factor: Option<OneOrMany>,
    skip_missing_component_optimization: Option<bool>,
    positive_system: Option<bool>,
    verbose: Option<bool>,
}

fn suggest(key: &str, known: &[&str]) -> Option<String> {
    if let Some(k) = known.iter().find(|k| k.eq_ignore_ascii_case(key)) {
        return Some(k.to_string());
    }
    known
        .iter()
        .map(|k| (strsim::levenshtein(&key.to_lowercase(), &k.to_lowercase()), k))
        .filter(|(d, k)| *d <= 3.max(k.len() / 4))
        .min_by_key(|(d, _)| *d)
        .map(|(_, k)| k.to_string())
}

fn check_keys(table: &toml::Table, section: &str, known: &[&str]) -> Result<(), IoError> {
    for key in table.keys() {
        if !known.contains(&key.as_str()) {
            return Err(IoError::UnknownKey {
                section: section.to_string(),
                key: key.clone(),
                suggestion: suggest(key, known),
            });
        }
    }
    Ok(())
}

fn rows_to_matrix(name: &str, rows: Vec<Vec<f64>>) -> Result<DMatrix<f64>, IoError> {
    let ncol = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncol == 0 || rows.iter().any(|r| r.len() != ncol) {
        return Err(IoError::Config(format!("`{name}` must be a non-empty array of equal-length rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncol, |i, j| rows[i][j]))
}

/// Parses configuration text; `base` resolves relative paths.
pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig, IoError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| IoError::Config(e.to_string()))?;
    check_keys(&table, "", TOP_KEYS)?;
    for (section, known) in [("model", MODEL_KEYS), ("data", DATA_KEYS), ("control", CONTROL_KEYS)] {
        match table.get(section) {
            Some(toml::Value::Table(t)) => check_keys(t, section, known)?,
            Some(_) => return Err(IoError::Config(format!("`{section}` must be a section"))),
            None => {}
        }
    }
    let raw: RawConfig = toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

    let model = match (raw.model.builtin, raw.model.dsl) {
        (Some(name), None) => ModelSource::Builtin(name),
        (None, Some(path)) => {
            let path = resolve(path);
            if !path.is_file() {
                return Err(IoError::Config(format!("model file {} does not exist", path.display())));
            }
            ModelSource::Dsl(path)
        }
        _ => return Err(IoError::Config("give exactly one of `model.builtin` and `model.dsl`".into())),
    };
    let data_path = resolve(raw.data.path);
    if !data_path.is_file() {
        return Err(IoError::Config(format!("data file {} does not exist", data_path.display())));
    }
    let discretization = match (raw.data.level, raw.data.by) {
        (None, None) => Discretization::Observed,
        (Some(l), None) => Discretization::Level(l),
        (None, Some(b)) if b > 0.0 && b.is_finite() => Discretization::By(b),
        (None, Some(b)) => return Err(IoError::Config(format!("`data.by` must be positive, got {b}"))),
        (Some(_), Some(_)) => return Err(IoError::Config("give at most one of `data.level` and `data.by`".into())),
    };

    let c = raw.control;
    let mut control = SolveControl {
        seed: raw.seed.unwrap_or(0),
        ..SolveControl::default()
    };
    control.sigma = c.sigma;
    if let Some(v) = c.use_fixed_sigma {
        control.use_fixed_sigma = v;
    }
    if control.use_fixed_sigma && control.sigma.is_none() {
        return Err(IoError::Config("`useFixedSigma = true` needs `sigma`".into()));
    }
    control.x_init = c.x_init.map(|r| rows_to_matrix("xInit", r)).transpose()?;
    control.theta_init = c.theta;
    control.prior_temperature = c.prior_temperature;
    if let Some(k) = c.kernel_type {
        control.kernel = k.parse::<KernelKind>().map_err(|e| IoError::Config(e.to_string()))?;
    }
    control.phi = c.phi.map(|r| rows_to_matrix("phi", r)).transpose()?;
    control.mu = c.mu.map(|r| rows_to_matrix("mu", r)).transpose()?;
    control.dotmu = c.dotmu.map(|r| rows_to_matrix("dotmu", r)).transpose()?;
    if let Some(v) = c.band_size {
        control.band_size = v;
    }
    if let Some(v) = c.niter_hmc {
        control.n_iter = v;
    }
    if let Some(v) = c.nsteps_hmc {
        control.n_leapfrog = v;
    }
    if let Some(v) = c.burnin_ratio {
        control.burnin_ratio = v;
    }
    match c.step_size_factor {
        Some(OneOrMany::One(v)) => control.step_factor = vec![v],
        Some(OneOrMany::Many(v)) => control.step_factor = v,
        None => {}
    }
    if let Some(v) = c.skip_missing_component_optimization {
        control.skip_missing_component_optimization = v;
    }
    if let Some(v) = c.positive_system {
        control.positive_system = v;
    }
    if let Some(v) = c.verbose {
        control.verbose = v;
    }

    Ok(RunConfig {
        model,
        data_path,
        discretization,
        output_dir: resolve(raw.output_dir.unwrap_or_else(|| PathBuf::from("results"))),
        control,
        source: text.to_string(),
    })
}

pub fn parse_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}

impl RunConfig {
    pub fn load_model(&self) -> Result<OdeSystem, IoError> {
        match &self.model {
            ModelSource::Builtin(name) => builtin_model(name).map_err(|e| IoError::Model(e.to_string())),
            ModelSource::Dsl(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
                parse_ode_dsl(&text).map_err(|e| IoError::Model(format!("{}: {e}", path.display())))
            }
        }
    }

    /// The observations placed on the configured discretization grid.
    pub fn load_data(&self) -> Result<ObservationSet, IoError> {
        let data = read_observations(&self.data_path)?;
        Ok(match self.discretization {
            Discretization::Observed => data,
            Discretization::Level(l) => set_discretization_level(&data, l),
            Discretization::By(b) => set_discretization_by(&data, b)?,
        })
    }
}
