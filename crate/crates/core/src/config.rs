//! Run configuration files (TOML). Unknown keys are rejected and every
//! config is validated before any compute starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::FitOptions;
use crate::simulate::DesignCell;

fn default_schema() -> u32 {
    1
}
fn default_attempts() -> u32 {
    10
}
fn default_grad_tol() -> f64 {
    1e-5
}
fn default_max_evals() -> usize {
    5000
}
fn default_ci_level() -> f64 {
    0.95
}
fn default_s_target() -> usize {
    1000
}
fn default_true() -> bool {
    true
}
fn default_beta() -> OneOrMany<f64> {
    OneOrMany::Many(vec![1.0, 1.0])
}

/// A scalar or a list; lists expand the grid by cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Requested factor count: a number or `"auto"` (retention criteria decide).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FactorCount {
    Auto(String),
    Fixed(usize),
}

impl FactorCount {
    pub fn validate(&self) -> Result<()> {
        match self {
            FactorCount::Auto(s) if s == "auto" => Ok(()),
            FactorCount::Auto(s) => {
                Err(Error::Config(format!("factors: expected \"auto\" or an integer, got `{s}`")))
            }
            FactorCount::Fixed(0) => Err(Error::Config("factors: must be at least 1".into())),
            FactorCount::Fixed(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfaBlock {
    pub factors: FactorCount,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// Inclusive class-count range `[min, max]`.
    pub k_range: [usize; 2],
    /// Covariate columns for step 2; default: every covariate in the file.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    /// Reduce the covariate block to factor scores before step 2.
    #[serde(default)]
    pub efa: Option<EfaBlock>,
    #[serde(default = "default_attempts")]
    pub attempt_cap: u32,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_max_evals")]
    pub max_evals: usize,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub out: Option<String>,
    pub fit: FitSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSection {
    #[serde(default)]
    pub name: Option<String>,
    pub n: OneOrMany<usize>,
    pub scenario: u8,
    /// Mahalanobis separation label (0.86 or 1.72).
    pub d: f64,
    pub knots: Vec<f64>,
    #[serde(default)]
    pub knot_sd: Option<OneOrMany<f64>>,
    pub ratio: Vec<f64>,
    pub residual_var: OneOrMany<f64>,
    /// Covariate slopes for label generation (per covariate, shared across
    /// non-reference classes).
    #[serde(default = "default_beta")]
    pub beta: OneOrMany<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default = "default_s_target")]
    pub s_target: usize,
    #[serde(default = "default_attempts")]
    pub attempt_cap: u32,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_max_evals")]
    pub max_evals: usize,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default = "default_true")]
    pub keep_records: bool,
    #[serde(rename = "cell")]
    pub cells: Vec<CellSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfaSection {
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    pub factors: FactorCount,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfaConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub out: Option<String>,
    pub efa: EfaSection,
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn check_schema(schema: u32) -> Result<()> {
    if schema != 1 {
        return Err(Error::Config(format!("unsupported config schema {schema} (expected 1)")));
    }
    Ok(())
}

impl FitConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: FitConfig = load_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema)?;
        let [lo, hi] = self.fit.k_range;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!("fit.k_range: invalid range [{lo}, {hi}]")));
        }
        if let Some(efa) = &self.fit.efa {
            efa.factors.validate()?;
        }
        if !(0.0..1.0).contains(&self.fit.ci_level) || self.fit.ci_level <= 0.0 {
            return Err(Error::Config("fit.ci_level: must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            attempts: self.fit.attempt_cap,
            grad_tol: self.fit.grad_tol,
            max_evals: self.fit.max_evals,
            seed: self.seed,
            standard_errors: true,
        }
    }

    pub fn k_values(&self) -> Vec<usize> {
        (self.fit.k_range[0]..=self.fit.k_range[1]).collect()
    }
}

impl SimulateConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: SimulateConfig = load_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema)?;
        if self.cells.is_empty() {
            return Err(Error::Config("simulate: need at least one [[cell]]".into()));
        }
        if self.s_target < 1 {
            return Err(Error::Config("s_target: must be at least 1".into()));
        }
        Ok(())
    }

    /// Expand list-valued cell fields into the full condition grid.
    pub fn expand_cells(&self) -> Result<Vec<DesignCell>> {
        let mut out = Vec::new();
        for (idx, cell) in self.cells.iter().enumerate() {
            let base = cell.name.clone().unwrap_or_else(|| format!("cell{}", idx + 1));
            let sds = cell.knot_sd.as_ref().map(|v| v.values()).unwrap_or_else(|| vec![0.0]);
            let expanded = cell.n.values().len() * sds.len() * cell.residual_var.values().len() > 1;
            for &n in &cell.n.values() {
                for &sd in &sds {
                    for &theta in &cell.residual_var.values() {
                        let name = if expanded {
                            format!("{base}_n{n}_sd{sd}_th{theta}")
                        } else {
                            base.clone()
                        };
                        out.push(DesignCell {
                            name,
                            n,
                            scenario: cell.scenario,
                            mahalanobis: cell.d,
                            knots: cell.knots.clone(),
                            knot_sd: sd,
                            ratio: cell.ratio.clone(),
                            residual_var: theta,
                            beta_slopes: cell.beta.values(),
                            seed: self.seed.wrapping_add(idx as u64),
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            attempts: self.attempt_cap,
            grad_tol: self.grad_tol,
            max_evals: self.max_evals,
            seed: self.seed,
            standard_errors: true,
        }
    }
}

impl EfaConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: EfaConfig = load_toml(path)?;
        check_schema(cfg.schema)?;
        cfg.efa.factors.validate()?;
        Ok(cfg)
    }
}
