//! JSON experiment configuration.
//!
//! Matrices are row-major nested arrays. A function field is one of
//! - a plain matrix or vector (constant),
//! - `{"tag": "const", "value": ...}` or `{"tag": "exp_decay(0.2)", "value": ...}`,
//! - `{"lo": 0, "hi": 1, "samples": [matrix, ...]}` on a uniform grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoupledSystem, MatrixFn};
use crate::reduction::DelayedSde;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum MatSpec {
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl MatSpec {
    /// Vectors become columns.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            MatSpec::Vector(v) => Ok(DMatrix::from_column_slice(v.len(), 1, v)),
            MatSpec::Matrix(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|row| row.len() != c) {
                    return Err(Error::Dimension("ragged matrix rows".into()));
                }
                Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
            }
        }
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        let m = self.to_matrix()?;
        if m.ncols() != 1 && m.nrows() != 1 {
            return Err(Error::Dimension("expected a vector".into()));
        }
        Ok(DVector::from_column_slice(m.as_slice()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum FnSpec {
    Constant(MatSpec),
    Tagged { tag: String, value: MatSpec },
    Samples { lo: f64, hi: f64, samples: Vec<MatSpec> },
}

impl FnSpec {
    pub fn to_fn(&self) -> Result<MatrixFn> {
        match self {
            FnSpec::Constant(m) => Ok(MatrixFn::Const(m.to_matrix()?)),
            FnSpec::Tagged { tag, value } => {
                let scale = value.to_matrix()?;
                let t = tag.trim();
                if t == "const" {
                    return Ok(MatrixFn::Const(scale));
                }
                let theta = t
                    .strip_prefix("exp_decay(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown function tag {tag:?}")))?;
                Ok(MatrixFn::ExpDecay { theta, scale })
            }
            FnSpec::Samples { lo, hi, samples } => {
                if samples.is_empty() || hi < lo {
                    return Err(Error::Config("sampled function needs samples and lo <= hi".into()));
                }
                let values = samples.iter().map(MatSpec::to_matrix).collect::<Result<Vec<_>>>()?;
                if values.iter().any(|v| v.shape() != values[0].shape()) {
                    return Err(Error::Dimension("samples of different shapes".into()));
                }
                Ok(MatrixFn::Samples { lo: *lo, hi: *hi, values })
            }
        }
    }
}

fn fn_or_zeros(f: &Option<FnSpec>, r: usize, c: usize) -> Result<MatrixFn> {
    let out = match f {
        Some(s) => s.to_fn()?,
        None => MatrixFn::zeros(r, c),
    };
    if out.shape() != (r, c) {
        return Err(Error::Dimension(format!("function has shape {:?}, expected {:?}", out.shape(), (r, c))));
    }
    Ok(out)
}

fn mat_or_zeros(m: &Option<MatSpec>, r: usize, c: usize) -> Result<DMatrix<f64>> {
    let out = match m {
        Some(s) => s.to_matrix()?,
        None => DMatrix::zeros(r, c),
    };
    if out.shape() != (r, c) {
        return Err(Error::Dimension(format!("matrix has shape {:?}, expected {:?}", out.shape(), (r, c))));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CoupledConfig {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma_pp: Option<FnSpec>,
    pub sigma_pm: Option<FnSpec>,
    pub sigma_mp: Option<FnSpec>,
    pub sigma_mm: Option<FnSpec>,
    pub qb: Option<MatSpec>,
    pub rb: Option<MatSpec>,
    pub mb: Option<MatSpec>,
    pub a: MatSpec,
    pub b: MatSpec,
    pub sigma: FnSpec,
    pub horizon: f64,
    pub x0: MatSpec,
    pub u0: Option<FnSpec>,
    pub v0: Option<FnSpec>,
}

impl CoupledConfig {
    pub fn build(&self) -> Result<CoupledSystem> {
        let (n, m) = (self.lambda.len(), self.mu.len());
        let a = self.a.to_matrix()?;
        let nn = a.nrows();
        let sys = CoupledSystem {
            lambda: self.lambda.clone(),
            mu: self.mu.clone(),
            sigma_pp: fn_or_zeros(&self.sigma_pp, n, n)?,
            sigma_pm: fn_or_zeros(&self.sigma_pm, n, m)?,
            sigma_mp: fn_or_zeros(&self.sigma_mp, m, n)?,
            sigma_mm: fn_or_zeros(&self.sigma_mm, m, m)?,
            qb: mat_or_zeros(&self.qb, n, m)?,
            rb: mat_or_zeros(&self.rb, m, n)?,
            mb: mat_or_zeros(&self.mb, n, nn)?,
            a,
            b: self.b.to_matrix()?,
            sigma_t: self.sigma.to_fn()?,
            horizon: self.horizon,
            x0: self.x0.to_vector()?,
            u0: fn_or_zeros(&self.u0, n, 1)?,
            v0: fn_or_zeros(&self.v0, m, 1)?,
        };
        sys.check_dims()?;
        Ok(sys)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DelayedConfig {
    pub a: MatSpec,
    pub b: MatSpec,
    pub h: Vec<f64>,
    pub gmem: Option<FnSpec>,
    /// Memory length; defaults to the largest delay.
    pub memory: Option<f64>,
    pub sigma: FnSpec,
    pub x0: MatSpec,
    pub past_input: Option<FnSpec>,
    pub horizon: f64,
}

impl DelayedConfig {
    pub fn build(&self) -> Result<DelayedSde> {
        let a = self.a.to_matrix()?;
        let b = self.b.to_matrix()?;
        let nn = a.nrows();
        let hmax = self.h.iter().copied().fold(0.0, f64::max);
        let sde = DelayedSde {
            gmem: fn_or_zeros(&self.gmem, nn, nn)?,
            memory: self.memory.unwrap_or(hmax),
            sigma_t: self.sigma.to_fn()?,
            x0: self.x0.to_vector()?,
            past_input: fn_or_zeros(&self.past_input, b.ncols(), 1)?,
            horizon: self.horizon,
            h: self.h.clone(),
            a,
            b,
            boundary_of_input: None,
        };
        sde.check()?;
        Ok(sde)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemConfig {
    Coupled(CoupledConfig),
    Delayed(DelayedConfig),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    None,
    Feedback,
    Highgain,
    Steering,
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ControllerKind::None),
            "feedback" => Ok(ControllerKind::Feedback),
            "highgain" => Ok(ControllerKind::Highgain),
            "steering" => Ok(ControllerKind::Steering),
            _ => Err(Error::Config(format!("unknown controller {s:?}"))),
        }
    }
}

fn default_nx() -> usize {
    128
}
fn default_dt() -> f64 {
    1e-3
}
fn default_paths() -> usize {
    1000
}
fn default_nu() -> f64 {
    1.0
}
fn default_gains() -> Vec<f64> {
    vec![20.0]
}
fn default_tol() -> f64 {
    1e-10
}
fn default_sweeps() -> usize {
    200
}
fn default_record() -> usize {
    10
}
fn default_out() -> String {
    "out".into()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    #[serde(default = "default_nx")]
    pub nx: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub controller: ControllerKind,
    /// Decay rate of the predictor feedback.
    #[serde(default = "default_nu")]
    pub nu: f64,
    /// High-gain values to sweep.
    #[serde(default = "default_gains")]
    pub gains: Vec<f64>,
    pub target_mean: Option<Vec<f64>>,
    /// Terminal covariance per block, each a square matrix.
    pub target_cov: Option<Vec<MatSpec>>,
    /// State cost weight (constant); identity when absent.
    pub q_cost: Option<MatSpec>,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    /// Record a summary row every this many steps.
    #[serde(default = "default_record")]
    pub record_every: usize,
    #[serde(default = "default_out")]
    pub out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all experiment fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.nx < 2 || self.paths < 1 || self.record_every < 1 {
            return Err(Error::Config("need dt > 0, nx >= 2, paths >= 1, record_every >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Config {
    pub system: SystemConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.experiment.check()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Rounds each delay to the nearest multiple of `dt`. A delay further than `1e-6` (relative)
/// from the grid is rejected rather than silently moved.
pub fn snap_delays(h: &[f64], dt: f64) -> Result<Vec<f64>> {
    h.iter()
        .map(|&v| {
            let k = (v / dt).round();
            let snapped = k * dt;
            if k < 1.0 || (snapped - v).abs() > 1e-6 * v.abs() {
                Err(Error::Config(format!("delay {v} is not a multiple of the step {dt}")))
            } else {
                Ok(snapped)
            }
        })
        .collect()
}
