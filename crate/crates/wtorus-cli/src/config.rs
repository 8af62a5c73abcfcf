//! JSON schemas for the experiment configs and the builders that turn them
//! into library objects. Schema violations and inconsistent parameters are
//! config errors; everything downstream of a validated config is not.

use serde::{Deserialize, Serialize};

use wtorus::elliptic::{SolveConfig, SolveMode};
use wtorus::exclusion::RateKind;
use wtorus::homogenize::{CoefficientSpec, ContinuousFn, EnvironmentKind, RandomEnvironmentSpec};
use wtorus::measure::{WCoordinate, WProduct};

use crate::error::{config_err, CliError};

const TAU: f64 = 2.0 * std::f64::consts::PI;

fn default_dim() -> usize {
    1
}

/// One axis of the weight: density pieces as `[start, slope]` pairs
/// (defaulting to unit density) plus `[position, mass]` atoms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightAxis {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slopes: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atoms: Vec<(f64, f64)>,
}

/// Builds the product weight; a missing spec means the identity on every
/// axis, a present one must list exactly `d` axes.
pub fn build_weight(d: usize, spec: Option<&[WeightAxis]>) -> Result<WProduct, CliError> {
    let axes = match spec {
        None => return WProduct::identity(d).map_err(config_err),
        Some(axes) => axes,
    };
    if axes.len() != d {
        return Err(CliError::Config(format!(
            "weight lists {} axes but the problem has dimension {d}",
            axes.len()
        )));
    }
    let mut built = Vec::with_capacity(d);
    for ax in axes {
        let slopes = ax.slopes.clone().unwrap_or_else(|| vec![(0.0, 1.0)]);
        built.push(WCoordinate::new(slopes, ax.atoms.clone()).map_err(config_err)?);
    }
    WProduct::new(built).map_err(config_err)
}

/// Diffusion coefficient specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientConfig {
    /// The same positive constant on every axis and site.
    Constant { value: f64 },
    /// Per-axis periodic patterns indexed by the lattice coordinate.
    Pattern { axes: Vec<Vec<f64>> },
    /// Random stationary environment, one law per axis, sampled from the
    /// given seed.
    Random { seed: u64, axes: Vec<EnvironmentConfig> },
}

impl CoefficientConfig {
    pub fn to_spec(&self, d: usize) -> Result<CoefficientSpec, CliError> {
        match self {
            CoefficientConfig::Constant { value } => {
                if !(value.is_finite() && *value > 0.0) {
                    return Err(CliError::Config(format!(
                        "constant coefficient must be positive, got {value}"
                    )));
                }
                let v = *value;
                Ok(CoefficientSpec::DiscretizedFixed(wtorus::homogenize::FixedField::new(
                    move |_, _| v,
                )))
            }
            CoefficientConfig::Pattern { axes } => {
                if axes.len() != d {
                    return Err(CliError::Config(format!(
                        "pattern lists {} axes but the problem has dimension {d}",
                        axes.len()
                    )));
                }
                CoefficientSpec::periodic(axes.clone()).map_err(config_err)
            }
            CoefficientConfig::Random { seed, axes } => {
                if axes.len() != d {
                    return Err(CliError::Config(format!(
                        "environment lists {} axes but the problem has dimension {d}",
                        axes.len()
                    )));
                }
                let kinds: Vec<EnvironmentKind> = axes.iter().map(|a| a.to_kind()).collect();
                Ok(CoefficientSpec::RandomErgodic(
                    RandomEnvironmentSpec::new(kinds, *seed).map_err(config_err)?,
                ))
            }
        }
    }

    pub fn random_seed(&self) -> Option<u64> {
        match self {
            CoefficientConfig::Random { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}

/// One-axis environment law for random coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvironmentConfig {
    Uniform { lo: f64, hi: f64 },
    Choice { values: Vec<f64>, probs: Vec<f64> },
    Markov { states: Vec<f64>, rows: Vec<Vec<f64>> },
}

impl EnvironmentConfig {
    pub fn to_kind(&self) -> EnvironmentKind {
        match self {
            EnvironmentConfig::Uniform { lo, hi } => EnvironmentKind::IidUniform { lo: *lo, hi: *hi },
            EnvironmentConfig::Choice { values, probs } => EnvironmentKind::IidChoice {
                values: values.clone(),
                probs: probs.clone(),
            },
            EnvironmentConfig::Markov { states, rows } => EnvironmentKind::MarkovLine {
                states: states.clone(),
                rows: rows.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Cos,
    Sin,
}

fn default_amplitude() -> f64 {
    1.0
}

/// A closed-form scalar field given as a sum of terms; used for right-hand
/// sides, initial density profiles, and observables.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataTerm {
    Constant {
        value: f64,
    },
    Fourier {
        #[serde(default)]
        axis: usize,
        mode: u32,
        phase: Phase,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
}

pub fn validate_terms(terms: &[DataTerm], d: usize, what: &str) -> Result<(), CliError> {
    if terms.is_empty() {
        return Err(CliError::Config(format!("{what} needs at least one term")));
    }
    for t in terms {
        match t {
            DataTerm::Constant { value } => {
                if !value.is_finite() {
                    return Err(CliError::Config(format!("{what}: constant term not finite")));
                }
            }
            DataTerm::Fourier { axis, mode, amplitude, .. } => {
                if *axis >= d {
                    return Err(CliError::Config(format!(
                        "{what}: axis {axis} out of range for dimension {d}"
                    )));
                }
                if *mode == 0 {
                    return Err(CliError::Config(format!("{what}: mode must be at least 1")));
                }
                if !amplitude.is_finite() {
                    return Err(CliError::Config(format!("{what}: amplitude not finite")));
                }
            }
        }
    }
    Ok(())
}

pub fn eval_terms(terms: &[DataTerm], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for t in terms {
        acc += match t {
            DataTerm::Constant { value } => *value,
            DataTerm::Fourier { axis, mode, phase, amplitude } => {
                let arg = TAU * *mode as f64 * y[*axis];
                amplitude
                    * match phase {
                        Phase::Cos => arg.cos(),
                        Phase::Sin => arg.sin(),
                    }
            }
        };
    }
    acc
}

pub fn continuous_fn(terms: &[DataTerm]) -> ContinuousFn {
    let terms = terms.to_vec();
    ContinuousFn::new(move |y| eval_terms(&terms, y))
}

/// Short human-readable label for a term sum; comma-free so it can sit in a
/// CSV cell without quoting.
pub fn terms_label(terms: &[DataTerm]) -> String {
    let parts: Vec<String> = terms
        .iter()
        .map(|t| match t {
            DataTerm::Constant { value } => format!("{value}"),
            DataTerm::Fourier { axis, mode, phase, amplitude } => {
                let name = match phase {
                    Phase::Cos => "cos",
                    Phase::Sin => "sin",
                };
                let core = format!("{name}(2pi*{mode}*x{axis})");
                if *amplitude == 1.0 {
                    core
                } else {
                    format!("{amplitude}*{core}")
                }
            }
        })
        .collect();
    parts.join(" + ")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeConfig {
    #[default]
    Auto,
    Iterative,
    Dense,
}

impl ModeConfig {
    pub fn to_solve_config(self) -> SolveConfig {
        let mode = match self {
            ModeConfig::Auto => SolveMode::Auto,
            ModeConfig::Iterative => SolveMode::Iterative,
            ModeConfig::Dense => SolveMode::Dense,
        };
        SolveConfig { mode, ..SolveConfig::default() }
    }
}

/// Reference against which study errors are measured.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceConfig {
    /// Closed-form limit solution; only valid for single-mode data with a
    /// constant effective coefficient and a linear weight on the data axis.
    Analytic,
    /// Solve once on a grid `factor` times finer than the largest study
    /// size and compare against that.
    FineGrid { factor: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RateConfig {
    Quadratic { b: f64 },
    Cubic { a: f64, b: f64 },
}

impl RateConfig {
    pub fn to_kind(&self) -> RateKind {
        match self {
            RateConfig::Quadratic { b } => RateKind::Quadratic { b: *b },
            RateConfig::Cubic { a, b } => RateKind::Cubic { a: *a, b: *b },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SteppingConfig {
    Explicit,
    ImplicitEuler { dt: f64 },
}

impl Default for SteppingConfig {
    fn default() -> Self {
        SteppingConfig::Explicit
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRange {
    pub lo: f64,
    pub hi: f64,
}

/// `solve`: one elliptic solve, solution written per site.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveCommand {
    #[serde(default = "default_dim")]
    pub d: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<WeightAxis>>,
    pub a: CoefficientConfig,
    /// Zero selects the divergence-form problem, positive the resolvent.
    pub lambda: f64,
    pub data: Vec<DataTerm>,
    #[serde(default)]
    pub mode: ModeConfig,
}

/// `converge`: solve the same problem across a ladder of grid sizes and
/// report errors against a reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeCommand {
    #[serde(default = "default_dim")]
    pub d: usize,
    pub n_list: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<WeightAxis>>,
    pub a: CoefficientConfig,
    pub lambda: f64,
    pub data: Vec<DataTerm>,
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub mode: ModeConfig,
}

/// `homogenize`: ladder study for periodic patterns oscillating at the
/// lattice scale, compared against the averaged-coefficient limit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomogenizeCommand {
    #[serde(default = "default_dim")]
    pub d: usize,
    pub n_list: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<WeightAxis>>,
    pub pattern: Vec<Vec<f64>>,
    pub lambda: f64,
    pub data: Vec<DataTerm>,
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub mode: ModeConfig,
}

/// `random-homogenize`: per-seed realizations of a random environment,
/// each fitted with the best-matching effective constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomHomogenizeCommand {
    #[serde(default = "default_dim")]
    pub d: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<WeightAxis>>,
    pub axes: Vec<EnvironmentConfig>,
    pub lambda: f64,
    pub data: Vec<DataTerm>,
    pub seeds: Vec<u64>,
    pub fit: FitRange,
    #[serde(default)]
    pub mode: ModeConfig,
}

fn default_observables() -> Vec<Vec<DataTerm>> {
    vec![
        vec![DataTerm::Constant { value: 1.0 }],
        vec![DataTerm::Fourier { axis: 0, mode: 1, phase: Phase::Cos, amplitude: 1.0 }],
        vec![DataTerm::Fourier { axis: 0, mode: 1, phase: Phase::Sin, amplitude: 1.0 }],
    ]
}

/// `hydro`: Monte Carlo particle runs against the limiting PDE.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HydroCommand {
    #[serde(default = "default_dim")]
    pub d: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<WeightAxis>>,
    pub a: CoefficientConfig,
    pub rate: RateConfig,
    /// Initial density profile; values must land in `[0, 1]`.
    pub rho0: Vec<DataTerm>,
    pub t_list: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default = "default_observables")]
    pub observables: Vec<Vec<DataTerm>>,
    /// Also write per-site profile statistics.
    #[serde(default)]
    pub profiles: bool,
    /// Coefficients for the reference PDE; defaults to `a` itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pde_coefficients: Option<CoefficientConfig>,
    #[serde(default)]
    pub stepping: SteppingConfig,
}

/// Run provenance written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Canonical echo of the parsed config; rerunning it reproduces the
    /// outputs byte for byte.
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub seed: serde_json::Value,
    pub version: String,
    pub wall_time_s: f64,
    pub artifacts: Vec<String>,
}
