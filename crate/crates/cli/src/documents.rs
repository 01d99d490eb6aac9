//! JSON artifacts written by the subcommands.

use loadgp::clustering::{ClusterParams, MixtureFitResult};
use loadgp::diagnostics::{fit_bic, CovarianceSe, ComparisonReport};
use loadgp::model::TypicalCurve;
use loadgp::simulate::{ScenarioSpec, StudyReport, TrueParameters};
use loadgp::{FitResult, MeanBasis};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema_version: u32,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub num_params: usize,
    pub bic: f64,
    pub types: Vec<String>,
    pub covariance: String,
    pub sigma: Vec<f64>,
    pub omega: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    pub gamma: Vec<NamedValue>,
    pub covariance_se: CovarianceSe,
    pub model: FitResult,
}

impl FitDocument {
    pub fn new(fit: FitResult, covariance_se: CovarianceSe) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            converged: fit.converged,
            iterations: fit.iterations,
            log_likelihood: fit.log_likelihood,
            num_params: fit.num_params(),
            bic: fit_bic(&fit),
            types: fit.types.clone(),
            covariance: fit.covariance_spec.kind.name().into(),
            sigma: fit.covariance.sigma.clone(),
            omega: fit.covariance.omega.clone(),
            eta: fit.covariance.eta.clone(),
            gamma: fit
                .covariate_names
                .iter()
                .zip(fit.gamma())
                .map(|(n, v)| NamedValue {
                    name: n.clone(),
                    value: *v,
                })
                .collect(),
            covariance_se,
            model: fit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub substation: String,
    /// 1-based cluster label.
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub true_clusters: Vec<usize>,
    /// Whether the assignment equals the true map up to relabelling.
    pub recovered: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureDocument {
    pub schema_version: u32,
    pub clusters: usize,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub num_params: usize,
    pub bic: f64,
    pub types: Vec<String>,
    pub mean: MeanBasis,
    pub covariance: String,
    pub pi: Vec<f64>,
    pub assignment: Vec<Assignment>,
    /// Responsibilities rounded to six decimals, one row per substation.
    pub membership: Vec<Vec<f64>>,
    pub parameters: Vec<ClusterParams>,
    pub trace: Vec<f64>,
    pub initial_squared_errors: Vec<f64>,
    pub selected_trial: usize,
    pub recovery: Option<Recovery>,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl MixtureDocument {
    pub fn new(fit: MixtureFitResult, substations: &[String], squared_errors: Vec<f64>, selected: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            clusters: fit.num_clusters(),
            converged: fit.converged,
            iterations: fit.iterations,
            log_likelihood: fit.log_likelihood,
            num_params: fit.num_params(),
            bic: fit.bic(),
            types: fit.types.clone(),
            mean: fit.mean.clone(),
            covariance: fit.covariance_spec.kind.name().into(),
            pi: fit.pi.clone(),
            assignment: substations
                .iter()
                .zip(&fit.assignment)
                .map(|(s, b)| Assignment {
                    substation: s.clone(),
                    cluster: b + 1,
                })
                .collect(),
            membership: fit.membership.iter().map(|r| r.iter().map(|v| round6(*v)).collect()).collect(),
            parameters: fit.clusters,
            trace: fit.trace,
            initial_squared_errors: squared_errors,
            selected_trial: selected,
            recovery: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthDocument {
    pub schema_version: u32,
    pub scenario: ScenarioSpec,
    pub replicate: usize,
    /// 1-based true cluster of each substation.
    pub cluster_map: Vec<usize>,
    pub locations: Vec<String>,
    pub parameters: TrueParameters,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyDocument {
    pub schema_version: u32,
    #[serde(flatten)]
    pub report: StudyReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubstationFit {
    pub substation: String,
    pub fmsre: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeDiagnostics {
    pub name: String,
    pub curve: TypicalCurve,
    pub variance_functional: Vec<f64>,
    pub snr: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsDocument {
    pub schema_version: u32,
    pub converged: bool,
    pub bic: f64,
    pub fmsre: Vec<SubstationFit>,
    pub mean_fmsre: f64,
    pub times: Vec<f64>,
    /// Pointwise median of the relative residual curves `(fitted - y) / y`.
    pub residual_median: Vec<f64>,
    /// Temperatures at which surface fits are evaluated (grid-wise panel mean).
    pub temperature: Option<Vec<f64>>,
    pub types: Vec<TypeDiagnostics>,
    pub covariance_se: CovarianceSe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonDocument {
    pub schema_version: u32,
    pub nested: String,
    pub larger: String,
    #[serde(flatten)]
    pub report: ComparisonReport,
}
