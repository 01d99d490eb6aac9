//! Per-customer-type covariance functionals and the aggregated covariance
//! matrices of substations.
//!
//! A customer of type `c` contributes `Psi_c(s,t) = eta_c(s) rho_c(s,t) eta_c(t)`
//! where `eta_c` is the variance functional and `rho_c` an exponential decay
//! in `|t - s|`. A substation aggregates `Sigma_j = sum_c m_jc Psi_c`.
//!
//! Optimizers work on an unconstrained packed vector: log scales, log decays
//! and, for the complete structure, the first `K' - 1` zero-sum spline
//! coefficients of each type (the last one is minus their sum).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::basis::{make_uniform_knots, KnotVector, CUBIC};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    /// One scale shared by every type.
    HomogeneousUniform,
    /// One scale per type.
    Homogeneous,
    /// Per-type scale times the exponential of a zero-sum spline.
    Complete,
}

impl CovarianceKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "homogeneous-uniform" | "uniform" => Some(Self::HomogeneousUniform),
            "homogeneous" => Some(Self::Homogeneous),
            "complete" => Some(Self::Complete),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::HomogeneousUniform => "homogeneous-uniform",
            Self::Homogeneous => "homogeneous",
            Self::Complete => "complete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub kind: CovarianceKind,
    /// Basis of the variance functional exponent; only for `Complete`.
    pub variance_knots: Option<KnotVector>,
}

impl CovarianceSpec {
    pub fn homogeneous_uniform() -> Self {
        Self {
            kind: CovarianceKind::HomogeneousUniform,
            variance_knots: None,
        }
    }

    pub fn homogeneous() -> Self {
        Self {
            kind: CovarianceKind::Homogeneous,
            variance_knots: None,
        }
    }

    pub fn complete(variance_knots: KnotVector) -> Result<Self> {
        if variance_knots.num_basis() < variance_knots.degree() + 1 {
            return Err(Error::InvalidBasis(
                "complete structure needs at least degree + 1 variance basis functions".into(),
            ));
        }
        Ok(Self {
            kind: CovarianceKind::Complete,
            variance_knots: Some(variance_knots),
        })
    }

    /// Complete structure with `num_basis` uniform cubic functions on `[0, horizon]`.
    pub fn complete_uniform(horizon: f64, num_basis: usize) -> Result<Self> {
        Self::complete(make_uniform_knots(0.0, horizon, num_basis, CUBIC)?)
    }

    pub fn of_kind(kind: CovarianceKind, horizon: f64, num_variance_basis: usize) -> Result<Self> {
        match kind {
            CovarianceKind::HomogeneousUniform => Ok(Self::homogeneous_uniform()),
            CovarianceKind::Homogeneous => Ok(Self::homogeneous()),
            CovarianceKind::Complete => Self::complete_uniform(horizon, num_variance_basis),
        }
    }

    /// K', the number of variance basis functions (0 unless complete).
    pub fn num_variance_basis(&self) -> usize {
        self.variance_knots.as_ref().map_or(0, |k| k.num_basis())
    }

    pub fn num_scales(&self, types: usize) -> usize {
        match self.kind {
            CovarianceKind::HomogeneousUniform => 1,
            _ => types,
        }
    }

    /// Number of free covariance parameters for `types` customer types.
    pub fn num_free(&self, types: usize) -> usize {
        let eta = match self.kind {
            CovarianceKind::Complete => types * (self.num_variance_basis() - 1),
            _ => 0,
        };
        self.num_scales(types) + types + eta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    /// Scales `sigma_c`; a single entry under the uniform structure.
    pub sigma: Vec<f64>,
    /// Decays `omega_c`.
    pub omega: Vec<f64>,
    /// Zero-sum variance coefficients per type (empty unless complete).
    #[serde(default)]
    pub eta: Vec<Vec<f64>>,
}

impl CovarianceParams {
    /// Parameters with the given scales and decays and a flat variance functional.
    pub fn new(spec: &CovarianceSpec, sigma: Vec<f64>, omega: Vec<f64>) -> Result<Self> {
        let types = omega.len();
        let eta = match spec.kind {
            CovarianceKind::Complete => vec![vec![0.0; spec.num_variance_basis()]; types],
            _ => Vec::new(),
        };
        let p = Self { sigma, omega, eta };
        p.validate(spec, types)?;
        Ok(p)
    }

    pub fn num_types(&self) -> usize {
        self.omega.len()
    }

    pub fn sigma_for(&self, c: usize) -> f64 {
        if self.sigma.len() == 1 {
            self.sigma[0]
        } else {
            self.sigma[c]
        }
    }

    pub fn validate(&self, spec: &CovarianceSpec, types: usize) -> Result<()> {
        if self.omega.len() != types {
            return Err(Error::InvalidCovariance(format!(
                "{} decays for {types} types",
                self.omega.len()
            )));
        }
        if self.sigma.len() != spec.num_scales(types) {
            return Err(Error::InvalidCovariance(format!(
                "{} scales supplied, {} structure needs {}",
                self.sigma.len(),
                spec.kind.name(),
                spec.num_scales(types)
            )));
        }
        if self.sigma.iter().chain(&self.omega).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidCovariance(
                "scales and decays must be finite and positive".into(),
            ));
        }
        if spec.kind == CovarianceKind::Complete {
            let kp = spec.num_variance_basis();
            if self.eta.len() != types || self.eta.iter().any(|e| e.len() != kp) {
                return Err(Error::InvalidCovariance(format!(
                    "complete structure needs {types} coefficient vectors of length {kp}"
                )));
            }
            for e in &self.eta {
                let s: f64 = e.iter().sum();
                if s.abs() > 1e-10 || e.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidCovariance(format!(
                        "variance coefficients must be finite and sum to zero (sum {s:e})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Unconstrained representation used by the optimizers.
    pub fn pack(&self, spec: &CovarianceSpec) -> Vec<f64> {
        let mut v: Vec<f64> = self.sigma.iter().map(|s| s.ln()).collect();
        v.extend(self.omega.iter().map(|w| w.ln()));
        if spec.kind == CovarianceKind::Complete {
            for e in &self.eta {
                v.extend_from_slice(&e[..e.len() - 1]);
            }
        }
        v
    }

    pub fn unpack(spec: &CovarianceSpec, types: usize, theta: &[f64]) -> Result<Self> {
        if theta.len() != spec.num_free(types) {
            return Err(Error::Dimension(format!(
                "{} packed covariance values, expected {}",
                theta.len(),
                spec.num_free(types)
            )));
        }
        let ns = spec.num_scales(types);
        let sigma = theta[..ns].iter().map(|x| x.exp()).collect();
        let omega = theta[ns..ns + types].iter().map(|x| x.exp()).collect();
        let mut eta = Vec::new();
        if spec.kind == CovarianceKind::Complete {
            let free = spec.num_variance_basis() - 1;
            let rest = &theta[ns + types..];
            for c in 0..types {
                let mut e = rest[c * free..(c + 1) * free].to_vec();
                let s: f64 = e.iter().sum();
                e.push(-s);
                eta.push(e);
            }
        }
        let p = Self { sigma, omega, eta };
        if p.sigma.iter().chain(&p.omega).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidCovariance("packed parameters overflow".into()));
        }
        Ok(p)
    }

    /// Labels of the packed coordinates, e.g. `log_sigma[1]`.
    pub fn packed_names(spec: &CovarianceSpec, types: usize) -> Vec<String> {
        let mut names = Vec::new();
        for c in 0..spec.num_scales(types) {
            names.push(format!("log_sigma[{}]", c + 1));
        }
        for c in 0..types {
            names.push(format!("log_omega[{}]", c + 1));
        }
        if spec.kind == CovarianceKind::Complete {
            for c in 0..types {
                for k in 0..spec.num_variance_basis() - 1 {
                    names.push(format!("eta[{},{}]", c + 1, k + 1));
                }
            }
        }
        names
    }
}

/// Exponential-decay correlation `exp(-2 |t - s| / (omega T))`.
pub fn correlation(s: f64, t: f64, omega: f64, horizon: f64) -> Result<f64> {
    if !(omega > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidCovariance(format!(
            "decay ({omega}) and horizon ({horizon}) must be positive"
        )));
    }
    Ok((-2.0 / omega * (t - s).abs() / horizon).exp())
}

/// Variance functional `eta_c(t)`.
pub fn variance_functional(
    spec: &CovarianceSpec,
    params: &CovarianceParams,
    c: usize,
    t: f64,
) -> Result<f64> {
    let sigma = params.sigma_for(c);
    match (&spec.kind, &spec.variance_knots) {
        (CovarianceKind::Complete, Some(knots)) => {
            let phi = knots.eval(t)?;
            let expo: f64 = phi.iter().zip(&params.eta[c]).map(|(a, b)| a * b).sum();
            Ok(sigma * expo.exp())
        }
        (CovarianceKind::Complete, None) => Err(Error::InvalidCovariance(
            "complete structure without variance basis".into(),
        )),
        _ => Ok(sigma),
    }
}

/// `Psi_c(s, t) = eta_c(s) rho_c(s, t) eta_c(t)`.
pub fn customer_covariance(
    spec: &CovarianceSpec,
    params: &CovarianceParams,
    c: usize,
    s: f64,
    t: f64,
    horizon: f64,
) -> Result<f64> {
    let rho = correlation(s, t, params.omega[c], horizon)?;
    Ok(variance_functional(spec, params, c, s)? * rho * variance_functional(spec, params, c, t)?)
}

/// Observation times of a daily panel on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, horizon: f64) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Data("time grid needs at least two points".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::Data(format!("horizon {horizon} must be positive")));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Data(format!(
                    "grid times must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if times[0] < 0.0 || times[times.len() - 1] > horizon {
            return Err(Error::Data(format!("grid times must lie in [0, {horizon}]")));
        }
        Ok(Self { times, horizon })
    }

    /// `n` equally spaced times `0, T/n, ..., T (n-1)/n`.
    pub fn uniform(n: usize, horizon: f64) -> Result<Self> {
        Self::new((0..n).map(|i| horizon * i as f64 / n as f64).collect(), horizon)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
}

/// Per-type kernels `Psi_c` evaluated on a grid, plus the pieces needed to
/// differentiate them with respect to the packed parameters.
#[derive(Debug, Clone)]
pub struct GridKernels {
    pub kernels: Vec<DMatrix<f64>>,
    /// `eta_c(t)` on the grid.
    pub eta: Vec<Vec<f64>>,
    lag_factor: Vec<DMatrix<f64>>,
    /// `phi_k(t) - phi_K'(t)` for the free variance coefficients.
    eta_dirs: Vec<Vec<f64>>,
}

impl GridKernels {
    pub fn new(spec: &CovarianceSpec, params: &CovarianceParams, grid: &TimeGrid) -> Result<Self> {
        let types = params.num_types();
        params.validate(spec, types)?;
        let n = grid.len();
        let t = grid.times();
        let h = grid.horizon();
        let mut eta = Vec::with_capacity(types);
        for c in 0..types {
            eta.push(
                t.iter()
                    .map(|&x| variance_functional(spec, params, c, x))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let mut kernels = Vec::with_capacity(types);
        let mut lag_factor = Vec::with_capacity(types);
        for c in 0..types {
            let rate = 2.0 / (params.omega[c] * h);
            let e = &eta[c];
            let mut k = DMatrix::zeros(n, n);
            let mut d = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in 0..n {
                    let lag = rate * (t[i] - t[j]).abs();
                    k[(i, j)] = e[i] * (-lag).exp() * e[j];
                    d[(i, j)] = lag;
                }
            }
            kernels.push(k);
            lag_factor.push(d);
        }
        let mut eta_dirs = Vec::new();
        if let (CovarianceKind::Complete, Some(knots)) = (spec.kind, &spec.variance_knots) {
            let phi = knots.design(t)?;
            let kp = knots.num_basis();
            for k in 0..kp - 1 {
                eta_dirs.push((0..n).map(|i| phi[(i, k)] - phi[(i, kp - 1)]).collect());
            }
        }
        Ok(Self {
            kernels,
            eta,
            lag_factor,
            eta_dirs,
        })
    }

    /// `sum_c m_c Psi_c`.
    pub fn aggregate(&self, market_row: &[f64]) -> DMatrix<f64> {
        let n = self.kernels[0].nrows();
        let mut m = DMatrix::zeros(n, n);
        for (k, &w) in self.kernels.iter().zip(market_row) {
            if w != 0.0 {
                m += k * w;
            }
        }
        m
    }

    /// Maps the sensitivities `G_c = d loglik / d Psi_c` (so that the
    /// differential is `sum_c <G_c, dPsi_c>`) to the gradient with respect to
    /// the packed parameters.
    pub fn packed_gradient(&self, spec: &CovarianceSpec, sens: &[DMatrix<f64>]) -> Vec<f64> {
        let types = self.kernels.len();
        let mut grad = vec![0.0; spec.num_free(types)];
        let ns = spec.num_scales(types);
        for c in 0..types {
            let had = sens[c].component_mul(&self.kernels[c]);
            let d_log_sigma = 2.0 * had.sum();
            if ns == 1 {
                grad[0] += d_log_sigma;
            } else {
                grad[c] = d_log_sigma;
            }
            grad[ns + c] = had.component_mul(&self.lag_factor[c]).sum();
            if spec.kind == CovarianceKind::Complete {
                let free = self.eta_dirs.len();
                let row_sums: Vec<f64> = (0..had.nrows()).map(|i| had.row(i).sum()).collect();
                for (k, dir) in self.eta_dirs.iter().enumerate() {
                    let v: f64 = dir.iter().zip(&row_sums).map(|(g, r)| g * r).sum();
                    grad[ns + types + c * free + k] = 2.0 * v;
                }
            }
        }
        grad
    }
}

/// Symmetric positive definite matrix with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    jitter: f64,
}

impl CovMatrix {
    /// Factorizes `matrix`, adding diagonal jitter from 1e-10 up to 1e-6 of
    /// the mean diagonal if the plain factorization fails.
    pub fn factor(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Dimension(format!(
                "covariance is {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let n = matrix.nrows();
        let diag = matrix.diagonal();
        let mean_diag = diag.mean();
        let (min_diag, max_diag) = (diag.min(), diag.max());
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::NotPositiveDefinite {
                max_jitter: 0.0,
                min_diag,
                max_diag,
            });
        }
        let mut jitter = 0.0;
        let mut scale = 1e-10;
        loop {
            let mut m = matrix.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                let l = chol.l_dirty();
                let mut logdet = 0.0;
                let mut ok = true;
                for i in 0..n {
                    let d = l[(i, i)];
                    ok &= d > 0.0 && d.is_finite();
                    logdet += 2.0 * d.ln();
                }
                if ok {
                    return Ok(Self {
                        matrix,
                        chol,
                        logdet,
                        jitter,
                    });
                }
            }
            if scale > 1e-6 * 1.0001 {
                return Err(Error::NotPositiveDefinite {
                    max_jitter: jitter,
                    min_diag,
                    max_diag,
                });
            }
            jitter = scale * mean_diag.abs().max(f64::MIN_POSITIVE);
            scale *= 10.0;
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Diagonal jitter that was needed to factorize (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower Cholesky factor.
    pub fn cholesky_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(rhs.nrows())?;
        Ok(self.chol.solve(rhs))
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(rhs.nrows())?;
        Ok(self.chol.solve(rhs))
    }

    /// `L^{-1} rhs`, i.e. whitening by the Cholesky factor.
    pub fn whiten(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(rhs.nrows())?;
        let mut out = rhs.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        Ok(out)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.dim() {
            return Err(Error::Dimension(format!(
                "right-hand side has {rows} rows, covariance is {}x{}",
                self.dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Aggregated covariance `Sigma_j` of a substation on the grid.
pub fn substation_covariance(
    market_row: &[f64],
    spec: &CovarianceSpec,
    params: &CovarianceParams,
    grid: &TimeGrid,
) -> Result<CovMatrix> {
    check_market_row(market_row, params.num_types())?;
    let kernels = GridKernels::new(spec, params, grid)?;
    CovMatrix::factor(kernels.aggregate(market_row))
}

pub(crate) fn check_market_row(row: &[f64], types: usize) -> Result<()> {
    if row.len() != types {
        return Err(Error::Dimension(format!(
            "market row has {} entries for {types} types",
            row.len()
        )));
    }
    if row.iter().any(|m| !(*m >= 0.0)) || !row.iter().any(|m| *m > 0.0) {
        return Err(Error::Data(
            "market counts must be non-negative with at least one positive".into(),
        ));
    }
    Ok(())
}
