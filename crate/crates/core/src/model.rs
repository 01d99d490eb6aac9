//! Aggregated-data model: design matrices, Gaussian log-likelihood and the
//! alternating GLS / quasi-Newton estimation loop.

use std::f64::consts::PI;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{make_uniform_knots, KnotVector, TensorBasisSpec, CUBIC};
use crate::covariance::{CovMatrix, CovarianceParams, CovarianceSpec, GridKernels};
use crate::data::{LoadPanel, MarketTable};
use crate::error::{Error, Result};
use crate::optim::{fd_gradient, minimize, BfgsOptions, Termination};

/// Basis of the per-type typical curve (simple model) or surface (full model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanBasis {
    Curve(KnotVector),
    Surface(TensorBasisSpec),
}

impl MeanBasis {
    /// Uniform cubic curve basis with `k` functions on `[0, horizon]`.
    pub fn curve(k: usize, horizon: f64) -> Result<Self> {
        Ok(Self::Curve(make_uniform_knots(0.0, horizon, k, CUBIC)?))
    }

    /// Tensor basis with `k` time and `l` temperature functions.
    pub fn surface(k: usize, horizon: f64, l: usize, v_lo: f64, v_hi: f64) -> Result<Self> {
        Ok(Self::Surface(TensorBasisSpec::uniform(k, horizon, l, v_lo, v_hi)?))
    }

    /// Functions per customer type (`K` or `K L`).
    pub fn len(&self) -> usize {
        match self {
            Self::Curve(k) => k.num_basis(),
            Self::Surface(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_surface(&self) -> bool {
        matches!(self, Self::Surface(_))
    }

    pub fn time_basis(&self) -> &KnotVector {
        match self {
            Self::Curve(k) => k,
            Self::Surface(s) => &s.time_basis,
        }
    }

    /// Basis row at `(t, v)`; `v` is required for a surface.
    pub fn eval(&self, t: f64, v: Option<f64>) -> Result<Vec<f64>> {
        match (self, v) {
            (Self::Curve(k), _) => k.eval(t),
            (Self::Surface(s), Some(v)) => s.eval(t, v),
            (Self::Surface(_), None) => Err(Error::Data(
                "temperature value required by the surface basis".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mean: MeanBasis,
    pub covariance: CovarianceSpec,
    /// Names of panel covariates entering the additive term, in column order.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Stop when the log-likelihood changes by less than this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Compute the finite-difference Hessian of the covariance parameters.
    #[serde(default = "yes")]
    pub hessian: bool,
    #[serde(skip)]
    pub optimizer: BfgsOptions,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn new(mean: MeanBasis, covariance: CovarianceSpec) -> Self {
        Self {
            mean,
            covariance,
            covariates: Vec::new(),
            tolerance: 1e-6,
            max_iterations: 200,
            hessian: true,
            optimizer: BfgsOptions::default(),
        }
    }

    pub fn with_covariates<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.covariates = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Data(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Data("max_iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// Length of the coefficient vector for `types` customer types.
    pub fn num_coefficients(&self, types: usize) -> usize {
        self.mean.len() * types + self.covariates.len()
    }
}

/// One row `X_ij(t)` of the design matrix: block `c` is `m_jc` times the basis
/// at `(t, v)`, followed by the covariate values.
pub fn build_design_row(
    market_row: &[f64],
    basis: &MeanBasis,
    covariates: &[Option<f64>],
    t: f64,
    v: Option<f64>,
) -> Result<Vec<f64>> {
    let phi = basis.eval(t, v)?;
    let mut row = Vec::with_capacity(phi.len() * market_row.len() + covariates.len());
    for &m in market_row {
        row.extend(phi.iter().map(|p| m * p));
    }
    for (p, c) in covariates.iter().enumerate() {
        row.push(c.ok_or_else(|| Error::Data(format!("covariate {} missing at t = {t}", p + 1)))?);
    }
    Ok(row)
}

/// Design of one substation: shared by all days, or one matrix per day.
#[derive(Debug, Clone)]
pub(crate) enum Block {
    Shared(DMatrix<f64>),
    PerDay(Vec<DMatrix<f64>>),
}

impl Block {
    pub(crate) fn day(&self, i: usize) -> &DMatrix<f64> {
        match self {
            Block::Shared(x) => x,
            Block::PerDay(v) => &v[i],
        }
    }
}

/// Everything needed to evaluate the model on a fixed panel.
pub(crate) struct Problem<'a> {
    pub panel: &'a LoadPanel,
    pub rows: Vec<Vec<f64>>,
    pub blocks: Vec<Block>,
    pub spec: CovarianceSpec,
    pub types: usize,
    pub ncols: usize,
}

impl<'a> Problem<'a> {
    pub fn new(panel: &'a LoadPanel, market: &MarketTable, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let j_count = panel.num_substations();
        if market.num_substations() != j_count {
            return Err(Error::Dimension(format!(
                "market has {} substations, panel has {j_count}",
                market.num_substations()
            )));
        }
        if market.substations() != panel.substations() {
            return Err(Error::Data("market and panel substations differ in order or name".into()));
        }
        let types = market.num_types();
        let covs = config
            .covariates
            .iter()
            .map(|name| {
                panel
                    .covariate(name)
                    .ok_or_else(|| Error::Data(format!("covariate {name} not found in panel")))
            })
            .collect::<Result<Vec<_>>>()?;
        let temp = match (&config.mean, panel.temperature()) {
            (MeanBasis::Surface(_), None) => {
                return Err(Error::Data("surface basis needs temperature curves".into()))
            }
            (MeanBasis::Surface(_), Some(t)) => Some(t),
            _ => None,
        };
        let times = panel.grid().times();
        let n = times.len();
        let q = config.mean.len();
        let ncols = config.num_coefficients(types);
        let per_day = temp.is_some() || covs.iter().any(|c| c.is_functional());

        let time_design = config.mean.time_basis().design(times)?;
        let rows: Vec<Vec<f64>> = (0..j_count).map(|j| market.row(j)).collect();

        let build = |j: usize, i: usize| -> Result<DMatrix<f64>> {
            let mut x = DMatrix::zeros(n, ncols);
            let mut phi = vec![0.0; q];
            for t in 0..n {
                match (&config.mean, temp) {
                    (MeanBasis::Surface(s), Some(temp)) => {
                        let vb = s.covariate_basis.eval(temp[j][i][t])?;
                        let tb: Vec<f64> = time_design.row(t).iter().copied().collect();
                        s.product_into(&tb, &vb, &mut phi);
                    }
                    _ => {
                        for (k, p) in phi.iter_mut().enumerate() {
                            *p = time_design[(t, k)];
                        }
                    }
                }
                for (c, &m) in rows[j].iter().enumerate() {
                    if m != 0.0 {
                        for k in 0..q {
                            x[(t, c * q + k)] = m * phi[k];
                        }
                    }
                }
                for (p, cov) in covs.iter().enumerate() {
                    x[(t, types * q + p)] = cov.value(j, i, t);
                }
            }
            Ok(x)
        };

        let blocks = (0..j_count)
            .map(|j| {
                if per_day {
                    Ok(Block::PerDay(
                        (0..panel.num_days()).map(|i| build(j, i)).collect::<Result<_>>()?,
                    ))
                } else {
                    Ok(Block::Shared(build(j, 0)?))
                }
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            panel,
            rows,
            blocks,
            spec: config.covariance.clone(),
            types,
            ncols,
        })
    }

    pub fn num_substations(&self) -> usize {
        self.rows.len()
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.ncols {
            return Err(Error::Dimension(format!(
                "coefficient vector has {} entries, design has {} columns",
                beta.len(),
                self.ncols
            )));
        }
        Ok(())
    }

    /// Residuals `y_ij - X_ij beta` as the columns of an `N x I` matrix.
    pub fn residuals(&self, j: usize, beta: &DVector<f64>) -> DMatrix<f64> {
        let days = self.panel.num_days();
        let n = self.panel.num_points();
        let mut r = DMatrix::zeros(n, days);
        let shared = match &self.blocks[j] {
            Block::Shared(x) => Some(x * beta),
            Block::PerDay(_) => None,
        };
        for i in 0..days {
            let fitted = match &shared {
                Some(f) => f.clone(),
                None => self.blocks[j].day(i) * beta,
            };
            r.set_column(i, &(self.panel.load(j, i) - fitted));
        }
        r
    }

    /// Per-substation scatter matrices `sum_i r_ij r_ij'`.
    pub fn scatters(&self, beta: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.check_beta(beta)?;
        let b = DVector::from_column_slice(beta);
        Ok((0..self.num_substations())
            .into_par_iter()
            .map(|j| {
                let r = self.residuals(j, &b);
                &r * r.transpose()
            })
            .collect())
    }

    pub fn covariances(&self, params: &CovarianceParams) -> Result<Vec<CovMatrix>> {
        let kernels = GridKernels::new(&self.spec, params, self.panel.grid())?;
        self.rows
            .par_iter()
            .map(|row| CovMatrix::factor(kernels.aggregate(row)))
            .collect()
    }

    /// Per-substation log-likelihoods from scatter matrices.
    pub fn substation_logliks(
        &self,
        params: &CovarianceParams,
        scatters: &[DMatrix<f64>],
    ) -> Result<Vec<f64>> {
        let covs = self.covariances(params)?;
        let days = self.panel.num_days() as f64;
        let n = self.panel.num_points() as f64;
        Ok(covs
            .par_iter()
            .zip(scatters.par_iter())
            .map(|(cov, s)| {
                let inv = cov.inverse();
                let quad = inv.component_mul(s).sum();
                -0.5 * days * (cov.logdet() + n * (2.0 * PI).ln()) - 0.5 * quad
            })
            .collect())
    }

    /// Weighted log-likelihood `sum_j w_j l_j` and optionally its gradient
    /// with respect to the packed covariance parameters.
    pub fn objective(
        &self,
        params: &CovarianceParams,
        weights: &[f64],
        scatters: &[DMatrix<f64>],
        gradient: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let kernels = GridKernels::new(&self.spec, params, self.panel.grid())?;
        let days = self.panel.num_days() as f64;
        let n = self.panel.num_points();
        let active: Vec<usize> = (0..self.num_substations()).filter(|&j| weights[j] > 0.0).collect();
        let parts = active
            .par_iter()
            .map(|&j| -> Result<(f64, Option<DMatrix<f64>>)> {
                let cov = CovMatrix::factor(kernels.aggregate(&self.rows[j]))?;
                let inv = cov.inverse();
                let s = &scatters[j];
                let quad = inv.component_mul(s).sum();
                let value = -0.5 * days * (cov.logdet() + n as f64 * (2.0 * PI).ln()) - 0.5 * quad;
                let w = if gradient {
                    let a = &inv * s;
                    Some(&a * &inv - &inv * days)
                } else {
                    None
                };
                Ok((value, w))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut value = 0.0;
        let mut sens = gradient.then(|| vec![DMatrix::<f64>::zeros(n, n); self.types]);
        for (&j, (v, w)) in active.iter().zip(&parts) {
            value += weights[j] * v;
            if let (Some(sens), Some(w)) = (sens.as_mut(), w) {
                for (c, &m) in self.rows[j].iter().enumerate() {
                    if m != 0.0 {
                        sens[c] += w * (0.5 * weights[j] * m);
                    }
                }
            }
        }
        Ok((value, sens.map(|s| kernels.packed_gradient(&self.spec, &s))))
    }

    /// Weighted normal equations `(sum_j w_j sum_i X' S^-1 X, sum_j w_j sum_i X' S^-1 y)`;
    /// `covs = None` gives ordinary least squares.
    pub fn normal_equations(
        &self,
        covs: Option<&[CovMatrix]>,
        weights: &[f64],
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let days = self.panel.num_days();
        let active: Vec<usize> = (0..self.num_substations()).filter(|&j| weights[j] > 0.0).collect();
        let parts = active
            .par_iter()
            .map(|&j| -> Result<(DMatrix<f64>, DVector<f64>)> {
                let white = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
                    match covs {
                        Some(c) => c[j].whiten(m),
                        None => Ok(m.clone()),
                    }
                };
                match &self.blocks[j] {
                    Block::Shared(x) => {
                        let z = white(x)?;
                        let mut ysum = DVector::zeros(self.panel.num_points());
                        for i in 0..days {
                            ysum += self.panel.load(j, i);
                        }
                        let zy = white(&DMatrix::from_column_slice(ysum.len(), 1, ysum.as_slice()))?;
                        Ok((z.tr_mul(&z) * days as f64, z.tr_mul(&zy).column(0).into_owned()))
                    }
                    Block::PerDay(xs) => {
                        let mut a = DMatrix::zeros(self.ncols, self.ncols);
                        let mut b = DVector::zeros(self.ncols);
                        for (i, x) in xs.iter().enumerate() {
                            let y = self.panel.load(j, i);
                            let z = white(x)?;
                            let zy = white(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()))?;
                            a += z.tr_mul(&z);
                            b += z.tr_mul(&zy).column(0);
                        }
                        Ok((a, b))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut a = DMatrix::zeros(self.ncols, self.ncols);
        let mut b = DVector::zeros(self.ncols);
        for (&j, (aj, bj)) in active.iter().zip(&parts) {
            a += aj * weights[j];
            b += bj * weights[j];
        }
        Ok((a, b))
    }

    /// Weighted GLS coefficients and the normal matrix they solve.
    pub fn gls(
        &self,
        params: Option<&CovarianceParams>,
        weights: &[f64],
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let covs = params.map(|p| self.covariances(p)).transpose()?;
        let (a, b) = self.normal_equations(covs.as_deref(), weights)?;
        let x = solve_normal(&a, &b)?;
        Ok((x.as_slice().to_vec(), a))
    }

    /// BFGS maximization of the weighted log-likelihood over the covariance
    /// parameters with the scatter matrices held fixed.
    pub fn optimize(
        &self,
        weights: &[f64],
        scatters: &[DMatrix<f64>],
        init: &CovarianceParams,
        opts: &BfgsOptions,
    ) -> Result<CovarianceOptimum> {
        init.validate(&self.spec, self.types)?;
        let x0 = init.pack(&self.spec);
        let f = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
            let p = CovarianceParams::unpack(&self.spec, self.types, theta).ok()?;
            let (v, g) = self.objective(&p, weights, scatters, true).ok()?;
            Some((-v, g?.iter().map(|x| -x).collect()))
        };
        let m = minimize(f, &x0, opts).ok_or_else(|| {
            Error::Optimizer("log-likelihood cannot be evaluated at the initial covariance".into())
        })?;
        let params = CovarianceParams::unpack(&self.spec, self.types, &m.x)?;
        debug!(
            "covariance step: {} iterations, {:?}, |g| = {:.2e}",
            m.iterations,
            m.termination,
            m.gradient_norm()
        );
        Ok(CovarianceOptimum {
            params,
            log_likelihood: -m.value,
            gradient_norm: m.gradient_norm(),
            iterations: m.iterations,
            termination: m.termination,
        })
    }

    /// Finite-difference Hessian of the negative weighted log-likelihood in
    /// the packed parameters, from central differences of the gradient.
    pub fn hessian(
        &self,
        weights: &[f64],
        scatters: &[DMatrix<f64>],
        params: &CovarianceParams,
    ) -> Result<DMatrix<f64>> {
        let theta = params.pack(&self.spec);
        let p = theta.len();
        let h = 1e-4;
        let grad = |x: &[f64]| -> Result<Vec<f64>> {
            let q = CovarianceParams::unpack(&self.spec, self.types, x)?;
            let (_, g) = self.objective(&q, weights, scatters, true)?;
            Ok(g.unwrap_or_default())
        };
        let mut hess = DMatrix::zeros(p, p);
        let mut x = theta.clone();
        for k in 0..p {
            x[k] = theta[k] + h;
            let up = grad(&x)?;
            x[k] = theta[k] - h;
            let dn = grad(&x)?;
            x[k] = theta[k];
            for r in 0..p {
                hess[(r, k)] = -(up[r] - dn[r]) / (2.0 * h);
            }
        }
        Ok((&hess + hess.transpose()) * 0.5)
    }

    /// Starting covariance from residual moments.
    pub fn initial_covariance(&self, beta: &[f64]) -> Result<CovarianceParams> {
        let b = DVector::from_column_slice(beta);
        let grid = self.panel.grid().times();
        let n = grid.len();
        let mut var = Vec::with_capacity(self.num_substations());
        let (mut lag_num, mut lag_den) = (0.0, 0.0);
        for j in 0..self.num_substations() {
            let r = self.residuals(j, &b);
            var.push(r.norm_squared() / r.len() as f64);
            for col in r.column_iter() {
                for t in 0..n - 1 {
                    lag_num += col[t] * col[t + 1];
                }
                lag_den += col.norm_squared();
            }
        }
        let totals: Vec<f64> = self.rows.iter().map(|r| r.iter().sum()).collect();
        let pooled = var.iter().sum::<f64>() / totals.iter().sum::<f64>();
        let pooled = if pooled > 0.0 { pooled } else { 1.0 };

        let ns = self.spec.num_scales(self.types);
        let sigma = if ns == 1 {
            vec![pooled.sqrt()]
        } else {
            // least-squares split of the residual variance across types
            let m = DMatrix::from_fn(self.rows.len(), self.types, |j, c| self.rows[j][c]);
            let v = DVector::from_vec(var.clone());
            let per_type = solve_normal(&m.tr_mul(&m), &m.tr_mul(&v))
                .map(|s| s.as_slice().to_vec())
                .unwrap_or_else(|_| vec![pooled; self.types]);
            per_type.iter().map(|s| s.max(0.05 * pooled).sqrt()).collect()
        };

        let rho = if lag_den > 0.0 { (lag_num / lag_den).clamp(0.01, 0.99) } else { 0.5 };
        let step = (grid[n - 1] - grid[0]) / (n - 1) as f64;
        let omega = (2.0 * step / (self.panel.grid().horizon() * -rho.ln())).clamp(1e-3, 10.0);
        CovarianceParams::new(&self.spec, sigma, vec![omega; self.types])
    }
}

/// Solves symmetric positive (semi)definite normal equations with Jacobi
/// scaling and one refinement step.
pub(crate) fn solve_normal(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let p = a.nrows();
    let mut d = DVector::zeros(p);
    for k in 0..p {
        let v = a[(k, k)];
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::RankDeficient(format!(
                "design column {} is identically zero",
                k + 1
            )));
        }
        d[k] = 1.0 / v.sqrt();
    }
    let scaled = DMatrix::from_fn(p, p, |r, c| a[(r, c)] * d[r] * d[c]);
    let rhs = b.component_mul(&d);
    let chol = scaled.clone().cholesky().ok_or_else(|| {
        Error::RankDeficient("normal matrix is not positive definite".into())
    })?;
    let l = chol.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for k in 0..p {
        lo = lo.min(l[(k, k)]);
        hi = hi.max(l[(k, k)]);
    }
    if lo / hi < 1e-7 {
        return Err(Error::RankDeficient(format!(
            "normal matrix is numerically singular (pivot ratio {:.1e})",
            lo / hi
        )));
    }
    let mut x = chol.solve(&rhs);
    let r = &rhs - &scaled * &x;
    x += chol.solve(&r);
    let x = x.component_mul(&d);
    let resid = (a * &x - b).norm();
    let scale = a.norm() * x.norm() + b.norm();
    if scale > 0.0 && resid > 1e-8 * scale {
        warn!("normal equations solved with relative residual {:.1e}", resid / scale);
    }
    Ok(x)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceOptimum {
    pub params: CovarianceParams,
    pub log_likelihood: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub types: Vec<String>,
    pub mean: MeanBasis,
    pub covariance_spec: CovarianceSpec,
    pub covariate_names: Vec<String>,
    /// `(beta_1, ..., beta_C, gamma)`.
    pub beta: Vec<f64>,
    pub covariance: CovarianceParams,
    pub log_likelihood: f64,
    /// Log-likelihood at the start and after every outer iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `(X' Sigma^-1 X)^-1`, row-major.
    pub beta_covariance: Vec<Vec<f64>>,
    /// Hessian of the negative log-likelihood in the packed covariance
    /// parameters (log scales, log decays, free variance coefficients).
    pub covariance_hessian: Option<Vec<Vec<f64>>>,
    pub num_substations: usize,
    pub num_days: usize,
    pub num_points: usize,
}

impl FitResult {
    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    /// Coefficients `beta_c` of type `c`.
    pub fn beta_block(&self, c: usize) -> &[f64] {
        let q = self.mean.len();
        &self.beta[c * q..(c + 1) * q]
    }

    /// Covariate coefficients `gamma`.
    pub fn gamma(&self) -> &[f64] {
        &self.beta[self.mean.len() * self.num_types()..]
    }

    /// Number of estimated parameters (mean and covariance).
    pub fn num_params(&self) -> usize {
        self.beta.len() + self.covariance_spec.num_free(self.num_types())
    }

    pub fn beta_covariance_matrix(&self) -> DMatrix<f64> {
        let p = self.beta_covariance.len();
        DMatrix::from_fn(p, p, |r, c| self.beta_covariance[r][c])
    }
}

/// Pointwise estimate of a typical curve with a 95% band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypicalCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Estimated typical curve of type `c` at `times`, with temperatures `v`
/// for a surface fit.
pub fn typical_curve(
    fit: &FitResult,
    c: usize,
    times: &[f64],
    v: Option<&[f64]>,
) -> Result<TypicalCurve> {
    if c >= fit.num_types() {
        return Err(Error::Dimension(format!("type {} of {}", c + 1, fit.num_types())));
    }
    if let Some(v) = v {
        if v.len() != times.len() {
            return Err(Error::Dimension("temperature and time lengths differ".into()));
        }
    }
    if fit.mean.is_surface() && v.is_none() {
        return Err(Error::Data("surface fit needs a temperature curve".into()));
    }
    let q = fit.mean.len();
    let cov = fit.beta_covariance_matrix();
    let block = cov.view((c * q, c * q), (q, q));
    let beta = fit.beta_block(c);
    let mut out = TypicalCurve {
        times: times.to_vec(),
        values: Vec::with_capacity(times.len()),
        se: Vec::with_capacity(times.len()),
        lower: Vec::with_capacity(times.len()),
        upper: Vec::with_capacity(times.len()),
    };
    for (k, &t) in times.iter().enumerate() {
        let phi = DVector::from_vec(fit.mean.eval(t, v.map(|v| v[k]))?);
        let value: f64 = phi.iter().zip(beta).map(|(a, b)| a * b).sum();
        let se = (phi.dot(&(block * &phi))).max(0.0).sqrt();
        out.values.push(value);
        out.se.push(se);
        out.lower.push(value - 1.96 * se);
        out.upper.push(value + 1.96 * se);
    }
    Ok(out)
}

/// Fitted curves `X_ij beta`, indexed `[j][i]`.
pub fn predict(
    fit: &FitResult,
    panel: &LoadPanel,
    market: &MarketTable,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let config = ModelConfig {
        covariates: fit.covariate_names.clone(),
        ..ModelConfig::new(fit.mean.clone(), fit.covariance_spec.clone())
    };
    let problem = Problem::new(panel, market, &config)?;
    problem.check_beta(&fit.beta)?;
    let beta = DVector::from_column_slice(&fit.beta);
    Ok(problem
        .blocks
        .iter()
        .map(|b| (0..panel.num_days()).map(|i| b.day(i) * &beta).collect())
        .collect())
}

/// Outcome of the identifiability checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identifiability {
    pub failures: Vec<String>,
    pub proportional_pairs: Vec<(usize, usize)>,
}

impl Identifiability {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Identifiability(self.failures.join("; ")))
        }
    }
}

/// Checks `J > C` (or, with `clusters = Some(B)`, room for `B` clusters of
/// more than `C` substations each) and linear independence of the markets.
pub fn check_identifiability(market: &MarketTable, clusters: Option<usize>) -> Identifiability {
    let j = market.num_substations();
    let c = market.num_types();
    let mut failures = Vec::new();
    match clusters {
        None | Some(1) => {
            if j <= c {
                failures.push(format!("need more substations than customer types (J = {j}, C = {c})"));
            }
        }
        Some(b) => {
            if b == 0 {
                failures.push("cluster count must be at least 1".into());
            } else if j <= c * b {
                failures.push(format!("need J > C B (J = {j}, C = {c}, B = {b})"));
            } else if j <= (c + 1) * b {
                failures.push(format!(
                    "{b} clusters of more than {c} substations need J > (C + 1) B = {} (J = {j})",
                    (c + 1) * b
                ));
            }
        }
    }
    let pairs = market.proportional_pairs();
    for &(a, b) in &pairs {
        failures.push(format!(
            "markets of substations {} and {} are proportional",
            market.substations()[a],
            market.substations()[b]
        ));
    }
    Identifiability {
        failures,
        proportional_pairs: pairs,
    }
}

/// Log-likelihood of the aggregated model, including the normal constant.
pub fn log_likelihood(
    beta: &[f64],
    params: &CovarianceParams,
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
) -> Result<f64> {
    let problem = Problem::new(panel, market, config)?;
    let scatters = problem.scatters(beta)?;
    let w = vec![1.0; problem.num_substations()];
    Ok(problem.objective(params, &w, &scatters, false)?.0)
}

/// GLS coefficients for fixed covariance parameters.
pub fn wls_beta_update(
    params: &CovarianceParams,
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    let problem = Problem::new(panel, market, config)?;
    let w = vec![1.0; problem.num_substations()];
    Ok(problem.gls(Some(params), &w)?.0)
}

/// Maximizes the log-likelihood over the covariance parameters for fixed `beta`.
pub fn optimize_covariance(
    beta: &[f64],
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
    init: &CovarianceParams,
) -> Result<CovarianceOptimum> {
    let problem = Problem::new(panel, market, config)?;
    let scatters = problem.scatters(beta)?;
    let w = vec![1.0; problem.num_substations()];
    problem.optimize(&w, &scatters, init, &config.optimizer)
}

/// Fits the model by alternating covariance and GLS coefficient updates.
pub fn fit(
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
    init_beta: Option<&[f64]>,
) -> Result<FitResult> {
    fit_from(panel, market, config, init_beta, None)
}

/// [`fit`] with an optional starting covariance.
pub fn fit_from(
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
    init_beta: Option<&[f64]>,
    init_cov: Option<&CovarianceParams>,
) -> Result<FitResult> {
    check_identifiability(market, None).into_result()?;
    let problem = Problem::new(panel, market, config)?;
    let weights = vec![1.0; problem.num_substations()];
    let mut beta = match init_beta {
        Some(b) => {
            problem.check_beta(b)?;
            b.to_vec()
        }
        None => problem.gls(None, &weights)?.0,
    };
    let mut cov = match init_cov {
        Some(c) => c.clone(),
        None => problem.initial_covariance(&beta)?,
    };
    let state = run_alternating(&problem, &weights, config, &mut beta, &mut cov)?;
    finish(&problem, market, config, beta, cov, state)
}

pub(crate) struct LoopState {
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub normal: DMatrix<f64>,
    pub scatters: Vec<DMatrix<f64>>,
}

pub(crate) fn run_alternating(
    problem: &Problem,
    weights: &[f64],
    config: &ModelConfig,
    beta: &mut Vec<f64>,
    cov: &mut CovarianceParams,
) -> Result<LoopState> {
    let mut scatters = problem.scatters(beta)?;
    let mut ll = problem.objective(cov, weights, &scatters, false)?.0;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut normal = None;
    for r in 1..=config.max_iterations {
        iterations = r;
        let opt = problem.optimize(weights, &scatters, cov, &config.optimizer)?;
        *cov = opt.params;
        let (b, a) = problem.gls(Some(cov), weights)?;
        let new_scatters = problem.scatters(&b)?;
        let new_ll = problem.objective(cov, weights, &new_scatters, false)?.0;
        // GLS is exact for fixed covariance, so a decrease is rounding noise
        if new_ll + 1e-8 * (1.0 + new_ll.abs()) < opt.log_likelihood {
            warn!("GLS step lowered the log-likelihood by {:.3e}", opt.log_likelihood - new_ll);
        }
        *beta = b;
        scatters = new_scatters;
        normal = Some(a);
        trace.push(new_ll);
        debug!("outer iteration {r}: loglik {new_ll:.8}");
        let change = (new_ll - ll).abs();
        ll = new_ll;
        if change < config.tolerance {
            converged = true;
            break;
        }
    }
    let normal = match normal {
        Some(a) => a,
        None => problem.gls(Some(cov), weights)?.1,
    };
    Ok(LoopState {
        trace,
        iterations,
        converged,
        normal,
        scatters,
    })
}

fn finish(
    problem: &Problem,
    market: &MarketTable,
    config: &ModelConfig,
    beta: Vec<f64>,
    cov: CovarianceParams,
    state: LoopState,
) -> Result<FitResult> {
    let weights = vec![1.0; problem.num_substations()];
    let beta_cov = invert_spd(&state.normal)?;
    let hessian = if config.hessian {
        match problem.hessian(&weights, &state.scatters, &cov) {
            Ok(h) => Some(to_rows(&h)),
            Err(e) => {
                warn!("covariance Hessian unavailable: {e}");
                None
            }
        }
    } else {
        None
    };
    if !state.converged {
        warn!("fit stopped after {} outer iterations without converging", state.iterations);
    }
    Ok(FitResult {
        types: market.types().to_vec(),
        mean: config.mean.clone(),
        covariance_spec: config.covariance.clone(),
        covariate_names: config.covariates.clone(),
        beta,
        covariance: cov,
        log_likelihood: *state.trace.last().unwrap_or(&f64::NAN),
        trace: state.trace,
        iterations: state.iterations,
        converged: state.converged,
        beta_covariance: to_rows(&beta_cov),
        covariance_hessian: hessian,
        num_substations: problem.num_substations(),
        num_days: problem.panel.num_days(),
        num_points: problem.panel.num_points(),
    })
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Inverse of a symmetric positive definite matrix via scaled Cholesky.
pub(crate) fn invert_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = a.nrows();
    let d = DVector::from_fn(p, |k, _| 1.0 / a[(k, k)].sqrt());
    let scaled = DMatrix::from_fn(p, p, |r, c| a[(r, c)] * d[r] * d[c]);
    let inv = scaled
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("normal matrix is not positive definite".into()))?
        .inverse();
    Ok(DMatrix::from_fn(p, p, |r, c| inv[(r, c)] * d[r] * d[c]))
}

/// Central finite-difference gradient of [`log_likelihood`] in the packed
/// covariance parameters; used to validate the analytic gradient.
pub fn log_likelihood_fd_gradient(
    beta: &[f64],
    params: &CovarianceParams,
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
    h: f64,
) -> Result<Vec<f64>> {
    let problem = Problem::new(panel, market, config)?;
    let scatters = problem.scatters(beta)?;
    let w = vec![1.0; problem.num_substations()];
    let spec = &config.covariance;
    let types = market.num_types();
    let theta = params.pack(spec);
    Ok(fd_gradient(
        |x| {
            CovarianceParams::unpack(spec, types, x)
                .and_then(|p| problem.objective(&p, &w, &scatters, false))
                .map_or(f64::NAN, |v| v.0)
        },
        &theta,
        h,
    ))
}

/// Analytic gradient of [`log_likelihood`] in the packed covariance parameters.
pub fn log_likelihood_gradient(
    beta: &[f64],
    params: &CovarianceParams,
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    let problem = Problem::new(panel, market, config)?;
    let scatters = problem.scatters(beta)?;
    let w = vec![1.0; problem.num_substations()];
    Ok(problem.objective(params, &w, &scatters, true)?.1.unwrap_or_default())
}
