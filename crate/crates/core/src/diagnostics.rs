//! Residual curves, fMSRE measures, likelihood-ratio tests, BIC and standard errors.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::covariance::CovarianceKind;
use crate::data::{LoadPanel, MarketTable};
use crate::error::{Error, Result};
use crate::model::{predict, FitResult};

/// Relative residual curves `(estimate - reference) / reference`.
///
/// Points with a zero reference are `NaN` and flagged in `excluded`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCurves {
    pub curves: Vec<Vec<f64>>,
    pub excluded: Vec<Vec<bool>>,
    /// Pointwise median over the curves (ignoring excluded points).
    pub median: Vec<f64>,
}

pub fn relative_residuals(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<ResidualCurves> {
    if estimates.len() != references.len() || estimates.is_empty() {
        return Err(Error::Dimension(format!(
            "{} estimate curves for {} references",
            estimates.len(),
            references.len()
        )));
    }
    let n = references[0].len();
    let mut curves = Vec::with_capacity(estimates.len());
    let mut excluded = Vec::with_capacity(estimates.len());
    for (e, r) in estimates.iter().zip(references) {
        if e.len() != n || r.len() != n {
            return Err(Error::Dimension("residual curves must share one grid".into()));
        }
        let flags: Vec<bool> = r.iter().map(|v| *v == 0.0).collect();
        curves.push(
            e.iter()
                .zip(r)
                .map(|(a, b)| if *b == 0.0 { f64::NAN } else { (a - b) / b })
                .collect(),
        );
        excluded.push(flags);
    }
    let median = pointwise_median(&curves);
    Ok(ResidualCurves {
        curves,
        excluded,
        median,
    })
}

/// Pointwise median across curves, ignoring `NaN`s.
pub fn pointwise_median(curves: &[Vec<f64>]) -> Vec<f64> {
    let n = curves.first().map_or(0, |c| c.len());
    (0..n)
        .map(|t| {
            let mut v: Vec<f64> = curves.iter().map(|c| c[t]).filter(|x| !x.is_nan()).collect();
            median(&mut v)
        })
        .collect()
}

/// Median of a slice (`NaN` if empty); reorders the input.
pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Mean over runs of the Riemann integral `(T/N) sum_t R(t)^2`.
/// Excluded (`NaN`) points contribute nothing.
pub fn fmsre_parameter(curves: &[Vec<f64>], horizon: f64) -> f64 {
    if curves.is_empty() {
        return f64::NAN;
    }
    let total: f64 = curves
        .iter()
        .map(|c| {
            let w = horizon / c.len() as f64;
            w * c.iter().filter(|x| !x.is_nan()).map(|x| x * x).sum::<f64>()
        })
        .sum();
    total / curves.len() as f64
}

/// `(1/I) sum_i (T/N) sum_t (yhat - y)^2` for one substation. The measure is
/// an absolute squared error even though it carries the fMSRE name.
pub fn fmsre_fit(fitted: &[DVector<f64>], observed: &[DVector<f64>], horizon: f64) -> Result<f64> {
    if fitted.len() != observed.len() || fitted.is_empty() {
        return Err(Error::Dimension("fitted and observed day counts differ".into()));
    }
    let mut total = 0.0;
    for (f, y) in fitted.iter().zip(observed) {
        if f.len() != y.len() {
            return Err(Error::Dimension("fitted and observed grids differ".into()));
        }
        total += horizon / y.len() as f64 * (f - y).norm_squared();
    }
    Ok(total / fitted.len() as f64)
}

/// [`fmsre_fit`] for every substation of a fitted panel.
pub fn fmsre_fit_all(fit: &FitResult, panel: &LoadPanel, market: &MarketTable) -> Result<Vec<f64>> {
    let fitted = predict(fit, panel, market)?;
    fitted
        .iter()
        .zip(panel.loads())
        .map(|(f, y)| fmsre_fit(f, y, panel.grid().horizon()))
        .collect()
}

/// Upper tail of the chi-squared distribution.
pub fn chi_squared_sf(x: f64, df: usize) -> f64 {
    if df == 0 {
        return if x > 0.0 { 0.0 } else { 1.0 };
    }
    if !(x > 0.0) {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0)
}

/// `-2 l + H log(I J N)`.
pub fn bic(log_likelihood: f64, params: usize, days: usize, substations: usize, points: usize) -> f64 {
    bic_with_observations(log_likelihood, params, (days * substations * points) as f64)
}

/// `-2 l + H log(n)` for `n` observations.
pub fn bic_with_observations(log_likelihood: f64, params: usize, observations: f64) -> f64 {
    -2.0 * log_likelihood + params as f64 * observations.ln()
}

pub fn fit_bic(fit: &FitResult) -> f64 {
    bic(
        fit.log_likelihood,
        fit.num_params(),
        fit.num_days,
        fit.num_substations,
        fit.num_points,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub nested_log_likelihood: f64,
    pub larger_log_likelihood: f64,
    /// `L = -2 (l_nested - l_larger)`.
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub nested_bic: f64,
    pub larger_bic: f64,
    /// `BIC(larger) - BIC(nested)`.
    pub bic_difference: f64,
    pub warning: Option<String>,
}

/// Likelihood-ratio test of a nested fit against a larger one.
pub fn likelihood_ratio_test(nested: &FitResult, larger: &FitResult) -> Result<ComparisonReport> {
    if (nested.num_days, nested.num_substations, nested.num_points)
        != (larger.num_days, larger.num_substations, larger.num_points)
    {
        return Err(Error::Dimension("fits were made on panels of different shape".into()));
    }
    let (p0, p1) = (nested.num_params(), larger.num_params());
    if p1 < p0 {
        return Err(Error::Data(format!(
            "larger model has fewer parameters ({p1}) than the nested one ({p0})"
        )));
    }
    compare_log_likelihoods(
        nested.log_likelihood,
        p0,
        larger.log_likelihood,
        p1,
        (nested.num_days, nested.num_substations, nested.num_points),
    )
}

/// LRT and BIC comparison from raw log-likelihoods and parameter counts.
pub fn compare_log_likelihoods(
    nested: f64,
    nested_params: usize,
    larger: f64,
    larger_params: usize,
    (days, substations, points): (usize, usize, usize),
) -> Result<ComparisonReport> {
    let df = larger_params.saturating_sub(nested_params);
    let mut warning = None;
    if larger < nested - 1e-6 {
        let msg = format!(
            "larger model has lower log-likelihood ({larger:.6} < {nested:.6}); optimizer may have failed"
        );
        warn!("{msg}");
        warning = Some(msg);
    }
    let statistic = (-2.0 * (nested - larger)).max(0.0);
    let nested_bic = bic(nested, nested_params, days, substations, points);
    let larger_bic = bic(larger, larger_params, days, substations, points);
    Ok(ComparisonReport {
        nested_log_likelihood: nested,
        larger_log_likelihood: larger,
        statistic,
        df,
        p_value: chi_squared_sf(statistic, df),
        nested_bic,
        larger_bic,
        bic_difference: larger_bic - nested_bic,
        warning,
    })
}

/// Covariance of the GLS coefficients, `(X' Sigma^-1 X)^-1`.
pub fn beta_covariance(fit: &FitResult) -> DMatrix<f64> {
    fit.beta_covariance_matrix()
}

/// Standard errors from the inverse of a negative log-likelihood Hessian,
/// or the condition number when it is not safely invertible.
pub fn hessian_standard_errors(hessian: &DMatrix<f64>) -> std::result::Result<(Vec<f64>, DMatrix<f64>, f64), f64> {
    let eig = SymmetricEigen::new(hessian.clone());
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(lo > 0.0) || cond > 1e14 {
        return Err(cond);
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    let se = inv.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok((se, inv, cond))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CovarianceSe {
    Available {
        /// Standard errors of the packed (log-scale) parameters.
        packed: Vec<f64>,
        /// Delta-method standard errors on the natural scale.
        sigma: Vec<f64>,
        omega: Vec<f64>,
        eta: Vec<Vec<f64>>,
        condition: f64,
    },
    Unavailable {
        condition: f64,
    },
}

/// Standard errors of the covariance parameters from the fit's Hessian.
pub fn covariance_param_se(fit: &FitResult) -> CovarianceSe {
    let Some(rows) = &fit.covariance_hessian else {
        return CovarianceSe::Unavailable {
            condition: f64::NAN,
        };
    };
    let p = rows.len();
    let h = DMatrix::from_fn(p, p, |r, c| rows[r][c]);
    let (packed, inv, condition) = match hessian_standard_errors(&h) {
        Ok(v) => v,
        Err(condition) => return CovarianceSe::Unavailable { condition },
    };
    let cov = &fit.covariance;
    let types = fit.num_types();
    let ns = cov.sigma.len();
    let sigma = (0..ns).map(|c| cov.sigma[c] * packed[c]).collect();
    let omega = (0..types).map(|c| cov.omega[c] * packed[ns + c]).collect();
    let mut eta = Vec::new();
    if fit.covariance_spec.kind == CovarianceKind::Complete {
        let free = fit.covariance_spec.num_variance_basis() - 1;
        for c in 0..types {
            let start = ns + types + c * free;
            let mut se: Vec<f64> = packed[start..start + free].to_vec();
            // the last coefficient is minus the sum of the free ones
            let block = inv.view((start, start), (free, free));
            se.push(block.sum().max(0.0).sqrt());
            eta.push(se);
        }
    }
    CovarianceSe::Available {
        packed,
        sigma,
        omega,
        eta,
        condition,
    }
}

/// Pointwise signal-to-noise ratio `alpha(t) / eta(t)`.
pub fn snr_curve(alpha: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != eta.len() {
        return Err(Error::Dimension("curve lengths differ".into()));
    }
    if eta.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidCovariance("variance functional must be positive".into()));
    }
    Ok(alpha.iter().zip(eta).map(|(a, e)| a / e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn residuals_simple_cases() {
        let r = vec![vec![1.0, 2.0, -4.0]];
        let same = relative_residuals(&r, &r).unwrap();
        assert!(same.curves[0].iter().all(|v| *v == 0.0));
        let double = vec![vec![2.0, 4.0, -8.0]];
        let d = relative_residuals(&double, &r).unwrap();
        assert!(d.curves[0].iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn residuals_match_pointwise_oracle() {
        let e = vec![vec![0.3, -1.2, 5.5, 0.0], vec![1.0, 2.0, 3.0, 4.0]];
        let r = vec![vec![0.7, 2.5, -1.5, 3.0], vec![2.0, 0.0, 1.5, 8.0]];
        let out = relative_residuals(&e, &r).unwrap();
        for k in 0..2 {
            for t in 0..4 {
                if r[k][t] == 0.0 {
                    assert!(out.curves[k][t].is_nan() && out.excluded[k][t]);
                } else {
                    assert_abs_diff_eq!(out.curves[k][t], (e[k][t] - r[k][t]) / r[k][t], epsilon = 1e-15);
                }
            }
        }
        // the excluded point leaves a single value for the median
        assert_abs_diff_eq!(out.median[1], (-1.2 - 2.5) / 2.5, epsilon = 1e-15);
    }

    #[test]
    fn fmsre_parameter_values() {
        assert_eq!(fmsre_parameter(&[vec![0.0; 48]], 24.0), 0.0);
        assert_abs_diff_eq!(fmsre_parameter(&[vec![1.0; 48]], 24.0), 24.0, epsilon = 1e-12);
        let two = [vec![1.0; 48], vec![0.0; 48]];
        assert_abs_diff_eq!(fmsre_parameter(&two, 24.0), 12.0, epsilon = 1e-12);
    }

    #[test]
    fn fmsre_fit_values() {
        let y = vec![DVector::from_element(24, 3.0); 2];
        assert_eq!(fmsre_fit(&y, &y, 24.0).unwrap(), 0.0);
        let yhat: Vec<_> = y.iter().map(|v| v.add_scalar(1.0)).collect();
        assert_abs_diff_eq!(fmsre_fit(&yhat, &y, 24.0).unwrap(), 24.0, epsilon = 1e-12);
    }

    #[test]
    fn chi_squared_tail() {
        assert_eq!(chi_squared_sf(0.0, 10), 1.0);
        assert_abs_diff_eq!(chi_squared_sf(29.59, 10), 0.001, epsilon = 2e-5);
        // df = 2 has closed form exp(-x/2)
        assert_abs_diff_eq!(chi_squared_sf(3.0, 2), (-1.5f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(chi_squared_sf(3.841458820694124, 1), 0.05, epsilon = 1e-12);
    }

    #[test]
    fn bic_values() {
        assert_abs_diff_eq!(bic_with_observations(0.0, 1, std::f64::consts::E), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(bic(-100.0, 5, 2, 3, 4), 200.0 + 5.0 * 24f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn identical_log_likelihoods_give_unit_p_value() {
        let r = compare_log_likelihoods(-50.0, 10, -50.0, 20, (2, 3, 4)).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(r.warning.is_none());
        let bad = compare_log_likelihoods(-50.0, 10, -51.0, 20, (2, 3, 4)).unwrap();
        assert!(bad.warning.is_some());
        assert_abs_diff_eq!(r.bic_difference, 10.0 * 24f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn quadratic_likelihood_standard_error() {
        // l = -(theta - 2)^2 / (2 * 0.25): Hessian of -l is 4
        let h = DMatrix::from_element(1, 1, 4.0);
        let (se, _, cond) = hessian_standard_errors(&h).unwrap();
        assert_abs_diff_eq!(se[0], 0.5, epsilon = 1e-15);
        assert_eq!(cond, 1.0);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(hessian_standard_errors(&singular).is_err());
    }

    #[test]
    fn snr_values() {
        assert_eq!(snr_curve(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(snr_curve(&[0.0, 0.0], &[0.3, 2.0]).unwrap(), vec![0.0, 0.0]);
        let a = [0.4, -1.0, 7.0];
        let e = [0.2, 3.0, 0.7];
        let out = snr_curve(&a, &e).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(out[k], a[k] / e[k], epsilon = 1e-15);
        }
        assert!(snr_curve(&[1.0], &[0.0]).is_err());
    }
}
