//! BFGS quasi-Newton minimizer with a backtracking Armijo line search.
//!
//! Objectives return `None` (or a non-finite value) where they cannot be
//! evaluated; the line search treats such points as rejected steps.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop when the relative decrease of two consecutive steps is below this.
    pub relative_tolerance: f64,
    /// Largest infinity-norm step tried by the line search.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-5,
            relative_tolerance: 1e-13,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Gradient,
    Stalled,
    MaxIterations,
    LineSearch,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl Minimum {
    pub fn gradient_norm(&self) -> f64 {
        inf_norm(&self.gradient)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimizes `f` from `x0`. `f` returns the value and gradient.
///
/// Returns `None` only if `f` cannot be evaluated at `x0`.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut evals = 1;
    let (mut fx, mut g) = f(x0).filter(|(v, g)| v.is_finite() && g.iter().all(|x| x.is_finite()))?;
    let mut x = DVector::from_column_slice(x0);
    let mut gv = DVector::from_vec(g.clone());
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh_h = true;
    let mut stalls = 0;

    for iter in 0..opts.max_iterations {
        if inf_norm(&g) <= opts.gradient_tolerance {
            return Some(done(x, fx, g, iter, evals, Termination::Gradient));
        }
        let mut p = -(&h * &gv);
        let mut slope = p.dot(&gv);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            fresh_h = true;
            p = -gv.clone();
            slope = p.dot(&gv);
        }
        let pmax = p.amax();
        let mut alpha = if pmax > opts.max_step { opts.max_step / pmax } else { 1.0 };

        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &p * alpha;
            evals += 1;
            if let Some((ft, gt)) = f(trial.as_slice()) {
                if ft.is_finite()
                    && gt.iter().all(|v| v.is_finite())
                    && ft <= fx + 1e-4 * alpha * slope
                {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                if ft.is_finite() {
                    // minimizer of the quadratic through phi(0), phi'(0), phi(alpha)
                    let denom = 2.0 * (ft - fx - slope * alpha);
                    let q = if denom > 0.0 { -slope * alpha * alpha / denom } else { 0.5 * alpha };
                    alpha = q.clamp(0.1 * alpha, 0.5 * alpha);
                    continue;
                }
            }
            alpha *= 0.25;
        }

        let Some((xn, fnew, gnew)) = accepted else {
            if fresh_h {
                return Some(done(x, fx, g, iter, evals, Termination::LineSearch));
            }
            h = DMatrix::identity(n, n);
            fresh_h = true;
            continue;
        };

        let gn = DVector::from_vec(gnew.clone());
        let s = &xn - &x;
        let y = &gn - &gv;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh_h {
                let scale = sy / y.dot(&y);
                h = DMatrix::identity(n, n) * scale;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh_h = false;
        }

        let decrease = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        gv = gn;
        if decrease <= opts.relative_tolerance * (fx.abs() + opts.relative_tolerance) {
            stalls += 1;
            if stalls >= 2 {
                return Some(done(x, fx, g, iter + 1, evals, Termination::Stalled));
            }
        } else {
            stalls = 0;
        }
    }
    let term = if inf_norm(&g) <= opts.gradient_tolerance {
        Termination::Gradient
    } else {
        Termination::MaxIterations
    };
    Some(done(x, fx, g, opts.max_iterations, evals, term))
}

fn done(
    x: DVector<f64>,
    value: f64,
    gradient: Vec<f64>,
    iterations: usize,
    evaluations: usize,
    termination: Termination,
) -> Minimum {
    Minimum {
        x: x.as_slice().to_vec(),
        value,
        gradient,
        iterations,
        evaluations,
        termination,
    }
}

/// Central finite-difference gradient with per-coordinate step `h`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let v = (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
            let g = vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ];
            Some((v, g))
        };
        let opts = BfgsOptions {
            max_iterations: 500,
            gradient_tolerance: 1e-9,
            ..Default::default()
        };
        let m = minimize(f, &[-1.2, 1.0], &opts).unwrap();
        assert_abs_diff_eq!(m.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(m.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn rejects_undefined_region() {
        // log barrier: undefined for x <= 0, minimum at x = 1
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                None
            } else {
                Some((x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]]))
            }
        };
        let m = minimize(f, &[5.0], &BfgsOptions::default()).unwrap();
        assert_abs_diff_eq!(m.x[0], 1.0, epsilon = 1e-5);
        assert_eq!(m.termination, Termination::Gradient);
    }

    #[test]
    fn start_at_optimum_returns_start() {
        let f = |x: &[f64]| Some((x[0] * x[0] + 3.0, vec![2.0 * x[0]]));
        let m = minimize(f, &[0.0], &BfgsOptions::default()).unwrap();
        assert_eq!(m.x, vec![0.0]);
        assert_eq!(m.iterations, 0);
    }

    #[test]
    fn finite_difference_gradient() {
        let g = fd_gradient(|x| x[0].sin() * x[1].exp(), &[0.3, -0.2], 1e-5);
        assert_abs_diff_eq!(g[0], 0.3f64.cos() * (-0.2f64).exp(), epsilon = 1e-9);
        assert_abs_diff_eq!(g[1], 0.3f64.sin() * (-0.2f64).exp(), epsilon = 1e-9);
    }
}
