//! Cubic B-spline bases over a bounded domain, tensor-product surface bases
//! and interpolating splines for covariate curves.
//!
//! All bases are clamped: the boundary knots are repeated `degree + 1` times,
//! so the first basis function equals one at the left end of the domain and
//! the last one equals one at the right end. Values are computed with the
//! de Boor / Cox recursion restricted to the `degree + 1` functions that are
//! nonzero on the knot span containing the evaluation point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CUBIC: usize = 3;

/// Clamped knot vector of a B-spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    /// Builds a clamped knot vector from its interior knots.
    pub fn clamped(degree: usize, lo: f64, hi: f64, interior: &[f64]) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidBasis("degree must be at least 1".into()));
        }
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::InvalidBasis(format!(
                "empty or non-finite domain [{lo}, {hi}]"
            )));
        }
        let mut prev = lo;
        for &k in interior {
            if !(k > lo && k < hi) || k < prev {
                return Err(Error::InvalidBasis(format!(
                    "interior knot {k} not ordered inside ({lo}, {hi})"
                )));
            }
            prev = k;
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat_n(lo, degree + 1));
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(Self { degree, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.knots.len() - self.degree - 1]
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    pub fn contains(&self, t: f64) -> bool {
        let (lo, hi) = self.domain();
        t >= lo && t <= hi
    }

    fn check(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            let (lo, hi) = self.domain();
            Err(Error::OutOfDomain { value: t, lo, hi })
        }
    }

    /// Index of the knot span `[u_s, u_{s+1})` holding `t`; the right end of
    /// the domain belongs to the last nonempty span.
    fn find_span(&self, t: f64) -> usize {
        let n = self.num_basis() - 1;
        let p = self.degree;
        if t >= self.knots[n + 1] {
            return n;
        }
        if t <= self.knots[p] {
            return p;
        }
        let (mut low, mut high) = (p, n + 1);
        let mut mid = (low + high) / 2;
        while t < self.knots[mid] || t >= self.knots[mid + 1] {
            if t < self.knots[mid] {
                high = mid;
            } else {
                low = mid;
            }
            mid = (low + high) / 2;
        }
        mid
    }

    /// Values of the `degree + 1` functions nonzero at `t`, together with the
    /// index of the first of them. The caller guarantees `t` is in the domain.
    fn nonzero(&self, t: f64, out: &mut [f64]) -> usize {
        let p = self.degree;
        let span = self.find_span(t);
        let mut left = [0.0; 8];
        let mut right = [0.0; 8];
        debug_assert!(p < 8 && out.len() == p + 1);
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        span - p
    }

    /// Evaluates all basis functions at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.num_basis()];
        self.eval_into(t, &mut v)?;
        Ok(v)
    }

    /// Writes all basis values at `t` into `out`, which must have length K.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.check(t)?;
        if out.len() != self.num_basis() {
            return Err(Error::Dimension(format!(
                "basis output has length {}, expected {}",
                out.len(),
                self.num_basis()
            )));
        }
        out.fill(0.0);
        let mut local = [0.0; 8];
        let first = self.nonzero(t, &mut local[..=self.degree]);
        out[first..=first + self.degree].copy_from_slice(&local[..=self.degree]);
        Ok(())
    }

    /// Basis matrix (rows = points, columns = basis functions) on a grid.
    pub fn design(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let k = self.num_basis();
        let mut m = DMatrix::zeros(points.len(), k);
        let mut row = vec![0.0; k];
        for (i, &t) in points.iter().enumerate() {
            self.eval_into(t, &mut row)?;
            for (c, v) in row.iter().enumerate() {
                m[(i, c)] = *v;
            }
        }
        Ok(m)
    }
}

/// Clamped basis with `num_basis` functions and equally spaced interior knots.
pub fn make_uniform_knots(
    domain_lo: f64,
    domain_hi: f64,
    num_basis: usize,
    degree: usize,
) -> Result<KnotVector> {
    if num_basis < degree + 1 {
        return Err(Error::InvalidBasis(format!(
            "{num_basis} basis functions requested but degree {degree} needs at least {}",
            degree + 1
        )));
    }
    if !(domain_hi > domain_lo) {
        return Err(Error::InvalidBasis(format!(
            "empty domain [{domain_lo}, {domain_hi}]"
        )));
    }
    let n_interior = num_basis - degree - 1;
    let width = domain_hi - domain_lo;
    let interior: Vec<f64> = (1..=n_interior)
        .map(|i| domain_lo + width * i as f64 / (n_interior + 1) as f64)
        .collect();
    KnotVector::clamped(degree, domain_lo, domain_hi, &interior)
}

/// Tensor product of a time basis and a covariate (temperature) basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBasisSpec {
    pub time_basis: KnotVector,
    pub covariate_basis: KnotVector,
}

impl TensorBasisSpec {
    pub fn new(time_basis: KnotVector, covariate_basis: KnotVector) -> Result<Self> {
        for kv in [&time_basis, &covariate_basis] {
            if kv.num_basis() < kv.degree() + 1 {
                return Err(Error::InvalidBasis("tensor factor has too few functions".into()));
            }
        }
        Ok(Self {
            time_basis,
            covariate_basis,
        })
    }

    /// Uniform cubic bases with `k` time functions on `[0, horizon]` and `l`
    /// covariate functions over the observed covariate range.
    pub fn uniform(k: usize, horizon: f64, l: usize, v_lo: f64, v_hi: f64) -> Result<Self> {
        if !(v_lo.is_finite() && v_hi.is_finite()) || v_hi <= v_lo {
            return Err(Error::InvalidBasis(format!(
                "covariate range [{v_lo}, {v_hi}] is degenerate"
            )));
        }
        Self::new(
            make_uniform_knots(0.0, horizon, k, CUBIC)?,
            make_uniform_knots(v_lo, v_hi, l, CUBIC)?,
        )
    }

    pub fn len(&self) -> usize {
        self.time_basis.num_basis() * self.covariate_basis.num_basis()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened values `phi_k(t) * varphi_l(v)` with `l` running fastest.
    pub fn eval(&self, t: f64, v: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, v, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, v: f64, out: &mut [f64]) -> Result<()> {
        let tb = self.time_basis.eval(t)?;
        let vb = self.covariate_basis.eval(v)?;
        self.product_into(&tb, &vb, out);
        Ok(())
    }

    /// Tensor row from precomputed factor values.
    pub fn product_into(&self, time_vals: &[f64], cov_vals: &[f64], out: &mut [f64]) {
        let l = cov_vals.len();
        for (k, a) in time_vals.iter().enumerate() {
            for (j, b) in cov_vals.iter().enumerate() {
                out[k * l + j] = a * b;
            }
        }
    }
}

/// Shorthand for [`KnotVector::eval`].
pub fn eval_basis(knots: &KnotVector, t: f64) -> Result<Vec<f64>> {
    knots.eval(t)
}

/// Shorthand for [`TensorBasisSpec::eval`].
pub fn eval_tensor_basis(spec: &TensorBasisSpec, t: f64, v: f64) -> Result<Vec<f64>> {
    spec.eval(t, v)
}

/// Cubic spline through a set of points, with not-a-knot end conditions
/// (interior knots at the data abscissae except the second and the
/// second-to-last). Reproduces cubic polynomials exactly.
#[derive(Debug, Clone)]
pub struct InterpolatingSpline {
    knots: KnotVector,
    coefs: Vec<f64>,
}

impl InterpolatingSpline {
    pub fn eval(&self, x: f64) -> Result<f64> {
        self.knots.check(x)?;
        let mut local = [0.0; 4];
        let first = self.knots.nonzero(x, &mut local);
        Ok(local
            .iter()
            .zip(&self.coefs[first..first + 4])
            .map(|(b, c)| b * c)
            .sum())
    }

    /// Evaluates after clamping `x` into the data range.
    pub fn eval_clamped(&self, x: f64) -> f64 {
        let (lo, hi) = self.knots.domain();
        self.eval(x.clamp(lo, hi)).expect("clamped into domain")
    }

    pub fn domain(&self) -> (f64, f64) {
        self.knots.domain()
    }
}

pub fn fit_interpolating_spline(points: &[(f64, f64)]) -> Result<InterpolatingSpline> {
    let n = points.len();
    if n < 4 {
        return Err(Error::InvalidBasis(format!(
            "cubic interpolation needs at least 4 points, got {n}"
        )));
    }
    for w in points.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::InvalidBasis(format!(
                "abscissae must be strictly increasing (found {} then {})",
                w[0].0, w[1].0
            )));
        }
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::InvalidBasis("non-finite interpolation point".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let interior = &xs[2..n - 2];
    let knots = KnotVector::clamped(CUBIC, xs[0], xs[n - 1], interior)?;
    debug_assert_eq!(knots.num_basis(), n);

    // Collocation matrix is banded (4 nonzeros per row) and totally positive,
    // so banded elimination without pivoting is stable.
    let mut band = Banded::new(n, 3);
    let mut local = [0.0; 4];
    for (i, &x) in xs.iter().enumerate() {
        let first = knots.nonzero(x, &mut local);
        for (o, v) in local.iter().enumerate() {
            band.set(i, first + o, *v);
        }
    }
    let mut rhs: Vec<f64> = points.iter().map(|p| p.1).collect();
    band.solve_in_place(&mut rhs)?;
    Ok(InterpolatingSpline { knots, coefs: rhs })
}

/// Square banded matrix with equal lower and upper bandwidth.
struct Banded {
    n: usize,
    w: usize,
    data: Vec<f64>,
}

impl Banded {
    fn new(n: usize, w: usize) -> Self {
        Self {
            n,
            w,
            data: vec![0.0; n * (2 * w + 1)],
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * (2 * self.w + 1) + (j + self.w - i)
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(j + self.w >= i && j <= i + self.w, "outside band");
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.w < i || j > i + self.w {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    fn solve_in_place(&mut self, rhs: &mut [f64]) -> Result<()> {
        let (n, w) = (self.n, self.w);
        for k in 0..n {
            let piv = self.get(k, k);
            if piv.abs() < 1e-300 {
                return Err(Error::InvalidBasis("singular collocation matrix".into()));
            }
            for i in k + 1..(k + w + 1).min(n) {
                let f = self.get(i, k) / piv;
                if f == 0.0 {
                    continue;
                }
                for j in k..(k + w + 1).min(n) {
                    let v = self.get(i, j) - f * self.get(k, j);
                    let idx = self.idx(i, j);
                    self.data[idx] = v;
                }
                rhs[i] -= f * rhs[k];
            }
        }
        for k in (0..n).rev() {
            let mut s = rhs[k];
            for j in k + 1..(k + w + 1).min(n) {
                s -= self.get(k, j) * rhs[j];
            }
            rhs[k] = s / self.get(k, k);
        }
        Ok(())
    }
}
