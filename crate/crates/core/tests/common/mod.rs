//! Checks shared by the property tests and the acceptance summary. Each takes
//! a seed and returns a description of the first violation.
#![allow(dead_code)]

use loadgp::basis::make_uniform_knots;
use loadgp::clustering::{e_step, m_step_beta, q_functions, ClusterParams, MixtureConfig, MixtureState};
use loadgp::covariance::{substation_covariance, GridKernels};
use loadgp::model::{
    build_design_row, log_likelihood_fd_gradient, log_likelihood_gradient, typical_curve, wls_beta_update,
};
use loadgp::simulate::sample_curve_panel;
use loadgp::{
    fit, fit_mixture, CovarianceParams, CovarianceSpec, LoadPanel, MarketTable, MeanBasis, ModelConfig,
    TensorBasisSpec, TimeGrid,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub struct Instance {
    pub panel: LoadPanel,
    pub market: MarketTable,
    pub config: ModelConfig,
    pub beta: Vec<f64>,
    pub params: CovarianceParams,
}

/// Random market without proportional rows.
fn random_counts(rng: &mut ChaCha8Rng, j: usize, types: usize) -> Vec<Vec<u32>> {
    loop {
        let counts: Vec<Vec<u32>> = (0..j).map(|_| (0..types).map(|_| rng.random_range(1..40)).collect()).collect();
        if MarketTable::from_counts(counts.clone()).unwrap().proportional_pairs().is_empty() {
            return counts;
        }
    }
}

fn random_params(rng: &mut ChaCha8Rng, spec: &CovarianceSpec, types: usize) -> CovarianceParams {
    let theta: Vec<f64> = (0..spec.num_free(types))
        .enumerate()
        .map(|(i, _)| {
            if i < spec.num_scales(types) {
                rng.random_range(-1.2..0.3)
            } else if i < spec.num_scales(types) + types {
                rng.random_range(-2.5..0.0)
            } else {
                rng.random_range(-0.6..0.6)
            }
        })
        .collect();
    CovarianceParams::unpack(spec, types, &theta).unwrap()
}

/// Random curve-model instance drawn from its own model.
pub fn instance(seed: u64, spec: CovarianceSpec, j: usize, k: usize, n: usize, days: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let market = MarketTable::from_counts(random_counts(&mut rng, j, 2)).unwrap();
    let grid = TimeGrid::uniform(n, 24.0).unwrap();
    let mut config = ModelConfig::new(MeanBasis::curve(k, 24.0).unwrap(), spec.clone());
    config.hessian = false;
    let beta: Vec<f64> = (0..2 * k).map(|_| rng.random_range(0.5..3.0)).collect();
    let params = random_params(&mut rng, &spec, 2);
    let panel = sample_curve_panel(&market, &grid, &config, &beta, &params, days, &mut rng).unwrap();
    Instance {
        panel,
        market,
        config,
        beta,
        params,
    }
}

fn agree(what: &str, a: f64, b: f64, tol: f64) -> Check {
    if (a - b).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b} (tolerance {tol:e})"))
    }
}

pub fn partition_of_unity(k: usize, t: f64) -> Check {
    let knots = make_uniform_knots(0.0, 24.0, k, 3).map_err(|e| e.to_string())?;
    let v = knots.eval(t).map_err(|e| e.to_string())?;
    if v.iter().any(|x| *x < -1e-14) {
        return Err(format!("negative basis value at {t}"));
    }
    agree("basis sum", v.iter().sum(), 1.0, 1e-12)
}

pub fn tensor_is_outer_product(k: usize, l: usize, t: f64, v: f64) -> Check {
    let spec = TensorBasisSpec::uniform(k, 24.0, l, -5.0, 20.0).map_err(|e| e.to_string())?;
    let row = spec.eval(t, v).map_err(|e| e.to_string())?;
    let a = spec.time_basis.eval(t).unwrap();
    let b = spec.covariate_basis.eval(v).unwrap();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            agree("tensor entry", row[i * l + j], x * y, 1e-14)?;
        }
    }
    Ok(())
}

/// Aggregated covariance of a random complete-structure market row is PSD.
pub fn substation_covariance_psd(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = CovarianceSpec::complete_uniform(24.0, 6).unwrap();
    let params = random_params(&mut rng, &spec, 3);
    let grid = TimeGrid::uniform(24, 24.0).unwrap();
    let row: Vec<f64> = (0..3).map(|_| rng.random_range(0..50) as f64).collect();
    let m = GridKernels::new(&spec, &params, &grid).unwrap().aggregate(&row);
    if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err("asymmetric covariance".into());
    }
    let lo = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if lo < -1e-10 * m.amax().max(1.0) {
        return Err(format!("eigenvalue {lo} for market {row:?}"));
    }
    Ok(())
}

struct Stacked {
    x: DMatrix<f64>,
    y: DVector<f64>,
    sigma_inv: DMatrix<f64>,
}

fn stacked(inst: &Instance, params: &CovarianceParams) -> Stacked {
    let n = inst.panel.grid().len();
    let days = inst.panel.num_days();
    let j = inst.market.num_substations();
    let p = inst.config.num_coefficients(inst.market.num_types());
    let rows = j * days * n;
    let mut x = DMatrix::zeros(rows, p);
    let mut y = DVector::zeros(rows);
    let mut sigma_inv = DMatrix::zeros(rows, rows);
    for s in 0..j {
        let row = inst.market.row(s);
        let cov = substation_covariance(&row, &inst.config.covariance, params, inst.panel.grid()).unwrap();
        let inv = cov.matrix().clone().try_inverse().unwrap();
        for i in 0..days {
            let off = (s * days + i) * n;
            for (t, &time) in inst.panel.grid().times().iter().enumerate() {
                let d = build_design_row(&row, &inst.config.mean, &[], time, None).unwrap();
                for (c, v) in d.iter().enumerate() {
                    x[(off + t, c)] = *v;
                }
                y[off + t] = inst.panel.load(s, i)[t];
            }
            sigma_inv.view_mut((off, off), (n, n)).copy_from(&inv);
        }
    }
    Stacked { x, y, sigma_inv }
}

/// Blockwise GLS agrees with the dense stacked solution.
pub fn gls_matches_dense(seed: u64) -> Check {
    let inst = instance(seed, CovarianceSpec::homogeneous(), 4, 4, 6, 2);
    let got = wls_beta_update(&inst.params, &inst.panel, &inst.market, &inst.config).map_err(|e| e.to_string())?;
    let s = stacked(&inst, &inst.params);
    let xt = s.x.transpose();
    let a = &xt * &s.sigma_inv * &s.x;
    let b = &xt * &s.sigma_inv * &s.y;
    let dense = a.lu().solve(&b).ok_or("singular dense system")?;
    for (g, d) in got.iter().zip(dense.iter()) {
        agree("GLS coefficient", *g, *d, 1e-8 * (1.0 + d.abs()))?;
    }
    Ok(())
}

/// The coefficient covariance of a fit equals `A Sigma A'` for the GLS
/// operator `A` at the fitted covariance.
pub fn sandwich_identity(seed: u64) -> Check {
    let inst = instance(seed, CovarianceSpec::homogeneous(), 5, 4, 6, 3);
    let f = fit(&inst.panel, &inst.market, &inst.config, None).map_err(|e| e.to_string())?;
    let s = stacked(&inst, &f.covariance);
    let sigma = s.sigma_inv.clone().try_inverse().ok_or("singular covariance")?;
    let xt = s.x.transpose();
    let bread = (&xt * &s.sigma_inv * &s.x).try_inverse().ok_or("singular information")?;
    let a = &bread * &xt * &s.sigma_inv;
    let sandwich = &a * sigma * a.transpose();
    let reported = f.beta_covariance_matrix();
    let scale = reported.amax();
    for (u, v) in sandwich.iter().zip(reported.iter()) {
        agree("coefficient covariance", *u, *v, 1e-8 * scale)?;
    }
    Ok(())
}

/// Analytic and central-difference gradients of the log-likelihood agree.
pub fn gradient_matches_fd(seed: u64) -> Check {
    let inst = instance(seed, CovarianceSpec::complete_uniform(24.0, 5).unwrap(), 4, 4, 8, 3);
    let g = log_likelihood_gradient(&inst.beta, &inst.params, &inst.panel, &inst.market, &inst.config)
        .map_err(|e| e.to_string())?;
    let fd = log_likelihood_fd_gradient(&inst.beta, &inst.params, &inst.panel, &inst.market, &inst.config, 1e-5)
        .map_err(|e| e.to_string())?;
    let scale = fd.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for (a, b) in g.iter().zip(&fd) {
        agree("gradient entry", *a, *b, 1e-4 * scale)?;
    }
    Ok(())
}

/// Eight substations alternating between two clusters, both homogeneous.
pub fn mixture_instance(seed: u64) -> (Instance, MixtureState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let market = MarketTable::from_counts(random_counts(&mut rng, 8, 2)).unwrap();
    let grid = TimeGrid::uniform(8, 24.0).unwrap();
    let spec = CovarianceSpec::homogeneous();
    let mut config = ModelConfig::new(MeanBasis::curve(4, 24.0).unwrap(), spec.clone());
    config.hessian = false;
    let clusters: Vec<ClusterParams> = (0..2)
        .map(|_| ClusterParams {
            beta: (0..8).map(|_| rng.random_range(0.5..3.0)).collect(),
            covariance: random_params(&mut rng, &spec, 2),
        })
        .collect();
    let days = 3;
    let loads = (0..8)
        .map(|j| {
            let c = &clusters[j % 2];
            let one = market.subset(&[j]);
            sample_curve_panel(&one, &grid, &config, &c.beta, &c.covariance, days, &mut rng).unwrap().loads()[0]
                .clone()
        })
        .collect();
    let panel = LoadPanel::new(grid, market.substations().to_vec(), (0..days as i64).collect(), loads).unwrap();
    let state = MixtureState {
        pi: vec![0.5, 0.5],
        clusters: clusters.clone(),
    };
    (
        Instance {
            panel,
            market,
            config,
            beta: clusters[0].beta.clone(),
            params: clusters[0].covariance.clone(),
        },
        state,
    )
}

/// Observed log-likelihood never decreases across ECM iterations.
pub fn em_monotone(seed: u64) -> Check {
    let (inst, _) = mixture_instance(seed);
    let cfg = MixtureConfig::new(2, 3, inst.config.clone(), seed);
    let f = fit_mixture(&inst.panel, &inst.market, &cfg).map_err(|e| e.to_string())?;
    for w in f.trace.windows(2) {
        if w[1] < w[0] - 1e-6 * (1.0 + w[0].abs()) {
            return Err(format!("trace decreased from {} to {}", w[0], w[1]));
        }
    }
    for row in &f.membership {
        agree("membership row sum", row.iter().sum(), 1.0, 1e-10)?;
    }
    Ok(())
}

/// Responsibilities are a stochastic matrix for arbitrary mixing weights.
pub fn responsibilities_stochastic(seed: u64) -> Check {
    let (inst, mut state) = mixture_instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let a: f64 = rng.random_range(0.01..0.99);
    state.pi = vec![a, 1.0 - a];
    for c in &mut state.clusters {
        for s in &mut c.covariance.sigma {
            *s *= rng.random_range(1.0..8.0);
        }
    }
    let p = e_step(&state, &inst.panel, &inst.market, &inst.config).map_err(|e| e.to_string())?;
    for r in p.row_iter() {
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("responsibility outside [0, 1]".into());
        }
        agree("row sum", r.sum(), 1.0, 1e-10)?;
    }
    Ok(())
}

/// The weighted GLS step maximizes `Q2` over the coefficients: no coordinate
/// perturbation improves it and its central-difference slope vanishes.
pub fn beta_step_maximizes_q2(seed: u64) -> Check {
    let (inst, state) = mixture_instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut p = DMatrix::zeros(8, 2);
    for j in 0..8 {
        let a: f64 = rng.random_range(0.05..0.95);
        p[(j, 0)] = a;
        p[(j, 1)] = 1.0 - a;
    }
    let covs: Vec<_> = state.clusters.iter().map(|c| c.covariance.clone()).collect();
    let betas = m_step_beta(&p, &covs, &inst.panel, &inst.market, &inst.config).map_err(|e| e.to_string())?;
    let q2 = |betas: &[Vec<f64>]| {
        let s = MixtureState {
            pi: state.pi.clone(),
            clusters: betas
                .iter()
                .zip(&covs)
                .map(|(b, c)| ClusterParams {
                    beta: b.clone(),
                    covariance: c.clone(),
                })
                .collect(),
        };
        q_functions(&p, &s, &inst.panel, &inst.market, &inst.config).unwrap().1
    };
    let best = q2(&betas);
    let h = 1e-3;
    for b in 0..2 {
        for k in 0..betas[b].len() {
            let (mut up, mut down) = (betas.clone(), betas.clone());
            up[b][k] += h;
            down[b][k] -= h;
            let (qu, qd) = (q2(&up), q2(&down));
            if qu > best || qd > best {
                return Err(format!("perturbing cluster {b} coefficient {k} increases Q2"));
            }
            agree("Q2 slope", (qu - qd) / (2.0 * h), 0.0, 1e-5 * (1.0 + best.abs()))?;
        }
    }
    Ok(())
}

/// Fraction of grid points where the 95% band of a fit covers the true
/// typical curve, pooled over `reps` replicates and both types.
pub fn band_coverage(reps: usize, seed: u64) -> f64 {
    let counts = vec![
        vec![30, 5],
        vec![12, 9],
        vec![20, 20],
        vec![8, 14],
        vec![25, 3],
        vec![6, 22],
        vec![15, 11],
        vec![9, 4],
    ];
    let market = MarketTable::from_counts(counts).unwrap();
    let grid = TimeGrid::uniform(12, 24.0).unwrap();
    let spec = CovarianceSpec::homogeneous();
    let mut config = ModelConfig::new(MeanBasis::curve(5, 24.0).unwrap(), spec.clone());
    config.hessian = false;
    let beta = vec![1.0, 1.6, 0.8, 2.0, 1.2, 0.5, 0.9, 1.4, 0.7, 1.1];
    let params = CovarianceParams::new(&spec, vec![0.3, 0.4], vec![0.2, 0.5]).unwrap();
    let (mut hit, mut total) = (0usize, 0usize);
    for r in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + r as u64);
        let panel = sample_curve_panel(&market, &grid, &config, &beta, &params, 10, &mut rng).unwrap();
        let f = fit(&panel, &market, &config, None).unwrap();
        for c in 0..2 {
            let tc = typical_curve(&f, c, grid.times(), None).unwrap();
            for (k, &t) in grid.times().iter().enumerate() {
                let phi = config.mean.eval(t, None).unwrap();
                let truth: f64 = phi.iter().zip(&beta[5 * c..5 * c + 5]).map(|(a, b)| a * b).sum();
                total += 1;
                if tc.lower[k] <= truth && truth <= tc.upper[k] {
                    hit += 1;
                }
            }
        }
    }
    hit as f64 / total as f64
}
