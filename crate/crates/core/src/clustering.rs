//! Mixture of aggregated Gaussian-process models fitted by ECM.

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceParams, CovarianceSpec};
use crate::data::{LoadPanel, MarketTable};
use crate::diagnostics::bic;
use crate::error::{Error, Result};
use crate::model::{check_identifiability, run_alternating, CovarianceOptimum, MeanBasis, ModelConfig, Problem};

/// Smallest total responsibility a cluster may carry.
pub const DEGENERATE_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub clusters: usize,
    /// Random initial partitions tried.
    pub trials: usize,
    pub model: ModelConfig,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// Outer-iteration cap of the per-cluster fits that seed the ECM.
    pub init_max_iterations: usize,
    /// Polish every random partition by single-substation moves that lower
    /// the squared error.
    #[serde(default = "default_refine")]
    pub refine_init: bool,
}

fn default_refine() -> bool {
    true
}

impl MixtureConfig {
    pub fn new(clusters: usize, trials: usize, model: ModelConfig, seed: u64) -> Self {
        Self {
            clusters,
            trials,
            model,
            tolerance: 1e-6,
            max_iterations: 200,
            seed,
            init_max_iterations: 50,
            refine_init: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.trials == 0 {
            return Err(Error::Data("clusters and trials must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::Data("tolerance and max_iterations must be positive".into()));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub beta: Vec<f64>,
    pub covariance: CovarianceParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    pub pi: Vec<f64>,
    pub clusters: Vec<ClusterParams>,
}

impl MixtureState {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Relabelled state: new cluster `k` is old cluster `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            pi: perm.iter().map(|&b| self.pi[b]).collect(),
            clusters: perm.iter().map(|&b| self.clusters[b].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitTrial {
    /// Random starting partition.
    pub start: Vec<usize>,
    /// Cluster of each substation after refinement.
    pub partition: Vec<usize>,
    /// Residual sum of squares of the per-cluster least-squares fits.
    pub squared_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Initialization {
    pub state: MixtureState,
    pub trials: Vec<InitTrial>,
    pub selected: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureFitResult {
    pub types: Vec<String>,
    pub mean: MeanBasis,
    pub covariance_spec: CovarianceSpec,
    pub covariate_names: Vec<String>,
    pub pi: Vec<f64>,
    /// Posterior membership `p_jb`, one row per substation.
    pub membership: Vec<Vec<f64>>,
    pub clusters: Vec<ClusterParams>,
    /// Observed-data log-likelihood at the start and after every iteration.
    pub trace: Vec<f64>,
    pub log_likelihood: f64,
    /// `argmax_b p_jb`, lowest index on ties.
    pub assignment: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    pub num_substations: usize,
    pub num_days: usize,
    pub num_points: usize,
}

impl MixtureFitResult {
    pub fn num_clusters(&self) -> usize {
        self.pi.len()
    }

    /// Coefficients, covariance parameters and free mixing weights.
    pub fn num_params(&self) -> usize {
        let per = self.clusters[0].beta.len() + self.covariance_spec.num_free(self.types.len());
        self.num_clusters() * per + self.num_clusters() - 1
    }

    pub fn bic(&self) -> f64 {
        bic(
            self.log_likelihood,
            self.num_params(),
            self.num_days,
            self.num_substations,
            self.num_points,
        )
    }

    pub fn state(&self) -> MixtureState {
        MixtureState {
            pi: self.pi.clone(),
            clusters: self.clusters.clone(),
        }
    }
}

/// `l_jb`: log-likelihood of all days of substation `j` under cluster `b`.
pub(crate) fn loglik_matrix(problem: &Problem, state: &MixtureState) -> Result<DMatrix<f64>> {
    let j = problem.num_substations();
    let b = state.num_clusters();
    let mut out = DMatrix::zeros(j, b);
    for (k, cl) in state.clusters.iter().enumerate() {
        let scatters = problem.scatters(&cl.beta)?;
        let ll = problem.substation_logliks(&cl.covariance, &scatters)?;
        for (r, v) in ll.into_iter().enumerate() {
            out[(r, k)] = v;
        }
    }
    Ok(out)
}

fn log_weights(pi: &[f64]) -> Vec<f64> {
    pi.iter().map(|p| if *p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect()
}

/// Responsibilities from the log-likelihood matrix and mixing weights.
pub(crate) fn responsibilities(ll: &DMatrix<f64>, pi: &[f64]) -> Result<DMatrix<f64>> {
    let lw = log_weights(pi);
    let mut p = DMatrix::zeros(ll.nrows(), ll.ncols());
    for r in 0..ll.nrows() {
        let a: Vec<f64> = (0..ll.ncols()).map(|b| lw[b] + ll[(r, b)]).collect();
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::Optimizer(format!("substation {} has no finite cluster density", r + 1)));
        }
        let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for (b, v) in e.iter().enumerate() {
            p[(r, b)] = v / s;
        }
    }
    Ok(p)
}

pub(crate) fn observed_from(ll: &DMatrix<f64>, pi: &[f64]) -> f64 {
    let lw = log_weights(pi);
    (0..ll.nrows())
        .map(|r| {
            let a: Vec<f64> = (0..ll.ncols()).map(|b| lw[b] + ll[(r, b)]).collect();
            let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .sum()
}

/// Posterior membership probabilities.
pub fn e_step(
    state: &MixtureState,
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
) -> Result<DMatrix<f64>> {
    let problem = Problem::new(panel, market, config)?;
    responsibilities(&loglik_matrix(&problem, state)?, &state.pi)
}

/// `J x B` matrix of `log f(y_j | z_j = b)` summed over days.
pub fn log_density_matrix(
    state: &MixtureState,
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
) -> Result<DMatrix<f64>> {
    let problem = Problem::new(panel, market, config)?;
    loglik_matrix(&problem, state)
}

/// Observed-data log-likelihood `sum_j log sum_b pi_b f(y_j | b)`.
pub fn observed_log_likelihood(
    state: &MixtureState,
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
) -> Result<f64> {
    let problem = Problem::new(panel, market, config)?;
    Ok(observed_from(&loglik_matrix(&problem, state)?, &state.pi))
}

/// `Q1 = sum_jb p_jb log pi_b` and `Q2 = sum_jb p_jb log f(y_j | b)`.
pub fn q_functions(
    p: &DMatrix<f64>,
    state: &MixtureState,
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
) -> Result<(f64, f64)> {
    let problem = Problem::new(panel, market, config)?;
    let ll = loglik_matrix(&problem, state)?;
    let lw = log_weights(&state.pi);
    let (mut q1, mut q2) = (0.0, 0.0);
    for r in 0..p.nrows() {
        for b in 0..p.ncols() {
            if p[(r, b)] > 0.0 {
                q1 += p[(r, b)] * lw[b];
                q2 += p[(r, b)] * ll[(r, b)];
            }
        }
    }
    Ok((q1, q2))
}

/// Mixing weights: column means of `P`.
pub fn m_step_pi(p: &DMatrix<f64>) -> Vec<f64> {
    let j = p.nrows() as f64;
    (0..p.ncols()).map(|b| p.column(b).sum() / j).collect()
}

fn check_mass(p: &DMatrix<f64>) -> Result<()> {
    for b in 0..p.ncols() {
        let mass = p.column(b).sum();
        if !(mass >= DEGENERATE_MASS) {
            return Err(Error::DegenerateCluster { cluster: b + 1, mass });
        }
    }
    Ok(())
}

fn column(p: &DMatrix<f64>, b: usize) -> Vec<f64> {
    p.column(b).iter().copied().collect()
}

/// Responsibility-weighted GLS coefficients for every cluster.
pub fn m_step_beta(
    p: &DMatrix<f64>,
    covariances: &[CovarianceParams],
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    let problem = Problem::new(panel, market, config)?;
    beta_step(&problem, p, covariances)
}

fn beta_step(problem: &Problem, p: &DMatrix<f64>, covs: &[CovarianceParams]) -> Result<Vec<Vec<f64>>> {
    check_mass(p)?;
    covs.iter()
        .enumerate()
        .map(|(b, cov)| {
            problem
                .gls(Some(cov), &column(p, b))
                .map(|r| r.0)
                .map_err(|e| in_cluster(e, b))
        })
        .collect()
}

/// Quasi-Newton maximization of the weighted covariance objective per cluster.
pub fn m_step_covariance(
    p: &DMatrix<f64>,
    betas: &[Vec<f64>],
    panel: &LoadPanel,
    market: &MarketTable,
    config: &ModelConfig,
    init: &[CovarianceParams],
) -> Result<Vec<CovarianceOptimum>> {
    let problem = Problem::new(panel, market, config)?;
    covariance_step(&problem, p, betas, init, config)
}

fn covariance_step(
    problem: &Problem,
    p: &DMatrix<f64>,
    betas: &[Vec<f64>],
    init: &[CovarianceParams],
    config: &ModelConfig,
) -> Result<Vec<CovarianceOptimum>> {
    check_mass(p)?;
    betas
        .iter()
        .zip(init)
        .enumerate()
        .map(|(b, (beta, cov))| {
            let scatters = problem.scatters(beta)?;
            problem.optimize(&column(p, b), &scatters, cov, &config.optimizer)
        })
        .collect()
}

/// Random partition with more than `min` substations in every cluster.
fn random_partition(rng: &mut ChaCha8Rng, j: usize, clusters: usize, min: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..j).collect();
    order.shuffle(rng);
    let mut part = vec![0; j];
    for (k, &s) in order.iter().enumerate() {
        part[s] = if k < clusters * (min + 1) {
            k % clusters
        } else {
            rng.random_range(0..clusters)
        };
    }
    part
}

fn members(partition: &[usize], b: usize) -> Vec<usize> {
    (0..partition.len()).filter(|&j| partition[j] == b).collect()
}

/// Total squared error of unweighted per-cluster fits; infinite when some
/// cluster is not identifiable.
fn squared_error(problem: &Problem, partition: &[usize], clusters: usize) -> Result<f64> {
    let j = partition.len();
    let mut sse = 0.0;
    for k in 0..clusters {
        let mut w = vec![0.0; j];
        for s in members(partition, k) {
            w[s] = 1.0;
        }
        match problem.gls(None, &w) {
            Ok((beta, _)) => {
                let scat = problem.scatters(&beta)?;
                sse += (0..j).filter(|&s| w[s] > 0.0).map(|s| scat[s].trace()).sum::<f64>();
            }
            Err(e) if e.is_identifiability() => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        }
    }
    Ok(sse)
}

/// Greedy descent over single-substation moves and pairwise swaps while the
/// squared error drops, keeping at least `min` substations per cluster.
fn refine_partition(
    problem: &Problem,
    partition: &mut [usize],
    clusters: usize,
    min: usize,
    mut sse: f64,
) -> Result<f64> {
    let mut sizes = vec![0; clusters];
    for &k in partition.iter() {
        sizes[k] += 1;
    }
    loop {
        let mut improved = false;
        for s in 0..partition.len() {
            for k in 0..clusters {
                let old = partition[s];
                if k == old || sizes[old] <= min {
                    continue;
                }
                partition[s] = k;
                let e = squared_error(problem, partition, clusters)?;
                if e < sse {
                    sse = e;
                    sizes[old] -= 1;
                    sizes[k] += 1;
                    improved = true;
                } else {
                    partition[s] = old;
                }
            }
        }
        for a in 0..partition.len() {
            for b in a + 1..partition.len() {
                if partition[a] == partition[b] {
                    continue;
                }
                partition.swap(a, b);
                let e = squared_error(problem, partition, clusters)?;
                if e < sse {
                    sse = e;
                    improved = true;
                } else {
                    partition.swap(a, b);
                }
            }
        }
        if !improved {
            return Ok(sse);
        }
    }
}

/// Squared error of a hard partition under per-cluster least squares.
pub fn partition_squared_error(
    panel: &LoadPanel,
    market: &MarketTable,
    cfg: &MixtureConfig,
    partition: &[usize],
) -> Result<f64> {
    let problem = Problem::new(panel, market, &cfg.model)?;
    squared_error(&problem, partition, cfg.clusters)
}

/// Randomized initialization: the partition whose per-cluster least-squares
/// fits have the smallest squared error seeds one full fit per cluster.
pub fn init_clusters(panel: &LoadPanel, market: &MarketTable, cfg: &MixtureConfig) -> Result<Initialization> {
    cfg.validate()?;
    check_identifiability(market, Some(cfg.clusters)).into_result()?;
    let j = market.num_substations();
    let c = market.num_types();
    let b = cfg.clusters;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials = Vec::with_capacity(cfg.trials);
    let problem = Problem::new(panel, market, &cfg.model)?;
    for _ in 0..cfg.trials {
        let start = random_partition(&mut rng, j, b, c);
        let mut partition = start.clone();
        let mut sse = squared_error(&problem, &partition, b)?;
        if cfg.refine_init && sse.is_finite() {
            sse = refine_partition(&problem, &mut partition, b, c, sse)?;
        }
        trials.push(InitTrial {
            start,
            partition,
            squared_error: sse,
        });
    }
    let selected = (0..trials.len())
        .min_by(|&a, &b| trials[a].squared_error.total_cmp(&trials[b].squared_error))
        .unwrap_or(0);
    if !trials[selected].squared_error.is_finite() {
        return Err(Error::Identifiability(
            "no random partition gave identifiable per-cluster fits".into(),
        ));
    }
    let state = partition_state(panel, market, cfg, &trials[selected].partition)?;
    Ok(Initialization {
        state,
        trials,
        selected,
    })
}

fn in_cluster(e: Error, k: usize) -> Error {
    match e {
        Error::RankDeficient(msg) => Error::RankDeficient(format!("cluster {}: {msg}", k + 1)),
        other => other,
    }
}

/// Starting parameters from a hard partition: one capped fit per cluster and
/// cluster-size proportions for `pi`. Clusters only need full-rank designs,
/// so exactly `C` substations with distinct markets are allowed.
pub fn partition_state(
    panel: &LoadPanel,
    market: &MarketTable,
    cfg: &MixtureConfig,
    partition: &[usize],
) -> Result<MixtureState> {
    let j = market.num_substations();
    if partition.len() != j || partition.iter().any(|&k| k >= cfg.clusters) {
        return Err(Error::Dimension(format!(
            "partition must label {j} substations with clusters below {}",
            cfg.clusters
        )));
    }
    let model = ModelConfig {
        max_iterations: cfg.init_max_iterations.max(1),
        hessian: false,
        ..cfg.model.clone()
    };
    let mut clusters = Vec::with_capacity(cfg.clusters);
    let mut pi = Vec::with_capacity(cfg.clusters);
    for k in 0..cfg.clusters {
        let idx = members(partition, k);
        if idx.is_empty() {
            return Err(Error::DegenerateCluster { cluster: k + 1, mass: 0.0 });
        }
        let (panel_k, market_k) = (panel.subset(&idx), market.subset(&idx));
        let problem = Problem::new(&panel_k, &market_k, &model)?;
        let weights = vec![1.0; idx.len()];
        let mut beta = problem
            .gls(None, &weights)
            .map_err(|e| in_cluster(e, k))?
            .0;
        let mut covariance = problem.initial_covariance(&beta)?;
        run_alternating(&problem, &weights, &model, &mut beta, &mut covariance).map_err(|e| in_cluster(e, k))?;
        clusters.push(ClusterParams { beta, covariance });
        pi.push(idx.len() as f64 / j as f64);
    }
    Ok(MixtureState { pi, clusters })
}

/// Fits the mixture from a randomized initialization.
pub fn fit_mixture(panel: &LoadPanel, market: &MarketTable, cfg: &MixtureConfig) -> Result<MixtureFitResult> {
    let init = init_clusters(panel, market, cfg)?;
    fit_mixture_from(panel, market, cfg, init.state)
}

/// ECM iterations from a given state.
pub fn fit_mixture_from(
    panel: &LoadPanel,
    market: &MarketTable,
    cfg: &MixtureConfig,
    init: MixtureState,
) -> Result<MixtureFitResult> {
    cfg.validate()?;
    check_identifiability(market, Some(cfg.clusters)).into_result()?;
    if init.num_clusters() != cfg.clusters {
        return Err(Error::Dimension(format!(
            "initial state has {} clusters, configuration asks for {}",
            init.num_clusters(),
            cfg.clusters
        )));
    }
    let problem = Problem::new(panel, market, &cfg.model)?;
    let mut state = init;
    let mut ll = loglik_matrix(&problem, &state)?;
    let mut obs = observed_from(&ll, &state.pi);
    let mut trace = vec![obs];
    let mut converged = false;
    let mut iterations = 0;
    let mut p = responsibilities(&ll, &state.pi)?;
    for r in 1..=cfg.max_iterations {
        iterations = r;
        state.pi = m_step_pi(&p);
        let covs: Vec<CovarianceParams> = state.clusters.iter().map(|c| c.covariance.clone()).collect();
        let betas = beta_step(&problem, &p, &covs)?;
        let opts = covariance_step(&problem, &p, &betas, &covs, &cfg.model)?;
        state.clusters = betas
            .into_iter()
            .zip(opts)
            .map(|(beta, o)| ClusterParams {
                beta,
                covariance: o.params,
            })
            .collect();
        ll = loglik_matrix(&problem, &state)?;
        let new_obs = observed_from(&ll, &state.pi);
        if new_obs < obs - 1e-6 * (1.0 + obs.abs()) {
            warn!("observed log-likelihood decreased by {:.3e}", obs - new_obs);
        }
        trace.push(new_obs);
        debug!("ECM iteration {r}: observed loglik {new_obs:.8}");
        let change = (new_obs - obs).abs();
        obs = new_obs;
        p = responsibilities(&ll, &state.pi)?;
        if change < cfg.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("ECM stopped after {iterations} iterations without converging");
    }
    let membership: Vec<Vec<f64>> = p.row_iter().map(|r| r.iter().copied().collect()).collect();
    let assignment = membership
        .iter()
        .map(|row| {
            let mut best = 0;
            for (b, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = b;
                }
            }
            best
        })
        .collect();
    Ok(MixtureFitResult {
        types: market.types().to_vec(),
        mean: cfg.model.mean.clone(),
        covariance_spec: cfg.model.covariance.clone(),
        covariate_names: cfg.model.covariates.clone(),
        pi: state.pi,
        membership,
        clusters: state.clusters,
        log_likelihood: obs,
        trace,
        assignment,
        converged,
        iterations,
        num_substations: panel.num_substations(),
        num_days: panel.num_days(),
        num_points: panel.num_points(),
    })
}

/// Whether two hard assignments agree up to a relabelling of clusters.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    for (x, y) in a.iter().zip(b) {
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}
