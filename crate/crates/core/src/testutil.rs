//! Small synthetic instances shared by the unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::covariance::{CovarianceParams, CovarianceSpec, TimeGrid};
use crate::data::{LoadPanel, MarketTable};
use crate::model::{MeanBasis, ModelConfig};
use crate::simulate::sample_curve_panel;

pub(crate) struct Instance {
    pub panel: LoadPanel,
    pub market: MarketTable,
    pub config: ModelConfig,
    pub beta: Vec<f64>,
    pub params: CovarianceParams,
}

pub(crate) fn smooth_beta(k: usize, types: usize) -> Vec<f64> {
    (0..types)
        .flat_map(|c| (0..k).map(move |i| 1.0 + 0.5 * c as f64 + 0.3 * (i as f64 + c as f64).sin()))
        .collect()
}

/// Homogeneous curve model on a 24 hour grid.
pub(crate) fn curve_instance(
    counts: Vec<Vec<u32>>,
    k: usize,
    n: usize,
    days: usize,
    sigma: Vec<f64>,
    omega: Vec<f64>,
    seed: u64,
) -> Instance {
    let market = MarketTable::from_counts(counts).unwrap();
    let grid = TimeGrid::uniform(n, 24.0).unwrap();
    let spec = CovarianceSpec::homogeneous();
    let mut config = ModelConfig::new(MeanBasis::curve(k, 24.0).unwrap(), spec.clone());
    config.hessian = false;
    let beta = smooth_beta(k, market.num_types());
    let params = CovarianceParams::new(&spec, sigma, omega).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let panel = sample_curve_panel(&market, &grid, &config, &beta, &params, days, &mut rng).unwrap();
    Instance {
        panel,
        market,
        config,
        beta,
        params,
    }
}

/// Substations drawn from per-cluster curve models; `betas[b]` and
/// `params[b]` describe cluster `b`.
pub(crate) fn mixture_instance(
    counts: Vec<Vec<u32>>,
    assignment: &[usize],
    k: usize,
    n: usize,
    days: usize,
    betas: &[Vec<f64>],
    params: &[CovarianceParams],
    seed: u64,
) -> (LoadPanel, MarketTable, ModelConfig) {
    let market = MarketTable::from_counts(counts).unwrap();
    let grid = TimeGrid::uniform(n, 24.0).unwrap();
    let mut config = ModelConfig::new(MeanBasis::curve(k, 24.0).unwrap(), CovarianceSpec::homogeneous());
    config.hessian = false;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loads = assignment
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let one = market.subset(&[j]);
            let p = sample_curve_panel(&one, &grid, &config, &betas[b], &params[b], days, &mut rng).unwrap();
            p.loads()[0].clone()
        })
        .collect();
    let panel = LoadPanel::new(grid, market.substations().to_vec(), (0..days as i64).collect(), loads).unwrap();
    (panel, market, config)
}
