//! Synthetic panels for the eight preset scenarios and a replication harness.

use std::f64::consts::PI;
use std::sync::OnceLock;

use log::info;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::fit_interpolating_spline;
use crate::clustering::{fit_mixture, MixtureConfig};
use crate::covariance::{
    variance_functional, CovMatrix, CovarianceKind, CovarianceParams, CovarianceSpec, GridKernels, TimeGrid,
};
use crate::data::{Covariate, CovariateValues, LoadPanel, MarketTable};
use crate::diagnostics::{fit_bic, fmsre_parameter, likelihood_ratio_test, relative_residuals, ComparisonReport};
use crate::error::{Error, Result};
use crate::model::{fit, typical_curve, MeanBasis, ModelConfig};

const BUILTIN_PRESETS: &str = include_str!("../presets/scenarios.toml");
/// Days of weather generated per location; shorter scenarios use a prefix.
const WEATHER_DAYS: usize = 30;
const MARKET_STREAM: u64 = u64::MAX;

/// Names of the covariates attached to surface scenarios.
pub const DUMMY: &str = "dummy";
pub const HUMIDITY: &str = "humidity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Balance {
    Balanced,
    Unbalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    pub height: f64,
}

/// `level + sum_k height_k exp(-d(t, center_k)^2 / (2 width_k^2))` with `d`
/// the circular distance on the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub level: f64,
    pub bumps: Vec<Bump>,
}

impl Baseline {
    pub fn eval(&self, t: f64, horizon: f64) -> f64 {
        self.level
            + self
                .bumps
                .iter()
                .map(|b| {
                    let d = (t - b.center).rem_euclid(horizon);
                    let d = d.min(horizon - d);
                    b.height * (-0.5 * (d / b.width).powi(2)).exp()
                })
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct SurfacePreset {
    pub locations: Vec<String>,
    pub dummy_substations: Vec<usize>,
    pub gamma: Vec<f64>,
    pub omega: Vec<f64>,
    pub variance_basis: usize,
    pub eta_average: Vec<f64>,
    pub eta_shape: Vec<Vec<f64>>,
    pub baseline: Vec<Baseline>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ClusterPreset {
    pub sigma: Vec<f64>,
    pub omega: Vec<f64>,
    pub baseline: Vec<Baseline>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ClustersPreset {
    pub map: Vec<usize>,
    pub cluster: Vec<ClusterPreset>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct WeatherPreset {
    pub seed: u64,
    pub locations: Vec<String>,
    pub location_offset: Vec<f64>,
    pub temperature_mean: f64,
    pub temperature_day_sd: f64,
    pub temperature_day_ar: f64,
    pub temperature_amplitude: f64,
    pub temperature_peak: f64,
    pub temperature_noise_sd: f64,
    pub humidity_mean: f64,
    pub humidity_amplitude: f64,
    pub humidity_day_sd: f64,
    pub humidity_noise_sd: f64,
    pub humidity_noise_ar: f64,
    pub humidity_range: [f64; 2],
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScenarioPreset {
    pub id: u32,
    pub days: usize,
    pub balance: Balance,
    pub covariance: CovarianceKind,
    pub clusters: usize,
}

/// Contents of a preset file.
#[derive(Debug, Clone, Deserialize)]
pub struct Presets {
    pub version: u32,
    pub horizon: f64,
    pub step_minutes: u32,
    pub replicates: usize,
    pub totals: Vec<u32>,
    pub majority_share: [f64; 2],
    pub balanced_flip: Vec<usize>,
    pub surface: SurfacePreset,
    pub clusters: ClustersPreset,
    pub weather: WeatherPreset,
    pub scenario: Vec<ScenarioPreset>,
}

impl Presets {
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::Scenario(format!("preset file: {e}")))?;
        p.check()?;
        Ok(p)
    }

    /// Presets shipped with the crate.
    pub fn builtin() -> &'static Presets {
        static CELL: OnceLock<Presets> = OnceLock::new();
        CELL.get_or_init(|| Presets::from_toml(BUILTIN_PRESETS).expect("built-in presets are valid"))
    }

    fn check(&self) -> Result<()> {
        let j = self.totals.len();
        let bad = |m: &str| Err(Error::Scenario(m.to_string()));
        if self.version != 1 {
            return bad("unsupported preset version");
        }
        if self.surface.locations.len() != j || self.clusters.map.len() != j {
            return bad("location and cluster maps must cover every substation");
        }
        if self.clusters.map.iter().any(|&b| b == 0 || b > self.clusters.cluster.len()) {
            return bad("cluster map refers to an undefined cluster");
        }
        for row in &self.surface.eta_shape {
            if row.len() != self.surface.variance_basis || row.iter().sum::<f64>().abs() > 1e-10 {
                return bad("variance coefficients must have one zero-sum row per type");
            }
        }
        let [lo, hi] = self.majority_share;
        if !(0.5 <= lo && lo <= hi && hi <= 1.0) {
            return bad("majority share range must lie in [0.5, 1]");
        }
        if self.weather.locations.len() != self.weather.location_offset.len() {
            return bad("one temperature offset per weather location");
        }
        for l in &self.surface.locations {
            if !self.weather.locations.contains(l) {
                return bad("substation mapped to an unknown weather location");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: Option<u32>,
    pub days: usize,
    pub balance: Balance,
    /// Structure of the generating covariance.
    pub covariance: CovarianceKind,
    /// 1 for the temperature-surface design, otherwise the number of true clusters.
    pub clusters: usize,
    pub replicates: usize,
    pub seed: u64,
    pub step_minutes: u32,
    /// Multiplies every true scale.
    pub noise_scale: f64,
}

impl ScenarioSpec {
    pub fn preset(id: u32, seed: u64) -> Result<Self> {
        Self::from_presets(Presets::builtin(), id, seed)
    }

    pub fn from_presets(presets: &Presets, id: u32, seed: u64) -> Result<Self> {
        let p = presets
            .scenario
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Scenario(format!("no preset scenario {id}")))?;
        Ok(Self {
            id: Some(id),
            days: p.days,
            balance: p.balance,
            covariance: p.covariance,
            clusters: p.clusters,
            replicates: presets.replicates,
            seed,
            step_minutes: presets.step_minutes,
            noise_scale: 1.0,
        })
    }

    pub fn grid(&self, horizon: f64) -> Result<TimeGrid> {
        let minutes = horizon * 60.0;
        let n = (minutes / self.step_minutes as f64).round() as usize;
        if self.step_minutes == 0 || (n as f64 * self.step_minutes as f64 - minutes).abs() > 1e-9 {
            return Err(Error::Scenario(format!(
                "step of {} minutes does not divide the day",
                self.step_minutes
            )));
        }
        TimeGrid::uniform(n, horizon)
    }

    pub fn is_surface(&self) -> bool {
        self.clusters == 1
    }
}

/// Splits `total` customers into `(majority, minority)` with the majority
/// share rounded to the nearest integer.
pub fn split_total(total: u32, share: f64) -> Result<(u32, u32)> {
    if total < 2 {
        return Err(Error::Scenario(format!("substation total {total} is below 2")));
    }
    let major = ((share * total as f64).round() as u32).clamp(1, total - 1);
    Ok((major, total - major))
}

/// Two-type markets with majority shares drawn uniformly from `share`.
/// Balanced markets flip the majority type of the `flip` substations (1-based).
pub fn generate_market<R: Rng>(
    totals: &[u32],
    balance: Balance,
    share: [f64; 2],
    flip: &[usize],
    rng: &mut R,
) -> Result<MarketTable> {
    let mut counts = Vec::with_capacity(totals.len());
    for (j, &total) in totals.iter().enumerate() {
        let s = share[0] + (share[1] - share[0]) * rng.random::<f64>();
        let (major, minor) = split_total(total, s)?;
        let flipped = balance == Balance::Balanced && flip.contains(&(j + 1));
        counts.push(if flipped { vec![minor, major] } else { vec![major, minor] });
    }
    MarketTable::from_counts(counts)
}

/// `b(t) (1 - Phi(temp - 1) / 2)`.
pub fn true_typical_surface(baseline: f64, temperature: f64) -> f64 {
    let phi = Normal::standard().cdf(temperature - 1.0);
    baseline * (1.0 - 0.5 * phi)
}

/// Weather curves `[location][day][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weather {
    pub locations: Vec<String>,
    pub temperature: Vec<Vec<Vec<f64>>>,
    pub humidity: Vec<Vec<Vec<f64>>>,
}

impl Weather {
    /// Temperatures are drawn every three hours and interpolated onto the
    /// grid with a cubic spline; humidity is drawn on the grid itself.
    pub fn generate(preset: &WeatherPreset, grid: &TimeGrid, days: usize) -> Result<Self> {
        let total_days = days.max(WEATHER_DAYS);
        let mut rng = ChaCha8Rng::seed_from_u64(preset.seed);
        let mut z = move || -> f64 { rng.sample(StandardNormal) };
        let h = grid.horizon();
        let cycle = |t: f64| (2.0 * PI * (t - preset.temperature_peak) / h).cos();
        let coarse_step = 3.0;
        let per_day = (h / coarse_step).round() as usize;
        let mut temperature = Vec::new();
        let mut humidity = Vec::new();
        for offset in &preset.location_offset {
            let ar = preset.temperature_day_ar;
            let mut day = z() * preset.temperature_day_sd;
            let mut points = Vec::with_capacity((total_days + 1) * per_day);
            for i in 0..=total_days {
                if i > 0 {
                    day = ar * day + (1.0 - ar * ar).sqrt() * preset.temperature_day_sd * z();
                }
                for k in 0..per_day {
                    let t = k as f64 * coarse_step;
                    let v = preset.temperature_mean
                        + offset
                        + day
                        + preset.temperature_amplitude * cycle(t)
                        + preset.temperature_noise_sd * z();
                    points.push((i as f64 * h + t, v));
                }
            }
            let spline = fit_interpolating_spline(&points)?;
            let tl: Vec<Vec<f64>> = (0..days)
                .map(|i| {
                    grid.times()
                        .iter()
                        .map(|&t| spline.eval(i as f64 * h + t))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;

            let har = preset.humidity_noise_ar;
            let mut e = z() * preset.humidity_noise_sd;
            let mut hl = Vec::with_capacity(total_days);
            for _ in 0..total_days {
                let hday = z() * preset.humidity_day_sd;
                let mut hd = Vec::with_capacity(grid.len());
                for &t in grid.times() {
                    e = har * e + (1.0 - har * har).sqrt() * preset.humidity_noise_sd * z();
                    let v = preset.humidity_mean + hday - preset.humidity_amplitude * cycle(t) + e;
                    hd.push(v.clamp(preset.humidity_range[0], preset.humidity_range[1]));
                }
                hl.push(hd);
            }
            temperature.push(tl);
            humidity.push(hl[..days].to_vec());
        }
        Ok(Self {
            locations: preset.locations.clone(),
            temperature,
            humidity,
        })
    }
}

/// Generating values of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParameters {
    pub horizon: f64,
    /// `baselines[b][c]`; a single cluster for surface scenarios.
    pub baselines: Vec<Vec<Baseline>>,
    /// Whether the temperature factor multiplies the baselines.
    pub surface: bool,
    /// Covariate coefficients (surface scenarios only).
    pub gamma: Vec<f64>,
    pub covariance_spec: CovarianceSpec,
    /// Covariance parameters per cluster.
    pub covariances: Vec<CovarianceParams>,
    /// 0-based true cluster of each substation.
    pub cluster_map: Vec<usize>,
}

impl TrueParameters {
    pub fn for_scenario(spec: &ScenarioSpec, presets: &Presets, grid: &TimeGrid) -> Result<Self> {
        let j = presets.totals.len();
        let scale = spec.noise_scale;
        if !(scale >= 0.0) {
            return Err(Error::Scenario("noise scale must be non-negative".into()));
        }
        // a zero scale still needs valid parameters; noise is skipped instead
        let s = if scale > 0.0 { scale } else { 1.0 };
        if spec.is_surface() {
            let sp = &presets.surface;
            let types = sp.baseline.len();
            let covariance_spec = CovarianceSpec::of_kind(spec.covariance, presets.horizon, sp.variance_basis)?;
            let mut params = match spec.covariance {
                CovarianceKind::HomogeneousUniform => {
                    let avg = sp.eta_average.iter().sum::<f64>() / types as f64;
                    CovarianceParams::new(&covariance_spec, vec![avg], sp.omega.clone())?
                }
                _ => CovarianceParams::new(&covariance_spec, sp.eta_average.clone(), sp.omega.clone())?,
            };
            if spec.covariance == CovarianceKind::Complete {
                params.eta = sp.eta_shape.clone();
                // calibrate scales so the grid average of eta_c hits the target
                for c in 0..types {
                    let mut unit = params.clone();
                    unit.sigma[c] = 1.0;
                    let mean = grid
                        .times()
                        .iter()
                        .map(|&t| variance_functional(&covariance_spec, &unit, c, t))
                        .sum::<Result<f64>>()?
                        / grid.len() as f64;
                    params.sigma[c] = sp.eta_average[c] / mean;
                }
            }
            for v in params.sigma.iter_mut() {
                *v *= s;
            }
            params.validate(&covariance_spec, types)?;
            Ok(Self {
                horizon: presets.horizon,
                baselines: vec![sp.baseline.clone()],
                surface: true,
                gamma: sp.gamma.clone(),
                covariance_spec,
                covariances: vec![params],
                cluster_map: vec![0; j],
            })
        } else {
            let cp = &presets.clusters;
            if spec.clusters != cp.cluster.len() {
                return Err(Error::Scenario(format!(
                    "presets define {} clusters, scenario asks for {}",
                    cp.cluster.len(),
                    spec.clusters
                )));
            }
            let covariance_spec = match spec.covariance {
                CovarianceKind::Homogeneous => CovarianceSpec::homogeneous(),
                other => {
                    return Err(Error::Scenario(format!(
                        "cluster presets define {} covariances, not {}",
                        CovarianceKind::Homogeneous.name(),
                        other.name()
                    )))
                }
            };
            let covariances = cp
                .cluster
                .iter()
                .map(|c| {
                    CovarianceParams::new(
                        &covariance_spec,
                        c.sigma.iter().map(|v| v * s).collect(),
                        c.omega.clone(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                horizon: presets.horizon,
                baselines: cp.cluster.iter().map(|c| c.baseline.clone()).collect(),
                surface: false,
                gamma: Vec::new(),
                covariance_spec,
                covariances,
                cluster_map: cp.map.iter().map(|b| b - 1).collect(),
            })
        }
    }

    pub fn num_types(&self) -> usize {
        self.baselines[0].len()
    }

    /// True typical value of type `c` in cluster `b` at `t`.
    pub fn typical(&self, c: usize, b: usize, t: f64, temperature: Option<f64>) -> f64 {
        let base = self.baselines[b][c].eval(t, self.horizon);
        match (self.surface, temperature) {
            (true, Some(v)) => true_typical_surface(base, v),
            _ => base,
        }
    }
}

/// A panel drawn from a scenario together with its noise-free mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: LoadPanel,
    pub market: MarketTable,
    /// Weather location of each substation (surface scenarios).
    pub locations: Vec<String>,
    /// `mean[j][i]`.
    pub mean: Vec<Vec<DVector<f64>>>,
}

/// Everything fixed across the replicates of a scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub grid: TimeGrid,
    pub truth: TrueParameters,
    pub market: MarketTable,
    pub weather: Option<Weather>,
    pub locations: Vec<String>,
    mean: Vec<Vec<DVector<f64>>>,
    covariance: Vec<CovMatrix>,
    panel_base: LoadPanel,
}

impl Scenario {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        Self::with_presets(spec, Presets::builtin())
    }

    pub fn with_presets(spec: ScenarioSpec, presets: &Presets) -> Result<Self> {
        if spec.days == 0 {
            return Err(Error::Scenario("scenario needs at least one day".into()));
        }
        let grid = spec.grid(presets.horizon)?;
        let truth = TrueParameters::for_scenario(&spec, presets, &grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(MARKET_STREAM);
        let market = generate_market(
            &presets.totals,
            spec.balance,
            presets.majority_share,
            &presets.balanced_flip,
            &mut rng,
        )?;
        let j = market.num_substations();
        let n = grid.len();
        let weather = if spec.is_surface() {
            Some(Weather::generate(&presets.weather, &grid, spec.days)?)
        } else {
            None
        };
        let locations = if spec.is_surface() {
            presets.surface.locations.clone()
        } else {
            Vec::new()
        };
        let loc_index: Vec<usize> = locations
            .iter()
            .map(|l| presets.weather.locations.iter().position(|w| w == l).unwrap_or(0))
            .collect();

        let mut mean = Vec::with_capacity(j);
        for s in 0..j {
            let row = market.row(s);
            let b = truth.cluster_map[s];
            let mut days = Vec::with_capacity(spec.days);
            for i in 0..spec.days {
                let mut curve = DVector::zeros(n);
                for (k, &t) in grid.times().iter().enumerate() {
                    let temp = weather.as_ref().map(|w| w.temperature[loc_index[s]][i][k]);
                    let mut v: f64 = (0..truth.num_types())
                        .map(|c| row[c] * truth.typical(c, b, t, temp))
                        .sum();
                    if let Some(w) = &weather {
                        if presets.surface.dummy_substations.contains(&(s + 1)) {
                            v += truth.gamma[0];
                        }
                        v += truth.gamma[1] * w.humidity[loc_index[s]][i][k];
                    }
                    curve[k] = v;
                }
                days.push(curve);
            }
            mean.push(days);
        }

        let covariance = (0..j)
            .map(|s| {
                let kernels = GridKernels::new(
                    &truth.covariance_spec,
                    &truth.covariances[truth.cluster_map[s]],
                    &grid,
                )?;
                CovMatrix::factor(kernels.aggregate(&market.row(s))).map_err(|e| {
                    Error::Scenario(format!("true covariance of substation {} is invalid: {e}", s + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut panel_base = LoadPanel::new(
            grid.clone(),
            market.substations().to_vec(),
            (1..=spec.days as i64).collect(),
            mean.clone(),
        )?;
        if let Some(w) = &weather {
            let per_sub = |src: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
                loc_index.iter().map(|&l| src[l].clone()).collect()
            };
            panel_base = panel_base
                .with_temperature(per_sub(&w.temperature))?
                .with_covariate(Covariate {
                    name: DUMMY.into(),
                    values: CovariateValues::Scalar(
                        (1..=j)
                            .map(|s| f64::from(u8::from(presets.surface.dummy_substations.contains(&s))))
                            .collect(),
                    ),
                })?
                .with_covariate(Covariate {
                    name: HUMIDITY.into(),
                    values: CovariateValues::Functional(per_sub(&w.humidity)),
                })?;
        }

        Ok(Self {
            spec,
            grid,
            truth,
            market,
            weather,
            locations,
            mean,
            covariance,
            panel_base,
        })
    }

    /// Replicate `r`: its own stream of the scenario seed.
    pub fn generate(&self, replicate: u64) -> Result<SimulatedPanel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(replicate);
        self.generate_with(&mut rng)
    }

    pub fn generate_with<R: Rng>(&self, rng: &mut R) -> Result<SimulatedPanel> {
        let n = self.grid.len();
        let noisy = self.spec.noise_scale > 0.0;
        let loads: Vec<Vec<DVector<f64>>> = self
            .mean
            .iter()
            .zip(&self.covariance)
            .map(|(days, cov)| {
                let l = cov.cholesky_l();
                days.iter()
                    .map(|m| {
                        if noisy {
                            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                            m + &l * z
                        } else {
                            m.clone()
                        }
                    })
                    .collect()
            })
            .collect();
        let mut panel = LoadPanel::new(
            self.grid.clone(),
            self.panel_base.substations().to_vec(),
            self.panel_base.days().to_vec(),
            loads,
        )?;
        if let Some(t) = self.panel_base.temperature() {
            panel = panel.with_temperature(t.to_vec())?;
        }
        for c in self.panel_base.covariates() {
            panel = panel.with_covariate(c.clone())?;
        }
        Ok(SimulatedPanel {
            panel,
            market: self.market.clone(),
            locations: self.locations.clone(),
            mean: self.mean.clone(),
        })
    }

    /// True typical surfaces of type `c` along each (location, day)
    /// temperature curve, or the cluster curves for cluster scenarios.
    pub fn true_curves(&self, c: usize, cluster: usize) -> Vec<Vec<f64>> {
        let times = self.grid.times();
        match &self.weather {
            Some(w) => w
                .temperature
                .iter()
                .flat_map(|loc| {
                    loc.iter().map(|day| {
                        times
                            .iter()
                            .zip(day)
                            .map(|(&t, &v)| self.truth.typical(c, cluster, t, Some(v)))
                            .collect()
                    })
                })
                .collect(),
            None => vec![times.iter().map(|&t| self.truth.typical(c, cluster, t, None)).collect()],
        }
    }
}

/// Draws `days` curves per substation from a curve model without covariates:
/// `y_ij = X_j beta + e_ij` with `e_ij ~ N(0, Sigma_j)`.
pub fn sample_curve_panel<R: Rng>(
    market: &MarketTable,
    grid: &TimeGrid,
    config: &ModelConfig,
    beta: &[f64],
    params: &CovarianceParams,
    days: usize,
    rng: &mut R,
) -> Result<LoadPanel> {
    if config.mean.is_surface() || !config.covariates.is_empty() {
        return Err(Error::Data("sampling needs a curve model without covariates".into()));
    }
    let types = market.num_types();
    let q = config.mean.len();
    if beta.len() != q * types {
        return Err(Error::Dimension(format!("beta has {} entries, expected {}", beta.len(), q * types)));
    }
    let design = config.mean.time_basis().design(grid.times())?;
    let kernels = GridKernels::new(&config.covariance, params, grid)?;
    let n = grid.len();
    let loads = (0..market.num_substations())
        .map(|j| {
            let row = market.row(j);
            let mut mu = DVector::zeros(n);
            for (c, m) in row.iter().enumerate() {
                let b = DVector::from_column_slice(&beta[c * q..(c + 1) * q]);
                mu += (&design * b) * *m;
            }
            let l = CovMatrix::factor(kernels.aggregate(&row))?.cholesky_l();
            Ok((0..days)
                .map(|_| {
                    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                    &mu + &l * z
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<DVector<f64>>>>>()?;
    LoadPanel::new(
        grid.clone(),
        market.substations().to_vec(),
        (0..days as i64).collect(),
        loads,
    )
}

/// Fits run in a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub time_basis: usize,
    pub temperature_basis: usize,
    pub variance_basis: usize,
    /// Covariance structures fitted to surface scenarios.
    pub surface_fits: Vec<CovarianceKind>,
    /// Cluster counts fitted to cluster scenarios.
    pub cluster_counts: Vec<usize>,
    pub trials: usize,
    pub max_iterations: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            time_basis: 12,
            temperature_basis: 5,
            variance_basis: 6,
            surface_fits: vec![CovarianceKind::Homogeneous, CovarianceKind::Complete],
            cluster_counts: vec![2, 3],
            trials: 10,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub num_params: usize,
    pub bic: f64,
    pub sigma: Vec<f64>,
    pub omega: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    /// Typical-surface fMSRE per type.
    pub fmsre: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub covariance: CovarianceKind,
    pub summary: Option<FitSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSummary {
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub num_params: usize,
    pub bic: f64,
    /// 0-based cluster of each substation.
    pub assignment: Vec<usize>,
    pub pi: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub clusters: usize,
    pub summary: Option<MixtureSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub fits: Vec<FitRecord>,
    /// Homogeneous against complete fit, when both converged.
    pub lrt: Option<ComparisonReport>,
    pub mixtures: Vec<MixtureRecord>,
}

impl ReplicateRecord {
    pub fn fit(&self, kind: CovarianceKind) -> Option<&FitSummary> {
        self.fits.iter().find(|f| f.covariance == kind)?.summary.as_ref()
    }

    pub fn mixture(&self, clusters: usize) -> Option<&MixtureSummary> {
        self.mixtures.iter().find(|m| m.clusters == clusters)?.summary.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: ScenarioSpec,
    pub options: StudyOptions,
    pub market: Vec<Vec<u32>>,
    pub true_cluster_map: Vec<usize>,
    pub replicates: Vec<ReplicateRecord>,
}

/// Model configuration of a surface fit on `panel`.
pub fn surface_model(panel: &LoadPanel, kind: CovarianceKind, options: &StudyOptions) -> Result<ModelConfig> {
    let (lo, hi) = panel
        .temperature_range()
        .ok_or_else(|| Error::Data("surface fit needs temperature curves".into()))?;
    let h = panel.grid().horizon();
    let mut config = ModelConfig::new(
        MeanBasis::surface(options.time_basis, h, options.temperature_basis, lo, hi)?,
        CovarianceSpec::of_kind(kind, h, options.variance_basis)?,
    )
    .with_covariates([DUMMY, HUMIDITY]);
    config.max_iterations = options.max_iterations;
    Ok(config)
}

/// Model configuration of the per-cluster curve fits.
pub fn cluster_model(horizon: f64, options: &StudyOptions) -> Result<ModelConfig> {
    let mut config = ModelConfig::new(
        MeanBasis::curve(options.time_basis, horizon)?,
        CovarianceSpec::homogeneous(),
    );
    config.max_iterations = options.max_iterations;
    config.hessian = false;
    Ok(config)
}

/// Generates replicate `r` of a scenario and runs the study fits on it.
pub fn run_replicate(scenario: &Scenario, options: &StudyOptions, r: usize) -> Result<ReplicateRecord> {
    let sim = scenario.generate(r as u64)?;
    let mut record = ReplicateRecord {
        replicate: r,
        fits: Vec::new(),
        lrt: None,
        mixtures: Vec::new(),
    };
    if scenario.spec.is_surface() {
        let mut fits = Vec::new();
        for &kind in &options.surface_fits {
            let config = surface_model(&sim.panel, kind, options)?;
            let out = fit(&sim.panel, &sim.market, &config, None);
            let summary = out.as_ref().map_err(|e| e.to_string()).and_then(|f| {
                summarize_surface(scenario, f).map_err(|e| e.to_string())
            });
            match summary {
                Ok(s) => {
                    record.fits.push(FitRecord {
                        covariance: kind,
                        summary: Some(s),
                        error: None,
                    });
                    fits.push((kind, out.ok()));
                }
                Err(e) => record.fits.push(FitRecord {
                    covariance: kind,
                    summary: None,
                    error: Some(e),
                }),
            }
        }
        let find = |k: CovarianceKind| fits.iter().find(|(kind, _)| *kind == k).and_then(|(_, f)| f.as_ref());
        if let (Some(h), Some(c)) = (find(CovarianceKind::Homogeneous), find(CovarianceKind::Complete)) {
            if h.converged && c.converged {
                record.lrt = Some(likelihood_ratio_test(h, c)?);
            }
        }
    } else {
        let model = cluster_model(scenario.grid.horizon(), options)?;
        for &b in &options.cluster_counts {
            let cfg = MixtureConfig::new(b, options.trials, model.clone(), scenario.spec.seed ^ ((r as u64) << 32));
            match fit_mixture(&sim.panel, &sim.market, &cfg) {
                Ok(m) => record.mixtures.push(MixtureRecord {
                    clusters: b,
                    summary: Some(MixtureSummary {
                        converged: m.converged,
                        iterations: m.iterations,
                        log_likelihood: m.log_likelihood,
                        num_params: m.num_params(),
                        bic: m.bic(),
                        assignment: m.assignment.clone(),
                        pi: m.pi.clone(),
                        sigma: m.clusters.iter().map(|c| c.covariance.sigma.clone()).collect(),
                        omega: m.clusters.iter().map(|c| c.covariance.omega.clone()).collect(),
                    }),
                    error: None,
                }),
                Err(e) => record.mixtures.push(MixtureRecord {
                    clusters: b,
                    summary: None,
                    error: Some(e.to_string()),
                }),
            }
        }
    }
    Ok(record)
}

fn summarize_surface(scenario: &Scenario, f: &crate::model::FitResult) -> Result<FitSummary> {
    let w = scenario
        .weather
        .as_ref()
        .ok_or_else(|| Error::Scenario("surface scenario without weather".into()))?;
    let mut fmsre = Vec::new();
    for c in 0..f.num_types() {
        let truth = scenario.true_curves(c, 0);
        let est = w
            .temperature
            .iter()
            .flatten()
            .map(|v| typical_curve(f, c, scenario.grid.times(), Some(v)).map(|t| t.values))
            .collect::<Result<Vec<_>>>()?;
        let r = relative_residuals(&est, &truth)?;
        fmsre.push(fmsre_parameter(&r.curves, scenario.grid.horizon()));
    }
    Ok(FitSummary {
        converged: f.converged,
        iterations: f.iterations,
        log_likelihood: f.log_likelihood,
        num_params: f.num_params(),
        bic: fit_bic(f),
        sigma: f.covariance.sigma.clone(),
        omega: f.covariance.omega.clone(),
        eta: f.covariance.eta.clone(),
        gamma: f.gamma().to_vec(),
        fmsre,
    })
}

/// Generates and fits every replicate of a scenario.
pub fn run_study(scenario: &Scenario, options: &StudyOptions) -> Result<StudyReport> {
    info!(
        "study: scenario {:?}, {} replicates",
        scenario.spec.id, scenario.spec.replicates
    );
    let replicates = (0..scenario.spec.replicates)
        .into_par_iter()
        .map(|r| run_replicate(scenario, options, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyReport {
        scenario: scenario.spec.clone(),
        options: options.clone(),
        market: scenario.market.counts().to_vec(),
        true_cluster_map: scenario.truth.cluster_map.clone(),
        replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_identifiability;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    #[test]
    fn split_rounds_majority_share() {
        assert_eq!(split_total(231, 0.70).unwrap(), (162, 69));
        assert_eq!(split_total(69, 0.95).unwrap(), (66, 3));
        assert_eq!(split_total(2, 0.99).unwrap(), (1, 1));
        assert!(split_total(1, 0.7).is_err());
    }

    #[test]
    fn markets_keep_totals_and_balance() {
        let p = Presets::builtin();
        for balance in [Balance::Unbalanced, Balance::Balanced] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let m = generate_market(&p.totals, balance, p.majority_share, &p.balanced_flip, &mut rng).unwrap();
            let first_major = (0..12).filter(|&j| m.counts()[j][0] > m.counts()[j][1]).count();
            assert_eq!(first_major, if balance == Balance::Balanced { 6 } else { 12 });
            for (row, total) in m.counts().iter().zip(&p.totals) {
                assert_eq!(row.iter().sum::<u32>(), *total);
                let share = row.iter().max().copied().unwrap() as f64 / *total as f64;
                assert!(share >= 0.69 && share <= 0.96, "share {share}");
            }
        }
    }

    #[test]
    fn surface_attenuation() {
        assert_abs_diff_eq!(true_typical_surface(1.0, 1.0), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(true_typical_surface(1.0, 40.0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(true_typical_surface(1.0, 0.0), 0.920672, epsilon = 1e-6);
        assert_abs_diff_eq!(true_typical_surface(2.0, 0.0), 2.0 * 0.920672, epsilon = 2e-6);
    }

    #[test]
    fn zero_noise_returns_mean() {
        let mut spec = ScenarioSpec::preset(1, 3).unwrap();
        spec.noise_scale = 0.0;
        let s = Scenario::new(spec).unwrap();
        let sim = s.generate(0).unwrap();
        for j in 0..12 {
            for i in 0..5 {
                assert_eq!(sim.panel.load(j, i), &sim.mean[j][i]);
            }
        }
    }

    #[test]
    fn replicates_are_deterministic() {
        let s = Scenario::new(ScenarioSpec::preset(5, 17).unwrap()).unwrap();
        let a = s.generate(2).unwrap();
        let b = Scenario::new(ScenarioSpec::preset(5, 17).unwrap()).unwrap().generate(2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.panel.loads(), s.generate(3).unwrap().panel.loads());
    }

    #[test]
    fn cluster_scenarios_use_preset_map() {
        let s = Scenario::new(ScenarioSpec::preset(5, 1).unwrap()).unwrap();
        assert_eq!(s.truth.cluster_map, vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
        assert_eq!(s.truth.covariances.len(), 3);
        assert!(s.weather.is_none());
        assert_eq!(s.grid.len(), 48);
        assert_abs_diff_eq!(s.truth.covariances[2].sigma[1], 5.18, epsilon = 1e-12);
    }

    #[test]
    fn surface_scenarios_carry_covariates() {
        let s = Scenario::new(ScenarioSpec::preset(2, 1).unwrap()).unwrap();
        let sim = s.generate(0).unwrap();
        assert!(sim.panel.temperature().is_some());
        let names: Vec<_> = sim.panel.covariates().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec![DUMMY, HUMIDITY]);
        let w = s.weather.as_ref().unwrap();
        assert_eq!(w.temperature[0].len(), 5);
        for h in w.humidity.iter().flatten().flatten() {
            assert!((30.0..=100.0).contains(h));
        }
    }

    #[test]
    fn weather_is_shared_across_day_counts() {
        let p = Presets::builtin();
        let grid = TimeGrid::uniform(48, 24.0).unwrap();
        let a = Weather::generate(&p.weather, &grid, 5).unwrap();
        let b = Weather::generate(&p.weather, &grid, 30).unwrap();
        for l in 0..3 {
            assert_eq!(a.temperature[l][..], b.temperature[l][..5]);
            assert_eq!(a.humidity[l][..], b.humidity[l][..5]);
        }
    }

    #[test]
    fn every_preset_market_is_identifiable() {
        for id in 1..=8 {
            let s = Scenario::new(ScenarioSpec::preset(id, 2013).unwrap()).unwrap();
            let b = if s.spec.is_surface() { None } else { Some(3) };
            assert!(check_identifiability(&s.market, b).is_ok(), "scenario {id}");
        }
    }

    #[test]
    fn sampled_covariance_matches_model() {
        let market = MarketTable::from_counts(vec![vec![5, 3]]).unwrap();
        let grid = TimeGrid::uniform(6, 24.0).unwrap();
        let spec = CovarianceSpec::homogeneous();
        let config = ModelConfig::new(MeanBasis::curve(4, 24.0).unwrap(), spec.clone());
        let params = CovarianceParams::new(&spec, vec![0.8, 1.3], vec![0.3, 0.6]).unwrap();
        let beta = vec![1.0, 2.0, 1.5, 0.5, 0.2, 0.4, 0.9, 1.1];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let panel = sample_curve_panel(&market, &grid, &config, &beta, &params, 500, &mut rng).unwrap();
        let truth = GridKernels::new(&spec, &params, &grid).unwrap().aggregate(&market.row(0));
        let days = &panel.loads()[0];
        let mean = days.iter().fold(DVector::zeros(6), |a, d| a + d) / 500.0;
        let mut emp = DMatrix::zeros(6, 6);
        for d in days {
            let r = d - &mean;
            emp += &r * r.transpose();
        }
        emp /= 499.0;
        let rel = (&emp - &truth).norm() / truth.norm();
        assert!(rel < 0.1, "relative Frobenius error {rel}");
    }

    #[test]
    fn less_noise_gives_smaller_fmsre() {
        let options = StudyOptions {
            surface_fits: vec![CovarianceKind::Homogeneous],
            ..StudyOptions::default()
        };
        let run = |scale: f64| {
            let mut spec = ScenarioSpec::preset(3, 7).unwrap();
            spec.noise_scale = scale;
            let s = Scenario::new(spec).unwrap();
            run_replicate(&s, &options, 0).unwrap().fit(CovarianceKind::Homogeneous).unwrap().fmsre.clone()
        };
        let (full, low, lower) = (run(1.0), run(0.1), run(0.01));
        for c in 0..2 {
            assert!(lower[c] < low[c] && low[c] < full[c], "type {c}: {} {} {}", full[c], low[c], lower[c]);
        }
    }
}
