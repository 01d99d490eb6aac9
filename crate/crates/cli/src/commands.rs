use std::fs::File;
use std::path::{Path, PathBuf};

use log::info;
use loadgp::clustering::{fit_mixture_from, init_clusters, same_partition};
use loadgp::covariance::variance_functional;
use loadgp::diagnostics::{
    covariance_param_se, fit_bic, fmsre_fit_all, likelihood_ratio_test, relative_residuals, snr_curve,
};
use loadgp::model::{check_identifiability, predict, typical_curve};
use loadgp::simulate::{run_study, StudyOptions, StudyReport};
use loadgp::{
    CovarianceKind, CovarianceSpec, LoadPanel, MeanBasis, MixtureConfig, ModelConfig, Scenario, ScenarioSpec,
};

use crate::config::FileConfig;
use crate::csvio::{
    fmt_f64, ingest, read_json, write_covariates, write_json, write_loads, write_market, write_temperature, Inputs,
};
use crate::documents::*;
use crate::error::{CliError, Result};
use crate::{ClusterArgs, Cli, CompareArgs, DataArgs, DiagnoseArgs, FitArgs, ModelArgs, SimulateArgs};

const DEFAULT_HORIZON: f64 = 24.0;

fn inputs(d: &DataArgs, file: &FileConfig) -> Inputs {
    Inputs {
        loads: d.loads.clone(),
        market: d.market.clone(),
        temperature: d.temperature.clone(),
        locations: d.locations.clone(),
        covariates: d.covariates.clone(),
        horizon: d.horizon.or(file.data.horizon).unwrap_or(DEFAULT_HORIZON),
    }
}

/// Model configuration from flags, then the config file, then defaults.
/// Panels with temperature curves get a typical-surface mean.
pub fn model_config(panel: &LoadPanel, a: &ModelArgs, file: &FileConfig) -> Result<ModelConfig> {
    let m = &file.model;
    let name = a.covariance.clone().or(m.covariance.clone()).unwrap_or_else(|| "homogeneous".into());
    let kind = CovarianceKind::parse(&name)
        .ok_or_else(|| CliError::Usage(format!("unknown covariance structure `{name}`")))?;
    let h = panel.grid().horizon();
    let k = a.time_basis.or(m.time_basis).unwrap_or(12);
    let mean = match panel.temperature_range() {
        Some((lo, hi)) => MeanBasis::surface(k, h, a.temperature_basis.or(m.temperature_basis).unwrap_or(5), lo, hi)?,
        None => MeanBasis::curve(k, h)?,
    };
    let spec = CovarianceSpec::of_kind(kind, h, a.variance_basis.or(m.variance_basis).unwrap_or(6))?;
    let covariates = a
        .use_covariates
        .clone()
        .or(m.covariates.clone())
        .unwrap_or_else(|| panel.covariates().iter().map(|c| c.name.clone()).collect());
    let mut config = ModelConfig::new(mean, spec).with_covariates(covariates);
    if let Some(t) = a.tolerance.or(m.tolerance) {
        config.tolerance = t;
    }
    if let Some(n) = a.max_iterations.or(m.max_iterations) {
        config.max_iterations = n;
    }
    config.hessian = !a.no_hessian && m.hessian.unwrap_or(true);
    config.validate()?;
    Ok(config)
}

fn out(cli: &Cli, name: &str) -> PathBuf {
    cli.output_dir.join(name)
}

pub fn fit(cli: &Cli, file: &FileConfig, a: &FitArgs) -> Result<()> {
    let (panel, market) = ingest(&inputs(&a.data, file))?;
    let config = model_config(&panel, &a.model, file)?;
    let f = loadgp::fit(&panel, &market, &config, None)?;
    info!("fit converged: {}, log-likelihood {:.6}", f.converged, f.log_likelihood);
    let se = covariance_param_se(&f);
    let path = out(cli, "fit.json");
    write_json(&path, &FitDocument::new(f, se))?;
    println!("{}", path.display());
    Ok(())
}

pub fn cluster(cli: &Cli, file: &FileConfig, a: &ClusterArgs) -> Result<()> {
    let (panel, market) = ingest(&inputs(&a.data, file))?;
    let c = &file.cluster;
    let b = a
        .clusters
        .or(c.clusters)
        .ok_or_else(|| CliError::Usage("number of clusters not given".into()))?;
    check_identifiability(&market, Some(b)).into_result()?;
    let mut model = model_config(&panel, &a.model, file)?;
    model.hessian = false;
    let mut cfg = MixtureConfig::new(b, a.trials.or(c.trials).unwrap_or(10), model, cli.seed);
    if let Some(t) = c.tolerance {
        cfg.tolerance = t;
    }
    if let Some(n) = c.max_iterations {
        cfg.max_iterations = n;
    }
    if let Some(n) = c.init_max_iterations {
        cfg.init_max_iterations = n;
    }
    let init = init_clusters(&panel, &market, &cfg)?;
    let sse = init.trials.iter().map(|t| t.squared_error).collect();
    let f = fit_mixture_from(&panel, &market, &cfg, init.state)?;
    let assignment = f.assignment.clone();
    let mut doc = MixtureDocument::new(f, panel.substations(), sse, init.selected);
    if let Some(t) = &a.truth {
        let truth: TruthDocument = read_json(t)?;
        let map: Vec<usize> = truth.cluster_map.iter().map(|b| b.saturating_sub(1)).collect();
        doc.recovery = Some(Recovery {
            recovered: same_partition(&map, &assignment),
            true_clusters: truth.cluster_map,
        });
    }
    let path = out(cli, "mixture.json");
    write_json(&path, &doc)?;
    println!("{}", path.display());
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn simulate(cli: &Cli, file: &FileConfig, a: &SimulateArgs) -> Result<()> {
    let mut spec = ScenarioSpec::preset(a.scenario, cli.seed)?;
    if let Some(r) = a.replicates {
        spec.replicates = r;
    }
    if let Some(d) = a.days {
        spec.days = d;
    }
    if let Some(s) = a.noise_scale {
        spec.noise_scale = s;
    }
    let scenario = Scenario::new(spec.clone())?;
    let dir = out(cli, &format!("scenario_{}", a.scenario));
    for r in 0..spec.replicates {
        let sim = scenario.generate(r as u64)?;
        let rdir = dir.join(format!("replicate_{r:03}"));
        create_dir(&rdir)?;
        write_loads(&rdir.join("loads.csv"), &sim.panel)?;
        write_market(&rdir.join("market.csv"), &sim.market)?;
        if sim.panel.temperature().is_some() {
            write_temperature(
                &rdir.join("temperature.csv"),
                &rdir.join("locations.csv"),
                &sim.panel,
                &sim.locations,
            )?;
        }
        if !sim.panel.covariates().is_empty() {
            write_covariates(&rdir.join("covariates.csv"), &sim.panel)?;
        }
        write_json(
            &rdir.join("truth.json"),
            &TruthDocument {
                schema_version: SCHEMA_VERSION,
                scenario: spec.clone(),
                replicate: r,
                cluster_map: scenario.truth.cluster_map.iter().map(|b| b + 1).collect(),
                locations: sim.locations.clone(),
                parameters: scenario.truth.clone(),
            },
        )?;
    }
    if a.study {
        let mut options = StudyOptions::default();
        if let Some(t) = a.trials {
            options.trials = t;
        }
        if let Some(n) = file.model.max_iterations {
            options.max_iterations = n;
        }
        let report = run_study(&scenario, &options)?;
        write_study_summary(&dir.join("study_summary.csv"), &report)?;
        write_json(
            &dir.join("study.json"),
            &StudyDocument {
                schema_version: SCHEMA_VERSION,
                report,
            },
        )?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

/// One row per fitted model and replicate.
pub fn write_study_summary(path: &Path, report: &StudyReport) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| CliError::Incomplete {
        path: path.into(),
        message: e.to_string(),
    };
    w.write_record([
        "replicate",
        "model",
        "converged",
        "log_likelihood",
        "bic",
        "num_params",
        "fmsre",
        "assignment",
        "lrt_p_value",
        "error",
    ])
    .map_err(csv_err)?;
    for rec in &report.replicates {
        let r = rec.replicate.to_string();
        let p = rec.lrt.as_ref().map(|l| fmt_f64(l.p_value)).unwrap_or_default();
        for f in &rec.fits {
            let model = f.covariance.name();
            let row = match &f.summary {
                Some(s) => [
                    r.clone(),
                    model.into(),
                    s.converged.to_string(),
                    fmt_f64(s.log_likelihood),
                    fmt_f64(s.bic),
                    s.num_params.to_string(),
                    join(&s.fmsre),
                    String::new(),
                    p.clone(),
                    String::new(),
                ],
                None => empty_row(&r, model, f.error.clone()),
            };
            w.write_record(&row).map_err(csv_err)?;
        }
        for m in &rec.mixtures {
            let model = format!("clusters={}", m.clusters);
            let row = match &m.summary {
                Some(s) => [
                    r.clone(),
                    model,
                    s.converged.to_string(),
                    fmt_f64(s.log_likelihood),
                    fmt_f64(s.bic),
                    s.num_params.to_string(),
                    String::new(),
                    s.assignment.iter().map(|b| (b + 1).to_string()).collect::<Vec<_>>().join(";"),
                    String::new(),
                    String::new(),
                ],
                None => empty_row(&r, &model, m.error.clone()),
            };
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn empty_row(r: &str, model: &str, error: Option<String>) -> [String; 10] {
    let mut row: [String; 10] = Default::default();
    row[0] = r.into();
    row[1] = model.into();
    row[2] = "false".into();
    row[9] = error.unwrap_or_default();
    row
}

fn read_fit(path: &Path) -> Result<FitDocument> {
    let doc: FitDocument = read_json(path)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config {
            path: path.into(),
            message: format!("schema version {} is not {SCHEMA_VERSION}", doc.schema_version),
        });
    }
    Ok(doc)
}

pub fn diagnose(cli: &Cli, file: &FileConfig, a: &DiagnoseArgs) -> Result<()> {
    let f = read_fit(&a.fit)?.model;
    let (panel, market) = ingest(&inputs(&a.data, file))?;
    let fitted = predict(&f, &panel, &market)?;
    let observed: Vec<Vec<f64>> = panel.loads().iter().flatten().map(|c| c.iter().copied().collect()).collect();
    let estimates: Vec<Vec<f64>> = fitted.iter().flatten().map(|c| c.iter().copied().collect()).collect();
    let residuals = relative_residuals(&estimates, &observed)?;
    let fmsre = fmsre_fit_all(&f, &panel, &market)?;
    let times = panel.grid().times().to_vec();
    let temperature = panel.temperature().map(|t| {
        let count = (panel.num_substations() * panel.num_days()) as f64;
        (0..times.len())
            .map(|k| t.iter().flatten().map(|c| c[k]).sum::<f64>() / count)
            .collect::<Vec<f64>>()
    });
    let mut types = Vec::new();
    for (c, name) in f.types.iter().enumerate() {
        let curve = typical_curve(&f, c, &times, temperature.as_deref())?;
        let vf = times
            .iter()
            .map(|&t| variance_functional(&f.covariance_spec, &f.covariance, c, t))
            .collect::<loadgp::Result<Vec<_>>>()?;
        let snr = snr_curve(&curve.values, &vf)?;
        types.push(TypeDiagnostics {
            name: name.clone(),
            curve,
            variance_functional: vf,
            snr,
        });
    }
    let doc = DiagnosticsDocument {
        schema_version: SCHEMA_VERSION,
        converged: f.converged,
        bic: fit_bic(&f),
        mean_fmsre: fmsre.iter().sum::<f64>() / fmsre.len() as f64,
        fmsre: panel
            .substations()
            .iter()
            .zip(&fmsre)
            .map(|(s, v)| SubstationFit {
                substation: s.clone(),
                fmsre: *v,
            })
            .collect(),
        times,
        residual_median: residuals.median.clone(),
        temperature,
        types,
        covariance_se: covariance_param_se(&f),
    };
    let path = out(cli, "diagnostics.json");
    write_json(&path, &doc)?;
    if a.residuals_csv {
        let rpath = out(cli, "residuals.csv");
        let file = File::create(&rpath).map_err(|e| CliError::io(&rpath, e))?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| CliError::Incomplete {
            path: rpath.clone(),
            message: e.to_string(),
        };
        w.write_record(["substation", "day", "time", "residual"]).map_err(csv_err)?;
        let mut k = 0;
        for s in panel.substations() {
            for d in panel.days() {
                for (t, time) in panel.grid().times().iter().enumerate() {
                    let v = if residuals.excluded[k][t] {
                        String::new()
                    } else {
                        fmt_f64(residuals.curves[k][t])
                    };
                    w.write_record([s.clone(), d.to_string(), time.to_string(), v]).map_err(csv_err)?;
                }
                k += 1;
            }
        }
        w.flush().map_err(|e| CliError::io(&rpath, e))?;
    }
    println!("{}", path.display());
    Ok(())
}

pub fn compare(cli: &Cli, a: &CompareArgs) -> Result<()> {
    let nested = read_fit(&a.nested)?;
    let larger = read_fit(&a.larger)?;
    let report = likelihood_ratio_test(&nested.model, &larger.model)?;
    println!(
        "L = {:.6}, df = {}, p = {:.6e}, BIC difference = {:.6}",
        report.statistic, report.df, report.p_value, report.bic_difference
    );
    write_json(
        &out(cli, "comparison.json"),
        &ComparisonDocument {
            schema_version: SCHEMA_VERSION,
            nested: a.nested.display().to_string(),
            larger: a.larger.display().to_string(),
            report,
        },
    )
}
