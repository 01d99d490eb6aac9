use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use loadgp::basis::{make_uniform_knots, CUBIC};
use loadgp::clustering::{e_step, MixtureState};
use loadgp::model::{log_likelihood, wls_beta_update};
use loadgp::simulate::{cluster_model, surface_model, StudyOptions};
use loadgp::{fit, fit_mixture, CovarianceKind, MixtureConfig, Scenario, ScenarioSpec, TensorBasisSpec};

fn basis(c: &mut Criterion) {
    let mut group = c.benchmark_group("basis");
    for k in [6, 12, 24] {
        let knots = make_uniform_knots(0.0, 24.0, k, CUBIC).unwrap();
        let mut out = vec![0.0; k];
        group.bench_with_input(BenchmarkId::new("bspline_grid", k), &k, |b, _| {
            b.iter(|| {
                for i in 0..48 {
                    knots.eval_into(black_box(i as f64 * 0.5), &mut out).unwrap();
                }
            })
        });
    }
    let tensor = TensorBasisSpec::new(
        make_uniform_knots(0.0, 24.0, 12, CUBIC).unwrap(),
        make_uniform_knots(-5.0, 20.0, 5, CUBIC).unwrap(),
    )
    .unwrap();
    let mut out = vec![0.0; tensor.len()];
    group.bench_function("tensor_grid", |b| {
        b.iter(|| {
            for i in 0..48 {
                tensor.eval_into(black_box(i as f64 * 0.5), black_box(7.5), &mut out).unwrap();
            }
        })
    });
    group.finish();
}

fn likelihood(c: &mut Criterion) {
    let options = StudyOptions::default();
    let scenario = Scenario::new(ScenarioSpec::preset(1, 1).unwrap()).unwrap();
    let sim = scenario.generate(0).unwrap();
    let mut group = c.benchmark_group("likelihood");
    for kind in [CovarianceKind::Homogeneous, CovarianceKind::Complete] {
        let mut config = surface_model(&sim.panel, kind, &options).unwrap();
        config.hessian = false;
        let f = fit(&sim.panel, &sim.market, &config, None).unwrap();
        group.bench_function(BenchmarkId::new("loglik", format!("{kind:?}")), |b| {
            b.iter(|| log_likelihood(black_box(&f.beta), &f.covariance, &sim.panel, &sim.market, &config).unwrap())
        });
        group.bench_function(BenchmarkId::new("gls", format!("{kind:?}")), |b| {
            b.iter(|| wls_beta_update(black_box(&f.covariance), &sim.panel, &sim.market, &config).unwrap())
        });
    }
    group.finish();
}

fn estep(c: &mut Criterion) {
    let options = StudyOptions::default();
    let scenario = Scenario::new(ScenarioSpec::preset(5, 1).unwrap()).unwrap();
    let sim = scenario.generate(0).unwrap();
    let model = cluster_model(scenario.grid.horizon(), &options).unwrap();
    let m = fit_mixture(&sim.panel, &sim.market, &MixtureConfig::new(3, 2, model.clone(), 1)).unwrap();
    let state = MixtureState {
        pi: m.pi.clone(),
        clusters: m.clusters.clone(),
    };
    c.bench_function("e_step", |b| {
        b.iter(|| e_step(black_box(&state), &sim.panel, &sim.market, &model).unwrap())
    });
}

criterion_group!(benches, basis, likelihood, estep);
criterion_main!(benches);
