use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DMatrix;

use convmix::gls::GlsTerms;
use convmix::mcem::{sample_w_conditional, SamplerOptions, Theta};
use convmix::quadrature::{integrated_loglik, QuadratureOptions};
use convmix::rng::stream;
use convmix::{
    fit, generate_scenario, ConvolutionKind, ConvolutionParams, CovSpec, CovStructure, Fitter, McemConfig, ModelSpec,
    ResidualMode, Scenario, ScenarioSpec,
};

fn densities(c: &mut Criterion) {
    let p = ConvolutionParams::new(1.3, 0.8).unwrap();
    let ys: Vec<f64> = (0..1000).map(|i| -6.0 + 12.0 * i as f64 / 999.0).collect();
    let mut g = c.benchmark_group("density_1000_points");
    for kind in ConvolutionKind::ALL {
        g.bench_function(kind.to_string(), |b| {
            b.iter(|| ys.iter().map(|&y| kind.ln_pdf(black_box(y), &p)).sum::<f64>())
        });
    }
    g.finish();
}

fn likelihood(c: &mut Criterion) {
    let sc = ScenarioSpec::new(Scenario::Nl);
    let data = generate_scenario(&sc, 0).unwrap();
    let spec = ModelSpec::for_data(ConvolutionKind::NL, CovStructure::GeneralSpd, ResidualMode::EstimatedScale, &data);
    let opts = QuadratureOptions::default();
    c.bench_function("nl_integrated_loglik_m100_q2", |b| {
        b.iter(|| integrated_loglik(&data, &spec, &sc.beta, &sc.sigma1, sc.sigma2, &opts).unwrap())
    });

    let mut terms = GlsTerms::new(2, 2);
    for cl in data.clusters() {
        terms.push(cl, &vec![1.0; cl.len()], 1.0, 1.0);
    }
    let bmat = DMatrix::from_row_slice(2, 2, &[0.8, 0.0, 0.3, 0.6]);
    c.bench_function("gls_accumulate_m100_q2", |b| b.iter(|| terms.accumulate(black_box(&bmat)).unwrap()));
}

fn e_step(c: &mut Criterion) {
    let sc = ScenarioSpec::new(Scenario::Ll);
    let data = generate_scenario(&sc, 0).unwrap();
    let cov = CovSpec::new(CovStructure::GeneralSpd, 2).unwrap();
    let theta = Theta {
        beta: sc.beta.clone(),
        xi: sc.true_xi().unwrap().iter().copied().collect(),
        sigma2: sc.sigma2,
    };
    let cluster = &data.clusters()[0];
    c.bench_function("ll_sample_w_100_draws", |b| {
        b.iter_batched(
            || stream(1, &[]),
            |mut rng| {
                sample_w_conditional(ConvolutionKind::LL, cluster, &theta, &cov, 100, &SamplerOptions::default(), None, &mut rng)
                    .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn fits(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_m100");
    g.sample_size(10);
    for s in [Scenario::Nn, Scenario::Nl, Scenario::Ll] {
        let data = generate_scenario(&ScenarioSpec::new(s), 0).unwrap();
        let spec = ModelSpec::for_data(s.kind(), CovStructure::GeneralSpd, ResidualMode::EstimatedScale, &data);
        let fitter = Fitter::Mcem(McemConfig::default());
        g.bench_function(s.kind().to_string(), |b| b.iter(|| fit(&data, &spec, &fitter).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, densities, likelihood, e_step, fits);
criterion_main!(benches);
