use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use latentfoil::diffusion::{backprop_through_sampler, generate, strided_steps};
use latentfoil::flow::{adjoint_gradient, solve_fixed_point, AdjointOptions};
use latentfoil_bench::{denoiser, parameterization, system, target_cp, D};

fn panel_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("panel_solve");
    for n in [100, 200] {
        let param = parameterization(n);
        let sys = system(&param, 4.0);
        g.bench_with_input(BenchmarkId::new("direct", n), &sys, |b, s| {
            b.iter(|| s.solve_direct().unwrap())
        });
        g.bench_with_input(BenchmarkId::new("fixed_point", n), &sys, |b, s| {
            b.iter(|| solve_fixed_point(s, None, 1e-10, 20_000).unwrap())
        });
    }
    g.finish();
}

fn adjoint(c: &mut Criterion) {
    let n = 200;
    let param = parameterization(n);
    let spec = target_cp(n, 2.31);
    let delta = vec![0.0; D];
    let sys = system(&param, 2.31);
    let u = sys.solve_direct().unwrap();
    c.bench_function("adjoint_gradient/200", |b| {
        b.iter(|| adjoint_gradient(&spec, &param, black_box(&delta), &sys, &u, AdjointOptions::default()).unwrap())
    });
}

fn denoiser_forward(c: &mut Criterion) {
    let (w, _) = denoiser();
    let x = vec![0.3; D];
    c.bench_function("denoiser_forward", |b| b.iter(|| w.forward(black_box(&x), 500).unwrap()));
}

fn ddim(c: &mut Criterion) {
    let (w, s) = denoiser();
    let steps = strided_steps(s.timesteps(), 50).unwrap();
    let z = vec![0.1; D];
    let xbar = vec![1.0; D];
    let mut g = c.benchmark_group("ddim_50");
    g.sample_size(10);
    g.bench_function("sample", |b| b.iter(|| generate(&w, black_box(&z), &s, Some(&steps)).unwrap()));
    g.bench_function("vjp", |b| {
        b.iter(|| backprop_through_sampler(&w, black_box(&z), &s, &steps, &xbar).unwrap())
    });
    g.finish();
}

criterion_group!(benches, panel_solve, adjoint, denoiser_forward, ddim);
criterion_main!(benches);
