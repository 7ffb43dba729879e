//! Parallel vs. sequential throughput of the two data-parallel hot loops:
//! the Monte Carlo terminal ensemble and the attention forward pass.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rtfilter_core::attention::{
    rt_rfa_forward, rt_rfa_forward_serial, ProjectionSet, RealSeq, ResidualKind,
};
use rtfilter_core::kernel::FilterHyperParams;
use rtfilter_core::sim::{
    simulate_terminal_ensemble, simulate_terminal_ensemble_serial, DirectionFrame, RtSdeParams,
};
use rtfilter_core::spectral::{ComplexVec, RotationFreqs};

fn sde(d: usize) -> RtSdeParams {
    RtSdeParams::new(
        0.2,
        0.1,
        0.1,
        0.05,
        0.05,
        0.05,
        0.0,
        0.02,
        RotationFreqs::rope(d, 100.0),
    )
    .unwrap()
}

fn bench_monte_carlo(c: &mut Criterion) {
    let d = 3;
    let params = sde(d);
    let mut x0 = ComplexVec::zeros(d);
    x0.as_mut_slice()[0] = 1.0;

    let mut group = c.benchmark_group("terminal_ensemble");
    group.sample_size(10);
    for n_paths in [2_000usize, 10_000] {
        group.bench_with_input(BenchmarkId::new("serial", n_paths), &n_paths, |b, &n| {
            b.iter(|| {
                simulate_terminal_ensemble_serial(
                    &params,
                    &x0,
                    1.0,
                    200,
                    n,
                    7,
                    DirectionFrame::Transported,
                )
                .unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("parallel", n_paths), &n_paths, |b, &n| {
            b.iter(|| {
                simulate_terminal_ensemble(
                    &params,
                    &x0,
                    1.0,
                    200,
                    n,
                    7,
                    DirectionFrame::Transported,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let d = 8;
    let ambient = 2 * d;
    let params = sde(d);
    let hp = FilterHyperParams::defaults(d);
    let proj = ProjectionSet::random(ambient, d, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut group = c.benchmark_group("rt_rfa_forward");
    group.sample_size(10);
    for n in [64usize, 256] {
        let tokens: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..ambient).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let z = RealSeq::from_tokens(tokens).unwrap();
        group.bench_with_input(BenchmarkId::new("serial", n), &z, |b, z| {
            b.iter(|| rt_rfa_forward_serial(z, &proj, &params, &hp, ResidualKind::Tangent).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &z, |b, z| {
            b.iter(|| rt_rfa_forward(z, &proj, &params, &hp, ResidualKind::Tangent).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_monte_carlo, bench_attention);
criterion_main!(benches);
