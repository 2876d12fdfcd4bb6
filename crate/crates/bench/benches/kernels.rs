//! Benchmarks for the hot kernels: Green table construction, tree
//! sampling, and the energy minimizer.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use bcap::capacity::energy_minimize;
use bcap::green::{build_green_table, default_table, GreenEval};
use bcap::gwtree::{TreeSampler, TruncationPolicy};
use bcap::lattice::{ball, LatticePoint, SiteSet};
use bcap::offspring::OffspringLaw;
use bcap::rng::stream;

fn bench_green_table(c: &mut Criterion) {
    c.bench_function("green_table_d6_r6_n120", |b| {
        b.iter(|| build_green_table(black_box(6), 6, 120, 1e-4).unwrap())
    });
}

fn bench_tree_sampling(c: &mut Criterion) {
    let sampler = TreeSampler::new(6, OffspringLaw::binary()).unwrap();
    let policy = TruncationPolicy::new(16.0, 10_000, 100_000).unwrap();
    let mut rng = stream(7, &[0x77]);
    let targets = SiteSet::from_points(6, &ball(6, &LatticePoint::origin(), 2.0));
    c.bench_function("invariant_tree_d6_r16", |b| {
        b.iter(|| {
            let sample =
                sampler.sample_invariant_tree(LatticePoint::origin(), &targets, &policy, &mut rng);
            black_box(sample.past_sites.len())
        })
    });
}

fn bench_energy(c: &mut Criterion) {
    let green = GreenEval::new(default_table(6).unwrap()).unwrap();
    let a = SiteSet::from_points(6, &ball(6, &LatticePoint::origin(), 3.0));
    c.bench_function("energy_minimize_d6_ball3", |b| {
        b.iter(|| {
            let res = energy_minimize(black_box(&a), &green, 1e-6, 10_000).unwrap();
            black_box(res.energy)
        })
    });
}

criterion_group!(benches, bench_green_table, bench_tree_sampling, bench_energy);
criterion_main!(benches);
