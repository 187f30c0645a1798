use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use isaclab::optimizer::{bilevel_solve, exhaustive_oracle, flat_fading_solve, DualConfig, FlatProblem};
use isaclab::sensing::Chain;
use isaclab_bench::{builtin_classes, fading_problem, flat_classes};

fn flat(c: &mut Criterion) {
    let mut group = c.benchmark_group("flat_fading_solve");
    for chain in [Chain::Mf, Chain::Rf] {
        let problem = FlatProblem::new(chain, flat_classes(0.03), 3.5, 6.0);
        group.bench_with_input(BenchmarkId::from_parameter(chain), &problem, |b, p| {
            b.iter(|| flat_fading_solve(black_box(p)).unwrap())
        });
    }
    group.finish();
}

fn bilevel(c: &mut Criterion) {
    let classes = builtin_classes();
    let mut group = c.benchmark_group("bilevel_solve");
    group.sample_size(20);
    for n in [16usize, 64, 256] {
        let problem = fading_problem(Chain::Mf, n, &classes, 3.5);
        group.bench_with_input(BenchmarkId::from_parameter(n), &problem, |b, p| {
            b.iter(|| bilevel_solve(black_box(p), &DualConfig::default()).unwrap())
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let classes = builtin_classes();
    let mut group = c.benchmark_group("exhaustive_oracle");
    group.sample_size(10);
    for n in [6usize, 8] {
        let problem = fading_problem(Chain::Mf, n, &classes[..2], 3.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &problem, |b, p| {
            b.iter(|| exhaustive_oracle(black_box(p)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, flat, bilevel, oracle);
criterion_main!(benches);
