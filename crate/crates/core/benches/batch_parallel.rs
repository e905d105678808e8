use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use scorelab_core::attacks::{score_pgd, AttackConfig};
use scorelab_core::diffusion::ScheduleSpec;
use scorelab_core::models::{DenoiserHyper, DenoiserParams, TimeClassifierHyper, TimeClassifierParams};
use scorelab_core::numeric::RandomSource;
use scorelab_core::par;
use scorelab_core::purification::{purify, PurifyConfig};

const BATCH: usize = 16;

fn bench(c: &mut Criterion) {
    let sched = ScheduleSpec::linear(200).build().unwrap();
    let shape = [1, 16, 16];
    let tc = TimeClassifierParams::init(8, shape, TimeClassifierHyper::default(), &sched, 1).unwrap();
    let den = DenoiserParams::init(shape, DenoiserHyper::default(), &sched, 2).unwrap();
    let x = RandomSource::new(3, 0).gaussian(&[BATCH, 1, 16, 16]).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
    let y: Vec<usize> = (0..BATCH).map(|i| i % 8).collect();
    let cfg = AttackConfig::toy(&sched, 4);
    let pcfg = PurifyConfig::for_schedule(&sched, 5);

    let mut g = c.benchmark_group("batch16");
    g.sample_size(10);
    for (mode, sequential) in [("parallel", false), ("sequential", true)] {
        par::set_sequential(sequential);
        g.bench_with_input(BenchmarkId::new("score_pgd", mode), &(), |b, _| {
            b.iter(|| score_pgd(&tc, &sched, &x, &y, &cfg).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("purify", mode), &(), |b, _| {
            b.iter(|| purify(&pcfg, &den, &sched, &x, &mut RandomSource::new(6, 0)).unwrap())
        });
    }
    par::set_sequential(false);
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
