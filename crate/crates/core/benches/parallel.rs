use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use graphx::data::{gen_synthetic, SyntheticConfig};
use graphx::graph::{Episode, Phase};
use graphx::harness::{run_gradcheck, GradcheckConfig};
use graphx::par::Execution;
use graphx::pipeline::{forward_episode, EpisodePlan, Model, ModelConfig};

fn forward(c: &mut Criterion) {
    let (ds, _) = gen_synthetic(&SyntheticConfig::small(32, 16, 4), 0).unwrap();
    let model = Model::new(ModelConfig::default(), 1, ds.meta_dim(), 0).unwrap();
    let e = Episode::parse("m0,m1->m2,m3", Phase::Generalize).unwrap();
    let plan = EpisodePlan::new(&ds, &e, model.config()).unwrap();
    let samples: Vec<usize> = (0..ds.n()).collect();
    let mut g = c.benchmark_group("forward_episode");
    for exec in [Execution::Sequential, Execution::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| forward_episode(&model, &ds, &plan, &samples, exec).unwrap())
        });
    }
    g.finish();
}

fn gradcheck(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradcheck");
    g.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let cfg = GradcheckConfig {
            seeds: vec![0],
            components: false,
            exec,
            ..Default::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &cfg, |b, cfg| {
            b.iter(|| run_gradcheck(cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward, gradcheck);
criterion_main!(benches);
