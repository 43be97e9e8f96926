use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use toolwear::data::{Channel, ForceChannel};
use toolwear::model::{HierarchicalModel, Parameterization, PriorConfig};
use toolwear::predict::{GridSpec, PosteriorGp, DEFAULT_EXTRAPOLATION_MARGIN};
use toolwear::sampler::{run_chains, SamplerConfig};
use toolwear::simulate::{simulate, SimulationConfig};
use toolwear::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let sim = simulate(&SimulationConfig {
        n_experiments: 12,
        ..SimulationConfig::default()
    })
    .unwrap();
    let model = HierarchicalModel::new(&sim.records, ForceChannel::Ft, PriorConfig::default(), Parameterization::Centered).unwrap();
    let cfg = SamplerConfig {
        n_chains: 4,
        n_warmup: 200,
        n_samples: 200,
        ..SamplerConfig::default()
    };

    let mut g = c.benchmark_group("run_chains");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| run_chains(&model, &cfg, exec).unwrap()));
    }
    g.finish();

    let chains = run_chains(&model, &cfg, Execution::default()).unwrap();
    let ids: Vec<u32> = sim.records.iter().map(|r| r.id).collect();
    let train: Vec<_> = sim.records.iter().map(|r| r.control).collect();
    let post = PosteriorGp::from_slopes(&chains, &ids, &train, Execution::default()).unwrap();
    let grid = GridSpec::covering(&train);
    let mut g = c.benchmark_group("surface");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| post.surface(&grid, Channel::Force(ForceChannel::Ft), DEFAULT_EXTRAPOLATION_MARGIN, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
