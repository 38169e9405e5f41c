use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use homogflow::avg::mc_averaged_alpha;
use homogflow::coeffs::families;
use homogflow::harness::{run_convergence, ExperimentConfig, Study};
use homogflow::Execution;

const STUDY: &str = r#"
kind = "converge"
seed = 1

[mesh]
dim = 1
n = 128
cell_n = 64

[time]
t_end = 0.1
dt = 0.00625

[study]
epsilons = [0.2, 0.1]
replicas = 4

[coefficients]
beta = [[1.0, 0.0], [0.0, 1.0]]
a1 = { kind = "isotropic", dim = 1, profile = { mean = 2.0, terms = [{ amp = 1.0, k = [1] }] } }
a2 = { kind = "identity", dim = 1 }
alpha = { kind = "smooth_mixed", c0 = 2.0, c1 = 1.0, p = { mean = 1.0, terms = [{ amp = 0.5, k = [1] }] }, s = { kind = "tanh", a1 = 1.0, a2 = -1.0 } }

[noise]
sigma = [0.5, 0.5]
modes = 16

[initial]
u1 = { kind = "sine_product", amp = 1.0, modes = [1] }
"#;

const PATHS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn replicas(c: &mut Criterion) {
    let study = Study::new(ExperimentConfig::from_toml(STUDY).unwrap()).unwrap();
    let mut group = c.benchmark_group("convergence_replicas");
    group.sample_size(10);
    for (name, exec) in PATHS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_convergence(&study, exec, true).unwrap())
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let alpha = families::mixed_alpha();
    let mut group = c.benchmark_group("averaged_alpha_mc");
    for (name, exec) in PATHS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| mc_averaged_alpha(&alpha, 1, 16, [0.3, -0.4], [0.5, 0.2], 50_000, 9, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replicas, monte_carlo);
criterion_main!(benches);
