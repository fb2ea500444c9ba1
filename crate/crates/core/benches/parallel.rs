//! Sequential vs thread-pool execution of one federated round and of a small
//! ablation. Build with `--no-default-features` to see the fallback path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fedcl::data::{generate_dataset, SyntheticConfig};
use fedcl::evaluation::{run_ablation, ProbeConfig};
use fedcl::federation::{init_clients, run_round, ExperimentConfig, Mode, RoundConfig};
use fedcl::parallel::Parallelism;

fn strategies() -> Vec<(&'static str, Parallelism)> {
    let threads = std::thread::available_parallelism().map_or(2, |n| n.get());
    vec![
        ("sequential", Parallelism::sequential()),
        (
            "pool",
            Parallelism::with_threads(threads).expect("thread pool"),
        ),
    ]
}

fn round(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_round");
    group.sample_size(10);
    for data in [SyntheticConfig::default(), SyntheticConfig::ten_clients()] {
        let cfg = ExperimentConfig {
            data,
            round: RoundConfig {
                local_steps: 5,
                ..RoundConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let clients = init_clients(&cfg, generate_dataset(&cfg.data_config()).unwrap()).unwrap();
        for (name, par) in strategies() {
            group.bench_with_input(
                BenchmarkId::new(name, format!("{}_clients", cfg.data.num_clients)),
                &par,
                |b, par| {
                    b.iter_batched(
                        || clients.clone(),
                        |mut cl| run_round(&mut cl, &cfg.round, 1, par).unwrap(),
                        criterion::BatchSize::LargeInput,
                    )
                },
            );
        }
    }
    group.finish();
}

fn ablation(c: &mut Criterion) {
    let mut group = c.benchmark_group("ablation");
    group.sample_size(10);
    let cfg = ExperimentConfig {
        round: RoundConfig {
            rounds: 2,
            local_steps: 5,
            ..RoundConfig::default()
        },
        probe: ProbeConfig {
            budgets: vec![1],
            ..ProbeConfig::default()
        },
        ..ExperimentConfig::default()
    };
    for (name, par) in strategies() {
        group.bench_function(name, |b| {
            b.iter(|| run_ablation(&cfg, &Mode::ALL, &[0, 1], &par).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, round, ablation);
criterion_main!(benches);
