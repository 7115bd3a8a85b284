use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use ano_core::exactmdp::{analyze, TabularMDP, TabularPolicy};
use ano_core::policy::{loss_and_grad, Architecture, LossBatch, LossCoeffs, ParameterVector};
use ano_core::trainer::{compute_gae, GaeConfig, RolloutBatch};
use ano_core::{KernelFamily, ShapingFunctionSpec};

fn kernel_eval(c: &mut Criterion) {
    let ratios: Vec<f64> = (0..1024).map(|i| 0.01 + 3.0 * i as f64 / 1024.0).collect();
    let mut group = c.benchmark_group("kernel");
    for family in [KernelFamily::Ppo, KernelFamily::Spo, KernelFamily::Ano] {
        let spec = ShapingFunctionSpec::new(family, 0.2).unwrap();
        group.bench_function(BenchmarkId::new("value", family.name()), |b| {
            b.iter(|| ratios.iter().map(|&r| spec.value(black_box(r))).sum::<f64>())
        });
        group.bench_function(BenchmarkId::new("slope", family.name()), |b| {
            b.iter(|| ratios.iter().map(|&r| spec.slope(black_box(r)).value).sum::<f64>())
        });
    }
    group.finish();
}

fn loss_batch(arch: Architecture, n: usize, rng: &mut ChaCha8Rng) -> LossBatch {
    LossBatch {
        observations: (0..n).map(|_| (0..arch.obs_dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        actions: (0..n).map(|_| rng.random_range(0..arch.n_actions())).collect(),
        old_log_probs: (0..n).map(|_| -(arch.n_actions() as f64).ln() + rng.random_range(-0.3..0.3)).collect(),
        advantages: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        returns: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn loss_gradient(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("loss_and_grad");
    for (label, arch) in [
        ("tabular_25x4", Architecture::Tabular { obs_dim: 25, n_actions: 4 }),
        ("mlp_4_64x64_2", Architecture::mlp(4, 2)),
    ] {
        let params = ParameterVector::init(arch, &mut rng).unwrap();
        let batch = loss_batch(arch, 128, &mut rng);
        let spec = ShapingFunctionSpec::new(KernelFamily::Ano, 0.2).unwrap();
        group.bench_function(label, |b| {
            b.iter(|| loss_and_grad(black_box(&params), &batch, &spec, LossCoeffs::default()).unwrap())
        });
    }
    group.finish();
}

fn gae(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n_envs, t_len) = (4, 128);
    let n = n_envs * t_len;
    let batch = RolloutBatch {
        n_envs,
        rollout_length: t_len,
        observations: vec![vec![0.0]; n],
        actions: vec![0; n],
        rewards: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        terminated: (0..n).map(|_| rng.random_bool(0.02)).collect(),
        truncated: (0..n).map(|_| rng.random_bool(0.01)).collect(),
        old_log_probs: vec![0.0; n],
        old_values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        next_values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let cfg = GaeConfig::new(0.99, 0.95).unwrap();
    c.bench_function("compute_gae_4x128", |b| b.iter(|| compute_gae(black_box(&batch), cfg).unwrap()));
}

fn exact_analysis(c: &mut Criterion) {
    let mut group = c.benchmark_group("analyze");
    for n_states in [5, 25] {
        let mdp = TabularMDP::random_seeded(n_states, 4, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = TabularPolicy::random(n_states, 4, &mut rng);
        group.bench_function(BenchmarkId::from_parameter(n_states), |b| {
            b.iter(|| analyze(black_box(&mdp), &policy).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernel_eval, loss_gradient, gae, exact_analysis);
criterion_main!(benches);
