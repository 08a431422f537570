use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mbsched::fvi::{beta_sweep, exact_vi, FviConfig, FviMdp};
use mbsched::par::Exec;

fn sweep(c: &mut Criterion) {
    let mdp = FviMdp::line_world();
    let oracle = exact_vi(&mdp, 256, 1e-8).unwrap();
    let base = FviConfig {
        sigma: 0.05,
        k: 10,
        grid: 32,
        n_eval: 50,
        ..FviConfig::default()
    };
    let betas = [0.2, 0.5, 1.0];
    let n_reals = [256, 1024];
    let seeds: Vec<u64> = (0..4).collect();

    let mut group = c.benchmark_group("beta_sweep");
    group.sample_size(10);
    for (name, exec) in [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)] {
        group.bench_function(name, |b| {
            b.iter(|| beta_sweep(&mdp, &betas, &n_reals, &base, &oracle, black_box(&seeds), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
