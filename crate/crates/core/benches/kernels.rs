//! Hot kernels under a one-thread rayon pool and under the default pool.
//!
//! Build with `--no-default-features` to time the sequential fallback; the
//! pools then make no difference.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ensrep_core::metrics::{energy_distance_multi, DayMetrics, SinkhornConfig};
use ensrep_core::numerics::{Rng, Tensor};
use ensrep_core::par;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    let n = all.current_num_threads();
    vec![("1-thread".into(), one), (format!("{n}-thread"), all)]
}

fn kernels(c: &mut Criterion) {
    let mut rng = Rng::new(7);
    let a = rng.normal_tensor(256, 256);
    let b = rng.normal_tensor(256, 256);
    let x = rng.normal_tensor(50, 256);
    let y = rng.normal_tensor(50, 256);
    let days: Vec<(Tensor, Tensor)> = (0..8)
        .map(|_| (rng.normal_tensor(20, 256), rng.normal_tensor(20, 256)))
        .collect();
    let sinkhorn = SinkhornConfig::evaluation();

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("matmul_256", &name), &pool, |bch, p| {
            bch.iter(|| p.install(|| a.matmul(&b).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("energy_50x256", &name), &pool, |bch, p| {
            bch.iter(|| p.install(|| energy_distance_multi(&x, &y).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("evaluate_8_days", &name), &pool, |bch, p| {
            bch.iter(|| {
                p.install(|| {
                    par::map_range(days.len(), |t| {
                        DayMetrics::compute(t.to_string(), &days[t].0, &days[t].1, &sinkhorn).unwrap()
                    })
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
