use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use diffzsl::diffusion::ScheduleConfig;
use diffzsl::exec::Exec;
use diffzsl::theory::{run_suite, SuiteConfig};
use diffzsl::Rng;

fn modes() -> Vec<(&'static str, Exec)> {
    let mut m = vec![("sequential", Exec::Sequential)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", Exec::Parallel));
    }
    m
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let mut rng = Rng::new(0);
    for n in [64, 256] {
        let a = rng.normal_matrix(n, n);
        let b = rng.normal_matrix(n, n);
        for (name, exec) in modes() {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |bench, _| {
                bench.iter(|| a.matmul_with(&b, exec).unwrap())
            });
        }
    }
    g.finish();
}

fn theory_suite(c: &mut Criterion) {
    let mut g = c.benchmark_group("theory_suite");
    g.sample_size(10);
    let sched = ScheduleConfig::default().build().unwrap();
    let cfg = SuiteConfig {
        mc_samples: 20_000,
        ..SuiteConfig::uniform(16)
    };
    let rng = Rng::new(0);
    for (name, exec) in modes() {
        g.bench_function(name, |bench| {
            bench.iter(|| run_suite(&cfg, &sched, &rng, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, theory_suite);
criterion_main!(benches);
