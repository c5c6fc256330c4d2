use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sd3::analysis::theorem1_sweep;
use sd3::density::{standard_normal, Cvae, CvaeConfig};
use sd3::parallel::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn elbo_all_skills(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cvae = Cvae::new(CvaeConfig::default(), &mut rng).unwrap();
    let states = standard_normal(256, 2, &mut rng);
    let noise = standard_normal(256 * cvae.config.n_skills, cvae.config.latent_dim, &mut rng);
    let mut group = c.benchmark_group("elbo_all_skills");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| cvae.elbo_all_skills(&states, &noise, exec).unwrap())
        });
    }
    group.finish();
}

fn sandwich_sweep(c: &mut Criterion) {
    let lambdas = [1.0, 1.5, 2.0, 3.0];
    let mut group = c.benchmark_group("theorem1_sweep");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| theorem1_sweep(1000, &lambdas, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, elbo_all_skills, sandwich_sweep);
criterion_main!(benches);
