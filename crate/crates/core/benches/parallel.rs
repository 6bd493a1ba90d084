use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cbsn::losses::{l_total, LossWeights};
use cbsn::metrics::EvalReport;
use cbsn::{exec, CbsnConfig, CbsnParams, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("rayon", true)]
}

fn conv(c: &mut Criterion) {
    let x = random(&[4, 16, 64, 64], 1);
    let k = random(&[16, 16, 3, 3], 2);
    let b = random(&[16], 3);
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    for (name, on) in modes() {
        exec::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (xv, kv, bv) = (tape.param(x.clone()), tape.param(k.clone()), tape.param(b.clone()));
                let y = tape.conv2d(xv, kv, bv, 2, None).unwrap();
                let z = tape.constant(Tensor::zeros(&[4, 16, 64, 64]));
                let loss = tape.mean_sq(y, z).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let params = CbsnParams::<f32>::build(&CbsnConfig::default(), 0).unwrap();
    let x = random(&[4, 3, 64, 64], 4);
    let weights = LossWeights::desk();
    let mut group = c.benchmark_group("l_total_step");
    group.sample_size(10);
    for (name, on) in modes() {
        exec::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            bench.iter(|| l_total(&params, &x, &weights, 3_000, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let items: Vec<_> = (0..8)
        .map(|i| (format!("img_{i}"), random(&[1, 3, 128, 128], 10 + i), random(&[1, 3, 128, 128], 20 + i)))
        .collect();
    let mut group = c.benchmark_group("evaluate");
    for (name, on) in modes() {
        exec::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| EvalReport::evaluate(&items, 2).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, train_step, evaluation);
criterion_main!(benches);
