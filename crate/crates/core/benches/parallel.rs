//! Sequential versus rayon execution of the two data-parallel hot paths:
//! per-clip sample gradients of a training batch and multi-sample evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vqa_core::model::{multi_sample_predict, Model, ModelConfig};
use vqa_core::par;
use vqa_core::rng::SplitMix64;
use vqa_core::stde::ClipTokens;
use vqa_core::synthetic::{generate_corpus, SyntheticSpec};

const BATCH: usize = 16;

fn setup() -> (Model, Vec<ClipTokens>) {
    let model = Model::new(ModelConfig::default(), 0).expect("default config is valid");
    let corpus = generate_corpus(&SyntheticSpec::default(), BATCH, 1).expect("default spec is valid");
    let tokens = corpus.iter().map(|c| model.prepare(&c.clip).expect("matching channels")).collect();
    (model, tokens)
}

fn gradient_job(model: &Model) -> impl Fn(usize, &ClipTokens) -> f64 + Sync + Send + '_ {
    move |i, t| {
        let mut rng = SplitMix64::new(7).split(i as u64);
        let sel = model.sample_selection(t.tct.rows(), &mut rng).unwrap();
        model.sample_gradient(t, &sel).unwrap().0
    }
}

fn eval_job(model: &Model, s_m: usize) -> impl Fn(usize, &ClipTokens) -> f64 + Sync + Send + '_ {
    move |i, t| {
        let mut rng = SplitMix64::new(9).split(i as u64);
        multi_sample_predict(model, t, s_m, &mut rng).unwrap().0
    }
}

fn batch_gradients(c: &mut Criterion) {
    let (model, tokens) = setup();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", BATCH), |b| {
        b.iter(|| par::map_sequential(&tokens, gradient_job(&model)))
    });
    #[cfg(feature = "parallel")]
    group.bench_function(BenchmarkId::new("parallel", BATCH), |b| {
        b.iter(|| par::map_parallel(&tokens, gradient_job(&model)))
    });
    group.finish();
}

fn multi_sample_eval(c: &mut Criterion) {
    let (model, tokens) = setup();
    let mut group = c.benchmark_group("multi_sample_eval");
    group.sample_size(10);
    for s_m in [1, 8] {
        group.bench_function(BenchmarkId::new("sequential", s_m), |b| {
            b.iter(|| par::map_sequential(&tokens, eval_job(&model, s_m)))
        });
        #[cfg(feature = "parallel")]
        group.bench_function(BenchmarkId::new("parallel", s_m), |b| {
            b.iter(|| par::map_parallel(&tokens, eval_job(&model, s_m)))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, multi_sample_eval);
criterion_main!(benches);
