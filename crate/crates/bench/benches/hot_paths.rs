//! Benchmarks for the pieces certification spends its time in: scalar
//! statistics, Gaussian sampling, classifier forward passes, and a full
//! certify call on a small model.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use smoothcert_core::corruption::ImageTensor;
use smoothcert_core::model::{InferenceSession, ModelConfig, ModelParams};
use smoothcert_core::numerics::{
    clopper_pearson_lower, gaussian_sample, std_normal_cdf, std_normal_quantile,
    ConfidenceParams, Probability, RngStream,
};
use smoothcert_core::smoothing::{BaseClassifier, SmoothedClassifier};

fn bench_config() -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        image_channels: 1,
        image_height: 16,
        image_width: 16,
        enc_dim: 32,
        enc_depth: 2,
        enc_heads: 4,
        dec_dim: 16,
        dec_depth: 1,
        dec_heads: 2,
        num_classes: 2,
        use_class_token: true,
    }
}

fn bench_image() -> ImageTensor {
    let mut rng = RngStream::new(7, 0);
    ImageTensor::new(1, 16, 16, (0..256).map(|_| rng.next_uniform()).collect()).unwrap()
}

fn numerics(c: &mut Criterion) {
    c.bench_function("std_normal_cdf", |b| {
        let mut z = -8.0;
        b.iter(|| {
            z = if z > 8.0 { -8.0 } else { z + 0.001 };
            std::hint::black_box(std_normal_cdf(z))
        })
    });
    c.bench_function("std_normal_quantile", |b| {
        let mut p = 1e-6;
        b.iter(|| {
            p = if p > 0.999_999 { 1e-6 } else { p + 1e-4 };
            std::hint::black_box(std_normal_quantile(Probability::new(p).unwrap()).unwrap())
        })
    });
    c.bench_function("clopper_pearson_lower_10k", |b| {
        let alpha = Probability::new(0.001).unwrap();
        b.iter(|| std::hint::black_box(clopper_pearson_lower(9_900, 10_000, alpha).unwrap()))
    });
    c.bench_function("gaussian_sample_1k", |b| {
        let mut rng = RngStream::new(1, 1);
        b.iter(|| std::hint::black_box(gaussian_sample(&mut rng, 1_000, 0.25).unwrap()))
    });
}

fn model_forward(c: &mut Criterion) {
    let cfg = bench_config();
    let params = ModelParams::<f32>::init(&cfg, &mut RngStream::new(3, 0)).unwrap();
    let image = bench_image();
    c.bench_function("classify_forward_16x16", |b| {
        let mut session = InferenceSession::new(&params);
        b.iter(|| std::hint::black_box(session.classify_argmax(&image).unwrap()))
    });
}

struct ModelAdapter<'a> {
    params: &'a ModelParams<f32>,
}

impl BaseClassifier for ModelAdapter<'_> {
    fn num_classes(&self) -> usize {
        self.params.config().num_classes
    }
    fn predict_batch(
        &self,
        images: &[ImageTensor],
    ) -> smoothcert_core::Result<Vec<usize>> {
        let mut session = InferenceSession::new(self.params);
        images.iter().map(|im| session.classify_argmax(im)).collect()
    }
}

fn certify(c: &mut Criterion) {
    let cfg = bench_config();
    let params = ModelParams::<f32>::init(&cfg, &mut RngStream::new(3, 0)).unwrap();
    let image = bench_image();
    c.bench_function("certify_n200", |b| {
        let adapter = ModelAdapter { params: &params };
        let sc = SmoothedClassifier::new(adapter, 0.25).unwrap();
        let cp = ConfidenceParams { alpha: 0.001, n0: 20, n: 200 };
        let mut trial = 0u64;
        b.iter_batched(
            || {
                trial += 1;
                RngStream::derive(9, &[trial])
            },
            |rng| std::hint::black_box(sc.certify(&image, &cp, 64, &rng).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, numerics, model_forward, certify);
criterion_main!(benches);
