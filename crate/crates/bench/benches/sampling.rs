use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vinpaint_core::sampler::{aggregate, plan_segments, Sampler, SamplingRequest};
use vinpaint_core::training::gen_random_mask;
use vinpaint_core::{DenoiserConfig, Model, Tensor, VideoTensor};

fn agg(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("aggregate");
    for n_prime in [32usize, 128] {
        let plan = plan_segments(n_prime, 16, 4).unwrap();
        let clips: Vec<Tensor> = (0..plan.n()).map(|_| Tensor::randn(&[16, 3, 32, 32], &mut rng)).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n_prime), &n_prime, |b, _| b.iter(|| aggregate(&clips, &plan).unwrap()));
    }
    g.finish();
}

/// One denoising step of the tiny model, windowed vs all frames at once.
fn step(c: &mut Criterion) {
    let model = Model::init(DenoiserConfig::tiny(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("denoise_step_tiny");
    g.sample_size(10);
    for frames in [8usize, 16, 24] {
        let video = VideoTensor::new(Tensor::rand_uniform(&[frames, 3, 32, 32], -1.0, 1.0, &mut rng)).unwrap();
        let masks = gen_random_mask(32, 32, frames, 2).unwrap();
        let mut req = SamplingRequest::new(video, masks, "a red circle moving left");
        req.window = 8;
        let sampler = Sampler::new(&model, req).unwrap();
        let x = Tensor::randn(&[frames, 3, 32, 32], &mut rng);
        let noise = Tensor::zeros(&[frames, 3, 32, 32]);
        g.bench_with_input(BenchmarkId::new("windowed", frames), &frames, |b, _| {
            b.iter(|| sampler.step_windowed(&x, 500, Some(480), &noise).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("direct", frames), &frames, |b, _| {
            b.iter(|| sampler.step_direct(&x, 500, Some(480), &noise).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, agg, step);
criterion_main!(benches);
