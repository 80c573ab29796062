use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use carrynav::data::SegmentBatch;
use carrynav::lin_attn::MemoryState;
use carrynav::model::{ModelConfig, PolicyNet};
use carrynav::selfcheck::random_inputs;
use carrynav::train::batch_gradients;

fn desk() -> (ModelConfig, PolicyNet<f32>) {
    let cfg = ModelConfig::default();
    (cfg, PolicyNet::new(cfg, 0).unwrap())
}

fn inference_step(c: &mut Criterion) {
    let (cfg, net) = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = random_inputs(&cfg, 16, 1, &mut rng);
    let z = net.zero_state();
    let states: Vec<&MemoryState<f32>> = vec![&z; 16];
    c.bench_function("step_16_envs", |b| {
        b.iter(|| net.forward_segment(&states, &inputs, true).unwrap())
    });
}

fn segment_forward(c: &mut Criterion) {
    let (cfg, net) = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = random_inputs(&cfg, 8, 64, &mut rng);
    let z = net.zero_state();
    let states: Vec<&MemoryState<f32>> = vec![&z; 8];
    let mut g = c.benchmark_group("segment");
    g.sample_size(20);
    g.bench_function("forward_8x64", |b| {
        b.iter(|| net.forward_segment(&states, &inputs, true).unwrap())
    });
    let rows = 8 * 64;
    let batch = SegmentBatch {
        epoch: 0,
        index: 0,
        targets: (0..rows).map(|i| (i % 4) as u8).collect(),
        mask: vec![true; rows],
        fresh_stream: vec![true; 8],
        streams: (0..8).map(Some).collect(),
        start_t: vec![Some(0); 8],
        inputs,
    };
    g.bench_function("gradients_8x64", |b| {
        b.iter_batched(
            || vec![net.zero_state(); 8],
            |incoming| batch_gradients(&net, &batch, &incoming).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, inference_step, segment_forward);
criterion_main!(benches);
