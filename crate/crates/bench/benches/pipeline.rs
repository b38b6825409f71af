use capenext::harness::{prepare, synth_dataset};
use capenext::pipeline::{decode_keypoints, forward, init_params, ModelConfig};
use capenext::training::{batch_gradients, sample_objective, LossConfig};
use capenext::{Graph, Tensor};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn pipeline(c: &mut Criterion) {
    let model = ModelConfig::default();
    let store = init_params(&model, 7).unwrap();
    let loss = LossConfig::default();
    let ds = synth_dataset(7, 4, 1).unwrap();
    let samples: Vec<_> = ds.samples.iter().map(|s| prepare(s, &model).unwrap()).collect();

    c.bench_function("forward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            black_box(forward(&mut g, &store, &model, &samples[0].input()).unwrap().heatmaps);
        })
    });
    c.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let obj = sample_objective(&mut g, &store, &model, &loss, &samples[0]).unwrap();
            black_box(g.backward(obj.total).unwrap());
        })
    });
    c.bench_function("batch_gradients_4", |b| {
        let batch: Vec<&_> = samples.iter().collect();
        b.iter(|| black_box(batch_gradients(&store, &model, &loss, &batch).unwrap()))
    });

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("decode_16x16x16", |b| {
        b.iter_batched(
            || (Tensor::randn(vec![16, 16, 16], 1.0, &mut rng), Tensor::randn(vec![16, 16, 16, 2], 1.0, &mut rng)),
            |(h, o)| black_box(decode_keypoints(&h, &o).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = pipeline
}
criterion_main!(benches);
