use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pairx_bench::synthetic_pair;
use pairx_core::explain::analyze_pair;
use pairx_core::geometry::{estimate_homography, Correspondence};
use pairx_core::lrp::{lrp_backward, masked_pixel_backprop, seed_relevance_from_cosine};
use pairx_core::matching::{decompose, mutual_match, DescriptorMetric, Keypoint};
use pairx_core::stats::binned_bhattacharyya;
use pairx_core::tensor::{conv2d_forward, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = random_tensor(&mut rng, vec![25, 64, 64]);
    let weights = random_tensor(&mut rng, vec![25, 25, 5, 5]);
    let bias = random_tensor(&mut rng, vec![25]);
    c.bench_function("conv2d 25x64x64 k5", |b| {
        b.iter(|| conv2d_forward(black_box(&input), &weights, &bias, 1, 2).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let (model, ta, tb) = synthetic_pair();
    let layer = model.default_tap();
    c.bench_function("forward 128x128", |b| b.iter(|| model.forward(black_box(ta.input())).unwrap()));
    let (seed, _) = seed_relevance_from_cosine(&ta, &tb).unwrap();
    c.bench_function("lrp to default tap", |b| {
        b.iter(|| lrp_backward(&model, &ta, black_box(&seed), layer).unwrap())
    });
    c.bench_function("masked pixel backprop", |b| {
        b.iter(|| masked_pixel_backprop(&model, &ta, layer, black_box(Keypoint::new(7, 9)), 0).unwrap())
    });
    let da = decompose(ta.activation(layer).unwrap(), layer).unwrap();
    let db = decompose(tb.activation(layer).unwrap(), layer).unwrap();
    c.bench_function("mutual match 16x16 grid", |b| {
        b.iter(|| mutual_match(black_box(&da), &db, DescriptorMetric::L2).unwrap())
    });
    c.bench_function("analyze pair", |b| b.iter(|| analyze_pair(&model, &ta, black_box(&tb), layer).unwrap()));
}

fn ransac(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corr: Vec<Correspondence> = (0..60)
        .map(|k| {
            let p = (rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0));
            let q = if k % 4 == 0 {
                (rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0))
            } else {
                (1.1 * p.0 + 0.05 * p.1 + 3.0, -0.04 * p.0 + 0.95 * p.1 - 2.0)
            };
            (p, q)
        })
        .collect();
    c.bench_function("ransac 60 points", |b| {
        b.iter(|| estimate_homography(black_box(&corr), 2.0, 2000, 0).unwrap())
    });
}

fn bhattacharyya(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sample = |shift: f64| -> Vec<(f64, f64)> {
        (0..1000)
            .map(|_| {
                let cos: f64 = rng.gen_range(0.0..1.0);
                (cos, cos + shift + rng.gen_range(-0.2..0.2))
            })
            .collect()
    };
    let correct = sample(0.1);
    let incorrect = sample(0.0);
    c.bench_function("binned bhattacharyya 2x1000", |b| {
        b.iter(|| binned_bhattacharyya(black_box(&correct), &incorrect).unwrap())
    });
}

criterion_group!(benches, conv, model, ransac, bhattacharyya);
criterion_main!(benches);
