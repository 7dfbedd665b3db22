use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mdcpc::encoder::{Encoder, EncoderConfig};
use mdcpc::graph::Graph;
use mdcpc::kernels::{conv2d_backward, conv2d_forward, ConvGeom, ConvShape};
use mdcpc::par;
use mdcpc::params::ParamStore;
use mdcpc::patching::{extract_patches, PatchGrid};
use mdcpc::data::ImageSample;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, ci, co, hw) = (392, 16, 16, 8);
    let shape = ConvShape::new(&[n, ci, hw, hw], &[co, ci, 3, 3], ConvGeom::same(3)).unwrap();
    let x = random(n * ci * hw * hw, &mut rng);
    let w = random(co * ci * 9, &mut rng);
    let b = random(co, &mut rng);
    let dy = random(n * co * hw * hw, &mut rng);
    let mut group = c.benchmark_group("conv3x3_392x16x8x8");
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("forward", name), |bench| {
            bench.iter(|| conv2d_forward(&shape, &x, &w, Some(&b)))
        });
        group.bench_function(BenchmarkId::new("backward", name), |bench| {
            bench.iter(|| conv2d_backward(&shape, &x, &w, &dy, true))
        });
    }
    par::set_parallel(true);
    group.finish();
}

fn encode_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let encoder = Encoder::build(&EncoderConfig::toy(16, 8, 16), &mut store, "encoder", &mut rng).unwrap();
    let grids: Vec<PatchGrid> = (0..8)
        .map(|i| {
            let px = (0..32 * 32 * 3).map(|_| rng.random()).collect();
            let img = ImageSample::new(format!("b{i}"), 32, 32, px, None).unwrap();
            extract_patches(&img, 8, 4).unwrap()
        })
        .collect();
    let refs: Vec<&PatchGrid> = grids.iter().collect();
    let mut group = c.benchmark_group("encode_batch8_32px");
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("forward_backward", name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let z = encoder.encode_grids(&mut g, &store, &refs).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap()
            })
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, conv, encode_batch);
criterion_main!(benches);
