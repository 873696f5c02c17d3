//! Per-volume inference at the desk preset: every slice triple through the 2D
//! network versus one pass of the hybrid 3D network. Slicing is done once,
//! outside the measured closure.

use ahnet::infer::{infer_slice_batch, slice_batch};
use ahnet::nets::{build_ahnet, build_mcgcn, NetConfig};
use ahnet::Tensor;
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_volume(c: &mut Criterion) {
    let cfg = NetConfig::desk();
    let g2 = build_mcgcn(&cfg, 0).unwrap();
    let (g3, _) = build_ahnet(&cfg, 1, None).unwrap();
    let dims = [64, 64, 16];
    let vol = Tensor::uniform(&dims, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
    let slices = slice_batch(&vol).unwrap();
    let input = vol.reshape(vec![1, 1, 64, 64, 16]).unwrap();

    let mut g = c.benchmark_group("volume_64x64x16");
    g.sample_size(10);
    g.bench_function("slicewise_2d", |b| {
        b.iter(|| infer_slice_batch(&g2, black_box(&slices), 8).unwrap())
    });
    g.bench_function("hybrid_3d", |b| b.iter(|| g3.infer(black_box(&input)).unwrap()));
    g.finish();
}

criterion_group!(benches, bench_volume);
criterion_main!(benches);
