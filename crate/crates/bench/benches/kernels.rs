use criterion::{criterion_group, criterion_main, Criterion};
use tofdc_core::preproc::{self, SparseDepthMap};
use tofdc_core::rng::SplitMix64;
use tofdc_core::scene::{self, DotPattern};
use tofdc_core::tensor::Tensor;
use tofdc_core::kernels::{self, Pad};

fn vga_sparse() -> SparseDepthMap {
    let sc = scene::generate_scene(1, 640, 480).unwrap();
    let pitch = scene::pitch_for_target_count(640, 480, 1239).unwrap();
    scene::subsample(&sc, &DotPattern::new(pitch, 0.15), 2)
}

fn bench_edt_nni(c: &mut Criterion) {
    let d = vga_sparse();
    c.bench_function("edt_640x480", |b| b.iter(|| preproc::edt(&d).unwrap()));
    c.bench_function("nni_640x480", |b| b.iter(|| preproc::nni(&d).unwrap()));
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = SplitMix64::new(3);
    let x = Tensor::new(vec![1, 16, 80, 80], (0..16 * 6400).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
    let w = Tensor::new(vec![16, 16, 3, 3], (0..16 * 16 * 9).map(|_| rng.uniform(-0.2, 0.2)).collect()).unwrap();
    let bias = Tensor::zeros(&[16]);
    c.bench_function("conv3x3_16x80x80", |b| {
        b.iter(|| kernels::conv2d_fwd(&x, &w, &bias, 1, Pad::Same).unwrap())
    });
}

criterion_group!(benches, bench_edt_nni, bench_conv);
criterion_main!(benches);
