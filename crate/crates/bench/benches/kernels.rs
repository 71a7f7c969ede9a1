use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ctbert::lungseg::{close, fill_holes, BinaryImage};
use ctbert::stage1::{Stage1Config, Stage1Model};
use ctbert::stage2::segment_average;
use ctbert::tensor::{ConvGeom, Tensor, Var};

fn pattern(n: usize, seed: u32) -> Vec<f32> {
    (0..n).map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) as f32 / 16_777_216.0 - 0.5).collect()
}

fn conv(c: &mut Criterion) {
    let x = Tensor::from_vec(&[2, 16, 8, 16, 16], pattern(2 * 16 * 8 * 16 * 16, 1));
    let w = Tensor::from_vec(&[16, 16, 3, 3, 3], pattern(16 * 16 * 27, 2));
    let geom = ConvGeom::new([3, 3, 3], [1, 1, 1], [1, 1, 1]);
    c.bench_function("conv3d forward 16→16 8×16×16", |b| {
        b.iter(|| Var::constant(x.clone()).conv3d(&Var::constant(w.clone()), None, geom).value().sum())
    });
    c.bench_function("conv3d forward+backward", |b| {
        b.iter(|| {
            let wv = Var::leaf(w.clone(), 0);
            let y = Var::constant(x.clone()).conv3d(&wv, None, geom).mean_all();
            black_box(y.backward())
        })
    });
    let model = Stage1Model::<f32>::new(Stage1Config::toy(), 0).unwrap();
    let b = &model.config.backbone;
    let input = Tensor::from_vec(
        &[1, 3, b.input_frames, b.input_size, b.input_size],
        pattern(3 * b.input_frames * b.input_size * b.input_size, 3),
    );
    c.bench_function("toy stage-1 window embedding", |bch| bch.iter(|| black_box(model.embed_eval(&input))));
}

fn morphology(c: &mut Criterion) {
    let size = 512;
    let data = (0..size * size)
        .map(|i| {
            let (r, col) = ((i / size) as f64, (i % size) as f64);
            let left = ((r - 256.0) / 110.0).powi(2) + ((col - 160.0) / 70.0).powi(2) <= 1.0;
            let right = ((r - 256.0) / 110.0).powi(2) + ((col - 352.0) / 70.0).powi(2) <= 1.0;
            (left || right) && (i * 7919) % 97 != 0
        })
        .collect();
    let mask = BinaryImage::new(size, size, data);
    c.bench_function("close r=5 on 512²", |b| b.iter(|| black_box(close(&mask, 5))));
    c.bench_function("fill_holes on 512²", |b| b.iter(|| black_box(fill_holes(&mask))));
}

fn segments(c: &mut Criterion) {
    let seq = Tensor::from_vec(&[37, 512], pattern(37 * 512, 4));
    c.bench_function("segment_average 37×512 → 16", |b| b.iter(|| black_box(segment_average(&seq, 16).unwrap())));
}

criterion_group!(benches, conv, morphology, segments);
criterion_main!(benches);
