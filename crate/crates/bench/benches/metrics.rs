use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use cuedgen_bench::utterance;
use cuedgen_core::metrics::{fgd, gad, mad, maje, pck};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frame_metrics(c: &mut Criterion) {
    let a = utterance(1, 0.0).motion;
    let b = utterance(2, 0.0).motion;
    let mut group = c.benchmark_group("frame");
    group.bench_function("pck", |bch| bch.iter(|| pck(black_box(&a), black_box(&b), 10.0).unwrap()));
    group.bench_function("maje", |bch| bch.iter(|| maje(black_box(&a), black_box(&b)).unwrap()));
    group.bench_function("mad", |bch| bch.iter(|| mad(black_box(&a), black_box(&b), 30.0).unwrap()));
    group.finish();
}

fn gad_alignment(c: &mut Criterion) {
    let s = utterance(3, 0.2);
    c.bench_function("gad", |b| {
        b.iter(|| gad(black_box(&s.gesture_segments), black_box(&s.audio_segments), 0.3).unwrap())
    });
}

fn fgd_dims(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("fgd");
    for dim in [16, 64, 128] {
        let mut cloud = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
        };
        let (a, b) = (cloud(256), cloud(256));
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |bch, _| {
            bch.iter(|| fgd(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, frame_metrics, gad_alignment, fgd_dims);
criterion_main!(benches);
