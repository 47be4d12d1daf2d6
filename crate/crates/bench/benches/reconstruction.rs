use criterion::{criterion_group, criterion_main, Criterion};
use lensless_core::forward::caustic_psf;
use lensless_core::training::procedural_sources;
use lensless_core::unrolled::{reconstruct, LearnedTransform};
use lensless_core::{
    admm_solve, forward_measure, normalize_psf, AdmmParams, Dims, LeAdmmTheta, Measurement, NoiseModel,
    PrecomputedOperators, Psf, Scene, UnrolledModel, Variant,
};
use std::hint::black_box;

fn instance(side: usize) -> (Psf, Measurement) {
    let sensor = Dims::square(side).unwrap();
    let psf = normalize_psf(&caustic_psf(sensor, 0)).unwrap();
    let gt = procedural_sources(1, sensor, 0).remove(0);
    let b = forward_measure(&psf, &Scene::embed(&gt).unwrap(), &NoiseModel::gaussian(0.02, 0)).unwrap();
    (psf, b)
}

fn solvers(c: &mut Criterion) {
    let (psf, b) = instance(96);
    let ops = PrecomputedOperators::new(&psf).unwrap();
    let mut group = c.benchmark_group("96x96");
    group.sample_size(10);
    group.bench_function("admm 100 iterations", |bench| {
        bench.iter(|| admm_solve(&psf, black_box(&b), &AdmmParams::bounded(100), None).unwrap())
    });
    let plain = UnrolledModel::initial(Variant::LeAdmm, 5);
    group.bench_function("le-admm 5 layers", |bench| bench.iter(|| reconstruct(&plain, &ops, black_box(&b)).unwrap()));
    let star = UnrolledModel::leadmm_star(LeAdmmTheta::initial(5), LearnedTransform::random(1, 0.1));
    group.bench_function("le-admm* 5 layers", |bench| bench.iter(|| reconstruct(&star, &ops, black_box(&b)).unwrap()));
    group.finish();
}

fn operators(c: &mut Criterion) {
    let (psf, _) = instance(96);
    let ops = PrecomputedOperators::new(&psf).unwrap();
    let x = Scene::embed(&procedural_sources(1, psf.sensor_dims(), 1).remove(0)).unwrap();
    c.bench_function("forward convolution 192x192", |bench| {
        bench.iter(|| ops.forward().apply_h(black_box(&x.planes[0])).unwrap())
    });
    let t = LearnedTransform::random(2, 0.1);
    c.bench_function("learned transform 192x192", |bench| bench.iter(|| t.apply(black_box(&x.planes[0]))));
}

criterion_group!(benches, solvers, operators);
criterion_main!(benches);
