use criterion::{black_box, criterion_group, criterion_main, Criterion};
use num_complex::Complex64;
use perstab::bloch::assemble;
use perstab::evans::evans;
use perstab::semigroup::bloch_forward;
use perstab::verify::{bump, synthetic_wave, vdw_reference};
use perstab::{EvansOptions, Propagator, PropagatorOptions, Split, TorusGrid};

fn bloch_eigenvalues(c: &mut Criterion) {
    let (_, _, wave) = vdw_reference(64).expect("reference wave");
    c.bench_function("bloch eigenvalues, vdw m=64", |b| {
        b.iter(|| assemble(&wave, &[black_box(0.3)]).and_then(|op| op.eigenvalues()).expect("eigenvalues"))
    });
}

fn evans_function(c: &mut Criterion) {
    let (_, _, wave) = vdw_reference(64).expect("reference wave");
    let opts = EvansOptions::default();
    c.bench_function("evans function, vdw", |b| {
        b.iter(|| evans(&wave, black_box(Complex64::new(0.1, 0.2)), &[0.3], &opts).expect("evans"))
    });
}

fn semigroup(c: &mut Criterion) {
    let wave = synthetic_wave(1, 16).expect("synthetic wave");
    let grid = TorusGrid::axial(1.0, 256, 16).expect("grid");
    let prop = Propagator::new(&wave, &grid, &PropagatorOptions::default()).expect("propagator");
    let u0 = bump(&grid, 1.0, 2.0);
    let b0 = bloch_forward(&u0);
    c.bench_function("bloch transform, 256 cells", |b| b.iter(|| bloch_forward(black_box(&u0))));
    c.bench_function("semigroup apply, 256 cells", |b| b.iter(|| prop.apply(&b0, black_box(10.0), Split::Full).expect("apply")));
    c.bench_function("propagator setup, 256 cells", |b| {
        b.iter(|| Propagator::new(&wave, &grid, &PropagatorOptions::default()).expect("propagator"))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bloch_eigenvalues, evans_function, semigroup
}
criterion_main!(benches);
