use std::rc::Rc;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use frs_core::autodiff::{Padding, Tape, Tensor};
use frs_core::bank::{BankPlan, GroupBank, GroupSpec, LiftingBank};
use frs_core::basis::{fit_coefficients, make_fourier_basis, Kernel};
use frs_core::nn::{group_conv, Align};

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_t(&mut rng, &[2, 32, 32, 32]);
    let k = rand_t(&mut rng, &[32, 32, 3, 3]);
    let w = rand_t(&mut rng, &[2, 32, 32, 32]);
    c.bench_function("conv2d forward 32ch 32x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            black_box(tape.constant(x.clone()).conv2d(tape.constant(k.clone()), 1, Padding::same(3, 3)).unwrap().value());
        })
    });
    c.bench_function("conv2d forward+backward 32ch 32x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (xv, kv, wv) = (tape.param(x.clone()), tape.param(k.clone()), tape.constant(w.clone()));
            let loss = xv.conv2d(kv, 1, Padding::same(3, 3)).unwrap().mul(wv).unwrap().sum();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn plan() -> Rc<BankPlan> {
    let g = GroupSpec::new(8, 2, 1.5, 6, 0.5).unwrap();
    Rc::new(BankPlan::new(g, frs_core::basis::make_enhanced_basis(6, 0.5).unwrap()).unwrap())
}

fn banks(c: &mut Criterion) {
    let p = plan();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lifting = LiftingBank::random(p.clone(), 16, 3, &mut rng).unwrap();
    let group = GroupBank::random(p.clone(), 8, 8, &mut rng).unwrap();
    c.bench_function("lifting bank expansion 16x3 on 8x2", |b| b.iter(|| black_box(lifting.expanded(1))));
    c.bench_function("group bank expansion 8x8 on 8x2", |b| b.iter(|| black_box(group.expanded(0))));

    let f = rand_t(&mut rng, &[1, 2, 8, 8, 32, 32]);
    c.bench_function("group conv 8->8 patterns 32x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let y = group_conv(tape.constant(f.clone()), tape.constant(group.coefficients.clone()), &p, 8, 8, Align::Lead);
            black_box(y.unwrap().value());
        })
    });

    let basis = make_fourier_basis(6, 0.5).unwrap();
    let k = Kernel::from_vec(6, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    c.bench_function("fit 6x6 kernel", |b| b.iter(|| black_box(fit_coefficients(&k, &basis).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, banks
}
criterion_main!(benches);
