use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ppid_bench::fixture;
use ppid_core::data::{make_trimap, scaling_mask};
use ppid_core::kernels::conv2d;
use ppid_core::nets::{gc_block, gc_specs, net_specs, student_forward};
use ppid_core::{alpha_loss, evaluate, AlphaLossConfig, BindMode, Bound, Graph, ParamStore, Role, Shape};

fn convolution(c: &mut Criterion) {
    let x = fixture(Shape::new(8, 16, 64, 64), 1, -1.0, 1.0);
    let w = fixture(Shape::new(16, 16, 3, 3), 2, -0.1, 0.1);
    let b = fixture(Shape::new(1, 16, 1, 1), 3, -0.1, 0.1);
    c.bench_function("conv2d 8x16x64x64 3x3", |bench| {
        bench.iter(|| conv2d(&x, &w, Some(&b), 1, 1).unwrap())
    });
    let x = fixture(Shape::new(8, 64, 8, 8), 4, -1.0, 1.0);
    let w = fixture(Shape::new(64, 64, 3, 3), 5, -0.1, 0.1);
    c.bench_function("conv2d 8x64x8x8 3x3 stride 2", |bench| {
        bench.iter(|| conv2d(&x, &w, None, 2, 1).unwrap())
    });
}

fn global_context(c: &mut Criterion) {
    let p = ParamStore::init(&gc_specs("gc", 64), 6);
    let f = fixture(Shape::new(8, 64, 8, 8), 7, -1.0, 1.0);
    c.bench_function("gc_block forward+backward 8x64x8x8", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let b = Bound::new(&mut g, &p, "", BindMode::Trainable);
            let x = g.leaf(f.clone());
            let y = gc_block(&mut g, &b, "gc", x).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap()
        })
    });
}

fn student_step(c: &mut Criterion) {
    let p = ParamStore::init(&net_specs(Role::Student), 8);
    let rgb = fixture(Shape::new(8, 3, 64, 64), 9, 0.0, 1.0);
    let gt = fixture(Shape::new(8, 1, 64, 64), 10, 0.0, 1.0);
    let trimap = make_trimap(&gt, 2);
    let scaling = scaling_mask(&trimap);
    let cfg = AlphaLossConfig::default();
    c.bench_function("student forward+loss+backward 8x3x64x64", |bench| {
        bench.iter_batched(
            Graph::new,
            |mut g| {
                let b = Bound::new(&mut g, &p, "", BindMode::Trainable);
                let x = g.constant(rgb.clone());
                let (alpha, _) = student_forward(&mut g, &b, x).unwrap();
                let l = alpha_loss(&mut g, alpha, &gt, &trimap, &scaling, &cfg).unwrap();
                g.backward(l).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let pred = fixture(Shape::new(1, 1, 64, 64), 11, 0.0, 1.0);
    let gt = fixture(Shape::new(1, 1, 64, 64), 12, 0.0, 1.0);
    c.bench_function("evaluate 64x64", |bench| bench.iter(|| evaluate(&pred, &gt).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = convolution, global_context, student_step, metrics
}
criterion_main!(benches);
