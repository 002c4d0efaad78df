mod common;

use common::*;
use ppid_core::nets::{
    attention_specs, gc_block as gc, gc_specs, net_specs, spatial_attention, student_forward,
    teacher_forward, ENCODER_WIDTHS,
};
use ppid_core::{BindMode, Bound, Graph, ParamStore, Role, Shape, StudentNet, Tensor};
use rand::Rng;

fn perturbed(specs: &[ppid_core::ParamSpec], seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut p = ParamStore::init(specs, seed);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    p
}

fn run_gc(f: &Tensor, p: &ParamStore, prefix: &str) -> Tensor {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, p, "", BindMode::Frozen);
    let x = g.constant(f.clone());
    let y = gc(&mut g, &b, prefix, x).unwrap();
    g.value(y).clone()
}

fn run_attention(f: &Tensor, p: &ParamStore, prefix: &str, t: f64) -> Tensor {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, p, "", BindMode::Frozen);
    let x = g.constant(f.clone());
    let y = spatial_attention(&mut g, &b, prefix, x, t).unwrap();
    g.value(y).clone()
}

#[test]
fn gc_block_matches_oracle() {
    let mut r = rng(11);
    for case in 0..100 {
        let p = perturbed(&gc_specs("gc", 4), case);
        let f = random(&mut r, Shape::new(1, 4, 3, 3), -1.0, 1.0);
        assert_tensor_close(&run_gc(&f, &p, "gc"), &gc_block(&f, &p, "gc"), 1e-10, &format!("case {case}"));
    }
}

#[test]
fn gc_block_residual_identities() {
    let mut r = rng(12);
    let mut p = perturbed(&gc_specs("gc", 8), 3);
    let f = random(&mut r, Shape::new(2, 8, 4, 4), -1.0, 1.0);
    for (k, t) in p.iter_mut() {
        if k.starts_with("gc.wv2") {
            t.data_mut().fill(0.0);
        }
    }
    assert_eq!(run_gc(&f, &p, "gc"), f);

    // One position: the pooled context is the feature itself.
    let p = perturbed(&gc_specs("gc", 8), 4);
    let f1 = random(&mut r, Shape::new(1, 8, 1, 1), -1.0, 1.0);
    assert_tensor_close(&run_gc(&f1, &p, "gc"), &gc_block(&f1, &p, "gc"), 1e-12, "1x1");
}

#[test]
fn attention_matches_oracle() {
    let mut r = rng(13);
    for case in 0..100 {
        let p = perturbed(&attention_specs("at"), case);
        let f = random(&mut r, Shape::new(1, 4, 4, 4), -1.0, 1.0);
        let t = [1.0, 2.0, 4.0][case as usize % 3];
        assert_tensor_close(&run_attention(&f, &p, "at", t), &attention(&f, &p, "at", t), 1e-10, &format!("case {case}"));
    }
}

#[test]
fn attention_mask_sums_to_one_and_flattens_with_temperature() {
    let mut r = rng(14);
    for case in 0..1000 {
        let p = perturbed(&attention_specs("at"), case);
        let f = random(&mut r, Shape::new(1, 4, 4, 4), -2.0, 2.0);
        let mut prev = f64::INFINITY;
        for t in [1.0, 2.0, 4.0] {
            let m = run_attention(&f, &p, "at", t);
            assert!((m.sum() - 1.0).abs() <= 1e-12, "case {case}");
            let max = m.data().iter().cloned().fold(f64::MIN, f64::max);
            assert!(max <= prev, "case {case}: max {max} rose above {prev} at T={t}");
            prev = max;
        }
    }
}

#[test]
fn attention_uniform_cases_and_bias_invariance() {
    let mut r = rng(15);
    let f = random(&mut r, Shape::new(1, 3, 4, 4), -1.0, 1.0);
    let zero = ParamStore::init(&attention_specs("at"), 1)
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
        .fold(ParamStore::new(), |mut s, (k, t)| {
            s.insert(k, t);
            s
        });
    let m = run_attention(&f, &zero, "at", 1.0);
    assert!(m.data().iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));

    // Constant F: with zero padding the logits agree only where the 7x7
    // window sees no border, so check a kernel reduced to its centre tap.
    let mut p = perturbed(&attention_specs("at"), 2);
    for (i, v) in p.get_mut("at.conv7.weight").unwrap().data_mut().iter_mut().enumerate() {
        if i % 49 != 24 {
            *v = 0.0;
        }
    }
    let c = Tensor::full(Shape::new(1, 3, 4, 4), 0.7);
    let m = run_attention(&c, &p, "at", 1.0);
    assert!(m.data().iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
    let p = perturbed(&attention_specs("at"), 2);

    let mut shifted = p.clone();
    shifted.get_mut("at.conv7.bias").unwrap().data_mut()[0] += 3.0;
    let a = run_attention(&f, &p, "at", 1.0);
    let b = run_attention(&f, &shifted, "at", 1.0);
    assert!(a.max_abs_diff(&b) <= 1e-12);
}

#[test]
fn forward_shapes_and_parity() {
    let ts = net_specs(Role::Teacher);
    let ss = net_specs(Role::Student);
    assert_eq!(ts.len(), ss.len());
    for (t, s) in ts.iter().zip(&ss) {
        assert_eq!(t.name, s.name);
        if t.name == "enc1.a.weight" {
            assert_eq!((t.shape.c(), s.shape.c()), (4, 3));
        } else {
            assert_eq!(t.shape, s.shape);
        }
    }

    let sp = ParamStore::init(&ss, 5);
    let tp = ParamStore::init(&ts, 5);
    let mut r = rng(16);
    let rgb = random(&mut r, Shape::new(2, 3, 32, 32), 0.0, 1.0);
    let tri = Tensor::full(Shape::new(2, 1, 32, 32), 0.5);
    let mut g = Graph::new();
    let sb = Bound::new(&mut g, &sp, "", BindMode::Frozen);
    let tb = Bound::new(&mut g, &tp, "", BindMode::Frozen);
    let x = g.constant(rgb.clone());
    let t = g.constant(tri);
    let (a, taps) = student_forward(&mut g, &sb, x).unwrap();
    let (ta, ttaps) = teacher_forward(&mut g, &tb, x, t).unwrap();
    for alpha in [a, ta] {
        assert_eq!(g.shape(alpha), Shape::new(2, 1, 32, 32));
        assert!(g.value(alpha).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    for n in 1..=4 {
        let want = Shape::new(2, ENCODER_WIDTHS[n - 1], 32 >> n, 32 >> n);
        assert_eq!(g.shape(taps.level(n).unwrap()), want);
        assert_eq!(g.shape(ttaps.level(n).unwrap()), want);
    }

    // Bitwise reproducible inference.
    let net = StudentNet::new(sp).unwrap();
    assert_eq!(net.infer(&rgb).unwrap(), net.infer(&rgb).unwrap());
}

#[test]
fn zero_params_give_bias_determined_alpha() {
    let mut p = ParamStore::init(&net_specs(Role::Student), 1);
    for (_, t) in p.iter_mut() {
        t.data_mut().fill(0.0);
    }
    p.get_mut("head.bias").unwrap().data_mut()[0] = 0.3;
    let net = StudentNet::new(p).unwrap();
    let a = net.infer(&Tensor::zeros(Shape::new(1, 3, 16, 16))).unwrap();
    assert!(a.data().iter().all(|v| *v == 0.3));
}
