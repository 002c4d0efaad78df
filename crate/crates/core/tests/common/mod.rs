//! Scalar-loop reference implementations and fixtures shared by the
//! integration tests (and the CLI acceptance suite).
#![allow(dead_code)]

use ppid_core::distill::{
    attention_student, attention_teacher, distill_specs, gc_student, gc_teacher, projection,
};
use ppid_core::nets::ENCODER_WIDTHS;
use ppid_core::{DistillConfig, LocalMode, ParamStore, SemanticMode, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn binary(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
}

/// `|a - b| <= tol * max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn assert_tensor_close(a: &Tensor, b: &Tensor, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!(close(*x, *y, tol), "{what}[{i}]: {x} vs {y}");
    }
}

/// Distillation parameters with every entry (biases, LN, Wv2 included)
/// moved off its initial value.
pub fn random_distill_params(seed: u64) -> ParamStore {
    let mut r = rng(seed ^ 0xD15);
    let mut p = ParamStore::init(&distill_specs(), seed);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    p
}

/// Tap tensors of widths `ENCODER_WIDTHS` at `size / 2^n`.
pub fn random_taps(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Tensor> {
    ENCODER_WIDTHS
        .iter()
        .enumerate()
        .map(|(i, &c)| random(rng, Shape::new(n, c, size >> (i + 1), size >> (i + 1)), -1.0, 1.0))
        .collect()
}

pub fn random_regions(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Tensor> {
    (0..ENCODER_WIDTHS.len())
        .map(|i| binary(rng, Shape::new(n, 1, size >> (i + 1), size >> (i + 1))))
        .collect()
}

// ---------------------------------------------------------------- conv

/// Six nested loops (plus batch): cross-correlation with zero padding.
pub fn conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, _, k, _] = w.shape().0;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(n, cout, ho, wo));
    for s in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at([o, c, ky, kx]) * x.at([s, c, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.set([s, o, y, xx], acc);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- GC block

fn get<'a>(p: &'a ParamStore, name: &str) -> &'a Tensor {
    p.get(name).unwrap_or_else(|_| panic!("missing {name}"))
}

/// `F + Wv2 relu(LN(Wv1 sum_j softmax_j(Wk F) F_j))`, one sample at a time.
pub fn gc_block(f: &Tensor, p: &ParamStore, prefix: &str) -> Tensor {
    let [n, c, h, w] = f.shape().0;
    let wk = get(p, &format!("{prefix}.wk.weight"));
    let w1 = get(p, &format!("{prefix}.wv1.weight"));
    let b1 = get(p, &format!("{prefix}.wv1.bias"));
    let gamma = get(p, &format!("{prefix}.ln.gamma"));
    let beta = get(p, &format!("{prefix}.ln.beta"));
    let w2 = get(p, &format!("{prefix}.wv2.weight"));
    let b2 = get(p, &format!("{prefix}.wv2.bias"));
    let mid = w1.shape().n();
    let mut out = f.clone();
    for s in 0..n {
        let mut logits = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    logits[y * w + x] += wk.data()[k] * f.at([s, k, y, x]);
                }
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut ctx = vec![0.0; c];
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    ctx[k] += e[y * w + x] / z * f.at([s, k, y, x]);
                }
            }
        }
        let t: Vec<f64> = (0..mid)
            .map(|j| b1.data()[j] + (0..c).map(|k| w1.at([j, k, 0, 0]) * ctx[k]).sum::<f64>())
            .collect();
        let mean = t.iter().sum::<f64>() / mid as f64;
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / mid as f64;
        let u: Vec<f64> = (0..mid)
            .map(|j| (gamma.data()[j] * (t[j] - mean) / (var + LN_EPS).sqrt() + beta.data()[j]).max(0.0))
            .collect();
        for k in 0..c {
            let v = b2.data()[k] + (0..mid).map(|j| w2.at([k, j, 0, 0]) * u[j]).sum::<f64>();
            for y in 0..h {
                for x in 0..w {
                    out.set([s, k, y, x], f.at([s, k, y, x]) + v);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- attention

/// `softmax_hw(conv7([mean_c F; max_c F] / T))`.
pub fn attention(f: &Tensor, p: &ParamStore, prefix: &str, temperature: f64) -> Tensor {
    let [n, c, h, w] = f.shape().0;
    let wt = get(p, &format!("{prefix}.conv7.weight"));
    let b = get(p, &format!("{prefix}.conv7.bias")).data()[0];
    let k = wt.shape().h();
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(Shape::new(n, 1, h, w));
    for s in 0..n {
        let mut pooled = vec![[0.0f64; 2]; h * w];
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = (0..c).map(|k| f.at([s, k, y, x])).collect();
                let avg = vals.iter().sum::<f64>() / c as f64;
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                pooled[y * w + x] = [avg / temperature, max / temperature];
            }
        }
        let mut logits = vec![b; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                for ch in 0..2 {
                    for ky in 0..k as isize {
                        for kx in 0..k as isize {
                            let (iy, ix) = (y + ky - r, x + kx - r);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            logits[(y * w as isize + x) as usize] += wt.at([0, ch, ky as usize, kx as usize])
                                * pooled[(iy * w as isize + ix) as usize][ch];
                        }
                    }
                }
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for y in 0..h {
            for x in 0..w {
                out.set([s, 0, y, x], e[y * w + x] / z);
            }
        }
    }
    out
}

// ---------------------------------------------------------------- distillation

fn sq_dist(a: &Tensor, b: &Tensor, normalize: bool) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let denom = if normalize { a.len() } else { a.shape().n() };
    s / denom as f64
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x + y).unwrap()
}

pub fn clsd(teacher: &[Tensor], student: &[Tensor], p: &ParamStore, cfg: &DistillConfig) -> f64 {
    if cfg.semantic_mode == SemanticMode::None {
        return 0.0;
    }
    let mut levels = cfg.tap_levels.clone();
    levels.sort_unstable();
    levels.dedup();
    let cross = cfg.semantic_mode == SemanticMode::Clsd;
    let deepest = *levels.last().unwrap();
    let mut fbar = vec![student[0].clone()];
    let mut proj = vec![None, None];
    for n in 2..=deepest {
        let pw = get(p, &format!("{}.weight", projection(n)));
        let pb = get(p, &format!("{}.bias", projection(n)));
        let pr = conv(&fbar[n - 2], pw, Some(pb), 2, 1);
        fbar.push(add(&student[n - 1], &pr));
        proj.push(Some(pr));
    }
    let mut total = 0.0;
    for &n in &levels {
        let gt = gc_block(&teacher[n - 1], p, &gc_teacher(n));
        let gs = gc_block(&student[n - 1], p, &gc_student(n));
        total += cfg.lambda1 * sq_dist(&gt, &gs, cfg.normalize_clsd);
        if cross && cfg.lambda2 != 0.0 {
            if let Some(pr) = &proj[n] {
                let gp = gc_block(pr, p, &gc_student(n));
                total += cfg.lambda2 * sq_dist(&gt, &gp, cfg.normalize_clsd);
            }
        }
    }
    total
}

pub fn ald_feature(t: &Tensor, s: &Tensor, r: &Tensor, m: &Tensor) -> f64 {
    let [n, c, h, w] = t.shape().0;
    let mut acc = 0.0;
    for b in 0..n {
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d = t.at([b, k, y, x]) - s.at([b, k, y, x]);
                    acc += r.at([b, 0, y, x]) * m.at([b, 0, y, x]) * d * d;
                }
            }
        }
    }
    acc / n as f64
}

pub fn ald_attention(mt: &Tensor, ms: &Tensor, r: &Tensor) -> f64 {
    let n = mt.shape().n();
    let acc: f64 = (0..mt.len())
        .map(|i| (r.data()[i] * mt.data()[i] - r.data()[i] * ms.data()[i]).abs())
        .sum();
    acc / n as f64
}

pub fn ald(teacher: &[Tensor], student: &[Tensor], regions: &[Tensor], p: &ParamStore, cfg: &DistillConfig) -> f64 {
    let mut levels = cfg.tap_levels.clone();
    levels.sort_unstable();
    levels.dedup();
    let (mut f, mut a) = (0.0, 0.0);
    for &n in &levels {
        let (t, s, r) = (&teacher[n - 1], &student[n - 1], &regions[n - 1]);
        match cfg.local_mode {
            LocalMode::None => {}
            LocalMode::Ld => {
                let sh = t.shape();
                let u = Tensor::full(Shape::new(sh.n(), 1, sh.h(), sh.w()), 1.0 / (sh.h() * sh.w()) as f64);
                f += ald_feature(t, s, r, &u);
            }
            LocalMode::Ald => {
                let mt = attention(t, p, &attention_teacher(n), cfg.temperature);
                if cfg.ald_feature {
                    f += ald_feature(t, s, r, &mt);
                }
                if cfg.ald_attention {
                    let ms = attention(s, p, &attention_student(n), cfg.temperature);
                    a += ald_attention(&mt, &ms, r);
                }
            }
        }
    }
    match cfg.local_mode {
        LocalMode::None => 0.0,
        LocalMode::Ld => cfg.alpha_ald * f,
        LocalMode::Ald => cfg.alpha_ald * f + cfg.beta_ald * a,
    }
}

// ---------------------------------------------------------------- metrics

pub fn sad(p: &Tensor, g: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p.data()[i] - g.data()[i]).abs();
    }
    s / 1000.0
}

pub fn mse(p: &Tensor, g: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p.data()[i] - g.data()[i]).powi(2);
    }
    s / p.len() as f64
}

/// Direct 2-D convolution with the L2-normalized derivative-of-Gaussian
/// kernels (sigma 1.4, half-width 6), replicated borders.
pub fn gradient_magnitude(x: &Tensor) -> Tensor {
    let sigma: f64 = 1.4;
    let r = 6isize;
    let g = |t: isize| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp();
    let dg = |t: isize| -(t as f64) / (sigma * sigma) * g(t);
    let mut kx = vec![vec![0.0; 13]; 13];
    let mut norm = 0.0;
    for i in -r..=r {
        for j in -r..=r {
            let v = g(i) * dg(j);
            kx[(i + r) as usize][(j + r) as usize] = v;
            norm += v * v;
        }
    }
    let norm = norm.sqrt();
    let [n, c, h, w] = x.shape().0;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for i in -r..=r {
                        for j in -r..=r {
                            let k = kx[(i + r) as usize][(j + r) as usize] / norm;
                            let sy = (y + i).clamp(0, h as isize - 1) as usize;
                            let sx = (xx + j).clamp(0, w as isize - 1) as usize;
                            gx += k * x.at([b, ch, sy, sx]);
                            // Transposed kernel for the vertical derivative.
                            let sy = (y + j).clamp(0, h as isize - 1) as usize;
                            let sx = (xx + i).clamp(0, w as isize - 1) as usize;
                            gy += k * x.at([b, ch, sy, sx]);
                        }
                    }
                    out.set([b, ch, y as usize, xx as usize], (gx * gx + gy * gy).sqrt());
                }
            }
        }
    }
    out
}

pub fn grad(p: &Tensor, g: &Tensor) -> f64 {
    let (a, b) = (gradient_magnitude(p), gradient_magnitude(g));
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 1000.0
}
