mod common;

use common::*;
use ppid_core::data::{make_sample, make_trimap, region_mask, scaling_mask, BG, FG, TR};
use ppid_core::{Dataset, Generator, Region, Shape, Tensor, Trimap};
use proptest::prelude::*;

fn soft_fraction(alpha: &Tensor, denom: impl Fn(&Tensor) -> usize) -> f64 {
    let soft = alpha.data().iter().filter(|v| **v > 0.0 && **v < 1.0).count();
    soft as f64 / denom(alpha).max(1) as f64
}

#[test]
fn disk_rims_are_thin() {
    let mut total = 0.0;
    for seed in 0..100 {
        let s = make_sample(seed, Generator::Disk, (64, 64)).unwrap();
        // Foreground area: every pixel with nonzero alpha.
        total += soft_fraction(&s.alpha, |a| a.data().iter().filter(|v| **v > 0.0).count());
    }
    let mean = total / 100.0;
    assert!(mean < 0.25, "disk soft fraction {mean}");
}

#[test]
fn blobs_are_mostly_translucent() {
    let mut total = 0.0;
    for seed in 0..100 {
        let s = make_sample(seed, Generator::Blob, (64, 64)).unwrap();
        total += soft_fraction(&s.alpha, |a| a.data().iter().filter(|v| **v > 0.0).count());
    }
    let mean = total / 100.0;
    assert!(mean >= 0.5, "blob soft fraction {mean}");
}

#[test]
fn generated_samples_satisfy_invariants() {
    let data = Dataset::generate(40, 32, 9).unwrap();
    for s in &data.samples {
        // Compositing identity.
        let [_, _, h, w] = s.image.shape().0;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let a = s.alpha.at([0, 0, y, x]);
                    let want = a * s.fg.at([0, c, y, x]) + (1.0 - a) * s.bg.at([0, c, y, x]);
                    assert!((s.image.at([0, c, y, x]) - want).abs() <= 1e-12);
                }
            }
        }
        assert!(s.alpha.data().iter().all(|v| (0.0..=1.0).contains(v)));
        check_trimap(&s.alpha, &s.trimap);
    }
    // Deterministic given the seed.
    assert_eq!(Dataset::generate(40, 32, 9).unwrap().samples, data.samples);
}

fn check_trimap(alpha: &Tensor, t: &Trimap) {
    for (i, r) in t.regions().enumerate() {
        let a = alpha.data()[i];
        let label = t.tensor().data()[i];
        assert!(label == FG || label == BG || label == TR);
        if a > 0.0 && a < 1.0 {
            assert_eq!(r, Region::Transition);
        }
    }
}

#[test]
fn scaling_mask_regions_sum_to_exactly_one() {
    for seed in 0..200 {
        let kind = Generator::ALL[seed as usize % 4];
        let s = make_sample(seed, kind, (64, 64)).unwrap();
        for radius in [0, 1, 3, 8] {
            let t = make_trimap(&s.alpha, radius);
            let m = scaling_mask(&t);
            let mut sums = [0.0f64; 3];
            let mut seen = [false; 3];
            for (i, r) in t.regions().enumerate() {
                let k = r as usize;
                sums[k] += m.data()[i];
                seen[k] = true;
            }
            for k in 0..3 {
                if seen[k] {
                    assert_eq!(sums[k], 1.0, "seed {seed} radius {radius} region {k}");
                }
            }
        }
    }
}

#[test]
fn region_masks_are_binary_and_cover_transitions() {
    let s = make_sample(3, Generator::Web, (32, 32)).unwrap();
    for level in 1..=4 {
        let m = region_mask(&s.trimap, level).unwrap();
        assert_eq!(m.shape(), Shape::new(1, 1, 32 >> level, 32 >> level));
        assert!(m.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        for (i, r) in s.trimap.regions().enumerate() {
            if r == Region::Transition {
                let (y, x) = (i / 32, i % 32);
                assert_eq!(m.at([0, 0, y >> level, x >> level]), 1.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dilation_is_monotone(seed in any::<u64>(), r in 0usize..6) {
        let mut g = rng(seed);
        let alpha = random(&mut g, Shape::new(1, 1, 12, 12), -1.0, 2.0).map(|v| v.clamp(0.0, 1.0));
        let a = make_trimap(&alpha, r);
        let b = make_trimap(&alpha, r + 1);
        check_trimap(&alpha, &a);
        for (ra, rb) in a.regions().zip(b.regions()) {
            if ra == Region::Transition {
                prop_assert_eq!(rb, Region::Transition);
            }
        }
    }
}
