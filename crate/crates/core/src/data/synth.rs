//! Procedural foreground / alpha generators and compositing.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trimap::{make_trimap, Trimap};
use crate::error::{Error, Result};
use crate::seed::mix;
use crate::tensor::{Shape, Tensor};

/// Dilation radius used for evaluation trimaps.
pub const EVAL_TRIMAP_RADIUS: usize = 4;
/// Training trimaps draw their radius uniformly from this inclusive range.
pub const TRAIN_TRIMAP_RADII: (usize, usize) = (1, 8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Opaque disk with a Gaussian fall-off rim.
    Disk,
    /// Translucent blob, interior alpha in [0.2, 0.8].
    Blob,
    /// Sparse 1-2 px strands.
    Web,
    /// Opaque star-shaped polygon with a 2 px soft rim.
    Polygon,
}

impl Generator {
    pub const ALL: [Generator; 4] = [
        Generator::Disk,
        Generator::Blob,
        Generator::Web,
        Generator::Polygon,
    ];

    pub fn attribute(self) -> Attribute {
        match self {
            Generator::Blob | Generator::Web => Attribute::Transparent,
            Generator::Disk | Generator::Polygon => Attribute::NonTransparent,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Generator::Disk => "disk",
            Generator::Blob => "blob",
            Generator::Web => "web",
            Generator::Polygon => "polygon",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Generator::Disk => 1,
            Generator::Blob => 2,
            Generator::Web => 3,
            Generator::Polygon => 4,
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Generator::ALL
            .into_iter()
            .find(|g| g.id() == s)
            .ok_or_else(|| Error::invalid("make_sample", format!("unknown generator `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribute {
    Transparent,
    NonTransparent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeSample {
    pub fg: Tensor,
    pub bg: Tensor,
    pub alpha: Tensor,
    pub image: Tensor,
    pub trimap: Trimap,
    pub attribute: Attribute,
}

/// `image = alpha * fg + (1 - alpha) * bg`, alpha broadcast over channels.
pub fn composite(fg: &Tensor, bg: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    if fg.shape() != bg.shape() {
        return Err(Error::shape("composite", fg.shape(), bg.shape()));
    }
    let s = fg.shape();
    let a = alpha.shape();
    if a.n() != s.n() || a.c() != 1 || a.h() != s.h() || a.w() != s.w() {
        return Err(Error::shape("composite", s, a));
    }
    if let Some(v) = alpha.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid("composite", format!("alpha {v} outside [0, 1]")));
    }
    Ok(Tensor::from_fn(s, |[n, c, y, x]| {
        let al = alpha.at([n, 0, y, x]);
        al * fg.at([n, c, y, x]) + (1.0 - al) * bg.at([n, c, y, x])
    }))
}

/// Deterministic sample for `(seed, kind, size)`.
pub fn make_sample(seed: u64, kind: Generator, (h, w): (usize, usize)) -> Result<CompositeSample> {
    if h < 32 || w < 32 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::invalid(
            "make_sample",
            format!("size {h}x{w} must be at least 32 and divisible by 16"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, kind.stream()));
    let bg = color_field(&mut rng, h, w, 0.35);
    let fg = color_field(&mut rng, h, w, 0.15);
    let alpha = match kind {
        Generator::Disk => disk_alpha(&mut rng, h, w),
        Generator::Blob => blob_alpha(&mut rng, h, w),
        Generator::Web => web_alpha(&mut rng, h, w),
        Generator::Polygon => polygon_alpha(&mut rng, h, w),
    };
    let image = composite(&fg, &bg, &alpha)?;
    let trimap = make_trimap(&alpha, EVAL_TRIMAP_RADIUS);
    Ok(CompositeSample {
        fg,
        bg,
        alpha,
        image,
        trimap,
        attribute: kind.attribute(),
    })
}

/// Smooth random colour: per-channel linear ramp plus a few low-frequency
/// sinusoids, clamped to [0, 1].
fn color_field(rng: &mut ChaCha8Rng, h: usize, w: usize, variation: f64) -> Tensor {
    struct Wave {
        fy: f64,
        fx: f64,
        phase: f64,
        amp: f64,
    }
    let mut chans = Vec::new();
    for _ in 0..3 {
        let base: f64 = rng.gen_range(0.1..0.9);
        let gy: f64 = rng.gen_range(-variation..variation);
        let gx: f64 = rng.gen_range(-variation..variation);
        let waves: Vec<Wave> = (0..4)
            .map(|_| Wave {
                fy: rng.gen_range(-3.0..3.0),
                fx: rng.gen_range(-3.0..3.0),
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: rng.gen_range(0.0..variation * 0.4),
            })
            .collect();
        chans.push((base, gy, gx, waves));
    }
    Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| {
        let (base, gy, gx, waves) = &chans[c];
        let (v, u) = (y as f64 / h as f64 - 0.5, x as f64 / w as f64 - 0.5);
        let noise: f64 = waves
            .iter()
            .map(|wv| wv.amp * (2.0 * PI * (wv.fy * v + wv.fx * u) + wv.phase).sin())
            .sum();
        (base + gy * v + gx * u + noise).clamp(0.0, 1.0)
    })
}

fn alpha_from_fn(h: usize, w: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| {
        f(y as f64 + 0.5, x as f64 + 0.5).clamp(0.0, 1.0)
    })
}

fn disk_alpha(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let m = h.min(w) as f64;
    let r = rng.gen_range(0.28..0.4) * m;
    let cy = rng.gen_range(0.4..0.6) * h as f64;
    let cx = rng.gen_range(0.4..0.6) * w as f64;
    let sigma = 0.7;
    alpha_from_fn(h, w, |y, x| {
        let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
        if d <= r {
            1.0
        } else {
            let v = (-(d - r).powi(2) / (2.0 * sigma * sigma)).exp();
            if v < 0.02 {
                0.0
            } else {
                v
            }
        }
    })
}

fn blob_alpha(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let m = h.min(w) as f64;
    let bumps: Vec<(f64, f64, f64)> = (0..rng.gen_range(3..=5))
        .map(|_| {
            (
                rng.gen_range(0.3..0.7) * h as f64,
                rng.gen_range(0.3..0.7) * w as f64,
                rng.gen_range(0.08..0.16) * m,
            )
        })
        .collect();
    let (fy, fx, ph) = (
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.0..2.0 * PI),
    );
    alpha_from_fn(h, w, |y, x| {
        let field: f64 = bumps
            .iter()
            .map(|&(by, bx, s)| (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        let edge = ((field - 0.45) / 0.1).clamp(0.0, 1.0);
        let edge = edge * edge * (3.0 - 2.0 * edge);
        let inner = 0.5
            + 0.3 * (2.0 * PI * (fy * y / h as f64 + fx * x / w as f64) + ph).sin();
        edge * inner
    })
}

fn segment_distance((py, px): (f64, f64), (ay, ax): (f64, f64), (by, bx): (f64, f64)) -> f64 {
    let (dy, dx) = (by - ay, bx - ax);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((py - ay) * dy + (px - ax) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((py - ay - t * dy).powi(2) + (px - ax - t * dx).powi(2)).sqrt()
}

fn web_alpha(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let m = h.min(w) as f64;
    let c = (
        rng.gen_range(0.4..0.6) * h as f64,
        rng.gen_range(0.4..0.6) * w as f64,
    );
    let spokes = rng.gen_range(6..=9);
    let theta0: f64 = rng.gen_range(0.0..2.0 * PI);
    let reach: Vec<f64> = (0..spokes).map(|_| rng.gen_range(0.3..0.45) * m).collect();
    let point = |k: usize, frac: f64| {
        let th = theta0 + 2.0 * PI * k as f64 / spokes as f64;
        (c.0 + frac * reach[k] * th.sin(), c.1 + frac * reach[k] * th.cos())
    };
    let mut segs = Vec::new();
    for k in 0..spokes {
        segs.push((c, point(k, 1.0)));
    }
    for ring in 0..rng.gen_range(2..=3) {
        let frac = 0.35 + 0.25 * ring as f64 + rng.gen_range(-0.05..0.05);
        for k in 0..spokes {
            segs.push((point(k, frac), point((k + 1) % spokes, frac)));
        }
    }
    let half_width: f64 = rng.gen_range(0.5..1.0);
    let opacity: f64 = rng.gen_range(0.7..1.0);
    alpha_from_fn(h, w, |y, x| {
        let d = segs
            .iter()
            .map(|&(a, b)| segment_distance((y, x), a, b))
            .fold(f64::INFINITY, f64::min);
        opacity * (half_width + 0.5 - d).clamp(0.0, 1.0)
    })
}

fn polygon_alpha(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let m = h.min(w) as f64;
    let (cy, cx) = (
        rng.gen_range(0.4..0.6) * h as f64,
        rng.gen_range(0.4..0.6) * w as f64,
    );
    let k = rng.gen_range(5..=8);
    let mut angles: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    let verts: Vec<(f64, f64)> = angles
        .iter()
        .map(|&a| {
            let r = rng.gen_range(0.25..0.4) * m;
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect();
    // Angle-sorted vertices give a star-shaped simple polygon.
    alpha_from_fn(h, w, |y, x| {
        let mut inside = false;
        let mut dist = f64::INFINITY;
        for i in 0..verts.len() {
            let a = verts[i];
            let b = verts[(i + 1) % verts.len()];
            dist = dist.min(segment_distance((y, x), a, b));
            if (a.0 > y) != (b.0 > y) {
                let xi = a.1 + (y - a.0) / (b.0 - a.0) * (b.1 - a.1);
                if x < xi {
                    inside = !inside;
                }
            }
        }
        let sd = if inside { dist } else { -dist };
        (sd + 1.0) / 2.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_examples() {
        let s = Shape::new(1, 3, 1, 1);
        let fg = Tensor::full(s, 1.0);
        let bg = Tensor::full(s, 0.0);
        let one = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let zero = Tensor::full(Shape::new(1, 1, 1, 1), 0.0);
        let half = Tensor::full(Shape::new(1, 1, 1, 1), 0.5);
        assert_eq!(composite(&fg, &bg, &one).unwrap(), fg);
        assert_eq!(composite(&fg, &bg, &zero).unwrap(), bg);
        assert!(composite(&fg, &bg, &half).unwrap().data().iter().all(|&v| v == 0.5));
        let bad = Tensor::full(Shape::new(1, 1, 1, 1), 1.5);
        assert!(composite(&fg, &bg, &bad).is_err());
    }

    #[test]
    fn unknown_generator_rejected() {
        assert!("cloud".parse::<Generator>().is_err());
        assert_eq!("web".parse::<Generator>().unwrap(), Generator::Web);
    }

    #[test]
    fn size_preconditions() {
        assert!(make_sample(1, Generator::Disk, (24, 32)).is_err());
        assert!(make_sample(1, Generator::Disk, (40, 32)).is_err());
        assert!(make_sample(1, Generator::Disk, (48, 32)).is_ok());
    }

    #[test]
    fn attributes_by_family() {
        assert_eq!(Generator::Blob.attribute(), Attribute::Transparent);
        assert_eq!(Generator::Web.attribute(), Attribute::Transparent);
        assert_eq!(Generator::Disk.attribute(), Attribute::NonTransparent);
        assert_eq!(Generator::Polygon.attribute(), Attribute::NonTransparent);
    }
}
