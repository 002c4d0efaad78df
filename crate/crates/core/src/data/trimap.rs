use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const FG: f64 = 1.0;
pub const BG: f64 = 0.0;
pub const TR: f64 = 0.5;

/// Per-pixel foreground / background / transition labels, stored as a
/// `n x 1 x h x w` tensor with values `FG`, `BG` or `TR`. `TR = 0.5` lets the
/// trimap be fed to the teacher directly as an extra input plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Trimap(Tensor);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Foreground,
    Background,
    Transition,
}

impl Trimap {
    pub fn from_tensor(t: Tensor) -> Result<Trimap> {
        if t.shape().c() != 1 {
            return Err(Error::invalid(
                "trimap",
                format!("expected one channel, got {}", t.shape()),
            ));
        }
        if let Some(v) = t.data().iter().find(|&&v| v != FG && v != BG && v != TR) {
            return Err(Error::invalid("trimap", format!("invalid label {v}")));
        }
        Ok(Trimap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn region_at(&self, i: usize) -> Region {
        let v = self.0.data()[i];
        if v == TR {
            Region::Transition
        } else if v == FG {
            Region::Foreground
        } else {
            Region::Background
        }
    }

    pub fn regions(&self) -> impl Iterator<Item = Region> + '_ {
        (0..self.0.len()).map(|i| self.region_at(i))
    }

    pub fn stack(items: &[&Trimap]) -> Result<Trimap> {
        let ts: Vec<&Tensor> = items.iter().map(|t| &t.0).collect();
        Ok(Trimap(Tensor::stack(&ts)?))
    }
}

/// Disk offsets `(dy, dx)` with `dy^2 + dx^2 <= r^2`.
fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                v.push((dy, dx));
            }
        }
    }
    v
}

/// Transition = `{0 < alpha < 1}` dilated by a disk of `dilate_radius`;
/// the remaining pixels are FG where `alpha == 1` and BG where `alpha == 0`.
pub fn make_trimap(alpha: &Tensor, dilate_radius: usize) -> Trimap {
    let s = alpha.shape();
    let (h, w) = (s.h(), s.w());
    let offsets = disk(dilate_radius);
    let mut out = Tensor::zeros(s);
    for plane in 0..s.n() * s.c() {
        let a = &alpha.data()[plane * h * w..(plane + 1) * h * w];
        let o = &mut out.data_mut()[plane * h * w..(plane + 1) * h * w];
        for (i, &v) in a.iter().enumerate() {
            o[i] = if v >= 1.0 { FG } else { BG };
        }
        for y in 0..h {
            for x in 0..w {
                let v = a[y * w + x];
                if v <= 0.0 || v >= 1.0 {
                    continue;
                }
                for &(dy, dx) in &offsets {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        o[yy as usize * w + xx as usize] = TR;
                    }
                }
            }
        }
    }
    Trimap(out)
}

/// Binary transition indicator at feature level `level` (resolution
/// `h / 2^level`): a cell is 1 if any pixel it covers is TR.
pub fn region_mask(trimap: &Trimap, level: usize) -> Result<Tensor> {
    let s = trimap.shape();
    let f = 1usize << level;
    if s.h() % f != 0 || s.w() % f != 0 {
        return Err(Error::invalid(
            "region_mask",
            format!("trimap {s} not divisible by 2^{level}"),
        ));
    }
    let (h, w) = (s.h() / f, s.w() / f);
    let mut out = Tensor::zeros(Shape::new(s.n(), 1, h, w));
    for b in 0..s.n() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                if trimap.0.at([b, 0, y, x]) == TR {
                    out.set([b, 0, y / f, x / f], 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Regional scaling mask: every pixel gets `1 / (pixel count of its region)`
/// within its own sample. When `k` copies of `1 / k` do not add up to 1 in
/// floating point, the region's last pixel (row-major) takes `1 - partial`
/// instead, so each region's row-major sum is exactly 1.
pub fn scaling_mask(trimap: &Trimap) -> Tensor {
    let s = trimap.shape();
    let per = s.c() * s.h() * s.w();
    let mut out = Tensor::zeros(s);
    for b in 0..s.n() {
        let range = b * per..(b + 1) * per;
        let mut counts = [0usize; 3];
        let mut last = [0usize; 3];
        for i in range.clone() {
            let r = region_index(trimap.region_at(i));
            counts[r] += 1;
            last[r] = i;
        }
        let mut partial = [0.0f64; 3];
        for i in range {
            let r = region_index(trimap.region_at(i));
            // Counts are at least 1 for any region that has a pixel here.
            let v = 1.0 / counts[r] as f64;
            // `1 - partial` is exact: partial >= 1/2 whenever k >= 2.
            let v = if i == last[r] && partial[r] + v != 1.0 { 1.0 - partial[r] } else { v };
            out.data_mut()[i] = v;
            partial[r] += v;
        }
    }
    out
}

fn region_index(r: Region) -> usize {
    match r {
        Region::Foreground => 0,
        Region::Background => 1,
        Region::Transition => 2,
    }
}
