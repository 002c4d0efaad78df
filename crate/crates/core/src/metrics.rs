//! Matting quality metrics (SAD, MSE, Grad, Conn) and grouped reports.
//!
//! * SAD: `sum |p - g| / 1000`.
//! * MSE: per-pixel mean of `(p - g)^2`.
//! * Grad: `sum (|grad p| - |grad g|)^2 / 1000`, where the gradient is a
//!   first-order Gaussian-derivative filter (sigma 1.4, truncated at 4 sigma,
//!   kernel scaled to unit L2 norm, replicate border).
//! * Conn: connectivity error with levels 0.1 .. 0.9, 4-connected source
//!   components and threshold 0.15, divided by 1000. Level 1.0 of the usual
//!   0..1 sweep is omitted: it can only lower `l` from 1.0 to 0.9, and
//!   `alpha - 0.9 < 0.15` never reaches the penalty threshold.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Attribute;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GRAD_SIGMA: f64 = 1.4;
pub const CONN_THETA: f64 = 0.15;
pub const CONN_LEVELS: usize = 9;
/// Identifies the metric definitions used in a report.
pub const METRIC_VERSION: &str =
    "v1: grad gaussian-derivative sigma=1.4 trunc=4sigma; conn levels=0.1..0.9 4-conn theta=0.15";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
}

fn check_inputs(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("evaluate", pred.shape(), gt.shape()));
    }
    for (what, t) in [("prediction", pred), ("ground truth", gt)] {
        if let Some(v) = t.data().iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::invalid("evaluate", format!("{what} value {v} outside [0, 1]")));
        }
    }
    Ok(())
}

pub fn sad(pred: &Tensor, gt: &Tensor) -> f64 {
    pred.data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / 1000.0
}

pub fn mse(pred: &Tensor, gt: &Tensor) -> f64 {
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g) * (p - g))
        .sum();
    s / pred.len().max(1) as f64
}

/// 1-D Gaussian and derivative-of-Gaussian taps over `-r..=r`, plus the L2
/// norm of their 2-D outer product.
fn gaussian_taps() -> (Vec<f64>, Vec<f64>, f64) {
    let r = (4.0 * GRAD_SIGMA).ceil() as isize;
    let s2 = GRAD_SIGMA * GRAD_SIGMA;
    let norm = 1.0 / (GRAD_SIGMA * (2.0 * std::f64::consts::PI).sqrt());
    let gauss: Vec<f64> = (-r..=r)
        .map(|t| norm * (-(t * t) as f64 / (2.0 * s2)).exp())
        .collect();
    let dgauss: Vec<f64> = (-r..=r)
        .zip(&gauss)
        .map(|(t, g)| -(t as f64) * g / s2)
        .collect();
    let l2 = gauss.iter().map(|v| v * v).sum::<f64>().sqrt()
        * dgauss.iter().map(|v| v * v).sum::<f64>().sqrt();
    (gauss, dgauss, l2)
}

/// Gaussian-derivative gradient magnitude of each `h x w` plane.
pub fn gaussian_gradient_magnitude(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let (gauss, dgauss, l2) = gaussian_taps();
    let r = (gauss.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = Tensor::zeros(s);
    // Separable passes: horizontal with kernel `kx`, then vertical with `ky`.
    let filter = |plane: &[f64], kx: &[f64], ky: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kx.iter().enumerate() {
                    acc += k * plane[y * w + clamp(x as isize + j as isize - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut res = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in ky.iter().enumerate() {
                    acc += k * tmp[clamp(y as isize + i as isize - r, h) * w + x];
                }
                res[y * w + x] = acc / l2;
            }
        }
        res
    };
    for (src, dst) in x
        .data()
        .chunks(h * w)
        .zip(out.data_mut().chunks_mut(h * w))
    {
        let gx = filter(src, &dgauss, &gauss);
        let gy = filter(src, &gauss, &dgauss);
        for ((d, a), b) in dst.iter_mut().zip(&gx).zip(&gy) {
            *d = (a * a + b * b).sqrt();
        }
    }
    out
}

pub fn grad_error(pred: &Tensor, gt: &Tensor) -> f64 {
    let a = gaussian_gradient_magnitude(pred);
    let b = gaussian_gradient_magnitude(gt);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / 1000.0
}

/// Largest 4-connected component of `mask`; ties go to the component whose
/// first pixel (row-major) comes first.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None; // (label, size)
    let mut queue = VecDeque::new();
    let mut next = 0;
    for start in 0..h * w {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == usize::MAX {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    match best {
        Some((l, _)) => label.iter().map(|&v| v == l).collect(),
        None => vec![false; h * w],
    }
}

fn conn_plane(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let mut level = vec![f64::NAN; h * w];
    for i in 1..=CONN_LEVELS {
        let t = i as f64 / 10.0;
        let prev = (i - 1) as f64 / 10.0;
        let both: Vec<bool> = pred.iter().zip(gt).map(|(p, g)| *p >= t && *g >= t).collect();
        let omega = largest_component(&both, h, w);
        for (l, inside) in level.iter_mut().zip(omega) {
            if l.is_nan() && !inside {
                *l = prev;
            }
        }
    }
    let phi = |a: f64, l: f64| {
        let d = a - l;
        if d >= CONN_THETA {
            1.0 - d
        } else {
            1.0
        }
    };
    let mut s = 0.0;
    for k in 0..h * w {
        let l = if level[k].is_nan() { 1.0 } else { level[k] };
        s += (phi(pred[k], l) - phi(gt[k], l)).abs();
    }
    s / 1000.0
}

pub fn conn_error(pred: &Tensor, gt: &Tensor) -> f64 {
    let s = pred.shape();
    let hw = s.h() * s.w();
    pred.data()
        .chunks(hw)
        .zip(gt.data().chunks(hw))
        .map(|(p, g)| conn_plane(p, g, s.h(), s.w()))
        .sum()
}

/// All four metrics for one prediction.
pub fn evaluate(pred: &Tensor, gt: &Tensor) -> Result<Metrics> {
    check_inputs(pred, gt)?;
    Ok(Metrics {
        sad: sad(pred, gt),
        mse: mse(pred, gt),
        grad: grad_error(pred, gt),
        conn: conn_error(pred, gt),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub count: usize,
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
}

impl GroupMetrics {
    fn mean(items: &[Metrics]) -> Option<GroupMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(GroupMetrics {
            count: items.len(),
            sad: mean(|m| m.sad),
            mse: mean(|m| m.mse),
            grad: mean(|m| m.grad),
            conn: mean(|m| m.conn),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric_version: String,
    pub transparent: Option<GroupMetrics>,
    #[serde(rename = "non-transparent")]
    pub non_transparent: Option<GroupMetrics>,
    pub whole: GroupMetrics,
}

/// Evaluates every `(pred, gt, attribute)` and averages per group.
pub fn report(samples: &[(Tensor, Tensor, Attribute)]) -> Result<MetricsReport> {
    let scored = samples
        .iter()
        .map(|(p, g, a)| Ok((evaluate(p, g)?, *a)))
        .collect::<Result<Vec<_>>>()?;
    report_from_metrics(&scored)
}

pub fn report_from_metrics(scored: &[(Metrics, Attribute)]) -> Result<MetricsReport> {
    if scored.is_empty() {
        return Err(Error::invalid("report", "no samples"));
    }
    let pick = |want: Attribute| -> Vec<Metrics> {
        scored.iter().filter(|(_, a)| *a == want).map(|(m, _)| *m).collect()
    };
    let all: Vec<Metrics> = scored.iter().map(|(m, _)| *m).collect();
    Ok(MetricsReport {
        metric_version: METRIC_VERSION.to_string(),
        transparent: GroupMetrics::mean(&pick(Attribute::Transparent)),
        non_transparent: GroupMetrics::mean(&pick(Attribute::NonTransparent)),
        whole: GroupMetrics::mean(&all).expect("nonempty"),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table: one row per group, columns SAD, MSE, Grad, Conn.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>5} {:>10} {:>10} {:>10} {:>10}\n",
            "group", "count", "SAD", "MSE", "Grad", "Conn"
        );
        let rows = [
            ("transparent", self.transparent),
            ("non-transparent", self.non_transparent),
            ("whole", Some(self.whole)),
        ];
        for (name, g) in rows {
            match g {
                Some(g) => writeln!(
                    s,
                    "{:<16} {:>5} {:>10.4} {:>10.6} {:>10.4} {:>10.4}",
                    name, g.count, g.sad, g.mse, g.grad, g.conn
                ),
                None => writeln!(
                    s,
                    "{:<16} {:>5} {:>10} {:>10} {:>10} {:>10}",
                    name, 0, "-", "-", "-", "-"
                ),
            }
            .expect("writing to a String cannot fail");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn identical_mattes_score_zero() {
        let gt = Tensor::from_fn(Shape::new(1, 1, 9, 7), |[_, _, y, x]| ((y * 7 + x) % 11) as f64 / 10.0);
        let m = evaluate(&gt, &gt).unwrap();
        assert_eq!(m, Metrics::default());
    }

    #[test]
    fn single_pixel_error() {
        let gt = Tensor::zeros(Shape::new(1, 1, 10, 20));
        let mut p = gt.clone();
        p.set([0, 0, 3, 4], 1.0);
        let m = evaluate(&p, &gt).unwrap();
        assert_eq!(m.sad, 0.001);
        assert_eq!(m.mse, 1.0 / 200.0);
    }

    #[test]
    fn largest_component_tie_break() {
        // Two single-pixel components: the first in row-major order wins.
        let mask = [false, true, false, false, false, true];
        let c = largest_component(&mask, 2, 3);
        assert_eq!(c, vec![false, true, false, false, false, false]);
    }

    #[test]
    fn empty_report_rejected() {
        assert!(report(&[]).is_err());
    }
}
