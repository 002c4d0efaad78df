//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates re-evaluated with a smaller step because a
    /// non-differentiable point lay inside the stencil.
    pub kink_retries: usize,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

const KINK_TOLERANCE: f64 = 1e-3;
const KINK_SHRINK: f64 = 8.0;
const MIN_EPS: f64 = 1e-8;

/// Relative error used throughout: `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of the scalar built by `build` against
/// the fourth-order central difference
/// `(8 (f(x + e) - f(x - e)) - (f(x + 2e) - f(x - 2e))) / 12 e`.
///
/// `build` receives a fresh graph and one differentiable leaf per entry of
/// `params`, and must return a scalar node. At most `max_coords` evenly
/// spaced coordinates of each parameter are perturbed.
pub fn grad_check<F>(
    build: F,
    params: &[Tensor],
    eps: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid("grad_check", format!("eps {eps} outside (0, 1e-2]")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        kink_retries: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let len = params[pi].len();
        let take = len.min(max_coords.max(1));
        for k in 0..take {
            let coord = k * len / take;
            let orig = params[pi].data()[coord];
            let mut at = |offset: f64| {
                work[pi].data_mut()[coord] = orig + offset;
                eval(&work)
            };
            let mut h = eps;
            let numeric = loop {
                let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
                let (inner, outer) = ((p1 - m1) / (2.0 * h), (p2 - m2) / (4.0 * h));
                // Disagreeing sub-stencils mean a kink lies within 2h.
                let smooth = rel_error(inner, outer) <= KINK_TOLERANCE;
                if smooth || h / KINK_SHRINK < MIN_EPS {
                    break (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                }
                report.kink_retries += 1;
                h /= KINK_SHRINK;
            };
            work[pi].data_mut()[coord] = orig;
            let err = rel_error(analytic.data()[coord], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, coord));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn linear_loss_is_exact() {
        let p = Tensor::from_fn(Shape::new(1, 2, 2, 2), |[_, c, h, w]| (c + 2 * h + 3 * w) as f64);
        let r = grad_check(
            |g, v| {
                let s = g.scale(v[0], 3.5);
                Ok(g.sum(s))
            },
            &[p],
            1e-5,
            100,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert_eq!(r.coords_checked, 8);
    }

    #[test]
    fn quadratic_at_three() {
        let r = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum(s))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
            1,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
    }

    #[test]
    fn eps_range_is_enforced() {
        let build = |g: &mut Graph, v: &[Var]| Ok(g.sum(v[0]));
        assert!(grad_check(build, &[Tensor::scalar(1.0)], 0.0, 1).is_err());
        assert!(grad_check(build, &[Tensor::scalar(1.0)], 0.1, 1).is_err());
    }
}
