//! Region-balanced supervision on the predicted matte: weighted L1, weighted
//! binary cross-entropy and a gradient-magnitude term.

use serde::{Deserialize, Serialize};

use crate::data::{Region, Trimap};
use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::tensor::Tensor;

pub const L1_KNOWN: f64 = 1.0;
pub const L1_TRANSITION: f64 = 2.0;
pub const CE_KNOWN: f64 = 1.0;
pub const CE_TRANSITION: f64 = 0.5;
/// Smoothing inside the gradient magnitude `sqrt(dx^2 + dy^2 + GRAD_EPS)`.
pub const GRAD_EPS: f64 = 1e-12;
const RANGE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaLossConfig {
    /// Predictions are clamped to `[ce_eps, 1 - ce_eps]` inside the CE term.
    pub ce_eps: f64,
    /// Divide the gradient term by `H * W`.
    pub normalize_grad: bool,
}

impl Default for AlphaLossConfig {
    fn default() -> Self {
        AlphaLossConfig {
            ce_eps: 1e-6,
            normalize_grad: true,
        }
    }
}

impl AlphaLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ce_eps > 0.0 && self.ce_eps < 0.5) {
            return Err(Error::Config(format!("ce_eps must be in (0, 0.5), got {}", self.ce_eps)));
        }
        Ok(())
    }
}

/// Per-pixel `(w_l1, w_ce)` maps from the trimap regions.
pub fn region_weights(trimap: &Trimap) -> (Tensor, Tensor) {
    let s = trimap.shape();
    let mut l1 = Tensor::zeros(s);
    let mut ce = Tensor::zeros(s);
    for (i, r) in trimap.regions().enumerate() {
        let (a, b) = match r {
            Region::Transition => (L1_TRANSITION, CE_TRANSITION),
            _ => (L1_KNOWN, CE_KNOWN),
        };
        l1.data_mut()[i] = a;
        ce.data_mut()[i] = b;
    }
    (l1, ce)
}

fn check_range(op: &'static str, what: &str, t: &Tensor) -> Result<()> {
    match t
        .data()
        .iter()
        .find(|v| !(**v >= -RANGE_TOL && **v <= 1.0 + RANGE_TOL))
    {
        Some(v) => Err(Error::invalid(op, format!("{what} value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Central-difference gradient magnitude of a constant tensor.
pub fn gradient_magnitude(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let m = magnitude(&mut g, v);
    g.value(m).clone()
}

fn magnitude(g: &mut Graph, x: Var) -> Var {
    let dx = g.central_diff(x, Axis::X);
    let dy = g.central_diff(x, Axis::Y);
    let dx2 = g.square(dx);
    let dy2 = g.square(dy);
    let s = g.add(dx2, dy2).expect("same shape");
    let s = g.affine(s, 1.0, GRAD_EPS);
    g.sqrt(s)
}

/// Component values of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AlphaLossTerms {
    pub l1: Var,
    pub ce: Var,
    pub grad: Var,
    pub total: Var,
}

/// `L = sum w_l1 S |p - g| + sum w_ce S CE(p, g) + sum |grad p - grad g|`,
/// each averaged over the batch axis. `scaling` is the regional scaling mask.
pub fn alpha_loss_terms(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    trimap: &Trimap,
    scaling: &Tensor,
    cfg: &AlphaLossConfig,
) -> Result<AlphaLossTerms> {
    let shape = g.shape(pred);
    for other in [gt.shape(), trimap.shape(), scaling.shape()] {
        if other != shape {
            return Err(Error::shape("alpha_loss", shape, other));
        }
    }
    if shape.c() != 1 {
        return Err(Error::invalid("alpha_loss", format!("expected one channel, got {shape}")));
    }
    check_range("alpha_loss", "prediction", g.value(pred))?;
    check_range("alpha_loss", "ground truth", gt)?;
    cfg.validate()?;

    let n = shape.n().max(1) as f64;
    let (w_l1, w_ce) = region_weights(trimap);
    let w_l1 = w_l1.zip_map(scaling, |a, b| a * b)?;
    // Negated so that the weighted sum of the log-likelihood is the CE.
    let w_ce = w_ce.zip_map(scaling, |a, b| -a * b)?;

    let gt_v = g.constant(gt.clone());
    let d = g.sub(pred, gt_v)?;
    let a = g.abs(d);
    let w = g.constant(w_l1);
    let l1 = g.mul(a, w)?;
    let l1 = g.sum(l1);
    let l1 = g.scale(l1, 1.0 / n);

    let p = g.clamp(pred, cfg.ce_eps, 1.0 - cfg.ce_eps);
    let lp = g.ln(p);
    let q = g.affine(p, -1.0, 1.0);
    let lq = g.ln(q);
    let t1 = g.mul(lp, gt_v)?;
    let one_minus = g.constant(gt.map(|v| 1.0 - v));
    let t2 = g.mul(lq, one_minus)?;
    let ll = g.add(t1, t2)?;
    let w = g.constant(w_ce);
    let ce = g.mul(ll, w)?;
    let ce = g.sum(ce);
    let ce = g.scale(ce, 1.0 / n);

    let mp = magnitude(g, pred);
    let mg = g.constant(gradient_magnitude(gt));
    let dm = g.sub(mp, mg)?;
    let dm = g.abs(dm);
    let grad = g.sum(dm);
    let norm = if cfg.normalize_grad {
        (shape.h() * shape.w()) as f64
    } else {
        1.0
    };
    let grad = g.scale(grad, 1.0 / (n * norm));

    let total = g.add(l1, ce)?;
    let total = g.add(total, grad)?;
    Ok(AlphaLossTerms { l1, ce, grad, total })
}

pub fn alpha_loss(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    trimap: &Trimap,
    scaling: &Tensor,
    cfg: &AlphaLossConfig,
) -> Result<Var> {
    Ok(alpha_loss_terms(g, pred, gt, trimap, scaling, cfg)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{scaling_mask, TR};
    use crate::tensor::Shape;

    #[test]
    fn single_transition_pixel() {
        let tri = Trimap::from_tensor(Tensor::full(Shape::new(1, 1, 1, 1), TR)).unwrap();
        let s = scaling_mask(&tri);
        let mut g = Graph::new();
        let p = g.leaf(Tensor::scalar(0.6));
        let t = alpha_loss_terms(&mut g, p, &Tensor::scalar(0.8), &tri, &s, &AlphaLossConfig::default())
            .unwrap();
        assert!((g.value(t.l1).item() - 0.4).abs() < 1e-15);
        let ce = 0.5 * (-0.8 * 0.6f64.ln() - 0.2 * 0.4f64.ln());
        assert!((g.value(t.ce).item() - ce).abs() < 1e-15);
        assert_eq!(g.value(t.grad).item(), 0.0);
    }

    #[test]
    fn rejects_out_of_range() {
        let tri = Trimap::from_tensor(Tensor::full(Shape::new(1, 1, 1, 1), TR)).unwrap();
        let s = scaling_mask(&tri);
        let mut g = Graph::new();
        let p = g.leaf(Tensor::scalar(1.1));
        let cfg = AlphaLossConfig::default();
        assert!(alpha_loss(&mut g, p, &Tensor::scalar(0.5), &tri, &s, &cfg).is_err());
        let p = g.leaf(Tensor::scalar(0.5));
        assert!(alpha_loss(&mut g, p, &Tensor::scalar(-0.1), &tri, &s, &cfg).is_err());
        assert!(alpha_loss(&mut g, p, &Tensor::scalar(1.0 + 1e-10), &tri, &s, &cfg).is_ok());
    }
}
