//! Finite-difference checks of every training loss on small random inputs.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alpha_loss::{alpha_loss, AlphaLossConfig};
use crate::data::{make_trimap, scaling_mask, Trimap};
use crate::distill::{
    ald_attention_loss, ald_feature_loss, attention_student, clsd_loss, distill_loss,
    distill_specs, is_teacher_side_attention, DistillConfig, LocalMode, SemanticMode,
};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::nets::{spatial_attention, FeatureTaps, ENCODER_WIDTHS};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Spatial size of the checked inputs.
pub const CHECK_SIZE: usize = 8;
pub const CHECK_EPS: f64 = 1e-4;
pub const CHECK_TOLERANCE: f64 = 1e-5;
const MAX_COORDS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckModule {
    All,
    Clsd,
    Ald,
    Alpha,
}

impl FromStr for CheckModule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CheckModule::All),
            "clsd" => Ok(CheckModule::Clsd),
            "ald" => Ok(CheckModule::Ald),
            "alpha" => Ok(CheckModule::Alpha),
            _ => Err(Error::invalid("grad-check", format!("unknown module {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl NamedCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= CHECK_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn binary(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
}

/// Random problem shared by the checks: one 8x8 sample, its matte, taps at
/// 8x8 / 4x4 / 2x2 / 1x1 with the encoder widths, transition masks and the
/// distillation parameters.
struct Problem {
    pred: Tensor,
    gt: Tensor,
    trimap: Trimap,
    scaling: Tensor,
    teacher: Vec<Tensor>,
    student: Vec<Tensor>,
    regions: Vec<Tensor>,
    params: ParamStore,
}

impl Problem {
    fn new(seed: u64) -> Result<Problem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, 1, CHECK_SIZE, CHECK_SIZE);
        let pred = uniform(&mut rng, s, 0.05, 0.95);
        // Ground truth with a solid block, a clear region and soft values.
        let gt = Tensor::from_fn(s, |[_, _, y, x]| match (y, x) {
            (0..=2, 0..=2) => 1.0,
            (5..=7, 5..=7) => 0.0,
            _ => ((y * 3 + x * 5) % 9) as f64 / 8.0,
        });
        let trimap = make_trimap(&gt, 1);
        let scaling = scaling_mask(&trimap);
        let taps = |rng: &mut ChaCha8Rng| -> Vec<Tensor> {
            ENCODER_WIDTHS
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let hw = CHECK_SIZE >> i;
                    uniform(rng, Shape::new(1, c, hw, hw), -1.0, 1.0)
                })
                .collect()
        };
        let teacher = taps(&mut rng);
        let student = taps(&mut rng);
        let regions = (0..ENCODER_WIDTHS.len())
            .map(|i| {
                let hw = CHECK_SIZE >> i;
                binary(&mut rng, Shape::new(1, 1, hw, hw))
            })
            .collect();
        let mut params = ParamStore::init(&distill_specs(), rng.gen());
        // Perturb the zero-initialized entries so no term is degenerate.
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        Ok(Problem {
            pred,
            gt,
            trimap,
            scaling,
            teacher,
            student,
            regions,
            params,
        })
    }

    /// Names of the checked distillation parameters. Left out (bound as
    /// constants): the teacher-side attention generators, whose output is
    /// held constant by design so they never receive a gradient, and the
    /// attention-logit biases, whose shift cancels in the spatial softmax so
    /// their exact gradient is zero and any finite difference is roundoff.
    fn checked_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(k, _)| k.clone())
            .filter(|k| !k.ends_with("conv7.bias") && !is_teacher_side_attention(k))
            .collect()
    }
}

/// Leaf layout used by the closures: `[pred, student taps.., params..]`.
struct Layout {
    names: Vec<String>,
}

impl Layout {
    fn leaves(&self, p: &Problem) -> Vec<Tensor> {
        let mut v = vec![p.pred.clone()];
        v.extend(p.student.iter().cloned());
        v.extend(self.names.iter().map(|n| p.params.get(n).expect("known").clone()));
        v
    }

    /// Binds leaves plus constants for everything not being checked.
    fn bind(&self, g: &mut Graph, vars: &[Var], p: &Problem) -> (Var, FeatureTaps, FeatureTaps, Bound, Vec<Var>) {
        let pred = vars[0];
        let k = p.student.len();
        let student = FeatureTaps {
            levels: vars[1..=k].to_vec(),
        };
        let mut map: BTreeMap<String, Var> = self
            .names
            .iter()
            .cloned()
            .zip(vars[k + 1..].iter().copied())
            .collect();
        for (name, t) in p.params.iter() {
            if !map.contains_key(name) {
                let v = g.constant(t.clone());
                map.insert(name.clone(), v);
            }
        }
        let teacher = FeatureTaps {
            levels: p.teacher.iter().map(|t| g.constant(t.clone())).collect(),
        };
        let regions = p.regions.iter().map(|t| g.constant(t.clone())).collect();
        (pred, teacher, student, Bound::from_vars(map), regions)
    }
}

/// Unit loss weights so each term contributes at comparable scale.
fn unit_weights(semantic: SemanticMode, local: LocalMode) -> DistillConfig {
    DistillConfig {
        lambda1: 1.0,
        lambda2: 1.0,
        alpha_ald: 1.0,
        beta_ald: 1.0,
        gamma: 1.0,
        semantic_mode: semantic,
        local_mode: local,
        ..DistillConfig::default()
    }
}

fn check(
    name: &'static str,
    p: &Problem,
    layout: &Layout,
    build: impl Fn(&mut Graph, Var, &FeatureTaps, &FeatureTaps, &Bound, &[Var]) -> Result<Var>,
) -> Result<NamedCheck> {
    let report = grad_check(
        |g, vars| {
            let (pred, t, s, b, r) = layout.bind(g, vars, p);
            build(g, pred, &t, &s, &b, &r)
        },
        &layout.leaves(p),
        CHECK_EPS,
        MAX_COORDS,
    )?;
    Ok(NamedCheck { name, report })
}

/// Runs the checks selected by `module` on a problem drawn from `seed`.
pub fn run(module: CheckModule, seed: u64) -> Result<Vec<NamedCheck>> {
    let p = Problem::new(seed)?;
    let layout = Layout {
        names: p.checked_names(),
    };
    let acfg = AlphaLossConfig::default();
    let want = |m: CheckModule| module == CheckModule::All || module == m;
    let mut out = Vec::new();
    if want(CheckModule::Alpha) {
        out.push(check("alpha_loss", &p, &layout, |g, pred, _, _, _, _| {
            alpha_loss(g, pred, &p.gt, &p.trimap, &p.scaling, &acfg)
        })?);
    }
    if want(CheckModule::Clsd) {
        let cfg = unit_weights(SemanticMode::Clsd, LocalMode::None);
        out.push(check("clsd_loss", &p, &layout, |g, _, t, s, b, _| {
            Ok(clsd_loss(g, t, s, b, &cfg)?.0)
        })?);
    }
    if want(CheckModule::Ald) {
        out.push(check("ald_feature_loss", &p, &layout, |g, _, t, s, b, r| {
            let mut total = g.constant(Tensor::scalar(0.0));
            for n in 1..=ENCODER_WIDTHS.len() {
                let (tn, sn) = (t.level(n)?, s.level(n)?);
                let mt = spatial_attention(g, b, &crate::distill::attention_teacher(n), tn, 1.0)?;
                let l = ald_feature_loss(g, tn, sn, r[n - 1], mt)?;
                total = g.add(total, l)?;
            }
            Ok(total)
        })?);
        out.push(check("ald_attention_loss", &p, &layout, |g, _, t, s, b, r| {
            let mut total = g.constant(Tensor::scalar(0.0));
            for n in 1..=ENCODER_WIDTHS.len() {
                let (tn, sn) = (t.level(n)?, s.level(n)?);
                let mt = spatial_attention(g, b, &crate::distill::attention_teacher(n), tn, 1.0)?;
                let ms = spatial_attention(g, b, &attention_student(n), sn, 1.0)?;
                let l = ald_attention_loss(g, mt, ms, r[n - 1])?;
                total = g.add(total, l)?;
            }
            Ok(total)
        })?);
    }
    if module == CheckModule::All {
        let cfg = unit_weights(SemanticMode::Clsd, LocalMode::Ald);
        out.push(check("total_loss", &p, &layout, |g, pred, t, s, b, r| {
            let la = alpha_loss(g, pred, &p.gt, &p.trimap, &p.scaling, &acfg)?;
            let d = distill_loss(g, t, s, r, b, &cfg)?;
            let d = g.scale(d.total, cfg.gamma);
            g.add(la, d)
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names_parse() {
        assert_eq!("clsd".parse::<CheckModule>().unwrap(), CheckModule::Clsd);
        assert!("bogus".parse::<CheckModule>().is_err());
    }

    #[test]
    fn all_checks_pass() {
        for seed in [1, 7, 42] {
            let checks = run(CheckModule::All, seed).unwrap();
            assert_eq!(checks.len(), 5);
            for c in checks {
                assert!(c.passed(), "seed {seed}: {} {:?}", c.name, c.report);
            }
        }
    }
}
