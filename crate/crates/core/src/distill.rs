//! Privileged-information distillation losses.
//!
//! * Cross-layer semantic distillation (CLSD): global-context transformed
//!   teacher features supervise both the student's same-level feature and a
//!   strided projection of the student's cross-layer accumulator
//!   `Fbar_n = F_n + proj_n(Fbar_{n-1})`, with `Fbar_1 = F_1`.
//! * Attention-guided local distillation (ALD): feature mimicry restricted to
//!   the transition region and weighted by the teacher's spatial attention,
//!   plus an L1 match between teacher and student attention maps.
//!
//! Teacher-side inputs are detached inside every loss, so no gradient can
//! reach the teacher whatever the caller passes in. All losses are averaged
//! over the batch axis; for a single sample they are the plain sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nets::{attention_specs, gc_block, gc_specs, spatial_attention, FeatureTaps, ENCODER_WIDTHS};
use crate::params::{Bound, ParamSpec};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticMode {
    None,
    /// Same-layer terms only.
    #[serde(rename = "sd")]
    Sd,
    /// Same-layer plus cross-layer terms.
    #[serde(rename = "clsd")]
    Clsd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalMode {
    None,
    /// Transition-region feature loss with a uniform spatial weighting.
    #[serde(rename = "ld")]
    Ld,
    /// Attention-weighted feature loss plus attention-map loss.
    #[serde(rename = "ald")]
    Ald,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha_ald: f64,
    pub beta_ald: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub tap_levels: Vec<usize>,
    pub semantic_mode: SemanticMode,
    pub local_mode: LocalMode,
    /// Divide each CLSD squared sum by its element count.
    pub normalize_clsd: bool,
    /// ALD component switches.
    pub ald_feature: bool,
    pub ald_attention: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda1: 0.2,
            lambda2: 1.0,
            alpha_ald: 0.002,
            beta_ald: 0.0002,
            gamma: 1.0,
            temperature: 1.0,
            tap_levels: vec![1, 2, 3, 4],
            semantic_mode: SemanticMode::Clsd,
            local_mode: LocalMode::Ald,
            normalize_clsd: true,
            ald_feature: true,
            ald_attention: true,
        }
    }
}

impl DistillConfig {
    /// No distillation at all: the trimap-free baseline.
    pub fn baseline() -> Self {
        DistillConfig {
            semantic_mode: SemanticMode::None,
            local_mode: LocalMode::None,
            ..DistillConfig::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.gamma != 0.0
            && (self.semantic_mode != SemanticMode::None || self.local_mode != LocalMode::None)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha_ald", self.alpha_ald),
            ("beta_ald", self.beta_ald),
            ("gamma", self.gamma),
        ];
        for (name, v) in weights {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if let Some(l) = self.tap_levels.iter().find(|&&l| l == 0 || l > ENCODER_WIDTHS.len()) {
            return Err(Error::Config(format!("tap level {l} outside 1..=4")));
        }
        let any_mode =
            self.semantic_mode != SemanticMode::None || self.local_mode != LocalMode::None;
        if any_mode && self.tap_levels.is_empty() {
            return Err(Error::Config("tap_levels is empty while distillation is enabled".into()));
        }
        Ok(())
    }

    fn levels(&self) -> Vec<usize> {
        let mut v = self.tap_levels.clone();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Names of the per-level distillation parameter groups.
pub fn gc_teacher(n: usize) -> String {
    format!("l{n}.gc_t")
}
pub fn gc_student(n: usize) -> String {
    format!("l{n}.gc_s")
}
pub fn projection(n: usize) -> String {
    format!("l{n}.proj")
}
pub fn attention_teacher(n: usize) -> String {
    format!("l{n}.attn_t")
}
pub fn attention_student(n: usize) -> String {
    format!("l{n}.attn_s")
}

/// Declarations for every tap level: teacher- and student-side GC blocks,
/// teacher and student attention generators, and for `n >= 2` the stride-2
/// 3x3 projection `width_{n-1} -> width_n`.
pub fn distill_specs() -> Vec<ParamSpec> {
    let mut v = Vec::new();
    for (i, &c) in ENCODER_WIDTHS.iter().enumerate() {
        let n = i + 1;
        v.extend(gc_specs(&gc_teacher(n), c));
        v.extend(gc_specs(&gc_student(n), c));
        v.extend(attention_specs(&attention_teacher(n)));
        v.extend(attention_specs(&attention_student(n)));
        if n >= 2 {
            v.extend(ParamSpec::conv(&projection(n), ENCODER_WIDTHS[i - 1], c, 3));
        }
    }
    v
}

/// True for distillation parameters that never receive a gradient (the
/// teacher's attention generators: their output is always detached).
pub fn is_teacher_side_attention(name: &str) -> bool {
    name.split('.').nth(1) == Some("attn_t")
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn batch(g: &Graph, v: Var) -> f64 {
    g.shape(v).n().max(1) as f64
}

fn squared_distance(g: &mut Graph, a: Var, b: Var, normalize: bool) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    let denom = if normalize {
        g.value(d).len() as f64
    } else {
        batch(g, d)
    };
    Ok(g.scale(s, 1.0 / denom))
}

fn project(g: &mut Graph, p: &Bound, n: usize, x: Var) -> Result<Var> {
    let name = projection(n);
    let w = p
        .get(&format!("{name}.weight"))
        .map_err(|_| Error::invalid("clsd_loss", format!("missing projection for level {n}")))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, Some(b), 2, 1)
}

fn check_aligned(g: &Graph, t: Var, s: Var, n: usize) -> Result<()> {
    if g.shape(t) != g.shape(s) {
        return Err(Error::invalid(
            "distill",
            format!("tap level {n}: teacher {} and student {} differ", g.shape(t), g.shape(s)),
        ));
    }
    Ok(())
}

/// Returns the CLSD loss and the student accumulators `Fbar_1 ..` (computed
/// up to the deepest tap level in CLSD mode, empty otherwise).
pub fn clsd_loss(
    g: &mut Graph,
    teacher: &FeatureTaps,
    student: &FeatureTaps,
    p: &Bound,
    cfg: &DistillConfig,
) -> Result<(Var, Vec<Var>)> {
    let levels = cfg.levels();
    let mut total = zero(g);
    if cfg.semantic_mode == SemanticMode::None || levels.is_empty() {
        return Ok((total, Vec::new()));
    }
    let cross = cfg.semantic_mode == SemanticMode::Clsd;
    let deepest = *levels.last().expect("nonempty");

    // projections[n] = proj_n(Fbar_{n-1}); fbar[n - 1] = Fbar_n.
    let mut fbar = Vec::new();
    let mut projections = vec![None; deepest + 1];
    if cross {
        fbar.push(student.level(1)?);
        for n in 2..=deepest {
            let pr = project(g, p, n, fbar[n - 2])?;
            let f = g.add(student.level(n)?, pr)?;
            projections[n] = Some(pr);
            fbar.push(f);
        }
    }

    for &n in &levels {
        let (tn, sn) = (teacher.level(n)?, student.level(n)?);
        check_aligned(g, tn, sn, n)?;
        let tn = g.detach(tn);
        let gt = gc_block(g, p, &gc_teacher(n), tn)?;
        let gs = gc_block(g, p, &gc_student(n), sn)?;
        let same = squared_distance(g, gt, gs, cfg.normalize_clsd)?;
        let same = g.scale(same, cfg.lambda1);
        total = g.add(total, same)?;
        if let (true, Some(pr)) = (cross && cfg.lambda2 != 0.0, projections.get(n).copied().flatten()) {
            let gp = gc_block(g, p, &gc_student(n), pr)?;
            let x = squared_distance(g, gt, gp, cfg.normalize_clsd)?;
            let x = g.scale(x, cfg.lambda2);
            total = g.add(total, x)?;
        }
    }
    Ok((total, fbar))
}

fn check_mask(g: &Graph, feature: Var, mask: Var, op: &'static str) -> Result<()> {
    let (f, m) = (g.shape(feature), g.shape(mask));
    if m != Shape::new(f.n(), 1, f.h(), f.w()) {
        return Err(Error::shape(op, f, m));
    }
    Ok(())
}

/// `sum_{k,i,j} R_ij M_ij (Ft_kij - Fs_kij)^2`; `teacher_mask` is the
/// teacher's attention map (or a uniform map for LD), held constant.
pub fn ald_feature_loss(
    g: &mut Graph,
    teacher: Var,
    student: Var,
    region: Var,
    teacher_mask: Var,
) -> Result<Var> {
    if g.shape(teacher) != g.shape(student) {
        return Err(Error::shape("ald_feature_loss", g.shape(teacher), g.shape(student)));
    }
    check_mask(g, student, region, "ald_feature_loss")?;
    check_mask(g, student, teacher_mask, "ald_feature_loss")?;
    let t = g.detach(teacher);
    let m = g.detach(teacher_mask);
    let d = g.sub(t, student)?;
    let sq = g.square(d);
    let rm = g.mul(region, m)?;
    let weighted = g.mul(sq, rm)?;
    let s = g.sum(weighted);
    let n = batch(g, student);
    Ok(g.scale(s, 1.0 / n))
}

/// `sum_ij | R_ij Mt_ij - R_ij Ms_ij |` with the teacher map held constant.
pub fn ald_attention_loss(
    g: &mut Graph,
    teacher_mask: Var,
    student_mask: Var,
    region: Var,
) -> Result<Var> {
    let (a, b, r) = (g.shape(teacher_mask), g.shape(student_mask), g.shape(region));
    if a != b {
        return Err(Error::shape("ald_attention_loss", a, b));
    }
    if r != a {
        return Err(Error::shape("ald_attention_loss", a, r));
    }
    let mt = g.detach(teacher_mask);
    let rt = g.mul(region, mt)?;
    let rs = g.mul(region, student_mask)?;
    let d = g.sub(rt, rs)?;
    let a = g.abs(d);
    let s = g.sum(a);
    let n = batch(g, student_mask);
    Ok(g.scale(s, 1.0 / n))
}

/// Uniform `1 / (h w)` spatial weighting shaped like `feature`'s positions.
pub fn uniform_mask(shape: Shape) -> Tensor {
    let hw = (shape.h() * shape.w()) as f64;
    Tensor::full(Shape::new(shape.n(), 1, shape.h(), shape.w()), 1.0 / hw)
}

/// `alpha * sum_n Lf_n + beta * sum_n La_n` over the tap levels.
/// `regions[n - 1]` is the transition mask at level `n`.
pub fn ald_loss(
    g: &mut Graph,
    teacher: &FeatureTaps,
    student: &FeatureTaps,
    regions: &[Var],
    p: &Bound,
    cfg: &DistillConfig,
) -> Result<Var> {
    let mut feature = zero(g);
    let mut attention = zero(g);
    if cfg.local_mode == LocalMode::None {
        return Ok(feature);
    }
    let guided = cfg.local_mode == LocalMode::Ald;
    for n in cfg.levels() {
        let (tn, sn) = (teacher.level(n)?, student.level(n)?);
        check_aligned(g, tn, sn, n)?;
        let region = *regions
            .get(n - 1)
            .ok_or_else(|| Error::invalid("ald_loss", format!("no region mask for level {n}")))?;
        let tn = g.detach(tn);
        let mt = if guided {
            spatial_attention(g, p, &attention_teacher(n), tn, cfg.temperature)?
        } else {
            let u = uniform_mask(g.shape(sn));
            g.constant(u)
        };
        if !guided || cfg.ald_feature {
            let lf = ald_feature_loss(g, tn, sn, region, mt)?;
            feature = g.add(feature, lf)?;
        }
        if guided && cfg.ald_attention {
            let ms = spatial_attention(g, p, &attention_student(n), sn, cfg.temperature)?;
            let la = ald_attention_loss(g, mt, ms, region)?;
            attention = g.add(attention, la)?;
        }
    }
    let f = g.scale(feature, cfg.alpha_ald);
    if !guided {
        return Ok(f);
    }
    let a = g.scale(attention, cfg.beta_ald);
    g.add(f, a)
}

#[derive(Clone, Copy, Debug)]
pub struct DistillLosses {
    pub clsd: Var,
    pub ald: Var,
    pub total: Var,
}

/// `L_distn = L_CLSD + L_ALD`, each present per its mode.
pub fn distill_loss(
    g: &mut Graph,
    teacher: &FeatureTaps,
    student: &FeatureTaps,
    regions: &[Var],
    p: &Bound,
    cfg: &DistillConfig,
) -> Result<DistillLosses> {
    let (clsd, _) = clsd_loss(g, teacher, student, p, cfg)?;
    let ald = ald_loss(g, teacher, student, regions, p, cfg)?;
    let total = g.add(clsd, ald)?;
    Ok(DistillLosses { clsd, ald, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_loss_weight_table() {
        let d = DistillConfig::default();
        assert_eq!(
            (d.lambda1, d.lambda2, d.alpha_ald, d.beta_ald, d.gamma),
            (0.2, 1.0, 0.002, 0.0002, 1.0)
        );
    }

    #[test]
    fn validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            temperature: 0.0,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DistillConfig {
            lambda1: -1.0,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DistillConfig {
            tap_levels: vec![],
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
        let ok = DistillConfig {
            tap_levels: vec![],
            ..DistillConfig::baseline()
        };
        assert!(ok.validate().is_ok());
        let bad = DistillConfig {
            tap_levels: vec![5],
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_keys() {
        let json = serde_json::to_value(DistillConfig::default()).unwrap();
        for k in [
            "lambda1",
            "lambda2",
            "alpha_ald",
            "beta_ald",
            "gamma",
            "temperature",
            "tap_levels",
            "semantic_mode",
            "local_mode",
            "normalize_clsd",
        ] {
            assert!(json.get(k).is_some(), "{k}");
        }
        assert_eq!(json["semantic_mode"], "clsd");
        assert!(serde_json::from_str::<DistillConfig>(r#"{"lambda3": 1}"#).is_err());
        let c: DistillConfig = serde_json::from_str(r#"{"local_mode": "ld"}"#).unwrap();
        assert_eq!(c.local_mode, LocalMode::Ld);
    }

    #[test]
    fn teacher_attention_names() {
        assert!(is_teacher_side_attention("l3.attn_t.conv7.weight"));
        assert!(!is_teacher_side_attention("l3.attn_s.conv7.weight"));
        assert!(!is_teacher_side_attention("l3.gc_t.wk.weight"));
    }
}
