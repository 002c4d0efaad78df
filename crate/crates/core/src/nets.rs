//! Teacher and student encoder-decoders, the global-context block and the
//! spatial attention mask generator.
//!
//! Both networks share one architecture and differ only in the input
//! channels of the first convolution (RGB + trimap for the teacher, RGB for
//! the student):
//!
//! ```text
//! encoder stage s (s = 1..4, widths 16, 32, 64, 64):
//!     conv3x3/1 + relu -> conv3x3/2 + relu          => tap s at H / 2^s
//! decoder stage s (widths 64, 32, 16, 16):
//!     upsample x2 -> conv3x3/1 + relu -> + skip     (skips: tap3, tap2, tap1, stem)
//! head: conv1x1 (zero weights, bias 0.5 at init) -> clamp [0, 1]
//! ```

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{PoolKind, SoftmaxAxis};
use crate::params::{BindMode, Bound, Init, ParamSpec, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const ENCODER_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const DECODER_WIDTHS: [usize; 4] = [64, 32, 16, 16];
pub const GC_RATIO: usize = 4;
pub const ATTENTION_KERNEL: usize = 7;
pub const HEAD_BIAS_INIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn in_channels(self) -> usize {
        match self {
            Role::Teacher => 4,
            Role::Student => 3,
        }
    }

    /// Checkpoint namespace of the role's network.
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

/// Parameter declarations of the encoder-decoder for `role`.
pub fn net_specs(role: Role) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    let mut cin = role.in_channels();
    for (s, &w) in ENCODER_WIDTHS.iter().enumerate() {
        v.extend(ParamSpec::conv(&format!("enc{}.a", s + 1), cin, w, 3));
        v.extend(ParamSpec::conv(&format!("enc{}.b", s + 1), w, w, 3));
        cin = w;
    }
    for (s, &w) in DECODER_WIDTHS.iter().enumerate() {
        v.extend(ParamSpec::conv(&format!("dec{}", s + 1), cin, w, 3));
        cin = w;
    }
    // The hard clamp passes no gradient outside [0, 1], and Kaiming-scaled
    // logits frequently start there for every pixel. A zero head with bias
    // 0.5 starts every prediction at the centre of the active range.
    v.push(ParamSpec::new("head.weight", Shape::new(1, cin, 1, 1), Init::Zeros));
    v.push(ParamSpec::new("head.bias", Shape::new(1, 1, 1, 1), Init::Constant(HEAD_BIAS_INIT)));
    v
}

/// Encoder outputs `F_1 .. F_4`; `levels[n - 1]` has spatial size `H / 2^n`.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    pub levels: Vec<Var>,
}

impl FeatureTaps {
    pub fn level(&self, n: usize) -> Result<Var> {
        n.checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .copied()
            .ok_or_else(|| Error::invalid("taps", format!("no tap at level {n}")))
    }
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

fn check_input(shape: Shape, channels: usize) -> Result<()> {
    if shape.c() != channels {
        return Err(Error::invalid(
            "forward",
            format!("expected {channels} input channels, got {shape}"),
        ));
    }
    if shape.h() == 0 || shape.h() % 16 != 0 || shape.w() == 0 || shape.w() % 16 != 0 {
        return Err(Error::invalid(
            "forward",
            format!("spatial dims of {shape} must be positive multiples of 16"),
        ));
    }
    Ok(())
}

/// Encoder only: returns the stem activation and the four taps.
fn encoder(g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
    let mut h = x;
    let mut stem = None;
    let mut taps = Vec::with_capacity(4);
    for s in 1..=4 {
        h = conv(g, p, &format!("enc{s}.a"), h, 1, 1)?;
        h = g.relu(h);
        if s == 1 {
            stem = Some(h);
        }
        h = conv(g, p, &format!("enc{s}.b"), h, 2, 1)?;
        h = g.relu(h);
        taps.push(h);
    }
    Ok((stem.expect("stage 1 ran"), taps))
}

fn encoder_decoder(g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, FeatureTaps)> {
    let (stem, taps) = encoder(g, p, x)?;
    let mut h = taps[3];
    let skips = [taps[2], taps[1], taps[0], stem];
    for (s, skip) in skips.into_iter().enumerate() {
        h = g.upsample2x(h)?;
        h = conv(g, p, &format!("dec{}", s + 1), h, 1, 1)?;
        h = g.relu(h);
        h = g.add(h, skip)?;
    }
    let logits = conv(g, p, "head", h, 1, 0)?;
    let alpha = g.clamp(logits, 0.0, 1.0);
    Ok((alpha, FeatureTaps { levels: taps }))
}

/// Trimap-free forward pass.
pub fn student_forward(g: &mut Graph, p: &Bound, rgb: Var) -> Result<(Var, FeatureTaps)> {
    check_input(g.shape(rgb), 3)?;
    encoder_decoder(g, p, rgb)
}

/// Forward pass with the trimap appended as a fourth input plane.
pub fn teacher_forward(
    g: &mut Graph,
    p: &Bound,
    rgb: Var,
    trimap: Var,
) -> Result<(Var, FeatureTaps)> {
    let x = teacher_input(g, rgb, trimap)?;
    encoder_decoder(g, p, x)
}

/// Teacher encoder taps without running the decoder.
pub fn teacher_features(g: &mut Graph, p: &Bound, rgb: Var, trimap: Var) -> Result<FeatureTaps> {
    let x = teacher_input(g, rgb, trimap)?;
    let (_, levels) = encoder(g, p, x)?;
    Ok(FeatureTaps { levels })
}

fn teacher_input(g: &mut Graph, rgb: Var, trimap: Var) -> Result<Var> {
    check_input(g.shape(rgb), 3)?;
    let ts = g.shape(trimap);
    if ts != g.shape(rgb).with_c(1) {
        return Err(Error::shape("teacher_forward", g.shape(rgb), ts));
    }
    g.concat_channels(&[rgb, trimap])
}

/// Trained student used for inference: RGB in, alpha out.
pub struct StudentNet {
    params: ParamStore,
}

impl StudentNet {
    pub fn new(params: ParamStore) -> Result<Self> {
        params.check_against(&net_specs(Role::Student))?;
        Ok(StudentNet { params })
    }

    pub fn infer(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, "", BindMode::Frozen);
        let x = g.constant(rgb.clone());
        let (alpha, _) = student_forward(&mut g, &p, x)?;
        Ok(g.value(alpha).clone())
    }
}

/// Trained teacher used for inference: needs the trimap.
pub struct TeacherNet {
    params: ParamStore,
}

impl TeacherNet {
    pub fn new(params: ParamStore) -> Result<Self> {
        params.check_against(&net_specs(Role::Teacher))?;
        Ok(TeacherNet { params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn infer(&self, rgb: &Tensor, trimap: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, "", BindMode::Frozen);
        let x = g.constant(rgb.clone());
        let t = g.constant(trimap.clone());
        let (alpha, _) = teacher_forward(&mut g, &p, x, t)?;
        Ok(g.value(alpha).clone())
    }
}

/// Global-context block parameters for a `channels`-wide feature:
/// `wk` (C -> 1, no bias: a constant logit shift cancels in the softmax),
/// `wv1` (C -> C/r), `ln` over C/r, `wv2` (C/r -> C).
pub fn gc_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    let mid = (channels / GC_RATIO).max(1);
    let mut v = vec![ParamSpec::new(
        format!("{prefix}.wk.weight"),
        Shape::new(1, channels, 1, 1),
        Init::KaimingUniform,
    )];
    v.extend(ParamSpec::conv(&format!("{prefix}.wv1"), channels, mid, 1));
    v.push(ParamSpec::new(
        format!("{prefix}.ln.gamma"),
        Shape::new(1, mid, 1, 1),
        Init::Ones,
    ));
    v.push(ParamSpec::new(
        format!("{prefix}.ln.beta"),
        Shape::new(1, mid, 1, 1),
        Init::Zeros,
    ));
    v.extend(ParamSpec::conv(&format!("{prefix}.wv2"), mid, channels, 1));
    v
}

/// `Gc(F) = F + Wv2(relu(LN(Wv1(sum_j softmax_j(Wk F) F_j))))`.
pub fn gc_block(g: &mut Graph, p: &Bound, prefix: &str, f: Var) -> Result<Var> {
    let wk = p.get(&format!("{prefix}.wk.weight"))?;
    if g.shape(wk).c() != g.shape(f).c() {
        return Err(Error::shape("gc_block", g.shape(f), g.shape(wk)));
    }
    let logits = g.conv2d(f, wk, None, 1, 0)?;
    let weights = g.softmax(logits, SoftmaxAxis::Spatial);
    let weighted = g.mul(f, weights)?;
    let context = g.sum_spatial(weighted);
    let t = conv(g, p, &format!("{prefix}.wv1"), context, 1, 0)?;
    let gamma = p.get(&format!("{prefix}.ln.gamma"))?;
    let beta = p.get(&format!("{prefix}.ln.beta"))?;
    let t = g.layer_norm(t, gamma, beta)?;
    let t = g.relu(t);
    let t = conv(g, p, &format!("{prefix}.wv2"), t, 1, 0)?;
    g.add(f, t)
}

pub fn attention_specs(prefix: &str) -> Vec<ParamSpec> {
    ParamSpec::conv(&format!("{prefix}.conv7"), 2, 1, ATTENTION_KERNEL).to_vec()
}

/// `softmax_{h,w}(conv7([avgpool_c(F); maxpool_c(F)] / T))`, one
/// distribution over positions per sample.
pub fn spatial_attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    f: Var,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(
            "spatial_attention",
            format!("temperature must be positive, got {temperature}"),
        ));
    }
    let avg = g.pool(f, PoolKind::ChannelAvg)?;
    let max = g.pool(f, PoolKind::ChannelMax)?;
    let pooled = g.concat_channels(&[avg, max])?;
    let scaled = g.scale(pooled, 1.0 / temperature);
    let logits = conv(g, p, &format!("{prefix}.conv7"), scaled, 1, ATTENTION_KERNEL / 2)?;
    Ok(g.softmax(logits, SoftmaxAxis::Spatial))
}
