//! SGD with momentum and a poly schedule, teacher pretraining, student
//! distillation training and checkpoint evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alpha_loss::{alpha_loss_terms, AlphaLossConfig};
use crate::data::{make_trimap, region_mask, scaling_mask, Dataset, Trimap, TRAIN_TRIMAP_RADII};
use crate::distill::{distill_loss, distill_specs, is_teacher_side_attention, DistillConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{evaluate, report_from_metrics, MetricsReport};
use crate::nets::{
    net_specs, student_forward, teacher_features, teacher_forward, Role, StudentNet, TeacherNet,
};
use crate::params::{BindMode, Bound, ParamSpec, ParamStore};
use crate::seed::mix;
use crate::tensor::Tensor;

pub const POLY_POWER: f64 = 0.9;
pub const DISTILL_PREFIX: &str = "distill";
pub const DEFAULT_GRAD_CLIP: f64 = 1.0;
const EVAL_BATCH: usize = 8;

// Seed streams.
const STREAM_TEACHER_INIT: u64 = 10;
const STREAM_STUDENT_INIT: u64 = 11;
const STREAM_DISTILL_INIT: u64 = 12;
const STREAM_SHUFFLE: u64 = 20;
const STREAM_TRIMAP: u64 = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    pub dataset: Option<PathBuf>,
    /// Optional held-out set evaluated at every log point.
    pub test_dataset: Option<PathBuf>,
    pub eval_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub distill: DistillConfig,
    pub alpha_loss: AlphaLossConfig,
    /// Global L2 norm cap on the gradient before each SGD step; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            max_iter: 2000,
            batch_size: 8,
            seed: 1,
            image_size: 64,
            dataset: None,
            test_dataset: None,
            eval_every: 100,
            checkpoint: None,
            distill: DistillConfig::default(),
            alpha_loss: AlphaLossConfig::default(),
            grad_clip: Some(DEFAULT_GRAD_CLIP),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        TrainConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.distill.validate()?;
        self.alpha_loss.validate()
    }

    fn require_dataset(&self) -> Result<Dataset> {
        let path = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Config("no dataset path configured".into()))?;
        Dataset::load(path)
    }

    fn optional_test_set(&self) -> Result<Option<Dataset>> {
        self.test_dataset.as_ref().map(Dataset::load).transpose()
    }
}

/// `lr0 * (1 - iter / max_iter)^0.9`.
pub fn lr_at(iter: usize, max_iter: usize, lr0: f64) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(Error::invalid(
            "lr_at",
            format!("iteration {iter} outside 0..={max_iter}"),
        ));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(POLY_POWER))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    pub velocity: BTreeMap<String, Tensor>,
    pub iter: usize,
}

impl OptState {
    pub fn new() -> Self {
        OptState::default()
    }
}

/// One momentum-SGD update of every parameter named in `grads`:
/// `g' = g + wd * theta; v = m * v + g'; theta -= lr * v`.
/// Rescales all gradients so their joint L2 norm is at most `max`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = max / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
    }
    for (name, g) in grads {
        let theta = params.get_mut(name).expect("checked above");
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((t, v), g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let g = g + weight_decay * *t;
            *v = momentum * *v + g;
            *t -= lr * *v;
        }
    }
    state.iter += 1;
    Ok(())
}

/// Epoch-wise shuffled sample order: position `p` of the stream maps to
/// `perm_{p / len}[p % len]`, each permutation seeded from `(seed, epoch)`.
struct BatchOrder {
    len: usize,
    seed: u64,
    epoch: usize,
    perm: Vec<usize>,
}

impl BatchOrder {
    fn new(len: usize, seed: u64) -> Self {
        let mut b = BatchOrder {
            len,
            seed,
            epoch: usize::MAX,
            perm: Vec::new(),
        };
        b.load_epoch(0);
        b
    }

    fn load_epoch(&mut self, epoch: usize) {
        if self.epoch == epoch {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.seed, STREAM_SHUFFLE), epoch as u64));
        self.perm = (0..self.len).collect();
        self.perm.shuffle(&mut rng);
        self.epoch = epoch;
    }

    fn at(&mut self, pos: usize) -> usize {
        self.load_epoch(pos / self.len);
        self.perm[pos % self.len]
    }
}

/// Stacked tensors of one training batch.
struct Batch {
    image: Tensor,
    alpha: Tensor,
    trimap: Trimap,
    scaling: Tensor,
}

fn assemble(data: &Dataset, order: &mut BatchOrder, iter: usize, size: usize, seed: u64) -> Result<Batch> {
    let mut images = Vec::with_capacity(size);
    let mut alphas = Vec::with_capacity(size);
    let mut trimaps = Vec::with_capacity(size);
    for k in 0..size {
        let pos = iter * size + k;
        let s = &data.samples[order.at(pos)];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, STREAM_TRIMAP), pos as u64));
        let radius = rng.gen_range(TRAIN_TRIMAP_RADII.0..=TRAIN_TRIMAP_RADII.1);
        images.push(&s.image);
        alphas.push(&s.alpha);
        trimaps.push(make_trimap(&s.alpha, radius));
    }
    let trimap = Trimap::stack(&trimaps.iter().collect::<Vec<_>>())?;
    Ok(Batch {
        image: Tensor::stack(&images)?,
        alpha: Tensor::stack(&alphas)?,
        scaling: scaling_mask(&trimap),
        trimap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    /// Mean total loss over the iterations since the previous entry.
    pub loss: f64,
    pub alpha_loss: f64,
    pub distill_loss: f64,
    pub test_sad: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint contents (namespaced names).
    pub params: ParamStore,
    /// Total loss at every iteration.
    pub losses: Vec<f64>,
    pub log: Vec<LogEntry>,
}

fn check_size(data: &Dataset, size: usize, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{what} dataset is empty")));
    }
    if let Some((e, s)) = data
        .entries
        .iter()
        .zip(&data.samples)
        .find(|(_, s)| s.image.shape().h() != size || s.image.shape().w() != size)
    {
        return Err(Error::Config(format!(
            "{what} sample {} is {}, expected {size}x{size}",
            e.id,
            s.image.shape()
        )));
    }
    Ok(())
}

fn prefixed(specs: Vec<ParamSpec>, prefix: &str) -> Vec<ParamSpec> {
    specs
        .into_iter()
        .map(|mut s| {
            s.name = format!("{prefix}.{}", s.name);
            s
        })
        .collect()
}

pub fn teacher_checkpoint_specs() -> Vec<ParamSpec> {
    prefixed(net_specs(Role::Teacher), Role::Teacher.prefix())
}

pub fn student_checkpoint_specs() -> Vec<ParamSpec> {
    let mut v = prefixed(net_specs(Role::Student), Role::Student.prefix());
    v.extend(prefixed(distill_specs(), DISTILL_PREFIX));
    v
}

/// Shared loop: `step` builds the loss for one batch and returns
/// `(total, alpha, distill, graph gradients)`.
fn run_loop(
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    state: &mut ParamStore,
    what: &str,
    mut step: impl FnMut(&ParamStore, &Batch) -> Result<(f64, f64, f64, BTreeMap<String, Tensor>)>,
    eval: impl Fn(&ParamStore, &Dataset) -> Result<MetricsReport>,
) -> Result<(Vec<f64>, Vec<LogEntry>)> {
    let mut order = BatchOrder::new(train.len(), cfg.seed);
    let mut opt = OptState::new();
    let mut losses = Vec::with_capacity(cfg.max_iter);
    let mut log = Vec::new();
    let mut window = (0.0, 0.0, 0.0, 0usize);
    for iter in 0..cfg.max_iter {
        let batch = assemble(train, &mut order, iter, cfg.batch_size, cfg.seed)?;
        let (total, a, d, grads) = step(state, &batch)?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("{what} loss at iteration {iter}")));
        }
        let lr = lr_at(iter, cfg.max_iter, cfg.lr0)?;
        let mut grads = grads;
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        sgd_step(state, &grads, &mut opt, lr, cfg.momentum, cfg.weight_decay)?;
        losses.push(total);
        window = (window.0 + total, window.1 + a, window.2 + d, window.3 + 1);
        if (iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.max_iter {
            let n = window.3 as f64;
            let test_sad = match test {
                Some(t) => Some(eval(state, t)?.whole.sad),
                None => None,
            };
            let entry = LogEntry {
                iter: iter + 1,
                lr,
                loss: window.0 / n,
                alpha_loss: window.1 / n,
                distill_loss: window.2 / n,
                test_sad,
            };
            log::info!(
                "{what} iter {:>5} lr {:.5} loss {:.6} (alpha {:.6}, distill {:.6}){}",
                entry.iter,
                entry.lr,
                entry.loss,
                entry.alpha_loss,
                entry.distill_loss,
                test_sad.map(|s| format!(" test SAD {s:.4}")).unwrap_or_default()
            );
            log.push(entry);
            window = (0.0, 0.0, 0.0, 0);
        }
    }
    Ok((losses, log))
}

/// Pretrains the trimap-conditioned teacher with the alpha loss only.
pub fn train_teacher_on(cfg: &TrainConfig, train: &Dataset, test: Option<&Dataset>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_size(train, cfg.image_size, "training")?;
    if let Some(t) = test {
        check_size(t, cfg.image_size, "test")?;
    }
    let prefix = Role::Teacher.prefix();
    let mut state = ParamStore::new();
    state.extend_prefixed(
        prefix,
        &ParamStore::init(&net_specs(Role::Teacher), mix(cfg.seed, STREAM_TEACHER_INIT)),
    );
    let step = |state: &ParamStore, b: &Batch| {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &state.scoped(prefix), prefix, BindMode::Trainable);
        let rgb = g.constant(b.image.clone());
        let tri = g.constant(b.trimap.tensor().clone());
        let (alpha, _) = teacher_forward(&mut g, &p, rgb, tri)?;
        let terms = alpha_loss_terms(&mut g, alpha, &b.alpha, &b.trimap, &b.scaling, &cfg.alpha_loss)?;
        let total = g.value(terms.total).item();
        let grads = g.backward(terms.total)?.named();
        Ok((total, total, 0.0, grads))
    };
    let (losses, log) = run_loop(cfg, train, test, &mut state, "teacher", step, evaluate_params)?;
    Ok(TrainOutcome {
        params: state,
        losses,
        log,
    })
}

/// Validates a teacher checkpoint and returns its unprefixed parameters.
pub fn load_teacher(ckpt: &ParamStore) -> Result<ParamStore> {
    ckpt.check_against(&teacher_checkpoint_specs())?;
    Ok(ckpt.scoped(Role::Teacher.prefix()))
}

/// Trains the trimap-free student against a frozen teacher with
/// `L = L_alpha + gamma * L_distn`.
pub fn train_student_on(
    cfg: &TrainConfig,
    teacher_ckpt: &ParamStore,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_size(train, cfg.image_size, "training")?;
    if let Some(t) = test {
        check_size(t, cfg.image_size, "test")?;
    }
    let teacher = load_teacher(teacher_ckpt)?;
    let sp = Role::Student.prefix();
    let mut state = ParamStore::new();
    state.extend_prefixed(
        sp,
        &ParamStore::init(&net_specs(Role::Student), mix(cfg.seed, STREAM_STUDENT_INIT)),
    );
    state.extend_prefixed(
        DISTILL_PREFIX,
        &ParamStore::init(&distill_specs(), mix(cfg.seed, STREAM_DISTILL_INIT)),
    );
    let dcfg = &cfg.distill;
    let active = dcfg.is_active();
    let step = |state: &ParamStore, b: &Batch| {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &state.scoped(sp), sp, BindMode::Trainable);
        let rgb = g.constant(b.image.clone());
        let (alpha, s_taps) = student_forward(&mut g, &p, rgb)?;
        let terms = alpha_loss_terms(&mut g, alpha, &b.alpha, &b.trimap, &b.scaling, &cfg.alpha_loss)?;
        let mut loss = terms.total;
        let mut distill = 0.0;
        if active {
            let tp = Bound::new(&mut g, &teacher, "", BindMode::Frozen);
            let tri = g.constant(b.trimap.tensor().clone());
            let t_taps = teacher_features(&mut g, &tp, rgb, tri)?;
            let dp = Bound::with_modes(&mut g, &state.scoped(DISTILL_PREFIX), DISTILL_PREFIX, |n| {
                if is_teacher_side_attention(n) {
                    BindMode::Frozen
                } else {
                    BindMode::Trainable
                }
            });
            let regions = (1..=4)
                .map(|n| Ok(g.constant(region_mask(&b.trimap, n)?)))
                .collect::<Result<Vec<_>>>()?;
            let d = distill_loss(&mut g, &t_taps, &s_taps, &regions, &dp, dcfg)?;
            distill = g.value(d.total).item();
            let weighted = g.scale(d.total, dcfg.gamma);
            loss = g.add(loss, weighted)?;
        }
        let total = g.value(loss).item();
        let grads = g.backward(loss)?.named();
        Ok((total, g.value(terms.total).item(), distill, grads))
    };
    let (losses, log) = run_loop(cfg, train, test, &mut state, "student", step, evaluate_params)?;
    Ok(TrainOutcome {
        params: state,
        losses,
        log,
    })
}

fn write_outputs(cfg: &TrainConfig, out: &TrainOutcome) -> Result<()> {
    if let Some(path) = &cfg.checkpoint {
        out.params.save(path)?;
        let mut log_path = path.clone().into_os_string();
        log_path.push(".log.json");
        std::fs::write(log_path, serde_json::to_string_pretty(&out.log)?)?;
    }
    Ok(())
}

/// Loads the configured datasets, trains the teacher and writes the
/// checkpoint (plus `<checkpoint>.log.json`) when a path is configured.
pub fn train_teacher(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = cfg.require_dataset()?;
    let test = cfg.optional_test_set()?;
    let out = train_teacher_on(cfg, &train, test.as_ref())?;
    write_outputs(cfg, &out)?;
    Ok(out)
}

pub fn train_student(cfg: &TrainConfig, teacher_ckpt: impl AsRef<Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let teacher = ParamStore::load(teacher_ckpt)?;
    let train = cfg.require_dataset()?;
    let test = cfg.optional_test_set()?;
    let out = train_student_on(cfg, &teacher, &train, test.as_ref())?;
    write_outputs(cfg, &out)?;
    Ok(out)
}

/// Which network a checkpoint holds.
pub fn checkpoint_role(ckpt: &ParamStore) -> Result<Role> {
    let has = |p: &str| ckpt.iter().any(|(k, _)| k.starts_with(&format!("{p}.")));
    let (role, specs) = match (has(Role::Teacher.prefix()), has(Role::Student.prefix())) {
        (true, false) => (Role::Teacher, teacher_checkpoint_specs()),
        (false, true) => (Role::Student, student_checkpoint_specs()),
        _ => {
            return Err(Error::invalid(
                "checkpoint",
                "cannot tell whether this is a teacher or a student checkpoint",
            ))
        }
    };
    ckpt.check_against(&specs)?;
    Ok(role)
}

/// Alpha predictions for every sample of `data`. Teachers consume the
/// stored evaluation trimaps; students see RGB only.
pub fn predict(ckpt: &ParamStore, data: &Dataset) -> Result<Vec<Tensor>> {
    let role = checkpoint_role(ckpt)?;
    let params = ckpt.scoped(role.prefix());
    let mut out = Vec::with_capacity(data.len());
    let student = match role {
        Role::Student => Some(StudentNet::new(params.clone())?),
        Role::Teacher => None,
    };
    let teacher = match role {
        Role::Teacher => Some(TeacherNet::new(params)?),
        Role::Student => None,
    };
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let rgb = Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let alpha = match (&student, &teacher) {
            (Some(s), _) => s.infer(&rgb)?,
            (_, Some(t)) => {
                let tri = Trimap::stack(&chunk.iter().map(|s| &s.trimap).collect::<Vec<_>>())?;
                t.infer(&rgb, tri.tensor())?
            }
            _ => unreachable!("one role is always set"),
        };
        out.extend((0..chunk.len()).map(|i| alpha.sample(i)));
    }
    Ok(out)
}

/// Grouped metrics of a checkpoint on a dataset.
pub fn evaluate_params(ckpt: &ParamStore, data: &Dataset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "dataset is empty"));
    }
    let preds = predict(ckpt, data)?;
    let scored = preds
        .iter()
        .zip(&data.samples)
        .map(|(p, s)| Ok((evaluate(p, &s.alpha)?, s.attribute)))
        .collect::<Result<Vec<_>>>()?;
    report_from_metrics(&scored)
}

pub fn evaluate_checkpoint(ckpt: impl AsRef<Path>, data: impl AsRef<Path>) -> Result<MetricsReport> {
    evaluate_params(&ParamStore::load(ckpt)?, &Dataset::load(data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints() {
        assert_eq!(lr_at(0, 100, 0.01).unwrap(), 0.01);
        assert_eq!(lr_at(100, 100, 0.01).unwrap(), 0.0);
        assert!(lr_at(101, 100, 0.01).is_err());
    }

    #[test]
    fn batch_order_is_a_permutation_per_epoch() {
        let mut b = BatchOrder::new(7, 3);
        let mut first: Vec<usize> = (0..7).map(|p| b.at(p)).collect();
        let second: Vec<usize> = (7..14).map(|p| b.at(p)).collect();
        assert_ne!(first, second);
        first.sort_unstable();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(matches!(
            TrainConfig::from_json(r#"{"lr": 0.1}"#),
            Err(Error::Config(_))
        ));
        assert!(TrainConfig::from_json(r#"{"lr0": 0.1, "distill": {"gamma": 0}}"#).is_ok());
        assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
    }
}
