//! Three-phase SGD training: full precision, quantized (straight-through),
//! and frozen ternary patterns with only `ã` and batch norm trainable.

pub mod data;
pub mod network;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, Error, Result};
use crate::ops::softmax_rows;
use crate::param::{Param, ParamKind};
use crate::spn::{Ctx, Mode};
use crate::tensor::Tensor;

pub use data::{gaussian_blobs, BlobConfig, Dataset};
pub use network::{Layer, LayerSpec, Network, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseName {
    FullPrecision,
    Quantized,
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: PhaseName,
    pub epochs: usize,
    pub lr: f32,
    /// `(epoch, multiplier)` pairs; from `epoch` on (counted within the
    /// phase) the rate is multiplied by `multiplier`. Multipliers compound.
    #[serde(default)]
    pub schedule: Vec<(usize, f32)>,
}

impl Phase {
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.schedule.iter().filter(|(e, _)| *e <= epoch).fold(self.lr, |lr, (_, m)| lr * m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPhasePlan {
    pub phases: Vec<Phase>,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Also apply weight decay to `ã`.
    #[serde(default)]
    pub decay_a_tilde: bool,
}

impl TrainPhasePlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        if self.phases.windows(2).any(|w| w[0].name >= w[1].name) {
            return Err(config_err!("phases must run full-precision, quantized, frozen, each at most once"));
        }
        if self.phases.iter().any(|p| !(p.lr.is_finite() && p.lr >= 0.0)) {
            return Err(config_err!("learning rates must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub enabled: bool,
    pub temperature: f32,
    pub weight: f32,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { enabled: false, temperature: 1.0, weight: 1.0 }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.weight >= 0.0) {
            return Err(config_err!("KD needs temperature > 0 and weight ≥ 0"));
        }
        Ok(())
    }
}

/// Complete training configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub plan: TrainPhasePlan,
    #[serde(default)]
    pub kd: KdConfig,
    /// λ for the `λ Σ |ã|` penalty.
    #[serde(default)]
    pub l1_a_tilde: f32,
}

/// One momentum SGD update. Weight decay reaches shadow and full-precision
/// weights; `ã` only when `decay_a_tilde` is set.
pub fn sgd_step(param: &mut Param, grad: &Tensor, lr: f32, momentum: f32, weight_decay: f32, decay_a_tilde: bool) -> Result<()> {
    param.value.expect_same_shape(grad)?;
    let decays = match param.kind {
        ParamKind::Shadow | ParamKind::Weight => true,
        ParamKind::ATilde => decay_a_tilde,
        ParamKind::Bias | ParamKind::BnGamma | ParamKind::BnBeta => false,
    };
    let wd = if decays { weight_decay } else { 0.0 };
    let v = param.velocity.get_or_insert_with(|| Tensor::zeros(grad.shape()));
    for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(grad.data()).zip(param.value.data_mut()) {
        *vi = momentum * *vi + gi + wd * *pi;
        *pi -= lr * *vi;
    }
    Ok(())
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Validation(format!("label {l} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

/// `CE(student, hard) + w · CE(student / T, softmax(teacher / T))`, with the
/// teacher treated as a constant.
pub fn kd_loss(g: &mut Graph, student: Var, teacher: &Tensor, hard: &Tensor, cfg: &KdConfig) -> Result<Var> {
    let ss = g.value(student).shape().to_vec();
    if teacher.shape() != ss.as_slice() || hard.shape() != ss.as_slice() {
        return Err(crate::error::shape_err!(
            "KD class mismatch: student {:?}, teacher {:?}, targets {:?}",
            ss,
            teacher.shape(),
            hard.shape()
        ));
    }
    let ce = g.softmax_cross_entropy(student, hard)?;
    if !cfg.enabled {
        return Ok(ce);
    }
    cfg.validate()?;
    let t = cfg.temperature;
    let soft = softmax_rows(&teacher.scale(1.0 / t))?;
    let s = if t == 1.0 { student } else { g.scale(student, 1.0 / t) };
    let kd = g.softmax_cross_entropy(s, &soft)?;
    let kd = g.scale(kd, cfg.weight);
    g.add(ce, kd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantStat {
    pub layer: usize,
    pub matrix: String,
    pub delta: f32,
    pub alpha: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: PhaseName,
    pub epoch: usize,
    pub phase_epoch: usize,
    pub lr: f32,
    pub loss: f32,
    pub accuracy: f64,
    pub quant: Vec<QuantStat>,
}

fn enter_phase(net: &mut Network, name: PhaseName) -> Result<()> {
    for q in net.quant_states_mut() {
        match name {
            PhaseName::FullPrecision => q.set_active(false)?,
            PhaseName::Quantized => q.set_active(true)?,
            PhaseName::Frozen => q.freeze()?,
        }
    }
    Ok(())
}

fn quant_stats(net: &mut Network) -> Result<Vec<QuantStat>> {
    let mut out = Vec::new();
    for (i, layer) in net.layers.iter_mut().enumerate() {
        if let Some((b, c)) = layer.quant_states_mut() {
            for (name, q) in [("W_b", b), ("W_c", c)] {
                q.refresh_stats()?;
                if q.is_active() {
                    out.push(QuantStat { layer: i, matrix: name.into(), delta: q.last_delta, alpha: q.last_alpha });
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic per-epoch permutation keyed on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Trains `net` in place and returns one record per epoch. `on_epoch` sees
/// every record as soon as it is produced.
pub fn run_training(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&Network>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let plan = &cfg.plan;
    plan.validate()?;
    cfg.kd.validate()?;
    if cfg.kd.enabled && teacher.is_none() {
        return Err(config_err!("knowledge distillation is enabled but no teacher was given"));
    }
    if data.is_empty() {
        return Err(config_err!("training data is empty"));
    }
    let shape = net.input_shape.clone();
    let (all_x, all_y) = data.all(&shape)?;
    let classes = net.logits(&all_x.slice_outer(0, 1)?)?.dim(1);
    let mut log = Vec::new();
    let mut epoch = 0;
    for phase in &plan.phases {
        if phase.epochs == 0 {
            continue;
        }
        enter_phase(net, phase.name)?;
        for pe in 0..phase.epochs {
            let lr = phase.lr_at(pe);
            let order = epoch_order(data.len(), plan.seed, epoch);
            let mut total = 0.0f64;
            let mut batches = 0usize;
            for chunk in order.chunks(plan.batch_size) {
                let (x, y) = data.batch(chunk, &shape)?;
                let hard = one_hot(&y, classes)?;
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let mut ctx = Ctx::new(Mode::Train);
                let logits = net.forward(&mut g, xv, &mut ctx)?;
                let teacher_logits = match (cfg.kd.enabled, teacher) {
                    (true, Some(t)) => t.logits(&x)?,
                    _ => g.value(logits).clone(),
                };
                let mut loss = kd_loss(&mut g, logits, &teacher_logits, &hard, &cfg.kd)?;
                if cfg.l1_a_tilde > 0.0 {
                    for p in net.params().into_iter().filter(|p| p.kind == ParamKind::ATilde) {
                        let a = g.param(p.id, p.value.clone());
                        let l1 = g.sum_abs(a);
                        let l1 = g.scale(l1, cfg.l1_a_tilde);
                        loss = g.add(loss, l1)?;
                    }
                }
                let lv = g.value(loss).item()?;
                if !lv.is_finite() {
                    return Err(Error::NonFinite { index: net.layers.len(), name: "loss".into() });
                }
                total += lv as f64;
                batches += 1;
                let grads: BTreeMap<usize, Tensor> = g.backward(loss)?.by_param()?;
                let frozen = phase.name == PhaseName::Frozen;
                for p in net.params_mut() {
                    if frozen && !matches!(p.kind, ParamKind::ATilde | ParamKind::BnGamma | ParamKind::BnBeta) {
                        continue;
                    }
                    if let Some(gr) = grads.get(&p.id) {
                        sgd_step(p, gr, lr, plan.momentum, plan.weight_decay, plan.decay_a_tilde)?;
                    }
                }
                net.apply_bn_stats(&ctx.bn_stats);
            }
            let record = EpochMetrics {
                phase: phase.name,
                epoch,
                phase_epoch: pe,
                lr,
                loss: (total / batches as f64) as f32,
                accuracy: net.accuracy(&all_x, &all_y)?,
                quant: quant_stats(net)?,
            };
            log::info!(
                "epoch {epoch} ({:?} {pe}): loss {:.4}, accuracy {:.3}",
                record.phase,
                record.loss,
                record.accuracy
            );
            on_epoch(&record)?;
            log.push(record);
            epoch += 1;
        }
    }
    Ok(log)
}
