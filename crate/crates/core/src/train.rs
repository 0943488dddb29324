//! Training loops: source pretraining, adaptation with selectable alignment
//! terms, fine-tuning, and target-only training, plus the LR schedule and
//! optimizers.
//!
//! Every mode shares one step core: rebuild the graph, run backward from a
//! single scalar, apply one optimizer update. Adversarial routing needs no
//! special casing here because the gradient-reversal node inside
//! `discriminate` already flips and scales the feature-side gradient while
//! the discriminator's own parameters descend the raw adversarial loss.
//! Batch order depends only on (seed, epoch), so runs are reproducible
//! bitwise and two modes given the same seed draw identical target batches.

use crate::data::{batch_iter, label_indices, AnswerVocab, Dataset, MultiModalBatch};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::losses::{
    cross_entropy_mean, loss_adversarial_graph, loss_classification_graph, loss_joint_graph,
    loss_multimodal_graph, reported_total, training_objective_graph, KernelSpec, LossWeights,
};
use crate::model::{BoundModel, DualDomainModel, Head};
use crate::nn::EmbeddingTable;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

// ── learning-rate schedule ──

/// Linear warmup followed by stepped decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_start_lr: f64,
    pub warmup_end_lr: f64,
    pub warmup_iters: usize,
    pub decay_factor: f64,
    pub decay_period: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_start_lr: 0.001,
            warmup_end_lr: 0.01,
            warmup_iters: 2000,
            decay_factor: 0.15,
            decay_period: 4000,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_start_lr <= 0.0 || self.warmup_end_lr <= 0.0 {
            return Err(CoreError::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "decay factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_period == 0 {
            return Err(CoreError::InvalidArgument(
                "decay period must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Interpolates start to end over the warmup, then multiplies the end
    /// LR by the decay factor once per full period past the warmup.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter < self.warmup_iters {
            let t = iter as f64 / self.warmup_iters as f64;
            (1.0 - t) * self.warmup_start_lr + t * self.warmup_end_lr
        } else {
            let k = ((iter - self.warmup_iters) / self.decay_period) as i32;
            self.warmup_end_lr * self.decay_factor.powi(k)
        }
    }
}

// ── optimizers ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Adamax,
    Momentum,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

/// Per-parameter state for Adamax (first moment + infinity-norm second
/// moment) or plain momentum (velocity in `m`).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimKind,
    step_count: u64,
    m: Vec<Tensor>,
    u: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, model: &DualDomainModel) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        Self::for_shapes(kind, &shapes)
    }

    /// State sized for an arbitrary parameter list (same order as updates).
    pub fn for_shapes(kind: OptimKind, shapes: &[Vec<usize>]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        Self {
            kind,
            step_count: 0,
            m: zeros.clone(),
            u: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over the canonical parameter list.
    pub fn step(&mut self, model: &mut DualDomainModel, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut params = model.params_mut();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
        self.step_tensors(&mut refs, grads, lr)
    }

    /// One update over a raw tensor list.
    pub fn step_tensors(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(CoreError::InvalidArgument(format!(
                "optimizer slots {} do not match parameters {} / gradients {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        for (pi, param) in params.iter_mut().enumerate() {
            let g = grads[pi].data();
            if g.len() != param.numel() {
                return Err(CoreError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: param.shape().to_vec(),
                    rhs: grads[pi].shape().to_vec(),
                });
            }
            let p = param.data_mut();
            match self.kind {
                OptimKind::Adamax => {
                    let bias = 1.0 - BETA1.powi(self.step_count as i32);
                    let scale = lr / bias;
                    let m = self.m[pi].data_mut();
                    let u = self.u[pi].data_mut();
                    for i in 0..p.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        u[i] = (BETA2 * u[i]).max(g[i].abs());
                        p[i] -= scale * m[i] / (u[i] + EPS);
                    }
                }
                OptimKind::Momentum => {
                    let v = self.m[pi].data_mut();
                    for i in 0..p.len() {
                        v[i] = MOMENTUM * v[i] + g[i];
                        p[i] -= lr * v[i];
                    }
                }
            }
        }
        Ok(())
    }
}

// ── run settings and logging ──

/// Which adaptation loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub per_modality_mmd: bool,
    pub joint_mmd: bool,
    pub adversarial: bool,
    pub source_ce: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            per_modality_mmd: true,
            joint_mmd: true,
            adversarial: true,
            source_ce: true,
        }
    }
}

impl AblationFlags {
    pub fn none() -> Self {
        Self {
            per_modality_mmd: false,
            joint_mmd: false,
            adversarial: false,
            source_ce: false,
        }
    }

    pub fn any(&self) -> bool {
        self.per_modality_mmd || self.joint_mmd || self.adversarial || self.source_ce
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub flags: AblationFlags,
    pub kernel: KernelSpec,
    pub optimizer: OptimKind,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 128,
            schedule: Schedule::default(),
            weights: LossWeights::default(),
            flags: AblationFlags::default(),
            kernel: KernelSpec::median(),
            optimizer: OptimKind::Adamax,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument(
                "batch size must be positive".into(),
            ));
        }
        if self.log_every == 0 {
            return Err(CoreError::InvalidArgument(
                "log interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One logged training step. Disabled loss terms stay `None` and serialize
/// as empty CSV fields.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_joint: Option<f64>,
    pub loss_multimodal: Option<f64>,
    pub loss_adversarial: Option<f64>,
    /// Reported objective: cls + lambda_j*joint + lambda_mm*multimodal
    /// - lambda_adv*adversarial, missing terms contributing zero.
    pub total: f64,
}

pub const RUN_CSV_HEADER: &str =
    "iter,lr,loss_cls,loss_joint,loss_multimodal,loss_adversarial,total";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn run_csv(rows: &[IterRow]) -> String {
    let mut out = String::from(RUN_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter,
            r.lr,
            r.loss_cls,
            fmt_opt(r.loss_joint),
            fmt_opt(r.loss_multimodal),
            fmt_opt(r.loss_adversarial),
            r.total
        );
    }
    out
}

pub fn write_run_csv(path: &Path, rows: &[IterRow]) -> Result<()> {
    std::fs::write(path, run_csv(rows))?;
    Ok(())
}

// ── batch streams ──

/// Cycling epoch-shuffled batch supply for one dataset.
struct Stream<'a> {
    ds: &'a Dataset,
    labels: Vec<Option<usize>>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<MultiModalBatch>,
    pos: usize,
}

impl<'a> Stream<'a> {
    fn new(ds: &'a Dataset, vocab: &AnswerVocab, batch_size: usize, seed: u64) -> Result<Self> {
        if ds.is_empty() {
            return Err(CoreError::InvalidArgument(
                "cannot train on an empty dataset".into(),
            ));
        }
        Ok(Self {
            ds,
            labels: label_indices(&ds.samples, vocab),
            batch_size,
            seed,
            epoch: 0,
            batches: Vec::new(),
            pos: 0,
        })
    }

    fn next(&mut self) -> MultiModalBatch {
        if self.pos >= self.batches.len() {
            self.batches = batch_iter(self.ds, &self.labels, self.batch_size, self.seed, self.epoch);
            self.epoch += 1;
            self.pos = 0;
        }
        let b = self.batches[self.pos].clone();
        self.pos += 1;
        b
    }
}

// ── step core ──

fn divergence_at(iter: usize) -> impl Fn(CoreError) -> CoreError {
    move |e| match e {
        CoreError::NonFinite { op } => CoreError::Divergence {
            iter,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn collect_grads(g: &Graph, bound: &BoundModel<'_>) -> Vec<Tensor> {
    bound
        .param_ids()
        .iter()
        .map(|&id| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape().to_vec()))
        })
        .collect()
}

struct StepOutcome {
    loss_cls: f64,
    loss_joint: Option<f64>,
    loss_multimodal: Option<f64>,
    loss_adversarial: Option<f64>,
    grads: Vec<Tensor>,
}

impl StepOutcome {
    fn row(&self, iter: usize, lr: f64, weights: &LossWeights) -> IterRow {
        IterRow {
            iter,
            lr,
            loss_cls: self.loss_cls,
            loss_joint: self.loss_joint,
            loss_multimodal: self.loss_multimodal,
            loss_adversarial: self.loss_adversarial,
            total: reported_total(
                self.loss_cls,
                self.loss_joint.unwrap_or(0.0),
                self.loss_multimodal.unwrap_or(0.0),
                self.loss_adversarial.unwrap_or(0.0),
                weights,
            ),
        }
    }
}

/// Single-head supervised step: CE on one batch through `head`.
fn supervised_step(
    model: &DualDomainModel,
    batch: &MultiModalBatch,
    head: Head,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let enc = bound.encode(&mut g, &batch.tokens, &batch.regions, &batch.grids)?;
    let logits = bound.classify(&mut g, enc.e, head)?;
    let loss = cross_entropy_mean(&mut g, logits, &batch.labels)?;
    g.backward(loss)?;
    Ok(StepOutcome {
        loss_cls: g.value(loss).item(),
        loss_joint: None,
        loss_multimodal: None,
        loss_adversarial: None,
        grads: collect_grads(&g, &bound),
    })
}

/// Full adaptation step over one paired (source, target) batch draw.
fn adapt_step(
    model: &DualDomainModel,
    source: Option<&MultiModalBatch>,
    target: &MultiModalBatch,
    settings: &TrainSettings,
) -> Result<StepOutcome> {
    let flags = settings.flags;
    let w = &settings.weights;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);

    let enc_s = source
        .map(|b| bound.encode(&mut g, &b.tokens, &b.regions, &b.grids))
        .transpose()?;
    let enc_t = bound.encode(&mut g, &target.tokens, &target.regions, &target.grids)?;
    let logits_t = bound.classify(&mut g, enc_t.e, Head::Target)?;

    let want_source_ce = flags.source_ce && w.gamma_c > 0.0;
    let l_c = if want_source_ce {
        let s = enc_s.as_ref().expect("source batch drawn for source CE");
        let sb = source.expect("source batch drawn for source CE");
        let logits_s = bound.classify(&mut g, s.e, Head::Source)?;
        loss_classification_graph(&mut g, logits_s, &sb.labels, logits_t, &target.labels, w.gamma_c)?
    } else {
        cross_entropy_mean(&mut g, logits_t, &target.labels)?
    };

    let l_j = if flags.joint_mmd {
        let s = enc_s.as_ref().expect("source batch drawn for joint MMD");
        Some(loss_joint_graph(&mut g, s.e, enc_t.e, &settings.kernel)?)
    } else {
        None
    };
    let l_mm = if flags.per_modality_mmd {
        let s = enc_s.as_ref().expect("source batch drawn for modality MMD");
        Some(loss_multimodal_graph(
            &mut g,
            s.q,
            enc_t.q,
            s.v,
            enc_t.v,
            w.gamma_a,
            w.gamma_b,
            &settings.kernel,
        )?)
    } else {
        None
    };
    let l_adv = if flags.adversarial {
        let s = enc_s.as_ref().expect("source batch drawn for discriminator");
        let p_s = bound.discriminate(&mut g, s.e, w.lambda_adv)?;
        let p_t = bound.discriminate(&mut g, enc_t.e, w.lambda_adv)?;
        Some(loss_adversarial_graph(&mut g, p_s, p_t)?)
    } else {
        None
    };

    let total = training_objective_graph(&mut g, l_c, l_j, l_mm, l_adv, w)?;
    g.backward(total)?;
    Ok(StepOutcome {
        loss_cls: g.value(l_c).item(),
        loss_joint: l_j.map(|id| g.value(id).item()),
        loss_multimodal: l_mm.map(|id| g.value(id).item()),
        loss_adversarial: l_adv.map(|id| g.value(id).item()),
        grads: collect_grads(&g, &bound),
    })
}

fn apply_step(
    model: &mut DualDomainModel,
    optimizer: &mut Optimizer,
    mut outcome: StepOutcome,
    lr: f64,
) -> Result<StepOutcome> {
    EmbeddingTable::zero_padding_grad(&mut outcome.grads[0]);
    optimizer.step(model, &outcome.grads, lr)?;
    Ok(outcome)
}

fn should_log(iter: usize, iterations: usize, log_every: usize) -> bool {
    iter % log_every == 0 || iter + 1 == iterations
}

// ── drivers ──

/// Supervised pretraining of the source head on source data only.
pub fn pretrain_source(
    model: &mut DualDomainModel,
    source: &Dataset,
    source_vocab: &AnswerVocab,
    settings: &TrainSettings,
) -> Result<Vec<IterRow>> {
    settings.validate()?;
    let mut stream = Stream::new(source, source_vocab, settings.batch_size, settings.seed)?;
    let mut opt = Optimizer::new(settings.optimizer, model);
    let mut rows = Vec::new();
    for iter in 0..settings.iterations {
        let batch = stream.next();
        let lr = settings.schedule.lr_at(iter);
        let outcome = supervised_step(model, &batch, Head::Source)
            .and_then(|o| apply_step(model, &mut opt, o, lr))
            .map_err(divergence_at(iter))?;
        if should_log(iter, settings.iterations, settings.log_every) {
            rows.push(outcome.row(iter, lr, &settings.weights));
        }
    }
    Ok(rows)
}

fn train_target_ce(
    model: &mut DualDomainModel,
    target: &Dataset,
    target_vocab: &AnswerVocab,
    settings: &TrainSettings,
) -> Result<Vec<IterRow>> {
    settings.validate()?;
    let mut stream = Stream::new(target, target_vocab, settings.batch_size, settings.seed)?;
    let mut opt = Optimizer::new(settings.optimizer, model);
    let mut rows = Vec::new();
    for iter in 0..settings.iterations {
        let batch = stream.next();
        let lr = settings.schedule.lr_at(iter);
        let outcome = supervised_step(model, &batch, Head::Target)
            .and_then(|o| apply_step(model, &mut opt, o, lr))
            .map_err(divergence_at(iter))?;
        if should_log(iter, settings.iterations, settings.log_every) {
            rows.push(outcome.row(iter, lr, &settings.weights));
        }
    }
    Ok(rows)
}

/// Continues a pretrained model on target data with target CE only.
pub fn finetune(
    model: &mut DualDomainModel,
    target: &Dataset,
    target_vocab: &AnswerVocab,
    settings: &TrainSettings,
) -> Result<Vec<IterRow>> {
    train_target_ce(model, target, target_vocab, settings)
}

/// Trains a fresh model on target data with target CE only.
pub fn train_target_only(
    model: &mut DualDomainModel,
    target: &Dataset,
    target_vocab: &AnswerVocab,
    settings: &TrainSettings,
) -> Result<Vec<IterRow>> {
    train_target_ce(model, target, target_vocab, settings)
}

/// Joint adaptation: each iteration draws a source batch and a target batch
/// (separate cycling streams derived from the same seed), builds the
/// enabled loss terms, and takes one optimizer step over all parameters.
pub fn adapt(
    model: &mut DualDomainModel,
    source: &Dataset,
    source_vocab: &AnswerVocab,
    target: &Dataset,
    target_vocab: &AnswerVocab,
    settings: &TrainSettings,
) -> Result<Vec<IterRow>> {
    settings.validate()?;
    if !settings.flags.any() {
        return Err(CoreError::InvalidArgument(
            "adaptation with every loss flag disabled is degenerate; use finetune".into(),
        ));
    }
    let flags = settings.flags;
    let needs_source = flags.joint_mmd
        || flags.per_modality_mmd
        || flags.adversarial
        || (flags.source_ce && settings.weights.gamma_c > 0.0);

    let mut source_stream = if needs_source {
        Some(Stream::new(
            source,
            source_vocab,
            settings.batch_size,
            settings.seed,
        )?)
    } else {
        None
    };
    let mut target_stream = Stream::new(target, target_vocab, settings.batch_size, settings.seed)?;
    let mut opt = Optimizer::new(settings.optimizer, model);
    let mut rows = Vec::new();
    for iter in 0..settings.iterations {
        let source_batch = source_stream.as_mut().map(Stream::next);
        let target_batch = target_stream.next();
        let lr = settings.schedule.lr_at(iter);
        let outcome = adapt_step(model, source_batch.as_ref(), &target_batch, settings)
            .and_then(|o| apply_step(model, &mut opt, o, lr))
            .map_err(divergence_at(iter))?;
        if should_log(iter, settings.iterations, settings.log_every) {
            rows.push(outcome.row(iter, lr, &settings.weights));
        }
    }
    Ok(rows)
}
