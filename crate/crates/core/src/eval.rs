//! Evaluation: consensus answer accuracy, per-category reports, softmax
//! ensembling, and a trained-probe measure of how separable two feature
//! sets are.

use crate::data::{
    normalize_answer, seed_stream, AnswerVocab, Category, Dataset, Sample, ANSWERS_PER_QUESTION,
};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::losses::{mmd_sq, KernelSpec};
use crate::model::{predict_answer, DualDomainModel, Head};
use crate::nn::{Activation, Mlp};
use crate::tensor::Tensor;
use crate::train::{OptimKind, Optimizer};
use rand::seq::SliceRandom;
use std::fmt::Write as _;
use std::path::Path;

const EVAL_BATCH: usize = 256;

/// Consensus accuracy of one predicted answer against ten annotator
/// answers: averaged over the ten leave-one-out annotator subsets, each
/// scoring min(matches/3, 1). Matching uses lowercased, trimmed strings.
pub fn vqa_accuracy(prediction: &str, answers: &[String]) -> Result<f64> {
    if answers.len() != ANSWERS_PER_QUESTION {
        return Err(CoreError::InvalidArgument(format!(
            "accuracy needs exactly {ANSWERS_PER_QUESTION} annotator answers, got {}",
            answers.len()
        )));
    }
    let pred = normalize_answer(prediction);
    let hits: Vec<bool> = answers
        .iter()
        .map(|a| normalize_answer(a) == pred)
        .collect();
    let mut acc = 0.0;
    for j in 0..ANSWERS_PER_QUESTION {
        let matches = hits
            .iter()
            .enumerate()
            .filter(|&(i, &h)| i != j && h)
            .count();
        acc += (matches as f64 / 3.0).min(1.0);
    }
    Ok(acc / ANSWERS_PER_QUESTION as f64)
}

/// Accuracy breakdown over one evaluation set. Categories with no samples
/// report zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub overall: f64,
    pub yes_no: f64,
    pub number: f64,
    pub other: f64,
    /// Mean over every sample whose question has an answer at all.
    pub answerable: f64,
    pub sample_count: usize,
}

pub const EVAL_CSV_HEADER: &str = "split,overall,yes_no,number,other,answerable,sample_count";

/// One CSV row per labeled report (e.g. target and source splits).
pub fn eval_csv(rows: &[(&str, EvalReport)]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for (split, r) in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            split, r.overall, r.yes_no, r.number, r.other, r.answerable, r.sample_count
        );
    }
    out
}

pub fn write_eval_csv(path: &Path, rows: &[(&str, EvalReport)]) -> Result<()> {
    std::fs::write(path, eval_csv(rows))?;
    Ok(())
}

fn mean_of(sum: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Aggregates per-sample predicted strings into an EvalReport.
pub fn report_from_predictions(samples: &[Sample], predictions: &[String]) -> Result<EvalReport> {
    if samples.len() != predictions.len() {
        return Err(CoreError::InvalidArgument(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument(
            "cannot evaluate an empty dataset".into(),
        ));
    }
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for (s, pred) in samples.iter().zip(predictions) {
        let acc = vqa_accuracy(pred, &s.answers)?;
        let ci = match s.category {
            Category::YesNo => 0,
            Category::Number => 1,
            Category::Other => 2,
            Category::Unanswerable => 3,
        };
        sums[ci] += acc;
        counts[ci] += 1;
    }
    let total: f64 = sums.iter().sum();
    let n: usize = counts.iter().sum();
    let answerable_sum: f64 = sums[..3].iter().sum();
    let answerable_n: usize = counts[..3].iter().sum();
    Ok(EvalReport {
        overall: mean_of(total, n),
        yes_no: mean_of(sums[0], counts[0]),
        number: mean_of(sums[1], counts[1]),
        other: mean_of(sums[2], counts[2]),
        answerable: mean_of(answerable_sum, answerable_n),
        sample_count: n,
    })
}

fn eval_chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    let all: Vec<usize> = (0..n).collect();
    all.chunks(EVAL_BATCH)
        .map(|c| c.to_vec())
        .collect::<Vec<_>>()
        .into_iter()
}

/// Greedy answer strings for every sample, in dataset order.
pub fn predict_dataset(
    model: &DualDomainModel,
    ds: &Dataset,
    vocab: &AnswerVocab,
    head: Head,
) -> Result<Vec<String>> {
    let labels = vec![None; ds.len()];
    let mut preds = Vec::with_capacity(ds.len());
    for chunk in eval_chunks(ds.len()) {
        let batch = crate::data::make_batch(ds, &labels, &chunk);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let enc = bound.encode(&mut g, &batch.tokens, &batch.regions, &batch.grids)?;
        let logits = bound.classify(&mut g, enc.e, head)?;
        let values = g.value(logits);
        for i in 0..chunk.len() {
            preds.push(vocab.answer(predict_answer(values.row(i))).to_string());
        }
    }
    Ok(preds)
}

/// Scores one model head over an evaluation set.
pub fn evaluate(
    model: &DualDomainModel,
    ds: &Dataset,
    vocab: &AnswerVocab,
    head: Head,
) -> Result<EvalReport> {
    let preds = predict_dataset(model, ds, vocab, head)?;
    report_from_predictions(&ds.samples, &preds)
}

fn softmax_rows_into(logits: &Tensor, acc: &mut [f64], scale: f64) {
    let cols = logits.shape()[1];
    for (ri, row) in logits.data().chunks(cols).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (ci, e) in exps.iter().enumerate() {
            acc[ri * cols + ci] += scale * e / sum;
        }
    }
}

/// Mean-softmax ensemble prediction: class indices with ties going to the
/// lowest index.
pub fn ensemble_predict(
    models: &[&DualDomainModel],
    ds: &Dataset,
    head: Head,
) -> Result<Vec<usize>> {
    if models.is_empty() {
        return Err(CoreError::InvalidArgument(
            "ensemble needs at least one model".into(),
        ));
    }
    let classes = match head {
        Head::Source => models[0].config.source_classes,
        Head::Target => models[0].config.target_classes,
    };
    for m in models {
        let c = match head {
            Head::Source => m.config.source_classes,
            Head::Target => m.config.target_classes,
        };
        if c != classes {
            return Err(CoreError::InvalidArgument(
                "ensemble members disagree on class count".into(),
            ));
        }
    }
    let labels = vec![None; ds.len()];
    let weight = 1.0 / models.len() as f64;
    let mut picks = Vec::with_capacity(ds.len());
    for chunk in eval_chunks(ds.len()) {
        let batch = crate::data::make_batch(ds, &labels, &chunk);
        let mut probs = vec![0.0f64; chunk.len() * classes];
        for model in models {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let enc = bound.encode(&mut g, &batch.tokens, &batch.regions, &batch.grids)?;
            let logits = bound.classify(&mut g, enc.e, head)?;
            softmax_rows_into(g.value(logits), &mut probs, weight);
        }
        for row in probs.chunks(classes) {
            picks.push(predict_answer(row));
        }
    }
    Ok(picks)
}

/// Scores a mean-softmax ensemble over an evaluation set.
pub fn evaluate_ensemble(
    models: &[&DualDomainModel],
    ds: &Dataset,
    vocab: &AnswerVocab,
    head: Head,
) -> Result<EvalReport> {
    let picks = ensemble_predict(models, ds, head)?;
    let preds: Vec<String> = picks
        .iter()
        .map(|&i| vocab.answer(i).to_string())
        .collect();
    report_from_predictions(&ds.samples, &preds)
}

/// Fused joint embeddings for every sample, stacked [n x d_e].
pub fn joint_embeddings(model: &DualDomainModel, ds: &Dataset) -> Result<Tensor> {
    let labels = vec![None; ds.len()];
    let mut rows = Vec::with_capacity(ds.len() * model.config.d_e);
    for chunk in eval_chunks(ds.len()) {
        let batch = crate::data::make_batch(ds, &labels, &chunk);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let enc = bound.encode(&mut g, &batch.tokens, &batch.regions, &batch.grids)?;
        rows.extend_from_slice(g.value(enc.e).data());
    }
    Tensor::new(vec![ds.len(), model.config.d_e], rows)
}

/// Domain separability measured two ways on the same feature sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    /// Squared kernel discrepancy between the two full sets.
    pub mmd_sq: f64,
    /// Held-out accuracy of a small trained domain classifier.
    pub accuracy: f64,
}

const PROBE_HIDDEN: usize = 16;
const PROBE_ITERS: usize = 300;
const PROBE_LR: f64 = 0.02;
const PROBE_CLAMP: f64 = 1e-7;

fn split_rows(n: usize, seed: u64, salt: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed_stream(seed, salt);
    order.shuffle(&mut rng);
    let train = (n * 7 / 10).max(1).min(n - 1);
    let held = order.split_off(train);
    (order, held)
}

fn gather(features: &Tensor, rows: &[usize]) -> Vec<f64> {
    let d = features.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(features.row(r));
    }
    out
}

/// Trains a one-hidden-layer domain classifier on a 70/30 split of the two
/// feature sets and reports its held-out accuracy alongside the kernel
/// discrepancy of the full sets. High accuracy means the domains remain
/// separable in this representation.
pub fn probe_domain_gap(
    source: &Tensor,
    target: &Tensor,
    kernel: &KernelSpec,
    seed: u64,
) -> Result<ProbeReport> {
    let d = source.shape()[1];
    if target.shape()[1] != d {
        return Err(CoreError::ShapeMismatch {
            op: "probe_domain_gap",
            lhs: source.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let (ns, nt) = (source.shape()[0], target.shape()[0]);
    if ns < 2 || nt < 2 {
        return Err(CoreError::InvalidArgument(
            "probe needs at least two rows per domain".into(),
        ));
    }
    let mmd = mmd_sq(source, target, kernel)?;

    let (s_train, s_held) = split_rows(ns, seed, 7001);
    let (t_train, t_held) = split_rows(nt, seed, 7002);
    let mut train_data = gather(source, &s_train);
    train_data.extend(gather(target, &t_train));
    let n_train = s_train.len() + t_train.len();
    let x_train = Tensor::new(vec![n_train, d], train_data)?;
    let mut y = vec![1.0; s_train.len()];
    y.extend(std::iter::repeat(0.0).take(t_train.len()));
    let y_pos = Tensor::new(vec![n_train, 1], y.clone())?;
    let y_neg = Tensor::new(vec![n_train, 1], y.iter().map(|v| 1.0 - v).collect())?;

    let mut rng = seed_stream(seed, 7003);
    let mut probe = Mlp::init(&[d, PROBE_HIDDEN, 1], &mut rng);
    let shapes: Vec<Vec<usize>> = probe_params(&probe)
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let mut opt = Optimizer::for_shapes(OptimKind::Adamax, &shapes);

    for _ in 0..PROBE_ITERS {
        let mut g = Graph::new();
        let ids: Vec<_> = probe_params(&probe)
            .iter()
            .map(|t| g.leaf((*t).clone()))
            .collect();
        let x = g.constant(x_train.clone());
        let logits = bound_forward(&mut g, &probe, &ids, x)?;
        let p = g.sigmoid(logits)?;
        let pc = g.clamp(p, PROBE_CLAMP, 1.0 - PROBE_CLAMP)?;
        let lp = g.log(pc)?;
        let om = g.one_minus(pc)?;
        let ln = g.log(om)?;
        let yp = g.constant(y_pos.clone());
        let yn = g.constant(y_neg.clone());
        let pos = g.mul(yp, lp)?;
        let neg = g.mul(yn, ln)?;
        let sum = g.add(pos, neg)?;
        let mean = g.mean(sum)?;
        let loss = g.scale(mean, -1.0)?;
        g.backward(loss)?;
        let grads: Vec<Tensor> = ids
            .iter()
            .map(|&id| {
                g.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(id).shape().to_vec()))
            })
            .collect();
        let mut params = probe_params_mut(&mut probe);
        opt.step_tensors(&mut params, &grads, PROBE_LR)?;
    }

    let mut held_data = gather(source, &s_held);
    held_data.extend(gather(target, &t_held));
    let n_held = s_held.len() + t_held.len();
    let x_held = Tensor::new(vec![n_held, d], held_data)?;
    let mut g = Graph::new();
    let ids: Vec<_> = probe_params(&probe)
        .iter()
        .map(|t| g.leaf((*t).clone()))
        .collect();
    let x = g.constant(x_held);
    let logits = bound_forward(&mut g, &probe, &ids, x)?;
    let p = g.sigmoid(logits)?;
    let probs = g.value(p).data();
    let mut hit = 0usize;
    for (i, &prob) in probs.iter().enumerate() {
        let is_source = i < s_held.len();
        if (prob >= 0.5) == is_source {
            hit += 1;
        }
    }
    Ok(ProbeReport {
        mmd_sq: mmd,
        accuracy: hit as f64 / n_held as f64,
    })
}

fn probe_params(probe: &Mlp) -> Vec<&Tensor> {
    probe
        .layers
        .iter()
        .flat_map(|(l, _)| [&l.weight, &l.bias])
        .collect()
}

fn probe_params_mut(probe: &mut Mlp) -> Vec<&mut Tensor> {
    probe
        .layers
        .iter_mut()
        .flat_map(|(l, _)| [&mut l.weight, &mut l.bias])
        .collect()
}

fn bound_forward(
    g: &mut Graph,
    probe: &Mlp,
    ids: &[crate::graph::TensorId],
    x: crate::graph::TensorId,
) -> Result<crate::graph::TensorId> {
    let mut h = x;
    for (li, (_, act)) in probe.layers.iter().enumerate() {
        let w = ids[2 * li];
        let b = ids[2 * li + 1];
        let y = g.matmul_tb(h, w)?;
        let y = g.add(y, b)?;
        h = match act {
            Activation::Tanh => g.tanh(y)?,
            Activation::Sigmoid => g.sigmoid(y)?,
            Activation::None => y,
        };
    }
    Ok(h)
}
