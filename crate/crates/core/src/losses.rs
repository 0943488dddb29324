//! Alignment and task losses: Gaussian-kernel squared MMD between feature
//! batches, joint and per-modality alignment terms, dual-domain cross
//! entropy, and the adversarial discriminator loss. Every loss exists both
//! as a plain evaluation and as a graph builder so the same arithmetic can
//! be trained through and oracle-checked.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;

/// Probabilities entering log terms are kept this far from 0 and 1.
pub const PROB_CLAMP: f64 = 1e-7;

/// Bandwidth policy for the Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median of pairwise Euclidean distances of the pooled batch,
    /// recomputed per call and treated as a constant in differentiation.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl KernelSpec {
    pub fn fixed(sigma: f64) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "kernel bandwidth must be positive, got {sigma}"
            )));
        }
        Ok(Self {
            bandwidth: Bandwidth::Fixed(sigma),
        })
    }

    pub fn median() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
        }
    }

    /// Resolves the bandwidth for one two-sample batch pair. The median
    /// heuristic pools all rows; a degenerate (zero) median falls back to 1.
    pub fn resolve_sigma(&self, x: &Tensor, y: &Tensor) -> f64 {
        match self.bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Median => {
                let rows: Vec<&[f64]> = (0..x.rows())
                    .map(|i| x.row(i))
                    .chain((0..y.rows()).map(|j| y.row(j)))
                    .collect();
                let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
                for i in 0..rows.len() {
                    for j in (i + 1)..rows.len() {
                        dists.push(sq_dist(rows[i], rows[j]).sqrt());
                    }
                }
                if dists.is_empty() {
                    return 1.0;
                }
                dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
                let mid = dists.len() / 2;
                let median = if dists.len() % 2 == 1 {
                    dists[mid]
                } else {
                    (dists[mid - 1] + dists[mid]) / 2.0
                };
                if median > 0.0 {
                    median
                } else {
                    1.0
                }
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        let diff = a[k] - b[k];
        acc += diff * diff;
    }
    acc
}

/// exp(-|x - y|^2 / (2 sigma^2))
pub fn gaussian_kernel(x: &Tensor, y: &Tensor, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(CoreError::InvalidArgument(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    if x.shape() != y.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "gaussian_kernel",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let neg_inv = -1.0 / (2.0 * sigma * sigma);
    Ok((sq_dist(x.data(), y.data()) * neg_inv).exp())
}

fn check_two_sample(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rank() != 2 || y.rank() != 2 || x.rows() == 0 || y.rows() == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "{op} needs two nonempty rank-2 sample matrices"
        )));
    }
    if x.cols() != y.cols() {
        return Err(CoreError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Biased squared-MMD estimate with diagonal terms:
/// (1/n^2) sum k(x_i, x_j) - (2/nm) sum k(x_i, y_j) + (1/m^2) sum k(y_i, y_j).
/// Kernel sums run row-major with a single accumulator so the value is
/// bitwise comparable against a double-loop evaluation.
pub fn mmd_sq(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    check_two_sample("mmd_sq", x, y)?;
    let sigma = kernel.resolve_sigma(x, y);
    let neg_inv = -1.0 / (2.0 * sigma * sigma);
    let (n, m) = (x.rows(), y.rows());

    let block = |a: &Tensor, b: &Tensor| -> f64 {
        let mut s = 0.0;
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                s += (sq_dist(a.row(i), b.row(j)) * neg_inv).exp();
            }
        }
        s
    };
    let sxx = block(x, x);
    let sxy = block(x, y);
    let syy = block(y, y);
    let cxx = 1.0 / ((n * n) as f64);
    let cxy = 2.0 / ((n * m) as f64);
    let cyy = 1.0 / ((m * m) as f64);
    Ok(cxx * sxx - cxy * sxy + cyy * syy)
}

/// Graph form of [`mmd_sq`]; bitwise-identical value to the plain form. The
/// bandwidth is resolved from current values and enters as a constant.
pub fn mmd_sq_graph(
    g: &mut Graph,
    x: TensorId,
    y: TensorId,
    kernel: &KernelSpec,
) -> Result<TensorId> {
    check_two_sample("mmd_sq", g.value(x), g.value(y))?;
    let sigma = kernel.resolve_sigma(g.value(x), g.value(y));
    let neg_inv = -1.0 / (2.0 * sigma * sigma);
    let (n, m) = (g.value(x).rows(), g.value(y).rows());

    let block = |g: &mut Graph, a: TensorId, b: TensorId, coef: f64| -> Result<TensorId> {
        let d = g.sqdist(a, b)?;
        let e = g.scale(d, neg_inv)?;
        let k = g.exp(e)?;
        let s = g.sum(k)?;
        g.scale(s, coef)
    };
    let txx = block(g, x, x, 1.0 / ((n * n) as f64))?;
    let txy = block(g, x, y, 2.0 / ((n * m) as f64))?;
    let tyy = block(g, y, y, 1.0 / ((m * m) as f64))?;
    let left = g.sub(txx, txy)?;
    g.add(left, tyy)
}

// ── loss weights and reporting ──

/// Trade-off scalars of the total objective. `gamma_a` weighs the visual
/// modality, `gamma_b` the textual one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_j: f64,
    pub lambda_mm: f64,
    pub lambda_adv: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub gamma_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_j: 0.025,
            lambda_mm: 0.008,
            lambda_adv: 0.003,
            gamma_a: 0.8,
            gamma_b: 1.0,
            gamma_c: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_j", self.lambda_j),
            ("lambda_mm", self.lambda_mm),
            ("lambda_adv", self.lambda_adv),
            ("gamma_a", self.gamma_a),
            ("gamma_b", self.gamma_b),
            ("gamma_c", self.gamma_c),
        ];
        for (name, v) in all {
            if v < 0.0 || !v.is_finite() {
                return Err(CoreError::InvalidArgument(format!(
                    "loss weight {name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-step component losses. `total` is the reported objective value
/// L_c + lambda_j L_j + lambda_mm L_mm - lambda_adv L_adv.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_j: f64,
    pub l_mm: f64,
    pub l_adv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn with_total(l_c: f64, l_j: f64, l_mm: f64, l_adv: f64, w: &LossWeights) -> Self {
        Self {
            l_c,
            l_j,
            l_mm,
            l_adv,
            total: reported_total(l_c, l_j, l_mm, l_adv, w),
        }
    }
}

/// The reporting formula for the total objective.
pub fn reported_total(l_c: f64, l_j: f64, l_mm: f64, l_adv: f64, w: &LossWeights) -> f64 {
    l_c + w.lambda_j * l_j + w.lambda_mm * l_mm - w.lambda_adv * l_adv
}

// ── alignment losses ──

/// L_j: squared MMD between source and target joint embeddings.
pub fn loss_joint_graph(
    g: &mut Graph,
    e_s: TensorId,
    e_t: TensorId,
    kernel: &KernelSpec,
) -> Result<TensorId> {
    mmd_sq_graph(g, e_s, e_t, kernel)
}

/// L_mm: gamma_a * mmd(v_s, v_t) + gamma_b * mmd(q_s, q_t). Each modality
/// resolves its own bandwidth.
pub fn loss_multimodal_graph(
    g: &mut Graph,
    q_s: TensorId,
    q_t: TensorId,
    v_s: TensorId,
    v_t: TensorId,
    gamma_a: f64,
    gamma_b: f64,
    kernel: &KernelSpec,
) -> Result<TensorId> {
    let mv = mmd_sq_graph(g, v_s, v_t, kernel)?;
    let mq = mmd_sq_graph(g, q_s, q_t, kernel)?;
    let wv = g.scale(mv, gamma_a)?;
    let wq = g.scale(mq, gamma_b)?;
    g.add(wv, wq)
}

/// Plain value of L_mm for probes and reports.
pub fn loss_multimodal(
    q_s: &Tensor,
    q_t: &Tensor,
    v_s: &Tensor,
    v_t: &Tensor,
    gamma_a: f64,
    gamma_b: f64,
    kernel: &KernelSpec,
) -> Result<f64> {
    Ok(gamma_a * mmd_sq(v_s, v_t, kernel)? + gamma_b * mmd_sq(q_s, q_t, kernel)?)
}

// ── classification ──

/// Mean cross entropy of `logits` [batch x classes] against integer labels;
/// `None` labels (out-of-vocab answers) are excluded from the mean.
pub fn cross_entropy_mean(
    g: &mut Graph,
    logits: TensorId,
    labels: &[Option<usize>],
) -> Result<TensorId> {
    let (rows, classes) = (g.value(logits).rows(), g.value(logits).cols());
    if labels.len() != rows {
        return Err(CoreError::InvalidArgument(format!(
            "{} labels for {} logit rows",
            labels.len(),
            rows
        )));
    }
    let mut mask = Tensor::zeros(vec![rows, classes]);
    let mut valid = 0usize;
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            if c >= classes {
                return Err(CoreError::InvalidArgument(format!(
                    "label {c} out of range for {classes} classes"
                )));
            }
            mask.data_mut()[i * classes + c] = 1.0;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(CoreError::InvalidArgument(
            "cross entropy needs at least one labeled sample".into(),
        ));
    }
    let lsm = g.log_softmax(logits, 1)?;
    let m = g.constant(mask);
    let picked = g.mul(lsm, m)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0 / valid as f64)
}

/// L_c: mean CE on the target batch plus gamma_c times mean CE on the source
/// batch. A zero gamma_c drops the source term entirely.
pub fn loss_classification_graph(
    g: &mut Graph,
    logits_s: TensorId,
    labels_s: &[Option<usize>],
    logits_t: TensorId,
    labels_t: &[Option<usize>],
    gamma_c: f64,
) -> Result<TensorId> {
    let ce_t = cross_entropy_mean(g, logits_t, labels_t)?;
    if gamma_c == 0.0 {
        return Ok(ce_t);
    }
    let ce_s = cross_entropy_mean(g, logits_s, labels_s)?;
    let ws = g.scale(ce_s, gamma_c)?;
    g.add(ce_t, ws)
}

// ── adversarial ──

/// L_adv = -mean(log p_source) - mean(log(1 - p_target)), with both
/// probability vectors clamped [`PROB_CLAMP`] away from the boundaries.
pub fn loss_adversarial_graph(
    g: &mut Graph,
    p_source: TensorId,
    p_target: TensorId,
) -> Result<TensorId> {
    let ps = g.clamp(p_source, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let pt = g.clamp(p_target, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let ls = g.log(ps)?;
    let ls = g.mean(ls)?;
    let omt = g.one_minus(pt)?;
    let lt = g.log(omt)?;
    let lt = g.mean(lt)?;
    let s = g.add(ls, lt)?;
    g.scale(s, -1.0)
}

/// Assembles the scalar node actually minimized by the optimizer. The
/// adversarial term enters unscaled because the gradient reversal layer
/// already applies -lambda_adv on the feature side while the discriminator
/// descends the raw L_adv; the reported Eq.-8-style total is computed
/// separately by [`reported_total`].
pub fn training_objective_graph(
    g: &mut Graph,
    l_c: TensorId,
    l_j: Option<TensorId>,
    l_mm: Option<TensorId>,
    l_adv: Option<TensorId>,
    w: &LossWeights,
) -> Result<TensorId> {
    w.validate()?;
    let mut total = l_c;
    if let Some(j) = l_j {
        let wj = g.scale(j, w.lambda_j)?;
        total = g.add(total, wj)?;
    }
    if let Some(mm) = l_mm {
        let wmm = g.scale(mm, w.lambda_mm)?;
        total = g.add(total, wmm)?;
    }
    if let Some(adv) = l_adv {
        total = g.add(total, adv)?;
    }
    Ok(total)
}
