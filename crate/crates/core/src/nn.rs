//! Parameterized building blocks: linear maps, embedding table, GRU cell,
//! top-down attention pooling, and MLP heads. Each block owns plain tensors
//! and binds them into a graph as leaves once per training step, so shared
//! encoders receive summed gradients from every path that uses them.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Xavier-uniform weight matrix [out_dim x in_dim]: uniform(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_weight(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..in_dim * out_dim)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::new(vec![out_dim, in_dim], data).expect("xavier shape is consistent")
}

// ── linear ──

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// [out_dim x in_dim]
    pub weight: Tensor,
    /// [out_dim]
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.rows() != bias.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "linear_layer",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: xavier_weight(in_dim, out_dim, rng),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLinear {
        BoundLinear {
            weight: g.leaf(self.weight.clone()),
            bias: g.leaf(self.bias.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: TensorId,
    pub bias: TensorId,
}

impl BoundLinear {
    /// y = x W^T + b for x of shape [batch x in_dim].
    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let y = g.matmul_tb(x, self.weight)?;
        g.add(y, self.bias)
    }
}

// ── embedding ──

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// [vocab_size x embed_dim]; row 0 is the padding row and stays zero.
    pub rows: Tensor,
}

/// Reserved padding index whose embedding row is frozen at zero.
pub const PADDING_INDEX: usize = 0;

impl EmbeddingTable {
    pub fn init(vocab_size: usize, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 0.1).expect("valid stddev");
        let mut data: Vec<f64> = (0..vocab_size * embed_dim)
            .map(|_| normal.sample(rng))
            .collect();
        for v in data.iter_mut().take(embed_dim) {
            *v = 0.0;
        }
        Self {
            rows: Tensor::new(vec![vocab_size, embed_dim], data).expect("consistent shape"),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundEmbedding {
        BoundEmbedding {
            rows: g.leaf(self.rows.clone()),
        }
    }

    /// Zeroes the padding row of an embedding gradient so the optimizer
    /// never moves it.
    pub fn zero_padding_grad(grad: &mut Tensor) {
        let dim = grad.cols();
        for v in grad.data_mut().iter_mut().take(dim) {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEmbedding {
    pub rows: TensorId,
}

impl BoundEmbedding {
    pub fn lookup(&self, g: &mut Graph, indices: Vec<usize>) -> Result<TensorId> {
        g.gather_rows(self.rows, indices)
    }
}

// ── GRU ──

/// One gate's parameter triple: input weight [hidden x in], recurrent weight
/// [hidden x hidden], bias [hidden].
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl GateParams {
    fn init(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: xavier_weight(in_dim, hidden, rng),
            u: xavier_weight(hidden, hidden, rng),
            b: Tensor::zeros(vec![hidden]),
        }
    }

    fn bind(&self, g: &mut Graph) -> BoundGate {
        BoundGate {
            w: g.leaf(self.w.clone()),
            u: g.leaf(self.u.clone()),
            b: g.leaf(self.b.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundGate {
    w: TensorId,
    u: TensorId,
    b: TensorId,
}

impl BoundGate {
    /// x W^T + h U^T + b
    fn linear(&self, g: &mut Graph, x: TensorId, h: TensorId) -> Result<TensorId> {
        let xs = g.matmul_tb(x, self.w)?;
        let hs = g.matmul_tb(h, self.u)?;
        let s = g.add(xs, hs)?;
        g.add(s, self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub update: GateParams,
    pub reset: GateParams,
    pub candidate: GateParams,
}

impl GruCell {
    pub fn init(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            update: GateParams::init(in_dim, hidden, rng),
            reset: GateParams::init(in_dim, hidden, rng),
            candidate: GateParams::init(in_dim, hidden, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.update.u.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.update.w.cols()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundGru {
        BoundGru {
            update: self.update.bind(g),
            reset: self.reset.bind(g),
            candidate: self.candidate.bind(g),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    update: BoundGate,
    reset: BoundGate,
    candidate: BoundGate,
}

impl BoundGru {
    /// Assembles a bound cell from existing graph ids, each gate given as
    /// [w, u, b].
    pub fn from_ids(
        update: [TensorId; 3],
        reset: [TensorId; 3],
        candidate: [TensorId; 3],
    ) -> Self {
        let gate = |ids: [TensorId; 3]| BoundGate {
            w: ids[0],
            u: ids[1],
            b: ids[2],
        };
        Self {
            update: gate(update),
            reset: gate(reset),
            candidate: gate(candidate),
        }
    }

    /// Gate parameter ids as [update, reset, candidate], each [w, u, b].
    pub fn gate_ids(&self) -> [[TensorId; 3]; 3] {
        let gate = |g: &BoundGate| [g.w, g.u, g.b];
        [
            gate(&self.update),
            gate(&self.reset),
            gate(&self.candidate),
        ]
    }
}

impl BoundGru {
    /// One recurrence step: z and r are sigmoid gates, the candidate is
    /// tanh(x W^T + (r * h) U^T + b), and h' = (1 - z) * h + z * candidate.
    pub fn step(&self, g: &mut Graph, x: TensorId, h: TensorId) -> Result<TensorId> {
        let z = self.update.linear(g, x, h)?;
        let z = g.sigmoid(z)?;
        let r = self.reset.linear(g, x, h)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h)?;
        let c = self.candidate.linear(g, x, rh)?;
        let c = g.tanh(c)?;
        let keep = g.one_minus(z)?;
        let kept = g.mul(keep, h)?;
        let new = g.mul(z, c)?;
        g.add(kept, new)
    }
}

// ── attention ──

/// Additive top-down attention: score_i = score_vec . tanh(Wq q + Wk v_i),
/// weights = softmax over regions, pooled = weighted sum of region features.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// [attn_dim x d_q]
    pub query_proj: Tensor,
    /// [attn_dim x d_v]
    pub key_proj: Tensor,
    /// [1 x attn_dim]
    pub score: Tensor,
}

impl AttentionHead {
    pub fn init(d_q: usize, d_v: usize, attn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query_proj: xavier_weight(d_q, attn_dim, rng),
            key_proj: xavier_weight(d_v, attn_dim, rng),
            score: xavier_weight(attn_dim, 1, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundAttention {
        BoundAttention {
            query_proj: g.leaf(self.query_proj.clone()),
            key_proj: g.leaf(self.key_proj.clone()),
            score: g.leaf(self.score.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub query_proj: TensorId,
    pub key_proj: TensorId,
    pub score: TensorId,
}

impl BoundAttention {
    /// q: [batch x d_q], v_flat: [batch*k x d_v] with each sample's k region
    /// rows consecutive. Returns (weights [batch x k], pooled [batch x d_v]).
    pub fn pool(
        &self,
        g: &mut Graph,
        q: TensorId,
        v_flat: TensorId,
        k: usize,
    ) -> Result<(TensorId, TensorId)> {
        if k == 0 {
            return Err(CoreError::InvalidArgument(
                "attention needs at least one region".into(),
            ));
        }
        let batch = g.value(q).rows();
        let qp = g.matmul_tb(q, self.query_proj)?;
        let qp = g.repeat_rows(qp, k)?;
        let kp = g.matmul_tb(v_flat, self.key_proj)?;
        let h = g.add(qp, kp)?;
        let h = g.tanh(h)?;
        let scores = g.matmul_tb(h, self.score)?;
        let scores = g.reshape(scores, vec![batch, k])?;
        let weights = g.softmax(scores, 1)?;
        let col = g.reshape(weights, vec![batch * k, 1])?;
        let weighted = g.mul(v_flat, col)?;
        let pooled = g.sum_row_blocks(weighted, k)?;
        Ok((weights, pooled))
    }
}

// ── MLP ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(LinearLayer, Activation)>,
}

impl Mlp {
    /// Hidden layers use tanh; the final layer is linear (logits).
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push((LinearLayer::init(w[0], w[1], rng), Activation::Tanh));
        }
        if let Some(last) = layers.last_mut() {
            last.1 = Activation::None;
        }
        Self { layers }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|(l, a)| (l.bind(g), *a))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(BoundLinear, Activation)>,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        for (layer, act) in &self.layers {
            h = layer.forward(g, h)?;
            h = match act {
                Activation::None => h,
                Activation::Tanh => g.tanh(h)?,
                Activation::Sigmoid => g.sigmoid(h)?,
            };
        }
        Ok(h)
    }
}
