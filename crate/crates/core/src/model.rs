//! Dual-head answer classifier over shared multi-modal encoders.
//!
//! One question encoder (embedding + GRU) and one visual encoder
//! (question-guided attention over regions, mean-pooled grid cells fused
//! with the question state) feed a multiplicative fusion layer. Two
//! classifier heads, one per domain, read the fused code; a small
//! discriminator reads it through a gradient-reversal node.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::nn::{
    Activation, AttentionHead, BoundAttention, BoundEmbedding, BoundGru, BoundLinear, BoundMlp,
    EmbeddingTable, GruCell, LinearLayer, Mlp, PADDING_INDEX,
};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Architecture dimensions. Construction-time defaults describe the
/// full-scale configuration; `desk()` is the scaled-down geometry the
/// synthetic experiments run at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Question state size (GRU hidden units).
    pub d_q: usize,
    /// Per-region / per-grid-cell feature size.
    pub d_v: usize,
    /// Region count per image.
    pub k: usize,
    /// Grid cell count per image.
    pub g: usize,
    /// Fused code size.
    pub d_e: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub classifier_hidden: usize,
    pub discriminator_hidden: usize,
    pub max_question_len: usize,
    /// Embedding rows, including the reserved padding row 0.
    pub token_vocab: usize,
    pub source_classes: usize,
    pub target_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_q: 1024,
            d_v: 2048,
            k: 100,
            g: 49,
            d_e: 4096,
            embed_dim: 300,
            attn_dim: 1024,
            classifier_hidden: 2048,
            discriminator_hidden: 1024,
            max_question_len: 24,
            token_vocab: 12_000,
            source_classes: 3000,
            target_classes: 3000,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d_q: 96,
            d_v: 64,
            k: 8,
            g: 4,
            d_e: 128,
            embed_dim: 48,
            attn_dim: 96,
            classifier_hidden: 256,
            discriminator_hidden: 96,
            max_question_len: 24,
            token_vocab: 61,
            source_classes: 30,
            target_classes: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_q", self.d_q),
            ("d_v", self.d_v),
            ("k", self.k),
            ("g", self.g),
            ("d_e", self.d_e),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
            ("classifier_hidden", self.classifier_hidden),
            ("discriminator_hidden", self.discriminator_hidden),
            ("max_question_len", self.max_question_len),
            ("source_classes", self.source_classes),
            ("target_classes", self.target_classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(CoreError::InvalidArgument(format!(
                    "model dimension {name} must be positive"
                )));
            }
        }
        if self.token_vocab < 2 {
            return Err(CoreError::InvalidArgument(
                "token vocabulary needs the padding row plus at least one token".into(),
            ));
        }
        Ok(())
    }

    fn param_id_count() -> usize {
        // embedding + 3 gates x 3 + attention 3 + 3 linears x 2 + 3 heads x 4
        1 + 9 + 3 + 6 + 12
    }
}

/// The data-independent half of a ModelConfig; geometry and class counts
/// come from the dataset at hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_q: usize,
    pub d_e: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub classifier_hidden: usize,
    pub discriminator_hidden: usize,
    pub max_question_len: usize,
}

impl ModelDims {
    pub fn desk() -> Self {
        Self {
            d_q: 96,
            d_e: 128,
            embed_dim: 48,
            attn_dim: 96,
            classifier_hidden: 256,
            discriminator_hidden: 96,
            max_question_len: 24,
        }
    }

    pub fn config_for(
        &self,
        k: usize,
        g: usize,
        d_v: usize,
        token_vocab: usize,
        source_classes: usize,
        target_classes: usize,
    ) -> ModelConfig {
        ModelConfig {
            d_q: self.d_q,
            d_v,
            k,
            g,
            d_e: self.d_e,
            embed_dim: self.embed_dim,
            attn_dim: self.attn_dim,
            classifier_hidden: self.classifier_hidden,
            discriminator_hidden: self.discriminator_hidden,
            max_question_len: self.max_question_len,
            token_vocab,
            source_classes,
            target_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Source,
    Target,
}

/// The trainable network. Encoder fields are shared by both domains: any
/// forward pass, source or target, reads the same parameter storage.
#[derive(Debug, Clone)]
pub struct DualDomainModel {
    pub config: ModelConfig,
    pub embedding: EmbeddingTable,
    pub gru: GruCell,
    pub attention: AttentionHead,
    pub grid_proj: LinearLayer,
    pub fuse_q: LinearLayer,
    pub fuse_v: LinearLayer,
    pub classifier_source: Mlp,
    pub classifier_target: Mlp,
    pub discriminator: Mlp,
}

/// Stream salt reserved for parameter initialization.
const INIT_SALT: u64 = 11;

impl DualDomainModel {
    /// Fresh parameters fully determined by the seed.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = crate::data::seed_stream(seed, INIT_SALT);
        Self::init(config, &mut rng)
    }

    /// Initializes every layer in a fixed order so a seed fully determines
    /// the parameters.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        Ok(Self {
            embedding: EmbeddingTable::init(c.token_vocab, c.embed_dim, rng),
            gru: GruCell::init(c.embed_dim, c.d_q, rng),
            attention: AttentionHead::init(c.d_q, c.d_v, c.attn_dim, rng),
            grid_proj: LinearLayer::init(c.d_v + c.d_q, c.d_v, rng),
            fuse_q: LinearLayer::init(c.d_q, c.d_e, rng),
            fuse_v: LinearLayer::init(2 * c.d_v, c.d_e, rng),
            classifier_source: Mlp::init(&[c.d_e, c.classifier_hidden, c.source_classes], rng),
            classifier_target: Mlp::init(&[c.d_e, c.classifier_hidden, c.target_classes], rng),
            discriminator: Mlp::init(&[c.d_e, c.discriminator_hidden, 1], rng),
            config,
        })
    }

    /// Canonical parameter listing; the order defines optimizer slot and
    /// checkpoint layout.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embedding.rows".into(), &self.embedding.rows));
        for (gate, p) in [
            ("update", &self.gru.update),
            ("reset", &self.gru.reset),
            ("candidate", &self.gru.candidate),
        ] {
            out.push((format!("gru.{gate}.w"), &p.w));
            out.push((format!("gru.{gate}.u"), &p.u));
            out.push((format!("gru.{gate}.b"), &p.b));
        }
        out.push(("attention.query_proj".into(), &self.attention.query_proj));
        out.push(("attention.key_proj".into(), &self.attention.key_proj));
        out.push(("attention.score".into(), &self.attention.score));
        for (name, l) in [
            ("grid_proj", &self.grid_proj),
            ("fuse_q", &self.fuse_q),
            ("fuse_v", &self.fuse_v),
        ] {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        for (name, mlp) in [
            ("classifier_source", &self.classifier_source),
            ("classifier_target", &self.classifier_target),
            ("discriminator", &self.discriminator),
        ] {
            for (i, (l, _)) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), &l.weight));
                out.push((format!("{name}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embedding.rows".into(), &mut self.embedding.rows));
        for (gate, p) in [
            ("update", &mut self.gru.update),
            ("reset", &mut self.gru.reset),
            ("candidate", &mut self.gru.candidate),
        ] {
            out.push((format!("gru.{gate}.w"), &mut p.w));
            out.push((format!("gru.{gate}.u"), &mut p.u));
            out.push((format!("gru.{gate}.b"), &mut p.b));
        }
        out.push((
            "attention.query_proj".into(),
            &mut self.attention.query_proj,
        ));
        out.push(("attention.key_proj".into(), &mut self.attention.key_proj));
        out.push(("attention.score".into(), &mut self.attention.score));
        for (name, l) in [
            ("grid_proj", &mut self.grid_proj),
            ("fuse_q", &mut self.fuse_q),
            ("fuse_v", &mut self.fuse_v),
        ] {
            out.push((format!("{name}.weight"), &mut l.weight));
            out.push((format!("{name}.bias"), &mut l.bias));
        }
        for (name, mlp) in [
            ("classifier_source", &mut self.classifier_source),
            ("classifier_target", &mut self.classifier_target),
            ("discriminator", &mut self.discriminator),
        ] {
            for (i, (l, _)) in mlp.layers.iter_mut().enumerate() {
                out.push((format!("{name}.{i}.weight"), &mut l.weight));
                out.push((format!("{name}.{i}.bias"), &mut l.bias));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies the source head into the target head: the hidden layer whole,
    /// and for each `(source_class, target_class)` pair the matching output
    /// row and bias. Rows without a shared answer keep their fresh init.
    pub fn warm_start_target_head(&mut self, shared: &[(usize, usize)]) -> Result<()> {
        if self.classifier_source.layers.len() != self.classifier_target.layers.len() {
            return Err(CoreError::ArchitectureMismatch {
                msg: "classifier heads have different depths".into(),
            });
        }
        let depth = self.classifier_source.layers.len();
        for i in 0..depth - 1 {
            let src = &self.classifier_source.layers[i].0;
            if src.weight.shape() != self.classifier_target.layers[i].0.weight.shape() {
                return Err(CoreError::ArchitectureMismatch {
                    msg: format!("classifier hidden layer {i} shapes differ"),
                });
            }
            let (w, b) = (src.weight.clone(), src.bias.clone());
            let dst = &mut self.classifier_target.layers[i].0;
            dst.weight = w;
            dst.bias = b;
        }
        let src_out = &self.classifier_source.layers[depth - 1].0;
        let cols = src_out.weight.cols();
        let (src_w, src_b) = (src_out.weight.clone(), src_out.bias.clone());
        let dst_out = &mut self.classifier_target.layers[depth - 1].0;
        if dst_out.weight.cols() != cols {
            return Err(CoreError::ArchitectureMismatch {
                msg: "classifier output layers disagree on input width".into(),
            });
        }
        for &(si, ti) in shared {
            if si >= src_w.rows() || ti >= dst_out.weight.rows() {
                return Err(CoreError::InvalidArgument(format!(
                    "shared class pair ({si}, {ti}) outside head sizes"
                )));
            }
            let row = src_w.row(si).to_vec();
            dst_out.weight.data_mut()[ti * cols..(ti + 1) * cols].copy_from_slice(&row);
            dst_out.bias.data_mut()[ti] = src_b.data()[si];
        }
        Ok(())
    }

    /// Binds every parameter into `g` once, in canonical order. Both domain
    /// forwards built on the same binding share encoder storage, so their
    /// gradients accumulate into single slots.
    pub fn bind(&self, g: &mut Graph) -> BoundModel<'_> {
        let ids: Vec<TensorId> = self
            .params()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone()))
            .collect();
        BoundModel::from_param_ids(&self.config, &ids).expect("canonical id order")
    }
}

pub struct BoundModel<'m> {
    pub config: &'m ModelConfig,
    pub embedding: BoundEmbedding,
    pub gru: BoundGru,
    pub attention: BoundAttention,
    pub grid_proj: BoundLinear,
    pub fuse_q: BoundLinear,
    pub fuse_v: BoundLinear,
    pub classifier_source: BoundMlp,
    pub classifier_target: BoundMlp,
    pub discriminator: BoundMlp,
}

/// Encoder outputs for one batch.
pub struct Encoded {
    /// Question state [b x d_q].
    pub q: TensorId,
    /// Visual code [b x 2 d_v]: attention-pooled regions then fused grid.
    pub v: TensorId,
    /// Fused code [b x d_e].
    pub e: TensorId,
    /// Region attention weights [b x k].
    pub attention: TensorId,
}

fn take(ids: &[TensorId], i: &mut usize) -> TensorId {
    let v = ids[*i];
    *i += 1;
    v
}

fn take_linear(ids: &[TensorId], i: &mut usize) -> BoundLinear {
    BoundLinear {
        weight: take(ids, i),
        bias: take(ids, i),
    }
}

fn take_head(ids: &[TensorId], i: &mut usize) -> BoundMlp {
    BoundMlp {
        layers: vec![
            (take_linear(ids, i), Activation::Tanh),
            (take_linear(ids, i), Activation::None),
        ],
    }
}

impl<'m> BoundModel<'m> {
    /// Reassembles a bound model from parameter ids in canonical order.
    pub fn from_param_ids(config: &'m ModelConfig, ids: &[TensorId]) -> Result<Self> {
        let expected = ModelConfig::param_id_count();
        if ids.len() != expected {
            return Err(CoreError::ArchitectureMismatch {
                msg: format!("expected {expected} parameter ids, got {}", ids.len()),
            });
        }
        let mut i = 0;
        let embedding = BoundEmbedding {
            rows: take(ids, &mut i),
        };
        let mut gate = || {
            [
                take(ids, &mut i),
                take(ids, &mut i),
                take(ids, &mut i),
            ]
        };
        let (u, r, c) = (gate(), gate(), gate());
        let gru = BoundGru::from_ids(u, r, c);
        let attention = BoundAttention {
            query_proj: take(ids, &mut i),
            key_proj: take(ids, &mut i),
            score: take(ids, &mut i),
        };
        let grid_proj = take_linear(ids, &mut i);
        let fuse_q = take_linear(ids, &mut i);
        let fuse_v = take_linear(ids, &mut i);
        let classifier_source = take_head(ids, &mut i);
        let classifier_target = take_head(ids, &mut i);
        let discriminator = take_head(ids, &mut i);
        Ok(Self {
            config,
            embedding,
            gru,
            attention,
            grid_proj,
            fuse_q,
            fuse_v,
            classifier_source,
            classifier_target,
            discriminator,
        })
    }

    /// Parameter ids in canonical order, matching `DualDomainModel::params`.
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.embedding.rows];
        out.extend(self.gru_ids());
        out.extend([
            self.attention.query_proj,
            self.attention.key_proj,
            self.attention.score,
        ]);
        for l in [&self.grid_proj, &self.fuse_q, &self.fuse_v] {
            out.extend([l.weight, l.bias]);
        }
        for mlp in [
            &self.classifier_source,
            &self.classifier_target,
            &self.discriminator,
        ] {
            for (l, _) in &mlp.layers {
                out.extend([l.weight, l.bias]);
            }
        }
        out
    }

    fn gru_ids(&self) -> [TensorId; 9] {
        let [u, r, c] = self.gru.gate_ids();
        [u[0], u[1], u[2], r[0], r[1], r[2], c[0], c[1], c[2]]
    }

    /// Runs the GRU over the batch, freezing each row's state once its real
    /// tokens end. Rejects empty questions and overlong ones.
    pub fn encode_question(&self, g: &mut Graph, tokens: &[Vec<usize>]) -> Result<TensorId> {
        let b = tokens.len();
        if b == 0 {
            return Err(CoreError::InvalidArgument("empty batch".into()));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(CoreError::InvalidArgument(format!(
                    "question {i} has no tokens"
                )));
            }
            if t.len() > self.config.max_question_len {
                return Err(CoreError::InvalidArgument(format!(
                    "question {i} has {} tokens, max is {}",
                    t.len(),
                    self.config.max_question_len
                )));
            }
        }
        let t_max = tokens.iter().map(Vec::len).max().expect("nonempty batch");
        let mut h = g.constant(Tensor::zeros(vec![b, self.config.d_q]));
        for t in 0..t_max {
            let idx: Vec<usize> = tokens
                .iter()
                .map(|s| if t < s.len() { s[t] } else { PADDING_INDEX })
                .collect();
            let x = self.embedding.lookup(g, idx)?;
            let h_new = self.gru.step(g, x, h)?;
            if tokens.iter().all(|s| t < s.len()) {
                h = h_new;
            } else {
                let active: Vec<f64> = tokens
                    .iter()
                    .map(|s| if t < s.len() { 1.0 } else { 0.0 })
                    .collect();
                let frozen: Vec<f64> = active.iter().map(|a| 1.0 - a).collect();
                let m_new = g.constant(Tensor::new(vec![b, 1], active)?);
                let m_old = g.constant(Tensor::new(vec![b, 1], frozen)?);
                let keep_new = g.mul(h_new, m_new)?;
                let keep_old = g.mul(h, m_old)?;
                h = g.add(keep_new, keep_old)?;
            }
        }
        Ok(h)
    }

    /// Question-guided attention over regions plus mean-pooled grid cells
    /// projected jointly with the question state.
    pub fn encode_visual(
        &self,
        g: &mut Graph,
        q: TensorId,
        regions: TensorId,
        grids: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let (weights, pooled) = self.attention.pool(g, q, regions, self.config.k)?;
        let grid_sum = g.sum_row_blocks(grids, self.config.g)?;
        let grid_mean = g.scale(grid_sum, 1.0 / self.config.g as f64)?;
        let grid_in = g.concat(grid_mean, q, 1)?;
        let grid_fused = self.grid_proj.forward(g, grid_in)?;
        let v = g.concat(pooled, grid_fused, 1)?;
        Ok((weights, v))
    }

    /// Multiplicative fusion of the two modality projections.
    pub fn fuse(&self, g: &mut Graph, q: TensorId, v: TensorId) -> Result<TensorId> {
        let pq = self.fuse_q.forward(g, q)?;
        let pv = self.fuse_v.forward(g, v)?;
        g.mul(pq, pv)
    }

    /// Full encoder pass for one batch.
    pub fn encode(
        &self,
        g: &mut Graph,
        tokens: &[Vec<usize>],
        regions: &Tensor,
        grids: &Tensor,
    ) -> Result<Encoded> {
        let b = tokens.len();
        let expect_regions = [b * self.config.k, self.config.d_v];
        if regions.shape() != expect_regions {
            return Err(CoreError::ShapeMismatch {
                op: "encode regions",
                lhs: regions.shape().to_vec(),
                rhs: expect_regions.to_vec(),
            });
        }
        let expect_grids = [b * self.config.g, self.config.d_v];
        if grids.shape() != expect_grids {
            return Err(CoreError::ShapeMismatch {
                op: "encode grids",
                lhs: grids.shape().to_vec(),
                rhs: expect_grids.to_vec(),
            });
        }
        let q = self.encode_question(g, tokens)?;
        let r = g.constant(regions.clone());
        let gr = g.constant(grids.clone());
        let (attention, v) = self.encode_visual(g, q, r, gr)?;
        let e = self.fuse(g, q, v)?;
        Ok(Encoded {
            q,
            v,
            e,
            attention,
        })
    }

    /// Answer logits from the fused code, per domain head.
    pub fn classify(&self, g: &mut Graph, e: TensorId, head: Head) -> Result<TensorId> {
        match head {
            Head::Source => self.classifier_source.forward(g, e),
            Head::Target => self.classifier_target.forward(g, e),
        }
    }

    /// Source-domain probability [b x 1] of the fused code, read through a
    /// gradient-reversal node scaled by `lambda_adv`.
    pub fn discriminate(&self, g: &mut Graph, e: TensorId, lambda_adv: f64) -> Result<TensorId> {
        let reversed = g.grl(e, lambda_adv)?;
        let logit = self.discriminator.forward(g, reversed)?;
        g.sigmoid(logit)
    }
}

/// Argmax over one logits row, ties resolved to the lowest index.
pub fn predict_answer(logits_row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits_row.iter().enumerate() {
        if v > logits_row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check_multi;
    use crate::losses::cross_entropy_mean;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_q: 5,
            d_v: 4,
            k: 3,
            g: 2,
            d_e: 6,
            embed_dim: 3,
            attn_dim: 4,
            classifier_hidden: 7,
            discriminator_hidden: 5,
            max_question_len: 8,
            token_vocab: 11,
            source_classes: 4,
            target_classes: 3,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_batch(cfg: &ModelConfig, b: usize, seed: u64) -> (Vec<Vec<usize>>, Tensor, Tensor) {
        use rand::Rng;
        let mut r = rng(seed);
        let tokens: Vec<Vec<usize>> = (0..b)
            .map(|i| {
                (0..(2 + (i % 3)))
                    .map(|_| r.random_range(1..cfg.token_vocab))
                    .collect()
            })
            .collect();
        let regions = Tensor::new(
            vec![b * cfg.k, cfg.d_v],
            (0..b * cfg.k * cfg.d_v)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let grids = Tensor::new(
            vec![b * cfg.g, cfg.d_v],
            (0..b * cfg.g * cfg.d_v)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        (tokens, regions, grids)
    }

    #[test]
    fn param_listing_is_canonical_and_unique() {
        let model = DualDomainModel::init(tiny_config(), &mut rng(0)).unwrap();
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), ModelConfig::param_id_count());
        assert_eq!(names[0], "embedding.rows");
        assert!(names.contains(&"classifier_target.1.bias".to_string()));
        assert!(names.contains(&"discriminator.0.weight".to_string()));

        let mut model2 = model.clone();
        let mut_names: Vec<String> = model2.params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);

        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        assert_eq!(bound.param_ids().len(), names.len());
        // bind consumed ids in the same order it re-emits them
        let ids = bound.param_ids();
        let mut sorted = ids.clone();
        sorted.sort_by_key(|t| t.index());
        assert_eq!(ids, sorted);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = DualDomainModel::init(tiny_config(), &mut rng(5)).unwrap();
        let b = DualDomainModel::init(tiny_config(), &mut rng(5)).unwrap();
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn single_token_zero_gru_gives_zero_question_state() {
        let mut model = DualDomainModel::init(tiny_config(), &mut rng(1)).unwrap();
        for (name, p) in model.params_mut() {
            if name.starts_with("gru.") {
                p.data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let q = bound.encode_question(&mut g, &[vec![3]]).unwrap();
        assert!(g.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_freezes_short_questions() {
        let model = DualDomainModel::init(tiny_config(), &mut rng(2)).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        // batch of [3-token, 1-token]: the short row must equal its own
        // single-token encoding even while the long row keeps stepping
        let q_pair = bound
            .encode_question(&mut g, &[vec![4, 5, 6], vec![7]])
            .unwrap();
        let paired = g.value(q_pair).row(1).to_vec();

        let mut g2 = Graph::new();
        let bound2 = model.bind(&mut g2);
        let q_solo = bound2.encode_question(&mut g2, &[vec![7]]).unwrap();
        assert_eq!(g2.value(q_solo).row(0), paired.as_slice());
    }

    #[test]
    fn empty_and_overlong_questions_are_rejected() {
        let model = DualDomainModel::init(tiny_config(), &mut rng(3)).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        assert!(bound.encode_question(&mut g, &[vec![]]).is_err());
        assert!(bound.encode_question(&mut g, &[vec![1; 9]]).is_err());
        assert!(bound.encode_question(&mut g, &[]).is_err());
    }

    #[test]
    fn ones_visual_projection_passes_question_projection_through() {
        let cfg = tiny_config();
        let mut model = DualDomainModel::init(cfg.clone(), &mut rng(4)).unwrap();
        for (name, p) in model.params_mut() {
            if name == "fuse_v.weight" {
                p.data_mut().fill(0.0);
            }
            if name == "fuse_v.bias" {
                p.data_mut().fill(1.0);
            }
        }
        let (tokens, regions, grids) = toy_batch(&cfg, 2, 10);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let enc = bound.encode(&mut g, &tokens, &regions, &grids).unwrap();
        let pq = bound.fuse_q.forward(&mut g, enc.q).unwrap();
        assert_eq!(g.value(enc.e).data(), g.value(pq).data());
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let cfg = tiny_config();
        let model = DualDomainModel::init(cfg.clone(), &mut rng(6)).unwrap();
        let (tokens, regions, grids) = toy_batch(&cfg, 3, 11);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let enc = bound.encode(&mut g, &tokens, &regions, &grids).unwrap();
        let w = g.value(enc.attention).clone();
        assert_eq!(w.shape(), &[3, cfg.k]);
        for i in 0..3 {
            let s: f64 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.row(i).iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn classify_heads_have_their_own_widths() {
        let cfg = tiny_config();
        let model = DualDomainModel::init(cfg.clone(), &mut rng(7)).unwrap();
        let (tokens, regions, grids) = toy_batch(&cfg, 2, 12);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let enc = bound.encode(&mut g, &tokens, &regions, &grids).unwrap();
        let ls = bound.classify(&mut g, enc.e, Head::Source).unwrap();
        let lt = bound.classify(&mut g, enc.e, Head::Target).unwrap();
        assert_eq!(g.value(ls).shape(), &[2, cfg.source_classes]);
        assert_eq!(g.value(lt).shape(), &[2, cfg.target_classes]);
    }

    #[test]
    fn zero_discriminator_outputs_half() {
        let cfg = tiny_config();
        let mut model = DualDomainModel::init(cfg.clone(), &mut rng(8)).unwrap();
        for (name, p) in model.params_mut() {
            if name.starts_with("discriminator.") {
                p.data_mut().fill(0.0);
            }
        }
        let (tokens, regions, grids) = toy_batch(&cfg, 2, 13);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let enc = bound.encode(&mut g, &tokens, &regions, &grids).unwrap();
        let p = bound.discriminate(&mut g, enc.e, 0.4).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reversal_coefficient_leaves_forward_unchanged() {
        let cfg = tiny_config();
        let model = DualDomainModel::init(cfg.clone(), &mut rng(9)).unwrap();
        let (tokens, regions, grids) = toy_batch(&cfg, 2, 14);
        let run = |lambda: f64| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let enc = bound.encode(&mut g, &tokens, &regions, &grids).unwrap();
            let p = bound.discriminate(&mut g, enc.e, lambda).unwrap();
            g.value(p).data().to_vec()
        };
        assert_eq!(run(0.0), run(0.003));
        assert_eq!(run(0.003), run(5.0));
    }

    #[test]
    fn predict_answer_argmax_and_tie_break() {
        assert_eq!(predict_answer(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(predict_answer(&[0.5, 0.2, 0.5]), 0);
        assert_eq!(predict_answer(&[-1.0]), 0);
    }

    #[test]
    fn warm_start_copies_trunk_and_shared_rows() {
        let cfg = tiny_config();
        let mut model = DualDomainModel::init(cfg, &mut rng(15)).unwrap();
        let fresh_target = model.classifier_target.layers[1].0.weight.clone();
        model.warm_start_target_head(&[(0, 2), (3, 0)]).unwrap();

        let src0 = &model.classifier_source.layers[0].0;
        let dst0 = &model.classifier_target.layers[0].0;
        assert_eq!(src0.weight.data(), dst0.weight.data());
        assert_eq!(src0.bias.data(), dst0.bias.data());
        let src1 = &model.classifier_source.layers[1].0;
        let dst1 = &model.classifier_target.layers[1].0;
        assert_eq!(dst1.weight.row(2), src1.weight.row(0));
        assert_eq!(dst1.bias.data()[0], src1.bias.data()[3]);
        // non-shared target row untouched
        assert_eq!(dst1.weight.row(1), fresh_target.row(1));

        assert!(model.warm_start_target_head(&[(99, 0)]).is_err());
    }

    #[test]
    fn encoders_are_shared_across_domain_forwards() {
        let cfg = tiny_config();
        let model = DualDomainModel::init(cfg.clone(), &mut rng(16)).unwrap();
        let (tokens_s, regions_s, grids_s) = toy_batch(&cfg, 2, 17);
        let (tokens_t, regions_t, grids_t) = toy_batch(&cfg, 2, 18);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let n_leaves = g.len();
        let enc_s = bound
            .encode(&mut g, &tokens_s, &regions_s, &grids_s)
            .unwrap();
        let enc_t = bound
            .encode(&mut g, &tokens_t, &regions_t, &grids_t)
            .unwrap();
        // the second forward reuses the bound parameter leaves
        assert_eq!(bound.param_ids().len(), n_leaves);
        assert_ne!(enc_s.e, enc_t.e);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let model = DualDomainModel::init(cfg.clone(), &mut rng(20)).unwrap();
        let (tokens, regions, grids) = toy_batch(&cfg, 2, 21);
        let labels = vec![Some(1), Some(3)];
        let points: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();

        let err = grad_check_multi(
            |g, ids| {
                let bound = BoundModel::from_param_ids(&cfg, ids)?;
                let enc = bound.encode(g, &tokens, &regions, &grids)?;
                let logits = bound.classify(g, enc.e, Head::Source)?;
                cross_entropy_mean(g, logits, &labels)
            },
            &points,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "max relative gradient error {err}");
    }
}
