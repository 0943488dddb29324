//! Synthetic two-domain multi-modal data with controllable shift, answer
//! vocabularies, and batch assembly.
//!
//! Features are class-conditional Gaussian mixtures; questions are token
//! sequences whose distribution depends on the answer class, so both
//! modalities carry signal. Domain B is a shifted copy of the world: its
//! class prototypes move along fixed directions, its noise is rescaled, its
//! label prior is skewed, it shares only part of its answer vocabulary, and
//! a configurable fraction of its samples are unanswerable.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

pub const ANSWERS_PER_QUESTION: usize = 10;

/// Derives an independent deterministic RNG stream from a base seed.
pub fn seed_stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    YesNo,
    Number,
    Other,
    Unanswerable,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::YesNo => "yes_no",
            Category::Number => "number",
            Category::Other => "other",
            Category::Unanswerable => "unanswerable",
        }
    }

    pub fn of_answer(answer: &str) -> Category {
        if answer == "yes" || answer == "no" {
            Category::YesNo
        } else if answer == "unanswerable" {
            Category::Unanswerable
        } else if answer.chars().all(|c| c.is_ascii_digit()) && !answer.is_empty() {
            Category::Number
        } else {
            Category::Other
        }
    }
}

/// One question: region features (k rows of d_v values, flattened), grid
/// features (g rows), token indices, the ten annotator answers, a category
/// tag, and the domain role it was generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub regions: Vec<f64>,
    pub grids: Vec<f64>,
    pub tokens: Vec<u32>,
    pub answers: Vec<String>,
    pub category: Category,
    pub domain: Domain,
}

impl Sample {
    pub fn validate(&self, k: usize, g: usize, d_v: usize, token_vocab: u32) -> Result<()> {
        if self.answers.len() != ANSWERS_PER_QUESTION {
            return Err(CoreError::InvalidArgument(format!(
                "sample must carry exactly {ANSWERS_PER_QUESTION} annotator answers, got {}",
                self.answers.len()
            )));
        }
        if self.tokens.is_empty() {
            return Err(CoreError::InvalidArgument(
                "sample question must have at least one token".into(),
            ));
        }
        if self.regions.len() != k * d_v || self.grids.len() != g * d_v {
            return Err(CoreError::InvalidArgument(format!(
                "feature lengths {}/{} do not match k={k}, g={g}, d_v={d_v}",
                self.regions.len(),
                self.grids.len()
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t == 0 || t >= token_vocab) {
            return Err(CoreError::InvalidArgument(format!(
                "token index {t} outside valid range 1..{token_vocab}"
            )));
        }
        if !self.regions.iter().chain(&self.grids).all(|v| v.is_finite()) {
            return Err(CoreError::InvalidArgument(
                "sample features must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// A set of samples plus the feature-geometry header they conform to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub k: usize,
    pub g: usize,
    pub d_v: usize,
    /// Embedding row count: usable tokens plus the reserved padding row 0.
    pub token_vocab: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            s.validate(self.k, self.g, self.d_v, self.token_vocab)?;
        }
        Ok(())
    }

    /// Per-sample pooled raw features [n x 2 d_v]: mean over regions
    /// followed by mean over grid cells. Used by domain probes.
    pub fn pooled_feature_matrix(&self) -> Tensor {
        let d = self.d_v;
        let mut data = Vec::with_capacity(self.samples.len() * 2 * d);
        for s in &self.samples {
            for j in 0..d {
                let mut acc = 0.0;
                for r in 0..self.k {
                    acc += s.regions[r * d + j];
                }
                data.push(acc / self.k as f64);
            }
            for j in 0..d {
                let mut acc = 0.0;
                for r in 0..self.g {
                    acc += s.grids[r * d + j];
                }
                data.push(acc / self.g as f64);
            }
        }
        Tensor::new(vec![self.samples.len(), 2 * d], data).expect("consistent dims")
    }
}

// ── answer vocabulary ──

/// Most frequent of a sample's ten answers, ties broken lexicographically.
pub fn label_answer(sample: &Sample) -> String {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in &sample.answers {
        *counts.entry(a.as_str()).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (a, c) in counts {
        best = match best {
            None => Some((a, c)),
            Some((ba, bc)) => {
                if c > bc || (c == bc && a < ba) {
                    Some((a, c))
                } else {
                    Some((ba, bc))
                }
            }
        };
    }
    best.map(|(a, _)| a.to_string()).unwrap_or_default()
}

/// Canonical answer form used for vocabulary building and match scoring.
pub fn normalize_answer(answer: &str) -> String {
    answer.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVocab {
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    /// Ranks normalized answers by frequency over all annotator answers,
    /// ties lexicographic, truncated at `cap`.
    pub fn build(samples: &[Sample], cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for s in samples {
            for a in &s.answers {
                *counts.entry(normalize_answer(a)).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        let entries: Vec<String> = ranked.into_iter().map(|(a, _)| a).collect();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        Self { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    pub fn answer(&self, idx: usize) -> &str {
        &self.entries[idx]
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }
}

/// Class label per sample under a vocab; `None` marks out-of-vocab answers,
/// which are excluded from training losses.
pub fn label_indices(samples: &[Sample], vocab: &AnswerVocab) -> Vec<Option<usize>> {
    samples
        .iter()
        .map(|s| vocab.index_of(&label_answer(s)))
        .collect()
}

/// Index pairs (source, target) of answers present in both vocabularies,
/// used to warm-start shared rows of the target head.
pub fn shared_class_pairs(source: &AnswerVocab, target: &AnswerVocab) -> Vec<(usize, usize)> {
    source
        .entries()
        .iter()
        .enumerate()
        .filter_map(|(si, a)| target.index_of(a).map(|ti| (si, ti)))
        .collect()
}

// ── shift configuration ──

/// Knobs controlling how domain B differs from domain A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftConfig {
    /// Distance the visual class prototypes move, per modality-a direction.
    pub visual_shift: f64,
    /// Probability mass moved onto domain-specific style tokens.
    pub text_shift: f64,
    /// Multiplier on domain B's feature noise scale.
    pub cov_scale: f64,
    /// 0 = uniform label prior in domain B, 1 = strongly skewed.
    pub label_skew: f64,
    /// Fraction of domain B's answer vocabulary shared with domain A.
    pub vocab_overlap: f64,
    /// Fraction of domain B samples that are unanswerable.
    pub unanswerable_frac: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            visual_shift: 0.0,
            text_shift: 0.0,
            cov_scale: 1.0,
            label_skew: 0.0,
            vocab_overlap: 1.0,
            unanswerable_frac: 0.0,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("text_shift", self.text_shift),
            ("label_skew", self.label_skew),
            ("vocab_overlap", self.vocab_overlap),
            ("unanswerable_frac", self.unanswerable_frac),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::InvalidArgument(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.visual_shift < 0.0 || !self.visual_shift.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "visual_shift must be nonnegative, got {}",
                self.visual_shift
            )));
        }
        if self.cov_scale <= 0.0 || !self.cov_scale.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "cov_scale must be positive, got {}",
                self.cov_scale
            )));
        }
        Ok(())
    }
}

/// Full generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DataGenConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub n_source_eval: usize,
    pub n_target_eval: usize,
    /// Answers per domain vocabulary.
    pub answer_vocab: usize,
    /// Usable question tokens (padding row 0 comes on top).
    pub token_vocab: usize,
    pub k: usize,
    pub g: usize,
    pub d_v: usize,
    pub question_len: (usize, usize),
    /// Visual prototype variants per class. More modes raise the intra-class
    /// variability, and with it the number of samples a class needs.
    pub modes_per_class: usize,
    /// Multiplier on every feature noise stddev, in both domains alike.
    /// Raising it makes the task harder without moving the domains apart.
    pub noise_scale: f64,
    /// Probability that a question token comes from the answer's token set
    /// rather than from style or filler tokens.
    pub class_token_prob: f64,
    pub shift: ShiftConfig,
    /// false: source = domain A, target = domain B. true: roles swapped.
    pub reverse_direction: bool,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            n_source: 1000,
            n_target: 500,
            n_source_eval: 0,
            n_target_eval: 0,
            answer_vocab: 30,
            token_vocab: 60,
            k: 8,
            g: 4,
            d_v: 64,
            question_len: (5, 10),
            modes_per_class: 1,
            noise_scale: 1.0,
            class_token_prob: 0.6,
            shift: ShiftConfig::default(),
            reverse_direction: false,
            seed: 0,
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        self.shift.validate()?;
        if self.n_source == 0 || self.n_target == 0 {
            return Err(CoreError::InvalidArgument(
                "both domains need at least one sample".into(),
            ));
        }
        if self.answer_vocab < 10 {
            return Err(CoreError::InvalidArgument(
                "answer vocabulary needs at least 10 entries".into(),
            ));
        }
        let shared = shared_count(self.shift.vocab_overlap, self.answer_vocab);
        if self.shift.unanswerable_frac > 0.0 && shared >= self.answer_vocab {
            return Err(CoreError::InvalidArgument(
                "full vocabulary overlap leaves no slot for the unanswerable class".into(),
            ));
        }
        let style = 2 * STYLE_TOKENS;
        if self.token_vocab < style + 12 {
            return Err(CoreError::InvalidArgument(format!(
                "token vocabulary too small: need at least {}",
                style + 12
            )));
        }
        if self.question_len.0 == 0
            || self.question_len.0 > self.question_len.1
            || self.question_len.1 > 24
        {
            return Err(CoreError::InvalidArgument(format!(
                "question length range {:?} invalid (must fit 1..=24)",
                self.question_len
            )));
        }
        if self.k == 0 || self.g == 0 || self.d_v == 0 {
            return Err(CoreError::InvalidArgument(
                "feature dims must be positive".into(),
            ));
        }
        if self.modes_per_class == 0 {
            return Err(CoreError::InvalidArgument(
                "modes_per_class must be at least 1".into(),
            ));
        }
        if self.noise_scale <= 0.0 || !self.noise_scale.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "noise_scale must be positive, got {}",
                self.noise_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.class_token_prob) {
            return Err(CoreError::InvalidArgument(format!(
                "class_token_prob must lie in [0, 1], got {}",
                self.class_token_prob
            )));
        }
        Ok(())
    }
}

/// floor(overlap * vocab): overlap 0.27 of a 30-answer vocabulary keeps 8 slots.
pub fn shared_count(overlap: f64, vocab: usize) -> usize {
    (overlap * vocab as f64).floor() as usize
}

// generation noise geometry
const PROTO_SCALE: f64 = 1.0;
const REGION_NOISE: f64 = 0.55;
const GRID_NOISE: f64 = 0.6;
const BACKGROUND_NOISE: f64 = 1.0;
const CLASS_TOKENS: usize = 6;
const STYLE_TOKENS: usize = 8;
const ANNOTATOR_AGREEMENT: f64 = 0.75;
const UNANSWERABLE_AGREEMENT: f64 = 0.85;
const SKEW_DECAY: f64 = 0.85;

struct DomainDef {
    vocab: Vec<String>,
    /// Per class, per mode.
    region_protos: Vec<Vec<Vec<f64>>>,
    grid_protos: Vec<Vec<Vec<f64>>>,
    token_sets: Vec<Vec<u32>>,
    style: Vec<u32>,
    /// Cumulative prior over answerable classes.
    prior_cdf: Vec<f64>,
    answerable: Vec<usize>,
    unanswerable_class: Option<usize>,
    unanswerable_frac: f64,
    noise_mult: f64,
    text_shift: f64,
}

#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub source_eval: Dataset,
    pub target_eval: Dataset,
}

/// Builds both domains deterministically from the seed. Prototypes, token
/// sets, and vocabularies come from one stream; each dataset draw has its
/// own stream so train and eval sets share the same world.
pub fn generate_domain_pair(cfg: &DataGenConfig) -> Result<DomainPair> {
    cfg.validate()?;
    let mut proto_rng = seed_stream(cfg.seed, 1);
    let (domain_a, domain_b) = build_world(cfg, &mut proto_rng);

    let (src, tgt) = if cfg.reverse_direction {
        (&domain_b, &domain_a)
    } else {
        (&domain_a, &domain_b)
    };

    let source_train = gen_domain(cfg, src, cfg.n_source, Domain::Source, seed_stream(cfg.seed, 2))?;
    let target_train = gen_domain(cfg, tgt, cfg.n_target, Domain::Target, seed_stream(cfg.seed, 3))?;
    let source_eval = gen_domain(cfg, src, cfg.n_source_eval, Domain::Source, seed_stream(cfg.seed, 4))?;
    let target_eval = gen_domain(cfg, tgt, cfg.n_target_eval, Domain::Target, seed_stream(cfg.seed, 5))?;
    Ok(DomainPair {
        source_train,
        target_train,
        source_eval,
        target_eval,
    })
}

fn draw_proto(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, scale).expect("valid stddev");
    (0..d).map(|_| normal.sample(rng)).collect()
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v = draw_proto(rng, d, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn build_world(cfg: &DataGenConfig, rng: &mut ChaCha8Rng) -> (DomainDef, DomainDef) {
    let v = cfg.answer_vocab;
    let shared = shared_count(cfg.shift.vocab_overlap, v);

    // domain A vocabulary: yes/no, a few numbers, then object words
    let mut vocab_a: Vec<String> = vec!["yes".into(), "no".into()];
    for i in 0..4.min(v - 2) {
        vocab_a.push(format!("{i}"));
    }
    let mut obj = 0;
    while vocab_a.len() < v {
        vocab_a.push(format!("alpha{obj:02}"));
        obj += 1;
    }

    // domain B: first `shared` answers of A, fresh words for the rest,
    // with one slot reserved for "unanswerable" when configured
    let mut vocab_b: Vec<String> = vocab_a.iter().take(shared).cloned().collect();
    let needs_unanswerable = cfg.shift.unanswerable_frac > 0.0;
    let fresh_slots = v - vocab_b.len() - usize::from(needs_unanswerable);
    for i in 0..fresh_slots {
        vocab_b.push(format!("beta{i:02}"));
    }
    if needs_unanswerable {
        vocab_b.push("unanswerable".into());
    }

    // shift directions, shared across every class of a modality
    let dir_region = unit_direction(rng, cfg.d_v);
    let dir_grid = unit_direction(rng, cfg.d_v);

    let modes = cfg.modes_per_class;
    let draw_modes = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..modes).map(|_| draw_proto(rng, cfg.d_v, PROTO_SCALE)).collect()
    };
    let mut region_a = Vec::with_capacity(v);
    let mut grid_a = Vec::with_capacity(v);
    for _ in 0..v {
        region_a.push(draw_modes(rng));
        grid_a.push(draw_modes(rng));
    }

    let shift_vec = |p: &[f64], dir: &[f64]| -> Vec<f64> {
        p.iter()
            .zip(dir)
            .map(|(a, d)| a + cfg.shift.visual_shift * d)
            .collect()
    };
    let shift_modes = |ps: &[Vec<f64>], dir: &[f64]| -> Vec<Vec<f64>> {
        ps.iter().map(|p| shift_vec(p, dir)).collect()
    };
    let mut region_b = Vec::with_capacity(v);
    let mut grid_b = Vec::with_capacity(v);
    for c in 0..v {
        if c < shared {
            region_b.push(shift_modes(&region_a[c], &dir_region));
            grid_b.push(shift_modes(&grid_a[c], &dir_grid));
        } else {
            region_b.push(shift_modes(&draw_modes(rng), &dir_region));
            grid_b.push(shift_modes(&draw_modes(rng), &dir_grid));
        }
    }

    // style token sets: two disjoint slices of a shuffled token list
    let mut tokens: Vec<u32> = (1..=cfg.token_vocab as u32).collect();
    tokens.shuffle(rng);
    let style_a: Vec<u32> = tokens[..STYLE_TOKENS].to_vec();
    let style_b: Vec<u32> = tokens[STYLE_TOKENS..2 * STYLE_TOKENS].to_vec();

    let draw_token_set = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let mut pool = tokens.clone();
        pool.shuffle(rng);
        pool.truncate(CLASS_TOKENS);
        pool
    };
    let token_sets_a: Vec<Vec<u32>> = (0..v).map(|_| draw_token_set(rng)).collect();
    // shared classes keep their question style; fresh classes get new sets
    let token_sets_b: Vec<Vec<u32>> = (0..v)
        .map(|c| {
            if c < shared {
                token_sets_a[c].clone()
            } else {
                draw_token_set(rng)
            }
        })
        .collect();

    let uniform_cdf = |n: usize| -> Vec<f64> {
        (1..=n).map(|i| i as f64 / n as f64).collect()
    };
    let skewed_cdf = |n: usize, skew: f64| -> Vec<f64> {
        let w: Vec<f64> = (0..n)
            .map(|i| (1.0 - skew) + skew * SKEW_DECAY.powi(i as i32))
            .collect();
        let total: f64 = w.iter().sum();
        let mut acc = 0.0;
        w.iter()
            .map(|x| {
                acc += x / total;
                acc
            })
            .collect()
    };

    let answerable_a: Vec<usize> = (0..v).collect();
    let unanswerable_b = needs_unanswerable.then_some(v - 1);
    let answerable_b: Vec<usize> = (0..v).filter(|c| Some(*c) != unanswerable_b).collect();

    let a = DomainDef {
        vocab: vocab_a,
        region_protos: region_a,
        grid_protos: grid_a,
        token_sets: token_sets_a,
        style: style_a,
        prior_cdf: uniform_cdf(answerable_a.len()),
        answerable: answerable_a,
        unanswerable_class: None,
        unanswerable_frac: 0.0,
        noise_mult: 1.0,
        text_shift: cfg.shift.text_shift,
    };
    let b = DomainDef {
        vocab: vocab_b,
        region_protos: region_b,
        grid_protos: grid_b,
        token_sets: token_sets_b,
        style: style_b,
        prior_cdf: skewed_cdf(answerable_b.len(), cfg.shift.label_skew),
        answerable: answerable_b,
        unanswerable_class: unanswerable_b,
        unanswerable_frac: cfg.shift.unanswerable_frac,
        noise_mult: cfg.shift.cov_scale,
        text_shift: cfg.shift.text_shift,
    };
    (a, b)
}

fn sample_cdf(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

fn gen_domain(
    cfg: &DataGenConfig,
    def: &DomainDef,
    n: usize,
    role: Domain,
    mut rng: ChaCha8Rng,
) -> Result<Dataset> {
    let normal = Normal::new(0.0, 1.0).expect("valid stddev");
    let round32 = |v: f64| v as f32 as f64;
    let informative = cfg.k.div_ceil(2);
    let noise = cfg.noise_scale * def.noise_mult;
    let mut samples = Vec::with_capacity(n);

    for _ in 0..n {
        let unanswerable =
            def.unanswerable_frac > 0.0 && rng.random::<f64>() < def.unanswerable_frac;
        let class = if unanswerable {
            def.unanswerable_class.expect("checked by validate")
        } else {
            def.answerable[sample_cdf(&def.prior_cdf, rng.random::<f64>())]
        };
        let mode = if !unanswerable && cfg.modes_per_class > 1 {
            rng.random_range(0..cfg.modes_per_class)
        } else {
            0
        };

        let mut regions = Vec::with_capacity(cfg.k * cfg.d_v);
        for r in 0..cfg.k {
            let class_region = !unanswerable && r < informative;
            for j in 0..cfg.d_v {
                let v = if class_region {
                    def.region_protos[class][mode][j]
                        + REGION_NOISE * noise * normal.sample(&mut rng)
                } else {
                    BACKGROUND_NOISE * noise * normal.sample(&mut rng)
                };
                regions.push(round32(v));
            }
        }
        let mut grids = Vec::with_capacity(cfg.g * cfg.d_v);
        for _ in 0..cfg.g {
            for j in 0..cfg.d_v {
                let v = if unanswerable {
                    BACKGROUND_NOISE * noise * normal.sample(&mut rng)
                } else {
                    def.grid_protos[class][mode][j] + GRID_NOISE * noise * normal.sample(&mut rng)
                };
                grids.push(round32(v));
            }
        }

        let len = rng.random_range(cfg.question_len.0..=cfg.question_len.1);
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let t = if !unanswerable && rng.random::<f64>() < cfg.class_token_prob {
                def.token_sets[class][rng.random_range(0..CLASS_TOKENS)]
            } else if rng.random::<f64>() < def.text_shift {
                def.style[rng.random_range(0..STYLE_TOKENS)]
            } else {
                rng.random_range(1..=cfg.token_vocab as u32)
            };
            tokens.push(t);
        }

        let truth = &def.vocab[class];
        let agreement = if unanswerable {
            UNANSWERABLE_AGREEMENT
        } else {
            ANNOTATOR_AGREEMENT
        };
        let answers: Vec<String> = (0..ANSWERS_PER_QUESTION)
            .map(|_| {
                if rng.random::<f64>() < agreement {
                    truth.clone()
                } else {
                    def.vocab[rng.random_range(0..def.vocab.len())].clone()
                }
            })
            .collect();

        samples.push(Sample {
            regions,
            grids,
            tokens,
            answers,
            category: Category::of_answer(truth),
            domain: role,
        });
    }

    let ds = Dataset {
        samples,
        k: cfg.k,
        g: cfg.g,
        d_v: cfg.d_v,
        token_vocab: cfg.token_vocab as u32 + 1,
    };
    ds.validate()?;
    Ok(ds)
}

// ── fraction splits ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub num: usize,
    pub den: usize,
}

impl Fraction {
    pub const FULL: Fraction = Fraction { num: 1, den: 1 };
    pub const HALF: Fraction = Fraction { num: 1, den: 2 };
    pub const QUARTER: Fraction = Fraction { num: 1, den: 4 };
    pub const EIGHTH: Fraction = Fraction { num: 1, den: 8 };

    pub const LADDER: [Fraction; 4] = [
        Fraction::EIGHTH,
        Fraction::QUARTER,
        Fraction::HALF,
        Fraction::FULL,
    ];

    pub fn parse(text: &str) -> Result<Fraction> {
        match text.trim() {
            "1" | "1/1" => Ok(Fraction::FULL),
            "1/2" => Ok(Fraction::HALF),
            "1/4" => Ok(Fraction::QUARTER),
            "1/8" => Ok(Fraction::EIGHTH),
            other => Err(CoreError::InvalidArgument(format!(
                "fraction must be one of 1, 1/2, 1/4, 1/8; got {other}"
            ))),
        }
    }

    pub fn apply(&self, n: usize) -> usize {
        (n * self.num + self.den / 2) / self.den
    }
}

impl std::fmt::Display for Fraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// Deterministic seeded subsample, stratified by category tag, preserving
/// original sample order within the selection.
pub fn split_fraction(ds: &Dataset, fraction: Fraction, seed: u64) -> Dataset {
    if fraction == Fraction::FULL {
        return ds.clone();
    }
    let total = fraction.apply(ds.len());

    let mut by_cat: Vec<(Category, Vec<usize>)> = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        match by_cat.iter_mut().find(|(c, _)| *c == s.category) {
            Some((_, v)) => v.push(i),
            None => by_cat.push((s.category, vec![i])),
        }
    }

    // largest-remainder quotas per category
    let n = ds.len() as f64;
    let mut quotas: Vec<usize> = by_cat
        .iter()
        .map(|(_, v)| (v.len() as f64 / n * total as f64).floor() as usize)
        .collect();
    let mut rem: Vec<(usize, f64)> = by_cat
        .iter()
        .enumerate()
        .map(|(i, (_, v))| {
            let exact = v.len() as f64 / n * total as f64;
            (i, exact - exact.floor())
        })
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    let mut assigned: usize = quotas.iter().sum();
    for (i, _) in rem {
        if assigned >= total {
            break;
        }
        quotas[i] += 1;
        assigned += 1;
    }

    let mut picked = Vec::with_capacity(total);
    for (ci, (_, indices)) in by_cat.iter().enumerate() {
        let mut pool = indices.clone();
        let mut rng = seed_stream(seed, 100 + ci as u64);
        pool.shuffle(&mut rng);
        pool.truncate(quotas[ci].min(pool.len()));
        picked.extend(pool);
    }
    picked.sort_unstable();

    Dataset {
        samples: picked.iter().map(|&i| ds.samples[i].clone()).collect(),
        ..ds.clone()
    }
}

// ── batching ──

/// One domain's training batch: region features [b*k x d_v], grid features
/// [b*g x d_v], per-sample token sequences, and class labels under the
/// domain's answer vocabulary.
#[derive(Debug, Clone)]
pub struct MultiModalBatch {
    pub regions: Tensor,
    pub grids: Tensor,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<Option<usize>>,
    pub indices: Vec<usize>,
}

impl MultiModalBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Seeded shuffle of 0..n for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed_stream(seed, 1000 + epoch);
    order.shuffle(&mut rng);
    order
}

/// Assembles a batch from dataset rows `picked`.
pub fn make_batch(ds: &Dataset, labels: &[Option<usize>], picked: &[usize]) -> MultiModalBatch {
    let (k, g, d) = (ds.k, ds.g, ds.d_v);
    let b = picked.len();
    let mut regions = Vec::with_capacity(b * k * d);
    let mut grids = Vec::with_capacity(b * g * d);
    let mut tokens = Vec::with_capacity(b);
    let mut labs = Vec::with_capacity(b);
    for &i in picked {
        let s = &ds.samples[i];
        regions.extend_from_slice(&s.regions);
        grids.extend_from_slice(&s.grids);
        tokens.push(s.tokens.iter().map(|&t| t as usize).collect());
        labs.push(labels[i]);
    }
    MultiModalBatch {
        regions: Tensor::new(vec![b * k, d], regions).expect("consistent dims"),
        grids: Tensor::new(vec![b * g, d], grids).expect("consistent dims"),
        tokens,
        labels: labs,
        indices: picked.to_vec(),
    }
}

/// All batches of one epoch: seeded shuffle, final short batch emitted.
pub fn batch_iter(
    ds: &Dataset,
    labels: &[Option<usize>],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<MultiModalBatch> {
    let order = epoch_order(ds.len(), seed, epoch);
    order
        .chunks(batch_size)
        .map(|c| make_batch(ds, labels, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{mmd_sq, KernelSpec};

    fn quick_cfg() -> DataGenConfig {
        DataGenConfig {
            n_source: 60,
            n_target: 40,
            d_v: 8,
            k: 4,
            g: 2,
            token_vocab: 40,
            ..DataGenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = DataGenConfig {
            shift: ShiftConfig {
                visual_shift: 1.0,
                text_shift: 0.4,
                cov_scale: 1.3,
                label_skew: 0.5,
                vocab_overlap: 0.27,
                unanswerable_frac: 0.25,
            },
            ..quick_cfg()
        };
        let a = generate_domain_pair(&cfg).unwrap();
        let b = generate_domain_pair(&cfg).unwrap();
        assert_eq!(a.source_train, b.source_train);
        assert_eq!(a.target_train, b.target_train);
    }

    #[test]
    fn every_sample_carries_ten_answers_and_categories_partition() {
        let cfg = DataGenConfig {
            shift: ShiftConfig {
                unanswerable_frac: 0.3,
                vocab_overlap: 0.27,
                ..ShiftConfig::default()
            },
            ..quick_cfg()
        };
        let pair = generate_domain_pair(&cfg).unwrap();
        let mut seen_unanswerable = 0;
        for s in pair
            .source_train
            .samples
            .iter()
            .chain(&pair.target_train.samples)
        {
            assert_eq!(s.answers.len(), ANSWERS_PER_QUESTION);
            if s.category == Category::Unanswerable {
                seen_unanswerable += 1;
            }
        }
        assert!(seen_unanswerable > 0);
        assert!(pair
            .source_train
            .samples
            .iter()
            .all(|s| s.category != Category::Unanswerable));
    }

    #[test]
    fn overlap_floor_rule_gives_eight_of_thirty() {
        assert_eq!(shared_count(0.27, 30), 8);
        assert_eq!(shared_count(824.0 / 3000.0, 30), 8);
        assert_eq!(shared_count(1.0, 30), 30);
        assert_eq!(shared_count(0.0, 30), 0);
    }

    #[test]
    fn shared_answers_appear_in_both_domains() {
        let cfg = DataGenConfig {
            shift: ShiftConfig {
                vocab_overlap: 0.27,
                unanswerable_frac: 0.2,
                ..ShiftConfig::default()
            },
            n_source: 400,
            n_target: 400,
            ..quick_cfg()
        };
        let pair = generate_domain_pair(&cfg).unwrap();
        let vs = AnswerVocab::build(&pair.source_train.samples, 30);
        let vt = AnswerVocab::build(&pair.target_train.samples, 30);
        let shared: Vec<&String> = vs
            .entries()
            .iter()
            .filter(|a| vt.index_of(a).is_some())
            .collect();
        assert!(shared.len() >= 8, "only {} shared answers", shared.len());
        assert!(vt.index_of("unanswerable").is_some());
        assert!(vs.index_of("unanswerable").is_none());
    }

    #[test]
    fn zero_shift_full_overlap_keeps_marginals_close() {
        let cfg = DataGenConfig {
            n_source: 500,
            n_target: 500,
            shift: ShiftConfig::default(),
            ..quick_cfg()
        };
        let pair = generate_domain_pair(&cfg).unwrap();
        let fs = pair.source_train.pooled_feature_matrix();
        let ft = pair.target_train.pooled_feature_matrix();
        let v = mmd_sq(&fs, &ft, &KernelSpec::median()).unwrap();
        assert!(v <= 0.02, "zero-shift pooled mmd {v}");
    }

    #[test]
    fn reverse_direction_swaps_domain_roles() {
        let cfg = DataGenConfig {
            shift: ShiftConfig {
                unanswerable_frac: 0.3,
                vocab_overlap: 0.27,
                ..ShiftConfig::default()
            },
            ..quick_cfg()
        };
        let fwd = generate_domain_pair(&cfg).unwrap();
        let rev = generate_domain_pair(&DataGenConfig {
            reverse_direction: true,
            ..cfg
        })
        .unwrap();
        // forward: unanswerable lives in the target; reverse: in the source
        assert!(fwd
            .target_train
            .samples
            .iter()
            .any(|s| s.category == Category::Unanswerable));
        assert!(rev
            .source_train
            .samples
            .iter()
            .any(|s| s.category == Category::Unanswerable));
        assert!(rev
            .target_train
            .samples
            .iter()
            .all(|s| s.category != Category::Unanswerable));
    }

    #[test]
    fn impossible_overlap_with_unanswerable_is_rejected() {
        let cfg = DataGenConfig {
            shift: ShiftConfig {
                vocab_overlap: 1.0,
                unanswerable_frac: 0.2,
                ..ShiftConfig::default()
            },
            ..quick_cfg()
        };
        assert!(generate_domain_pair(&cfg).is_err());
    }

    #[test]
    fn label_answer_majority_and_ties() {
        let mk = |answers: Vec<&str>| Sample {
            regions: vec![0.0; 4],
            grids: vec![0.0; 2],
            tokens: vec![1],
            answers: answers.into_iter().map(String::from).collect(),
            category: Category::Other,
            domain: Domain::Source,
        };
        let s = mk(vec![
            "cat", "dog", "cat", "cat", "dog", "cat", "bird", "cat", "dog", "cat",
        ]);
        assert_eq!(label_answer(&s), "cat");
        // 5-5 tie: lexicographically smaller wins
        let t = mk(vec![
            "dog", "cat", "dog", "cat", "dog", "cat", "dog", "cat", "dog", "cat",
        ]);
        assert_eq!(label_answer(&t), "cat");
    }

    #[test]
    fn vocab_ranks_by_frequency_then_lexicographic() {
        let mk = |answers: Vec<&str>| Sample {
            regions: vec![0.0; 4],
            grids: vec![0.0; 2],
            tokens: vec![1],
            answers: answers.into_iter().map(String::from).collect(),
            category: Category::Other,
            domain: Domain::Source,
        };
        // a:5, b:3, c:1, d:1 over one sample of 10 answers
        let s = mk(vec!["a", "a", "a", "a", "a", "b", "b", "b", "c", "d"]);
        let v = AnswerVocab::build(std::slice::from_ref(&s), 2);
        assert_eq!(v.entries(), &["a".to_string(), "b".to_string()]);
        let v3 = AnswerVocab::build(&[s], 10);
        // c and d tie at 1: lexicographic order
        assert_eq!(v3.entries(), &["a", "b", "c", "d"]);
        assert_eq!(v3.index_of("  A "), Some(0));
        assert_eq!(v3.index_of("zebra"), None);
    }

    #[test]
    fn fraction_split_sizes_and_determinism() {
        let cfg = DataGenConfig {
            n_source: 60,
            n_target: 200,
            shift: ShiftConfig {
                unanswerable_frac: 0.3,
                vocab_overlap: 0.5,
                ..ShiftConfig::default()
            },
            ..quick_cfg()
        };
        let pair = generate_domain_pair(&cfg).unwrap();
        let ds = &pair.target_train;

        assert_eq!(Fraction::parse("1/8").unwrap().apply(20_000), 2_500);
        assert_eq!(Fraction::parse("1/4").unwrap().apply(20_000), 5_000);
        assert_eq!(Fraction::parse("1/2").unwrap().apply(20_000), 10_000);
        assert!(Fraction::parse("1/3").is_err());

        let full = split_fraction(ds, Fraction::FULL, 9);
        assert_eq!(full, *ds);

        let half = split_fraction(ds, Fraction::HALF, 9);
        assert_eq!(half.len(), 100);
        let again = split_fraction(ds, Fraction::HALF, 9);
        assert_eq!(half, again);

        // stratification: unanswerable proportion roughly preserved
        let frac = |d: &Dataset| {
            d.samples
                .iter()
                .filter(|s| s.category == Category::Unanswerable)
                .count() as f64
                / d.len() as f64
        };
        assert!((frac(&half) - frac(ds)).abs() < 0.05);
    }

    #[test]
    fn batches_cover_dataset_with_final_short_batch() {
        let cfg = DataGenConfig {
            n_source: 10,
            ..quick_cfg()
        };
        let pair = generate_domain_pair(&cfg).unwrap();
        let vocab = AnswerVocab::build(&pair.source_train.samples, 30);
        let labels = label_indices(&pair.source_train.samples, &vocab);
        let batches = batch_iter(&pair.source_train, &labels, 4, 7, 0);
        assert_eq!(
            batches.iter().map(|b| b.len()).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());

        let same = batch_iter(&pair.source_train, &labels, 4, 7, 0);
        assert_eq!(batches[0].indices, same[0].indices);
        let other_epoch = batch_iter(&pair.source_train, &labels, 4, 7, 1);
        assert_ne!(batches[0].indices, other_epoch[0].indices);
    }

    #[test]
    fn batch_tensors_have_consistent_layout() {
        let cfg = quick_cfg();
        let pair = generate_domain_pair(&cfg).unwrap();
        let vocab = AnswerVocab::build(&pair.source_train.samples, 30);
        let labels = label_indices(&pair.source_train.samples, &vocab);
        let b = make_batch(&pair.source_train, &labels, &[3, 0, 7]);
        assert_eq!(b.regions.shape(), &[3 * cfg.k, cfg.d_v]);
        assert_eq!(b.grids.shape(), &[3 * cfg.g, cfg.d_v]);
        assert_eq!(b.len(), 3);
        assert_eq!(
            b.regions.row(0),
            &pair.source_train.samples[3].regions[..cfg.d_v]
        );
    }

    #[test]
    fn features_roundtrip_through_f32() {
        let pair = generate_domain_pair(&quick_cfg()).unwrap();
        for s in &pair.source_train.samples {
            for &v in s.regions.iter().chain(&s.grids) {
                assert_eq!(v, v as f32 as f64);
            }
        }
    }
}
