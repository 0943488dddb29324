//! Experiment configuration: a flat key=value format with '#' comments,
//! strict unknown-key rejection, and a printer whose output parses back to
//! the identical configuration.

use crate::data::{DataGenConfig, Fraction};
use crate::error::{CoreError, Result};
use crate::losses::{Bandwidth, KernelSpec, LossWeights};
use crate::model::{ModelConfig, ModelDims};
use crate::train::{AblationFlags, OptimKind, Schedule, TrainSettings};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    GenData,
    TrainSource,
    Adapt,
    Finetune,
    TargetOnly,
    Eval,
    Probe,
    Ablate,
    FractionStudy,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::GenData => "gen-data",
            Mode::TrainSource => "train-source",
            Mode::Adapt => "adapt",
            Mode::Finetune => "finetune",
            Mode::TargetOnly => "target-only",
            Mode::Eval => "eval",
            Mode::Probe => "probe",
            Mode::Ablate => "ablate",
            Mode::FractionStudy => "fraction-study",
        }
    }

    pub fn parse(text: &str) -> Result<Mode> {
        Ok(match text {
            "gen-data" => Mode::GenData,
            "train-source" => Mode::TrainSource,
            "adapt" => Mode::Adapt,
            "finetune" => Mode::Finetune,
            "target-only" => Mode::TargetOnly,
            "eval" => Mode::Eval,
            "probe" => Mode::Probe,
            "ablate" => Mode::Ablate,
            "fraction-study" => Mode::FractionStudy,
            other => {
                return Err(CoreError::InvalidArgument(format!(
                    "unknown mode '{other}'"
                )))
            }
        })
    }
}

/// Everything a run needs, with working defaults for a desk-scale setup.
/// Model dimensions that must agree with the data (k, g, d_v, token and
/// answer vocabularies) are taken from the dataset at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub out_dir: String,

    pub data: DataGenConfig,

    pub source_train: String,
    pub target_train: String,
    pub source_eval: String,
    pub target_eval: String,
    pub checkpoint: String,

    pub d_q: usize,
    pub d_e: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub classifier_hidden: usize,
    pub discriminator_hidden: usize,
    pub max_question_len: usize,

    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimKind,
    pub log_every: usize,
    pub deterministic: bool,

    pub schedule: Schedule,
    pub weights: LossWeights,
    pub kernel: KernelSpec,
    pub flags: AblationFlags,

    pub target_fraction: Fraction,
    pub ensemble_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Adapt,
            out_dir: "out".into(),
            data: DataGenConfig {
                n_source_eval: 500,
                n_target_eval: 500,
                ..DataGenConfig::default()
            },
            source_train: String::new(),
            target_train: String::new(),
            source_eval: String::new(),
            target_eval: String::new(),
            checkpoint: String::new(),
            d_q: 96,
            d_e: 128,
            embed_dim: 48,
            attn_dim: 96,
            classifier_hidden: 256,
            discriminator_hidden: 96,
            max_question_len: 24,
            iterations: 1000,
            pretrain_iterations: 1000,
            batch_size: 128,
            seed: 0,
            optimizer: OptimKind::Adamax,
            log_every: 50,
            deterministic: true,
            schedule: Schedule::default(),
            weights: LossWeights::default(),
            kernel: KernelSpec::median(),
            flags: AblationFlags::default(),
            target_fraction: Fraction::FULL,
            ensemble_size: 3,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        CoreError::InvalidArgument(format!("key '{key}' expects a number, got '{value}'"))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CoreError::InvalidArgument(format!(
            "key '{key}' expects true or false, got '{value}'"
        ))),
    }
}

impl ExperimentConfig {
    /// Applies one key=value assignment; unknown keys are errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "out_dir" => self.out_dir = value.to_string(),

            "n_source" => self.data.n_source = parse_num(key, value)?,
            "n_target" => self.data.n_target = parse_num(key, value)?,
            "n_source_eval" => self.data.n_source_eval = parse_num(key, value)?,
            "n_target_eval" => self.data.n_target_eval = parse_num(key, value)?,
            "answer_vocab" => self.data.answer_vocab = parse_num(key, value)?,
            "token_vocab" => self.data.token_vocab = parse_num(key, value)?,
            "k" => self.data.k = parse_num(key, value)?,
            "g" => self.data.g = parse_num(key, value)?,
            "d_v" => self.data.d_v = parse_num(key, value)?,
            "question_len_min" => self.data.question_len.0 = parse_num(key, value)?,
            "question_len_max" => self.data.question_len.1 = parse_num(key, value)?,
            "modes_per_class" => self.data.modes_per_class = parse_num(key, value)?,
            "noise_scale" => self.data.noise_scale = parse_num(key, value)?,
            "class_token_prob" => self.data.class_token_prob = parse_num(key, value)?,
            "visual_shift" => self.data.shift.visual_shift = parse_num(key, value)?,
            "text_shift" => self.data.shift.text_shift = parse_num(key, value)?,
            "cov_scale" => self.data.shift.cov_scale = parse_num(key, value)?,
            "label_skew" => self.data.shift.label_skew = parse_num(key, value)?,
            "vocab_overlap" => self.data.shift.vocab_overlap = parse_num(key, value)?,
            "unanswerable_frac" => self.data.shift.unanswerable_frac = parse_num(key, value)?,
            "reverse_direction" => self.data.reverse_direction = parse_bool(key, value)?,
            "data_seed" => self.data.seed = parse_num(key, value)?,

            "source_train" => self.source_train = value.to_string(),
            "target_train" => self.target_train = value.to_string(),
            "source_eval" => self.source_eval = value.to_string(),
            "target_eval" => self.target_eval = value.to_string(),
            "checkpoint" => self.checkpoint = value.to_string(),

            "d_q" => self.d_q = parse_num(key, value)?,
            "d_e" => self.d_e = parse_num(key, value)?,
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "attn_dim" => self.attn_dim = parse_num(key, value)?,
            "classifier_hidden" => self.classifier_hidden = parse_num(key, value)?,
            "discriminator_hidden" => self.discriminator_hidden = parse_num(key, value)?,
            "max_question_len" => self.max_question_len = parse_num(key, value)?,

            "iterations" => self.iterations = parse_num(key, value)?,
            "pretrain_iterations" => self.pretrain_iterations = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adamax" => OptimKind::Adamax,
                    "momentum" => OptimKind::Momentum,
                    _ => {
                        return Err(CoreError::InvalidArgument(format!(
                            "optimizer must be adamax or momentum, got '{value}'"
                        )))
                    }
                }
            }
            "log_every" => self.log_every = parse_num(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,

            "warmup_start_lr" => self.schedule.warmup_start_lr = parse_num(key, value)?,
            "warmup_end_lr" => self.schedule.warmup_end_lr = parse_num(key, value)?,
            "warmup_iters" => self.schedule.warmup_iters = parse_num(key, value)?,
            "decay_factor" => self.schedule.decay_factor = parse_num(key, value)?,
            "decay_period" => self.schedule.decay_period = parse_num(key, value)?,

            "lambda_j" => self.weights.lambda_j = parse_num(key, value)?,
            "lambda_mm" => self.weights.lambda_mm = parse_num(key, value)?,
            "lambda_adv" => self.weights.lambda_adv = parse_num(key, value)?,
            "gamma_a" => self.weights.gamma_a = parse_num(key, value)?,
            "gamma_b" => self.weights.gamma_b = parse_num(key, value)?,
            "gamma_c" => self.weights.gamma_c = parse_num(key, value)?,
            "kernel_sigma" => {
                self.kernel = if value == "median" {
                    KernelSpec::median()
                } else {
                    KernelSpec::fixed(parse_num(key, value)?)?
                }
            }

            "flag_per_modality_mmd" => self.flags.per_modality_mmd = parse_bool(key, value)?,
            "flag_joint_mmd" => self.flags.joint_mmd = parse_bool(key, value)?,
            "flag_adversarial" => self.flags.adversarial = parse_bool(key, value)?,
            "flag_source_ce" => self.flags.source_ce = parse_bool(key, value)?,

            "target_fraction" => self.target_fraction = Fraction::parse(value)?,
            "ensemble_size" => self.ensemble_size = parse_num(key, value)?,

            _ => {
                return Err(CoreError::InvalidArgument(format!(
                    "unknown configuration key '{key}'"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(CoreError::InvalidArgument(
                "batch_size and log_every must be positive".into(),
            ));
        }
        if self.ensemble_size == 0 {
            return Err(CoreError::InvalidArgument(
                "ensemble_size must be positive".into(),
            ));
        }
        for (name, v) in [
            ("d_q", self.d_q),
            ("d_e", self.d_e),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
            ("classifier_hidden", self.classifier_hidden),
            ("discriminator_hidden", self.discriminator_hidden),
        ] {
            if v == 0 {
                return Err(CoreError::InvalidArgument(format!(
                    "{name} must be positive"
                )));
            }
        }
        if self.max_question_len < self.data.question_len.1 {
            return Err(CoreError::InvalidArgument(format!(
                "max_question_len {} is below the longest generated question {}",
                self.max_question_len, self.data.question_len.1
            )));
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            d_q: self.d_q,
            d_e: self.d_e,
            embed_dim: self.embed_dim,
            attn_dim: self.attn_dim,
            classifier_hidden: self.classifier_hidden,
            discriminator_hidden: self.discriminator_hidden,
            max_question_len: self.max_question_len,
        }
    }

    /// Model dimensions for data with the given geometry.
    pub fn model_config(
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

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            iterations: self.iterations,
            batch_size: self.batch_size,
            schedule: self.schedule,
            weights: self.weights,
            flags: self.flags,
            kernel: self.kernel,
            optimizer: self.optimizer,
            seed: self.seed,
            log_every: self.log_every,
        }
    }
}

/// Parses the full key=value format. '#' starts a comment, blank lines are
/// skipped, and every problem reports its 1-based line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = raw.split('#').next().unwrap_or("");
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(CoreError::Config {
                line,
                msg: format!("expected key=value, got '{stripped}'"),
            });
        };
        cfg.apply_kv(key.trim(), value.trim()).map_err(|e| {
            let msg = match e {
                CoreError::InvalidArgument(m) => m,
                other => other.to_string(),
            };
            CoreError::Config { line, msg }
        })?;
    }
    Ok(cfg)
}

/// Canonical textual form; parsing it back yields an equal configuration.
pub fn print_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let kernel = match cfg.kernel.bandwidth {
        Bandwidth::Fixed(v) => v.to_string(),
        Bandwidth::Median => "median".into(),
    };
    let _ = write!(
        s,
        "mode={}\nout_dir={}\n\n# data generation\nn_source={}\nn_target={}\nn_source_eval={}\nn_target_eval={}\nanswer_vocab={}\ntoken_vocab={}\nk={}\ng={}\nd_v={}\nquestion_len_min={}\nquestion_len_max={}\nmodes_per_class={}\nnoise_scale={}\nclass_token_prob={}\nvisual_shift={}\ntext_shift={}\ncov_scale={}\nlabel_skew={}\nvocab_overlap={}\nunanswerable_frac={}\nreverse_direction={}\ndata_seed={}\n\n# files\nsource_train={}\ntarget_train={}\nsource_eval={}\ntarget_eval={}\ncheckpoint={}\n\n# model\nd_q={}\nd_e={}\nembed_dim={}\nattn_dim={}\nclassifier_hidden={}\ndiscriminator_hidden={}\nmax_question_len={}\n\n# optimization\niterations={}\npretrain_iterations={}\nbatch_size={}\nseed={}\noptimizer={}\nlog_every={}\ndeterministic={}\nwarmup_start_lr={}\nwarmup_end_lr={}\nwarmup_iters={}\ndecay_factor={}\ndecay_period={}\n\n# objective\nlambda_j={}\nlambda_mm={}\nlambda_adv={}\ngamma_a={}\ngamma_b={}\ngamma_c={}\nkernel_sigma={}\nflag_per_modality_mmd={}\nflag_joint_mmd={}\nflag_adversarial={}\nflag_source_ce={}\n\n# protocol\ntarget_fraction={}\nensemble_size={}\n",
        cfg.mode.as_str(),
        cfg.out_dir,
        cfg.data.n_source,
        cfg.data.n_target,
        cfg.data.n_source_eval,
        cfg.data.n_target_eval,
        cfg.data.answer_vocab,
        cfg.data.token_vocab,
        cfg.data.k,
        cfg.data.g,
        cfg.data.d_v,
        cfg.data.question_len.0,
        cfg.data.question_len.1,
        cfg.data.modes_per_class,
        cfg.data.noise_scale,
        cfg.data.class_token_prob,
        cfg.data.shift.visual_shift,
        cfg.data.shift.text_shift,
        cfg.data.shift.cov_scale,
        cfg.data.shift.label_skew,
        cfg.data.shift.vocab_overlap,
        cfg.data.shift.unanswerable_frac,
        cfg.data.reverse_direction,
        cfg.data.seed,
        cfg.source_train,
        cfg.target_train,
        cfg.source_eval,
        cfg.target_eval,
        cfg.checkpoint,
        cfg.d_q,
        cfg.d_e,
        cfg.embed_dim,
        cfg.attn_dim,
        cfg.classifier_hidden,
        cfg.discriminator_hidden,
        cfg.max_question_len,
        cfg.iterations,
        cfg.pretrain_iterations,
        cfg.batch_size,
        cfg.seed,
        match cfg.optimizer {
            OptimKind::Adamax => "adamax",
            OptimKind::Momentum => "momentum",
        },
        cfg.log_every,
        cfg.deterministic,
        cfg.schedule.warmup_start_lr,
        cfg.schedule.warmup_end_lr,
        cfg.schedule.warmup_iters,
        cfg.schedule.decay_factor,
        cfg.schedule.decay_period,
        cfg.weights.lambda_j,
        cfg.weights.lambda_mm,
        cfg.weights.lambda_adv,
        cfg.weights.gamma_a,
        cfg.weights.gamma_b,
        cfg.weights.gamma_c,
        kernel,
        cfg.flags.per_modality_mmd,
        cfg.flags.joint_mmd,
        cfg.flags.adversarial,
        cfg.flags.source_ce,
        cfg.target_fraction,
        cfg.ensemble_size,
    );
    s
}
