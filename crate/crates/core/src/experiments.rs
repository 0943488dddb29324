//! Standardized experiment protocol: the two-domain benchmark, the method
//! ladder, and the label-budget study.
//!
//! All methods share one protocol object so comparisons differ only in what
//! they train on. Per seed, source pretraining happens once and both
//! fine-tuning and adaptation branch from the same warm-started weights;
//! the target-only baseline starts from the identical fresh initialization.

use crate::config::ExperimentConfig;
use crate::data::{
    generate_domain_pair, shared_class_pairs, split_fraction, AnswerVocab, DataGenConfig,
    DomainPair, Fraction, ShiftConfig,
};
use crate::error::{CoreError, Result};
use crate::eval::{evaluate, evaluate_ensemble, EvalReport};
use crate::losses::{KernelSpec, LossWeights};
use crate::model::{DualDomainModel, Head, ModelDims};
use crate::train::{
    adapt, finetune, pretrain_source, train_target_only, AblationFlags, IterRow, OptimKind,
    Schedule, TrainSettings,
};
use std::fmt::Write as _;

/// Everything a benchmark run is parameterized by, apart from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub data: DataGenConfig,
    pub dims: ModelDims,
    pub pretrain_iterations: usize,
    pub adapt_iterations: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub kernel: KernelSpec,
    pub optimizer: OptimKind,
    pub log_every: usize,
}

impl Protocol {
    /// The standard two-domain benchmark: 20k labeled source samples,
    /// 2k labeled target samples, 30-answer vocabularies with 27% overlap.
    pub fn benchmark(reverse: bool) -> Self {
        Self {
            data: DataGenConfig {
                n_source: 20_000,
                n_target: 2_000,
                n_source_eval: 1_000,
                n_target_eval: 1_000,
                answer_vocab: 30,
                token_vocab: 60,
                k: 8,
                g: 4,
                d_v: 64,
                question_len: (5, 10),
                modes_per_class: 4,
                noise_scale: 2.2,
                class_token_prob: 0.15,
                shift: ShiftConfig {
                    visual_shift: 1.6,
                    text_shift: 0.9,
                    cov_scale: 1.3,
                    label_skew: 0.35,
                    vocab_overlap: 0.27,
                    unanswerable_frac: 0.28,
                },
                reverse_direction: reverse,
                seed: 0,
            },
            dims: ModelDims::desk(),
            pretrain_iterations: 400,
            adapt_iterations: 300,
            batch_size: 64,
            schedule: Schedule {
                warmup_start_lr: 0.001,
                warmup_end_lr: 0.01,
                warmup_iters: 60,
                decay_factor: 0.15,
                decay_period: 150,
            },
            weights: LossWeights::default(),
            kernel: KernelSpec::median(),
            optimizer: OptimKind::Adamax,
            log_every: 10,
        }
    }

    /// Protocol with every knob read from a configuration instead of the
    /// benchmark preset. `iterations` becomes the adaptation budget.
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            data: cfg.data.clone(),
            dims: cfg.model_dims(),
            pretrain_iterations: cfg.pretrain_iterations,
            adapt_iterations: cfg.iterations,
            batch_size: cfg.batch_size,
            schedule: cfg.schedule,
            weights: cfg.weights,
            kernel: cfg.kernel,
            optimizer: cfg.optimizer,
            log_every: cfg.log_every,
        }
    }

    pub fn settings(&self, iterations: usize, flags: AblationFlags, seed: u64) -> TrainSettings {
        TrainSettings {
            iterations,
            batch_size: self.batch_size,
            schedule: self.schedule,
            weights: self.weights,
            flags,
            kernel: self.kernel,
            optimizer: self.optimizer,
            seed,
            log_every: self.log_every,
        }
    }
}

/// Generated datasets plus the answer vocabularies built from them.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub pair: DomainPair,
    pub source_vocab: AnswerVocab,
    pub target_vocab: AnswerVocab,
    pub shared_pairs: Vec<(usize, usize)>,
}

pub fn prepare(data: &DataGenConfig) -> Result<PreparedData> {
    let pair = generate_domain_pair(data)?;
    let source_vocab = AnswerVocab::build(&pair.source_train.samples, data.answer_vocab);
    let target_vocab = AnswerVocab::build(&pair.target_train.samples, data.answer_vocab);
    let shared_pairs = shared_class_pairs(&source_vocab, &target_vocab);
    Ok(PreparedData {
        pair,
        source_vocab,
        target_vocab,
        shared_pairs,
    })
}

impl PreparedData {
    pub fn model_config(&self, dims: &ModelDims) -> crate::model::ModelConfig {
        let ds = &self.pair.source_train;
        dims.config_for(
            ds.k,
            ds.g,
            ds.d_v,
            ds.token_vocab as usize,
            self.source_vocab.len(),
            self.target_vocab.len(),
        )
    }

    fn fresh_model(&self, dims: &ModelDims, seed: u64) -> Result<DualDomainModel> {
        DualDomainModel::seeded(self.model_config(dims), seed)
    }
}

/// A trained model with its training log and target-set evaluation.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub model: DualDomainModel,
    pub rows: Vec<IterRow>,
    pub report: EvalReport,
}

/// One seed's pass over the three methods, sharing a single pretrained
/// encoder between fine-tuning and adaptation.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub pretrained: DualDomainModel,
    pub target_only: MethodOutcome,
    pub finetuned: MethodOutcome,
    pub adapted: MethodOutcome,
}

/// Source pretraining plus warm-starting of the target head on the classes
/// both vocabularies share.
pub fn pretrain(
    protocol: &Protocol,
    prep: &PreparedData,
    seed: u64,
) -> Result<(DualDomainModel, Vec<IterRow>)> {
    let mut model = prep.fresh_model(&protocol.dims, seed)?;
    let settings = protocol.settings(
        protocol.pretrain_iterations,
        AblationFlags::default(),
        seed,
    );
    let rows = pretrain_source(
        &mut model,
        &prep.pair.source_train,
        &prep.source_vocab,
        &settings,
    )?;
    model.warm_start_target_head(&prep.shared_pairs)?;
    Ok((model, rows))
}

fn eval_target(
    model: &DualDomainModel,
    prep: &PreparedData,
) -> Result<EvalReport> {
    evaluate(
        model,
        &prep.pair.target_eval,
        &prep.target_vocab,
        Head::Target,
    )
}

/// Runs target-only, fine-tune, and full adaptation at one seed, using
/// `fraction` of the labeled target training set.
pub fn run_benchmark_seed(
    protocol: &Protocol,
    prep: &PreparedData,
    seed: u64,
    fraction: Fraction,
) -> Result<BenchmarkRun> {
    let target_train = split_fraction(&prep.pair.target_train, fraction, seed);
    let (pretrained, _) = pretrain(protocol, prep, seed)?;

    let mut scratch = prep.fresh_model(&protocol.dims, seed)?;
    let settings = protocol.settings(
        protocol.adapt_iterations,
        AblationFlags::default(),
        seed,
    );
    let rows = train_target_only(&mut scratch, &target_train, &prep.target_vocab, &settings)?;
    let target_only = MethodOutcome {
        report: eval_target(&scratch, prep)?,
        model: scratch,
        rows,
    };

    let mut ft = pretrained.clone();
    let rows = finetune(&mut ft, &target_train, &prep.target_vocab, &settings)?;
    let finetuned = MethodOutcome {
        report: eval_target(&ft, prep)?,
        model: ft,
        rows,
    };

    let mut ad = pretrained.clone();
    let rows = adapt(
        &mut ad,
        &prep.pair.source_train,
        &prep.source_vocab,
        &target_train,
        &prep.target_vocab,
        &settings,
    )?;
    let adapted = MethodOutcome {
        report: eval_target(&ad, prep)?,
        model: ad,
        rows,
    };

    Ok(BenchmarkRun {
        pretrained,
        target_only,
        finetuned,
        adapted,
    })
}

/// Pretrains and adapts with the given loss terms only.
pub fn adapt_variant(
    protocol: &Protocol,
    prep: &PreparedData,
    seed: u64,
    flags: AblationFlags,
) -> Result<MethodOutcome> {
    let (pretrained, _) = pretrain(protocol, prep, seed)?;
    let mut model = pretrained;
    let settings = protocol.settings(protocol.adapt_iterations, flags, seed);
    let rows = adapt(
        &mut model,
        &prep.pair.source_train,
        &prep.source_vocab,
        &prep.pair.target_train,
        &prep.target_vocab,
        &settings,
    )?;
    Ok(MethodOutcome {
        report: eval_target(&model, prep)?,
        model,
        rows,
    })
}

// ── method ladder ──

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub method: String,
    pub report: EvalReport,
    /// Change in overall accuracy versus the previous row.
    pub delta: Option<f64>,
}

pub const ABLATION_CSV_HEADER: &str = "method,overall,yes_no,number,other,answerable,delta";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let delta = r.delta.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method,
            r.report.overall,
            r.report.yes_no,
            r.report.number,
            r.report.other,
            r.report.answerable,
            delta
        );
    }
    out
}

/// Builds the method ladder: each row adds one ingredient on top of the
/// previous row, ending with an `ensemble`-member ensemble of the full
/// method whose extra members differ only in their training seed.
pub fn run_ablation(
    protocol: &Protocol,
    prep: &PreparedData,
    seed: u64,
    ensemble: usize,
) -> Result<Vec<AblationRow>> {
    if ensemble == 0 {
        return Err(CoreError::InvalidArgument(
            "ensemble size must be positive".into(),
        ));
    }
    let full = run_benchmark_seed(protocol, prep, seed, Fraction::FULL)?;

    let mmd_only = AblationFlags {
        per_modality_mmd: true,
        joint_mmd: false,
        adversarial: false,
        source_ce: true,
    };
    let partial = adapt_variant(protocol, prep, seed, mmd_only)?;

    let extras: Vec<MethodOutcome> = (1..ensemble as u64)
        .map(|i| adapt_variant(protocol, prep, seed + i, AblationFlags::default()))
        .collect::<Result<_>>()?;
    let mut members = vec![&full.adapted.model];
    members.extend(extras.iter().map(|m| &m.model));
    let ensemble_report = evaluate_ensemble(
        &members,
        &prep.pair.target_eval,
        &prep.target_vocab,
        Head::Target,
    )?;

    let ensemble_label = format!("+ensemble-of-{ensemble}");
    let reports = [
        ("target-only", full.target_only.report),
        ("finetune", full.finetuned.report),
        ("+per-modality-mmd", partial.report),
        ("+joint-mmd+adversarial", full.adapted.report),
        (ensemble_label.as_str(), ensemble_report),
    ];
    let mut rows = Vec::with_capacity(reports.len());
    let mut prev: Option<f64> = None;
    for (method, report) in reports {
        rows.push(AblationRow {
            method: method.to_string(),
            report,
            delta: prev.map(|p| report.overall - p),
        });
        prev = Some(report.overall);
    }
    Ok(rows)
}

// ── label-budget study ──

#[derive(Debug, Clone)]
pub struct FractionRow {
    pub fraction: Fraction,
    pub target_only: EvalReport,
    pub finetuned: EvalReport,
    pub adapted: EvalReport,
}

pub const FRACTION_CSV_HEADER: &str = "fraction,target_only,finetune,adapt";

pub fn fraction_csv(rows: &[FractionRow]) -> String {
    let mut out = String::from(FRACTION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.fraction, r.target_only.overall, r.finetuned.overall, r.adapted.overall
        );
    }
    out
}

/// Trains every method at 1/8, 1/4, 1/2, and all of the target labels.
/// Source pretraining is shared across fractions; it never sees target data.
pub fn run_fraction_study(
    protocol: &Protocol,
    prep: &PreparedData,
    seed: u64,
) -> Result<Vec<FractionRow>> {
    let (pretrained, _) = pretrain(protocol, prep, seed)?;
    let settings = protocol.settings(
        protocol.adapt_iterations,
        AblationFlags::default(),
        seed,
    );
    let mut rows = Vec::with_capacity(Fraction::LADDER.len());
    for fraction in Fraction::LADDER {
        let target_train = split_fraction(&prep.pair.target_train, fraction, seed);

        let mut scratch = prep.fresh_model(&protocol.dims, seed)?;
        train_target_only(&mut scratch, &target_train, &prep.target_vocab, &settings)?;
        let target_only = eval_target(&scratch, prep)?;

        let mut ft = pretrained.clone();
        finetune(&mut ft, &target_train, &prep.target_vocab, &settings)?;
        let finetuned = eval_target(&ft, prep)?;

        let mut ad = pretrained.clone();
        adapt(
            &mut ad,
            &prep.pair.source_train,
            &prep.source_vocab,
            &target_train,
            &prep.target_vocab,
            &settings,
        )?;
        let adapted = eval_target(&ad, prep)?;

        rows.push(FractionRow {
            fraction,
            target_only,
            finetuned,
            adapted,
        });
    }
    Ok(rows)
}
