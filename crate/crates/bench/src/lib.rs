//! Shared fixture for the benchmarks: a full-width model and a small
//! two-domain dataset, so timings reflect production tensor shapes.

use madapt_core::data::{generate_domain_pair, AnswerVocab, DataGenConfig, Dataset, ShiftConfig};
use madapt_core::error::Result;
use madapt_core::model::{DualDomainModel, ModelDims};

pub struct Scene {
    pub model: DualDomainModel,
    pub source: Dataset,
    pub target: Dataset,
    pub source_vocab: AnswerVocab,
    pub target_vocab: AnswerVocab,
}

/// Few samples, production feature widths.
pub fn scene() -> Result<Scene> {
    let data = DataGenConfig {
        n_source: 512,
        n_target: 256,
        shift: ShiftConfig {
            visual_shift: 1.0,
            text_shift: 0.5,
            cov_scale: 1.2,
            label_skew: 0.2,
            vocab_overlap: 0.5,
            unanswerable_frac: 0.1,
        },
        ..DataGenConfig::default()
    };
    let pair = generate_domain_pair(&data)?;
    let source_vocab = AnswerVocab::build(&pair.source_train.samples, data.answer_vocab);
    let target_vocab = AnswerVocab::build(&pair.target_train.samples, data.answer_vocab);
    let ds = &pair.source_train;
    let config = ModelDims::desk().config_for(
        ds.k,
        ds.g,
        ds.d_v,
        ds.token_vocab as usize,
        source_vocab.len(),
        target_vocab.len(),
    );
    let model = DualDomainModel::seeded(config, 7)?;
    Ok(Scene {
        model,
        source: pair.source_train,
        target: pair.target_train,
        source_vocab,
        target_vocab,
    })
}
