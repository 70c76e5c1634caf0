//! Glue between prepared examples, models, decoding and scoring.

use crate::data::{cmvn_stats, Example, Vocabs};
use crate::evaluation::{score_report, EvalError, Labeled, ScoreReport};
use crate::inference::{decode_semantics, transcribe, BeamConfig, DecodeRecord, InferenceError};
use crate::model::{ModelConfig, ModelError, ModelInput, MultiTaskModel, TaskId};

/// `base` with vocabulary sizes taken from `vocabs` and the input width
/// from the training features, when there are any.
pub fn sized_config(base: &ModelConfig, vocabs: &Vocabs, train: &[Example]) -> ModelConfig {
    let mut c = base.clone();
    c.semantic_vocab = vocabs.semantic.len();
    c.text_vocab = vocabs.text.len();
    if let Some(f) = train.iter().find_map(|e| e.features.as_ref()) {
        c.input_dim = f.cols();
    }
    c
}

/// Freshly initialized model sized for `vocabs`, with CMVN statistics of
/// the training features.
pub fn init_model(
    base: &ModelConfig,
    vocabs: &Vocabs,
    train: &[Example],
    seed: u64,
) -> Result<MultiTaskModel, ModelError> {
    let mut m = MultiTaskModel::new(sized_config(base, vocabs, train), seed)?;
    if let Some((mean, std)) = cmvn_stats(train.iter().filter_map(|e| e.features.as_ref())) {
        m.set_cmvn(&mean, &std)?;
    }
    Ok(m)
}

fn record_for_transcript(id: &str, text: String, score: f64, warnings: Vec<String>) -> DecodeRecord {
    DecodeRecord { id: id.into(), tokens: text.split_whitespace().map(str::to_string).collect(), text, frame: None, score, warnings }
}

/// Decodes one example. Speech tasks read its features, T2IE its
/// transcript; S2T records carry the transcript and no frame.
pub fn decode_example(
    models: &[&MultiTaskModel],
    task: TaskId,
    ex: &Example,
    vocabs: &Vocabs,
    cfg: &BeamConfig,
) -> Result<DecodeRecord, InferenceError> {
    let missing = || ModelError::Modality { task, expected: "feature" };
    match task {
        TaskId::T2ie => {
            let input = ex.text_input();
            decode_semantics(&ex.id, models, task, ModelInput::Tokens(&input), vocabs, cfg)
        }
        TaskId::S2ie => {
            let f = ex.features.as_ref().ok_or_else(missing)?;
            decode_semantics(&ex.id, models, task, ModelInput::Features(f), vocabs, cfg)
        }
        TaskId::S2t => {
            let f = ex.features.as_ref().ok_or_else(missing)?;
            let model = models.first().ok_or(InferenceError::EmptyEnsemble)?;
            let (text, out) = transcribe(model, vocabs, f, cfg)?;
            Ok(record_for_transcript(&ex.id, text, out.best.score(cfg.length_penalty), out.warnings))
        }
    }
}

pub fn decode_set(
    models: &[&MultiTaskModel],
    task: TaskId,
    examples: &[Example],
    vocabs: &Vocabs,
    cfg: &BeamConfig,
) -> Result<Vec<DecodeRecord>, InferenceError> {
    examples.iter().map(|e| decode_example(models, task, e, vocabs, cfg)).collect()
}

pub fn references(examples: &[Example]) -> Vec<Labeled> {
    examples.iter().map(|e| Labeled::new(e.id.clone(), Some(e.frame.clone()))).collect()
}

pub fn hypotheses(records: &[DecodeRecord]) -> Vec<Labeled> {
    records.iter().map(|r| Labeled::new(r.id.clone(), r.frame.clone())).collect()
}

pub fn score_records(examples: &[Example], records: &[DecodeRecord], per_utterance: bool) -> Result<ScoreReport, EvalError> {
    score_report(&references(examples), &hypotheses(records), per_utterance)
}
