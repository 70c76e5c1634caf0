//! Beam search over a next-token scorer, model ensembles and the cascaded
//! speech→text→semantics pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{BOS_ID, EOS_ID, PAD_ID};
use crate::codec::{CodecError, SemanticFrame};
use crate::data::{DataError, Vocabs};
use crate::features::FeatureMatrix;
use crate::model::{Dropout, ModelError, ModelInput, MultiTaskModel, TaskId};
use crate::numeric::{Graph, Tensor};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("beam size must be at least 1")]
    BeamSize,
    #[error("ensemble needs at least one model")]
    EmptyEnsemble,
    #[error("ensemble members disagree on vocabulary size ({0} vs {1})")]
    VocabMismatch(usize, usize),
    #[error("scorer returned {got} scores for a vocabulary of {expected}")]
    ScoreLength { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Source of next-token log-probabilities.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities of the token following `prefix` (which starts
    /// with bos). Impossible tokens are `-inf`.
    fn next_log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, InferenceError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Most tokens generated, eos included.
    pub max_len: usize,
    /// Exponent α of the length normalization `score / len^α`.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_size: 4, max_len: 64, length_penalty: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens; finished hypotheses end with eos.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        normalized(self.log_prob, self.tokens.len(), alpha)
    }
}

fn normalized(lp: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        lp
    } else {
        lp / (len.max(1) as f64).powf(alpha)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Ended hypotheses, best first.
    pub nbest: Vec<Hypothesis>,
    pub warnings: Vec<String>,
}

/// Higher score first; equal scores fall back to the lexicographically
/// smaller token sequence.
fn rank(a: &(f64, &[u32]), b: &(f64, &[u32])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &mut S,
    eos: u32,
    cfg: &BeamConfig,
) -> Result<BeamOutput, InferenceError> {
    if cfg.beam_size == 0 {
        return Err(InferenceError::BeamSize);
    }
    let v = scorer.vocab_size();
    let alpha = cfg.length_penalty;
    let max_len = cfg.max_len.max(1);
    let mut alive = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    let mut ended: Vec<Hypothesis> = Vec::new();
    for t in 1..=max_len {
        let mut cands: Vec<Hypothesis> = Vec::new();
        for h in &alive {
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(BOS_ID);
            prefix.extend_from_slice(&h.tokens);
            let lps = scorer.next_log_probs(&prefix)?;
            if lps.len() != v {
                return Err(InferenceError::ScoreLength { expected: v, got: lps.len() });
            }
            for (k, &lp) in lps.iter().enumerate() {
                if lp == f64::NEG_INFINITY || lp.is_nan() {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(k as u32);
                cands.push(Hypothesis { tokens, log_prob: h.log_prob + lp, finished: k as u32 == eos });
            }
        }
        // All candidates share length t, so raw log-probability ranks them.
        cands.sort_by(|a, b| rank(&(a.log_prob, &a.tokens), &(b.log_prob, &b.tokens)));
        cands.truncate(cfg.beam_size);
        alive.clear();
        for c in cands {
            if c.finished || t == max_len {
                ended.push(c);
            } else {
                alive.push(c);
            }
        }
        if alive.is_empty() {
            break;
        }
        // Extensions never raise the log-probability, so an alive hypothesis
        // can reach at most lp / max_len^α.
        let best_ended = ended.iter().map(|h| h.score(alpha)).fold(f64::NEG_INFINITY, f64::max);
        let best_alive = alive.iter().map(|h| normalized(h.log_prob, max_len, alpha)).fold(f64::NEG_INFINITY, f64::max);
        if best_ended > best_alive {
            break;
        }
    }
    ended.sort_by(|a, b| rank(&(a.score(alpha), &a.tokens), &(b.score(alpha), &b.tokens)));
    let mut warnings = Vec::new();
    let best = match ended.first() {
        Some(b) => b.clone(),
        None => {
            warnings.push("no hypothesis survived".into());
            Hypothesis { tokens: Vec::new(), log_prob: f64::NEG_INFINITY, finished: false }
        }
    };
    if !best.finished && !best.tokens.is_empty() {
        warnings.push(format!("max_len {max_len} reached without eos; hypothesis force-finished"));
    }
    Ok(BeamOutput { best, nbest: ended, warnings })
}

/// Argmax decoding with the smallest token id winning ties.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &mut S, eos: u32, max_len: usize) -> Result<Hypothesis, InferenceError> {
    let mut h = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
    while h.tokens.len() < max_len.max(1) {
        let mut prefix = vec![BOS_ID];
        prefix.extend_from_slice(&h.tokens);
        let lps = scorer.next_log_probs(&prefix)?;
        let (k, lp) = lps
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != f64::NEG_INFINITY && !x.is_nan())
            .fold(None, |acc: Option<(usize, f64)>, (k, &x)| match acc {
                Some((_, best)) if best >= x => acc,
                _ => Some((k, x)),
            })
            .ok_or(InferenceError::ScoreLength { expected: lps.len(), got: 0 })?;
        h.tokens.push(k as u32);
        h.log_prob += lp;
        if k as u32 == eos {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

fn log_softmax_f64(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x as f64));
    let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x as f64 - lse).collect()
}

/// Decoder of one model conditioned on a fixed encoder memory.
pub struct ModelScorer<'m> {
    model: &'m MultiTaskModel,
    task: TaskId,
    memory: Tensor,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m MultiTaskModel, task: TaskId, input: ModelInput) -> Result<Self, InferenceError> {
        let mut g = Graph::new(model.params(), false);
        let mem = model.encode(&mut g, task, input, &mut Dropout::off())?;
        Ok(Self { model, task, memory: g.tape.value(mem).clone() })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().output_vocab(self.task)
    }

    fn next_log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, InferenceError> {
        let mut g = Graph::new(self.model.params(), false);
        let mem = g.input(self.memory.clone());
        let logits = self.model.decode_logits(&mut g, self.task, mem, prefix, &mut Dropout::off())?;
        let t = g.tape.value(logits);
        let mut lps = log_softmax_f64(t.row(t.shape()[0] - 1));
        lps[PAD_ID as usize] = f64::NEG_INFINITY;
        lps[BOS_ID as usize] = f64::NEG_INFINITY;
        renormalize(&mut lps);
        Ok(lps)
    }
}

/// Arithmetic mean of member log-probabilities, renormalized. A single
/// member is passed through untouched.
pub struct EnsembleScorer<'a> {
    members: Vec<Box<dyn StepScorer + 'a>>,
}

impl<'a> EnsembleScorer<'a> {
    pub fn new(members: Vec<Box<dyn StepScorer + 'a>>) -> Result<Self, InferenceError> {
        let first = members.first().ok_or(InferenceError::EmptyEnsemble)?.vocab_size();
        if let Some(m) = members.iter().find(|m| m.vocab_size() != first) {
            return Err(InferenceError::VocabMismatch(first, m.vocab_size()));
        }
        Ok(Self { members })
    }
}

/// `x - logsumexp(x)` over the finite entries.
pub fn renormalize(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return;
    }
    let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    for v in x.iter_mut() {
        *v -= lse;
    }
}

impl StepScorer for EnsembleScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn next_log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, InferenceError> {
        if self.members.len() == 1 {
            return self.members[0].next_log_probs(prefix);
        }
        let k = self.members.len() as f64;
        let mut acc = vec![0.0; self.vocab_size()];
        for m in &mut self.members {
            let lps = m.next_log_probs(prefix)?;
            if lps.len() != acc.len() {
                return Err(InferenceError::ScoreLength { expected: acc.len(), got: lps.len() });
            }
            for (a, l) in acc.iter_mut().zip(lps) {
                *a += l;
            }
        }
        for a in &mut acc {
            *a /= k;
        }
        renormalize(&mut acc);
        Ok(acc)
    }
}

/// A decoded utterance in the JSONL output schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub text: String,
    pub frame: Option<SemanticFrame>,
    pub score: f64,
    pub warnings: Vec<String>,
}

fn strip_eos(tokens: &[u32]) -> &[u32] {
    match tokens.last() {
        Some(&EOS_ID) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

/// Beam-decodes `task` with one model or an ensemble.
pub fn decode_tokens(
    models: &[&MultiTaskModel],
    task: TaskId,
    input: ModelInput,
    cfg: &BeamConfig,
) -> Result<BeamOutput, InferenceError> {
    let mut members: Vec<Box<dyn StepScorer>> = Vec::with_capacity(models.len());
    for m in models {
        members.push(Box::new(ModelScorer::new(m, task, input)?));
    }
    let mut cfg = cfg.clone();
    if let Some(m) = models.first() {
        cfg.max_len = cfg.max_len.min(m.config().max_target_len);
    }
    let mut scorer = EnsembleScorer::new(members)?;
    beam_search(&mut scorer, EOS_ID, &cfg)
}

/// Semantic frame of a decoded IOB token sequence, or `None` with a
/// warning when it has no intent.
pub fn frame_from_tokens(vocabs: &Vocabs, tokens: &[u32], warnings: &mut Vec<String>) -> Result<Option<SemanticFrame>, InferenceError> {
    match vocabs.decode_semantic(strip_eos(tokens)) {
        Ok(d) => {
            warnings.extend(d.warnings.iter().map(|w| w.to_string()));
            Ok(Some(d.frame))
        }
        Err(DataError::Codec(CodecError::Unparseable)) => {
            warnings.push("unparseable semantic sequence: no intent token".into());
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Speech or text to semantic frame with one model or an ensemble.
pub fn decode_semantics(
    id: &str,
    models: &[&MultiTaskModel],
    task: TaskId,
    input: ModelInput,
    vocabs: &Vocabs,
    cfg: &BeamConfig,
) -> Result<DecodeRecord, InferenceError> {
    let out = decode_tokens(models, task, input, cfg)?;
    let mut warnings = out.warnings;
    let body = strip_eos(&out.best.tokens);
    let frame = frame_from_tokens(vocabs, body, &mut warnings)?;
    Ok(DecodeRecord {
        id: id.into(),
        tokens: vocabs.semantic.id_strings(body),
        text: vocabs.semantic.decode(body).map_err(DataError::from)?,
        frame,
        score: out.best.score(cfg.length_penalty),
        warnings,
    })
}

/// Transcribes with an S2T model and tokenizes the transcript for a T2IE
/// model's encoder.
pub fn transcribe(
    s2t: &MultiTaskModel,
    vocabs: &Vocabs,
    features: &FeatureMatrix,
    cfg: &BeamConfig,
) -> Result<(String, BeamOutput), InferenceError> {
    let out = decode_tokens(&[s2t], TaskId::S2t, ModelInput::Features(features), cfg)?;
    let text = vocabs.decode_text(strip_eos(&out.best.tokens))?;
    Ok((text, out))
}

/// Semantic frame of a transcript through a T2IE model.
pub fn understand_text(
    id: &str,
    t2ie: &MultiTaskModel,
    vocabs: &Vocabs,
    text: &str,
    cfg: &BeamConfig,
) -> Result<DecodeRecord, InferenceError> {
    if text.split_whitespace().next().is_none() {
        return Ok(DecodeRecord {
            id: id.into(),
            tokens: Vec::new(),
            text: String::new(),
            frame: None,
            score: f64::NEG_INFINITY,
            warnings: vec!["empty transcription: no intent".into()],
        });
    }
    let mut ids = vocabs.encode_text(text);
    ids.push(EOS_ID);
    decode_semantics(id, &[t2ie], TaskId::T2ie, ModelInput::Tokens(&ids), vocabs, cfg)
}

/// Speech → transcript → semantics through two separately trained models
/// sharing `vocabs`.
pub fn cascade_decode(
    id: &str,
    s2t: &MultiTaskModel,
    t2ie: &MultiTaskModel,
    vocabs: &Vocabs,
    features: &FeatureMatrix,
    cfg: &BeamConfig,
) -> Result<DecodeRecord, InferenceError> {
    let mut stage1 = ModelScorer::new(s2t, TaskId::S2t, ModelInput::Features(features))?;
    let mut cfg1 = cfg.clone();
    cfg1.max_len = cfg.max_len.min(s2t.config().max_target_len);
    cascade_with(id, &mut stage1, |ids| Ok(Box::new(ModelScorer::new(t2ie, TaskId::T2ie, ModelInput::Tokens(ids))?)), vocabs, &cfg1)
}

/// Cascade over arbitrary scorers: `stage1` transcribes, `stage2` builds a
/// semantic scorer from the text-encoder input (transcript pieces + eos).
pub fn cascade_with<'a, F>(
    id: &str,
    stage1: &mut dyn StepScorer,
    stage2: F,
    vocabs: &Vocabs,
    cfg: &BeamConfig,
) -> Result<DecodeRecord, InferenceError>
where
    F: FnOnce(&[u32]) -> Result<Box<dyn StepScorer + 'a>, InferenceError>,
{
    let out = beam_search(stage1, EOS_ID, cfg)?;
    let text = vocabs.decode_text(strip_eos(&out.best.tokens))?;
    let mut warnings: Vec<String> = out.warnings.into_iter().map(|w| format!("s2t: {w}")).collect();
    if text.split_whitespace().next().is_none() {
        warnings.push("empty transcription: no intent".into());
        return Ok(DecodeRecord { id: id.into(), tokens: Vec::new(), text, frame: None, score: f64::NEG_INFINITY, warnings });
    }
    let mut ids = vocabs.encode_text(&text);
    ids.push(EOS_ID);
    let mut scorer = stage2(&ids)?;
    let out = beam_search(scorer.as_mut(), EOS_ID, cfg)?;
    warnings.extend(out.warnings);
    let body = strip_eos(&out.best.tokens);
    let frame = frame_from_tokens(vocabs, body, &mut warnings)?;
    Ok(DecodeRecord {
        id: id.into(),
        tokens: vocabs.semantic.id_strings(body),
        text: vocabs.semantic.decode(body).map_err(DataError::from)?,
        frame,
        score: out.best.score(cfg.length_penalty),
        warnings,
    })
}
