//! Strict entity F1 and intent error rate over aligned frame lists.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::SemanticFrame;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{refs} references but {hyps} hypotheses")]
    Length { refs: usize, hyps: usize },
    #[error("no hypothesis for reference id {0:?}")]
    MissingId(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
}

/// Frame for one utterance; `None` marks an unparseable hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub id: String,
    pub frame: Option<SemanticFrame>,
}

impl Labeled {
    pub fn new(id: impl Into<String>, frame: Option<SemanticFrame>) -> Self {
        Self { id: id.into(), frame }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EntityScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { tp, fp, fn_, precision, recall, f1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentScore {
    pub errors: usize,
    pub total: usize,
    pub ier: f64,
}

/// Lowercased, underscores as spaces, single-space joined.
pub fn normalize_value(v: &str) -> String {
    v.to_lowercase().replace('_', " ").split_whitespace().collect::<Vec<_>>().join(" ")
}

fn entity_keys(frame: Option<&SemanticFrame>) -> Vec<(String, String)> {
    frame
        .map(|f| f.entities.iter().map(|e| (e.label.clone(), normalize_value(&e.value.join(" ")))).collect())
        .unwrap_or_default()
}

fn align<'a>(refs: &'a [Labeled], hyps: &'a [Labeled]) -> Result<Vec<(&'a Labeled, &'a Labeled)>, EvalError> {
    if refs.len() != hyps.len() {
        return Err(EvalError::Length { refs: refs.len(), hyps: hyps.len() });
    }
    let mut by_id = HashMap::with_capacity(hyps.len());
    for h in hyps {
        if by_id.insert(h.id.as_str(), h).is_some() {
            return Err(EvalError::DuplicateId(h.id.clone()));
        }
    }
    let mut seen = std::collections::HashSet::with_capacity(refs.len());
    refs.iter()
        .map(|r| {
            if !seen.insert(r.id.as_str()) {
                return Err(EvalError::DuplicateId(r.id.clone()));
            }
            by_id.get(r.id.as_str()).map(|h| (r, *h)).ok_or_else(|| EvalError::MissingId(r.id.clone()))
        })
        .collect()
}

/// `(tp, missing, spurious)` for one utterance under multiset matching.
pub fn match_entities(r: Option<&SemanticFrame>, h: Option<&SemanticFrame>) -> (usize, Vec<(String, String)>, Vec<(String, String)>) {
    let mut pool: HashMap<(String, String), usize> = HashMap::new();
    for k in entity_keys(r) {
        *pool.entry(k).or_default() += 1;
    }
    let mut tp = 0;
    let mut spurious = Vec::new();
    for k in entity_keys(h) {
        match pool.get_mut(&k) {
            Some(c) if *c > 0 => {
                *c -= 1;
                tp += 1;
            }
            _ => spurious.push(k),
        }
    }
    let mut missing: Vec<(String, String)> =
        pool.into_iter().flat_map(|(k, c)| std::iter::repeat_n(k, c)).collect();
    missing.sort();
    (tp, missing, spurious)
}

pub fn score_entities(refs: &[Labeled], hyps: &[Labeled]) -> Result<EntityScore, EvalError> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (r, h) in align(refs, hyps)? {
        let (t, missing, spurious) = match_entities(r.frame.as_ref(), h.frame.as_ref());
        tp += t;
        fn_ += missing.len();
        fp += spurious.len();
    }
    Ok(EntityScore::from_counts(tp, fp, fn_))
}

fn intent_ok(r: &Labeled, h: &Labeled) -> bool {
    matches!((&r.frame, &h.frame), (Some(a), Some(b)) if a.intent == b.intent)
}

pub fn score_intent(refs: &[Labeled], hyps: &[Labeled]) -> Result<IntentScore, EvalError> {
    let pairs = align(refs, hyps)?;
    let errors = pairs.iter().filter(|(r, h)| !intent_ok(r, h)).count();
    let total = pairs.len();
    Ok(IntentScore { errors, total, ier: if total == 0 { 0.0 } else { errors as f64 / total as f64 } })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceDiff {
    pub id: String,
    pub intent_correct: bool,
    pub missing: Vec<(String, String)>,
    pub spurious: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub entities: EntityScore,
    pub intent: IntentScore,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_utterance: Option<Vec<UtteranceDiff>>,
}

pub fn score_report(refs: &[Labeled], hyps: &[Labeled], per_utterance: bool) -> Result<ScoreReport, EvalError> {
    let entities = score_entities(refs, hyps)?;
    let intent = score_intent(refs, hyps)?;
    let per_utterance = per_utterance.then(|| {
        align(refs, hyps)
            .unwrap_or_default()
            .into_iter()
            .map(|(r, h)| {
                let (_, missing, spurious) = match_entities(r.frame.as_ref(), h.frame.as_ref());
                UtteranceDiff { id: r.id.clone(), intent_correct: intent_ok(r, h), missing, spurious }
            })
            .collect()
    });
    Ok(ScoreReport { entities, intent, per_utterance })
}
