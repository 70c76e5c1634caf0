//! Flat intent-and-entity token sequences in word-then-tag IOB form.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INTENT_PREFIX: &str = "O-INT-";
pub const BEGIN_PREFIX: &str = "B-";
pub const INSIDE_PREFIX: &str = "I-";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("entity {label:?} has an empty value")]
    EmptyValue { label: String },
    #[error("invalid entity label {0:?}")]
    BadLabel(String),
    #[error("invalid word {0:?}")]
    BadWord(String),
    #[error("intent must be a non-empty token without whitespace, got {0:?}")]
    BadIntent(String),
    #[error("no intent token in sequence")]
    Unparseable,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub label: String,
    pub value: Vec<String>,
}

impl EntityAnnotation {
    pub fn new(label: impl Into<String>, value: &[&str]) -> Self {
        Self { label: label.into(), value: value.iter().map(|s| s.to_string()).collect() }
    }

    /// Lowercased, space-joined value used for comparisons.
    pub fn value_key(&self) -> String {
        self.value.iter().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticFrame {
    pub intent: String,
    #[serde(default)]
    pub entities: Vec<EntityAnnotation>,
}

fn valid_label(label: &str) -> bool {
    !label.is_empty() && label.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'.')
}

fn is_tag(tok: &str) -> bool {
    tok.starts_with(INTENT_PREFIX) || tok.starts_with(BEGIN_PREFIX) || tok.starts_with(INSIDE_PREFIX)
}

impl SemanticFrame {
    pub fn new(intent: impl Into<String>, entities: Vec<EntityAnnotation>) -> Self {
        Self { intent: intent.into(), entities }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.intent.is_empty() || self.intent.chars().any(char::is_whitespace) {
            return Err(CodecError::BadIntent(self.intent.clone()));
        }
        for e in &self.entities {
            if !valid_label(&e.label) {
                return Err(CodecError::BadLabel(e.label.clone()));
            }
            if e.value.is_empty() {
                return Err(CodecError::EmptyValue { label: e.label.clone() });
            }
            if let Some(w) = e.value.iter().find(|w| w.is_empty() || w.chars().any(char::is_whitespace) || is_tag(w)) {
                return Err(CodecError::BadWord(w.clone()));
            }
        }
        Ok(())
    }
}

/// Surface spelling of a canonical label: dots and underscores become hyphens.
pub fn surface_label(label: &str) -> String {
    label.replace(['.', '_'], "-")
}

/// Maps surface labels back to canonical ones. Labels missing from the
/// inventory fall back to treating the first hyphen as a dot and the rest
/// as underscores.
#[derive(Clone, Debug, Default)]
pub struct LabelInventory {
    by_surface: HashMap<String, String>,
}

impl LabelInventory {
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut inv = Self::default();
        for l in labels {
            inv.insert(l.as_ref());
        }
        inv
    }

    pub fn insert(&mut self, label: &str) {
        self.by_surface.insert(surface_label(label), label.to_string());
    }

    pub fn len(&self) -> usize {
        self.by_surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_surface.is_empty()
    }

    pub fn canonical(&self, surface: &str) -> String {
        if let Some(l) = self.by_surface.get(surface) {
            return l.clone();
        }
        match surface.split_once('-') {
            Some((head, rest)) => format!("{head}.{}", rest.replace('-', "_")),
            None => surface.to_string(),
        }
    }
}

pub fn intent_token(intent: &str) -> String {
    format!("{INTENT_PREFIX}{intent}")
}

pub fn encode_iob(frame: &SemanticFrame) -> Result<Vec<String>, CodecError> {
    frame.validate()?;
    let intent = intent_token(&frame.intent);
    let mut out = vec![intent.clone()];
    for e in &frame.entities {
        let surface = surface_label(&e.label);
        for (i, w) in e.value.iter().enumerate() {
            out.push(w.clone());
            let prefix = if i == 0 { BEGIN_PREFIX } else { INSIDE_PREFIX };
            out.push(format!("{prefix}{surface}"));
        }
    }
    out.push(intent);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeWarning {
    LeadingTokens(usize),
    OrphanInside { label: String },
    DanglingWord { word: String },
    TagWithoutWord { tag: String },
    EmptyTagLabel,
    MissingClosingIntent,
    IntentMismatch { first: String, last: String },
    TrailingTokens(usize),
}

impl fmt::Display for DecodeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LeadingTokens(n) => write!(f, "{n} token(s) before the opening intent ignored"),
            Self::OrphanInside { label } => write!(f, "I-{label} without a matching B- tag, promoted to B-"),
            Self::DanglingWord { word } => write!(f, "untagged word {word:?} dropped"),
            Self::TagWithoutWord { tag } => write!(f, "tag {tag:?} has no word, dropped"),
            Self::EmptyTagLabel => write!(f, "tag with empty label dropped"),
            Self::MissingClosingIntent => write!(f, "closing intent token missing"),
            Self::IntentMismatch { first, last } => write!(f, "opening intent {first:?} differs from closing {last:?}; using the opening one"),
            Self::TrailingTokens(n) => write!(f, "{n} token(s) after the closing intent ignored"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub frame: SemanticFrame,
    pub warnings: Vec<DecodeWarning>,
}

/// Best-effort inverse of [`encode_iob`] over arbitrary model output.
pub fn decode_iob<S: AsRef<str>>(tokens: &[S], labels: &LabelInventory) -> Result<Decoded, CodecError> {
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let parse_intent = |t: &str| t.strip_prefix(INTENT_PREFIX).filter(|i| !i.is_empty()).map(str::to_string);
    let start = toks.iter().position(|t| parse_intent(t).is_some()).ok_or(CodecError::Unparseable)?;
    let intent = parse_intent(toks[start]).unwrap();
    let mut warnings = Vec::new();
    if start > 0 {
        warnings.push(DecodeWarning::LeadingTokens(start));
    }

    let mut entities: Vec<EntityAnnotation> = Vec::new();
    // Surface label of the entity the next I- tag may extend.
    let mut open: Option<String> = None;
    let mut pending: Vec<&str> = Vec::new();
    let mut closed = false;
    let mut i = start + 1;
    while i < toks.len() {
        let tok = toks[i];
        i += 1;
        if tok.starts_with(INTENT_PREFIX) {
            let last = parse_intent(tok).unwrap_or_default();
            if last != intent {
                warnings.push(DecodeWarning::IntentMismatch { first: intent.clone(), last });
            }
            closed = true;
            break;
        }
        let (inside, surface) = if let Some(l) = tok.strip_prefix(BEGIN_PREFIX) {
            (false, l)
        } else if let Some(l) = tok.strip_prefix(INSIDE_PREFIX) {
            (true, l)
        } else {
            pending.push(tok);
            continue;
        };
        if surface.is_empty() {
            warnings.push(DecodeWarning::EmptyTagLabel);
            pending.clear();
            open = None;
            continue;
        }
        let Some(word) = pending.pop() else {
            warnings.push(DecodeWarning::TagWithoutWord { tag: tok.to_string() });
            open = None;
            continue;
        };
        for w in pending.drain(..) {
            warnings.push(DecodeWarning::DanglingWord { word: w.to_string() });
            open = None;
        }
        if inside && open.as_deref() == Some(surface) {
            entities.last_mut().unwrap().value.push(word.to_string());
            continue;
        }
        if inside {
            warnings.push(DecodeWarning::OrphanInside { label: surface.to_string() });
        }
        entities.push(EntityAnnotation { label: labels.canonical(surface), value: vec![word.to_string()] });
        open = Some(surface.to_string());
    }
    for w in pending {
        warnings.push(DecodeWarning::DanglingWord { word: w.to_string() });
    }
    if !closed {
        warnings.push(DecodeWarning::MissingClosingIntent);
    } else if i < toks.len() {
        warnings.push(DecodeWarning::TrailingTokens(toks.len() - i));
    }
    Ok(Decoded { frame: SemanticFrame { intent, entities }, warnings })
}

/// Whether `tokens` is a well-formed sequence: matching intent tokens at both
/// ends and word-then-tag groups in between with consistent I- labels.
pub fn is_well_formed<S: AsRef<str>>(tokens: &[S]) -> bool {
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    if toks.len() < 2 {
        return false;
    }
    let (first, last) = (toks[0], toks[toks.len() - 1]);
    let Some(intent) = first.strip_prefix(INTENT_PREFIX) else { return false };
    if intent.is_empty() || first != last {
        return false;
    }
    let body = &toks[1..toks.len() - 1];
    if body.len() % 2 != 0 {
        return false;
    }
    let mut prev: Option<&str> = None;
    for pair in body.chunks(2) {
        let (word, tag) = (pair[0], pair[1]);
        if is_tag(word) {
            return false;
        }
        let label = if let Some(l) = tag.strip_prefix(BEGIN_PREFIX) {
            l
        } else if let Some(l) = tag.strip_prefix(INSIDE_PREFIX) {
            if prev != Some(l) {
                return false;
            }
            l
        } else {
            return false;
        };
        if label.is_empty() {
            return false;
        }
        prev = Some(label);
    }
    true
}
