//! Turns utterances into tokenized, featurized training examples.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{train_bpe, BpeError, BpeVocab, EOS_ID};
use crate::codec::{decode_iob, encode_iob, CodecError, Decoded, LabelInventory, SemanticFrame};
use crate::corpus::{load_resolved, synthesize, CorpusError, Manifest, Utterance};
use crate::features::{compute_filterbank, load_features, FbankConfig, FeatureError, FeatureMatrix};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("utterance {id}: {message}")]
    Utterance { id: String, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("labels file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Tokenizers for both output streams plus the entity label inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabs {
    pub semantic: BpeVocab,
    pub text: BpeVocab,
    pub labels: Vec<String>,
}

pub const SEMANTIC_VOCAB_FILE: &str = "semantic_vocab.json";
pub const TEXT_VOCAB_FILE: &str = "text_vocab.json";
pub const LABELS_FILE: &str = "labels.json";

/// IOB sequence of a frame as one whitespace-joined line.
pub fn semantic_line(frame: &SemanticFrame) -> Result<String, CodecError> {
    Ok(encode_iob(frame)?.join(" "))
}

impl Vocabs {
    /// Trains both tokenizers. Intent and tag tokens of the semantic stream
    /// are atomic.
    pub fn train(corpus: &[Utterance], semantic_size: usize, text_size: usize) -> Result<Self, DataError> {
        let mut lines = Vec::with_capacity(corpus.len());
        let mut atomic = BTreeSet::new();
        let mut labels = BTreeSet::new();
        for u in corpus {
            let toks = encode_iob(&u.frame)?;
            for (i, t) in toks.iter().enumerate() {
                if i == 0 || i + 1 == toks.len() || i % 2 == 0 {
                    atomic.insert(t.clone());
                }
            }
            labels.extend(u.frame.entities.iter().map(|e| e.label.clone()));
            lines.push(toks.join(" "));
        }
        let atomic: Vec<String> = atomic.into_iter().collect();
        let semantic = train_bpe(&lines, semantic_size, &atomic)?;
        let texts: Vec<&str> = corpus.iter().map(|u| u.text.as_str()).collect();
        let text = train_bpe(&texts, text_size, &[])?;
        Ok(Self { semantic, text, labels: labels.into_iter().collect() })
    }

    pub fn inventory(&self) -> LabelInventory {
        LabelInventory::new(&self.labels)
    }

    pub fn encode_semantic(&self, frame: &SemanticFrame) -> Result<Vec<u32>, CodecError> {
        Ok(self.semantic.encode(&semantic_line(frame)?))
    }

    pub fn decode_semantic(&self, ids: &[u32]) -> Result<Decoded, DataError> {
        let line = self.semantic.decode(ids)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        Ok(decode_iob(&toks, &self.inventory())?)
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        self.text.encode(text)
    }

    pub fn decode_text(&self, ids: &[u32]) -> Result<String, DataError> {
        Ok(self.text.decode(ids)?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.display().to_string(), source })?;
        self.semantic.save(&dir.join(SEMANTIC_VOCAB_FILE))?;
        self.text.save(&dir.join(TEXT_VOCAB_FILE))?;
        let p = dir.join(LABELS_FILE);
        fs::write(&p, serde_json::to_string_pretty(&self.labels)?)
            .map_err(|source| DataError::Io { path: p.display().to_string(), source })
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let p = dir.join(LABELS_FILE);
        let raw = fs::read_to_string(&p).map_err(|source| DataError::Io { path: p.display().to_string(), source })?;
        Ok(Self {
            semantic: BpeVocab::load(&dir.join(SEMANTIC_VOCAB_FILE))?,
            text: BpeVocab::load(&dir.join(TEXT_VOCAB_FILE))?,
            labels: serde_json::from_str(&raw)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Internal log-mel filterbank with pitch slots.
    #[default]
    Filterbank,
    /// Pre-extracted matrices read from feature files.
    External,
}

/// Feature matrix of one utterance: its feature file when present, else
/// filterbank features of its audio, else (when `synth_fallback`) of its
/// rendered synthetic audio.
pub fn utterance_features(
    u: &Utterance,
    manifest: Option<&Manifest>,
    synth_fallback: bool,
) -> Result<FeatureMatrix, DataError> {
    let resolve = |p: &Path| manifest.map(|m| m.resolve(p)).unwrap_or_else(|| p.to_path_buf());
    if let Some(p) = &u.features {
        let path = resolve(p);
        if !path.exists() {
            return Err(CorpusError::Resolve { id: u.id.clone(), path: path.display().to_string(), message: "not found".into() }.into());
        }
        return Ok(load_features(&path)?);
    }
    let audio = match &u.audio {
        Some(p) => load_resolved(&u.id, &resolve(p))?,
        None if synth_fallback => synthesize(u),
        None => return Err(DataError::Utterance { id: u.id.clone(), message: "no audio or features".into() }),
    };
    Ok(compute_filterbank(&audio, &FbankConfig::default())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Option<FeatureMatrix>,
    /// Transcript pieces without control tokens.
    pub text_ids: Vec<u32>,
    /// IOB sequence pieces without control tokens.
    pub semantic_ids: Vec<u32>,
    pub text: String,
    pub frame: SemanticFrame,
}

impl Example {
    pub fn new(u: &Utterance, features: Option<FeatureMatrix>, vocabs: &Vocabs) -> Result<Self, DataError> {
        Ok(Self {
            id: u.id.clone(),
            features,
            text_ids: vocabs.encode_text(&u.text),
            semantic_ids: vocabs.encode_semantic(&u.frame)?,
            text: u.text.clone(),
            frame: u.frame.clone(),
        })
    }

    /// Text-encoder input: transcript pieces closed by eos.
    pub fn text_input(&self) -> Vec<u32> {
        let mut v = self.text_ids.clone();
        v.push(EOS_ID);
        v
    }
}

/// Featurizes and tokenizes a corpus.
pub fn prepare_examples(
    corpus: &[Utterance],
    vocabs: &Vocabs,
    manifest: Option<&Manifest>,
    with_features: bool,
) -> Result<Vec<Example>, DataError> {
    corpus
        .iter()
        .map(|u| {
            let feats = if with_features { Some(utterance_features(u, manifest, manifest.is_none())?) } else { None };
            Example::new(u, feats, vocabs)
        })
        .collect()
}

/// Per-dimension mean and standard deviation over all frames. Standard
/// deviations are floored at 1e-2.
pub fn cmvn_stats<'a>(feats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Option<(Vec<f32>, Vec<f32>)> {
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for f in feats {
        if sum.is_empty() {
            sum = vec![0.0; f.cols()];
            sq = vec![0.0; f.cols()];
        }
        if f.cols() != sum.len() {
            return None;
        }
        for r in 0..f.rows() {
            for (j, &x) in f.row(r).iter().enumerate() {
                sum[j] += x as f64;
                sq[j] += (x as f64) * (x as f64);
            }
        }
        n += f.rows();
    }
    if n == 0 {
        return None;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-2)) as f32).collect();
    Some((mean.into_iter().map(|m| m as f32).collect(), std))
}
