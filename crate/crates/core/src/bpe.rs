//! Byte-pair-encoding subword vocabularies.
//!
//! Word-initial pieces carry a leading `▁`. Atomic tokens (intent and IOB
//! tag tokens) are whole-word pieces that never take part in merges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const WORD_MARK: char = '▁';
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
const NUM_CONTROL: usize = 4;
const FORMAT_VERSION: u32 = 1;

/// Vocabulary sizes used for the semantic stream and the two transcript
/// corpora.
pub const SEMANTIC_PIECES: usize = 512;
pub const SMALL_TEXT_PIECES: usize = 512;
pub const LARGE_TEXT_PIECES: usize = 5000;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("vocab size {requested} is below the {minimum} base symbols and specials")]
    TooSmall { requested: usize, minimum: usize },
    #[error("token id {id} out of range for vocab of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("invalid vocab file: {0}")]
    Invalid(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    atomic: Vec<String>,
    atomic_index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

#[derive(Serialize, Deserialize)]
struct Specials {
    pad: String,
    bos: String,
    eos: String,
    unk: String,
    atomic: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Specials,
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Sym {
    initial: bool,
    text: String,
}

impl Sym {
    fn piece(&self) -> String {
        if self.initial {
            format!("{WORD_MARK}{}", self.text)
        } else {
            self.text.clone()
        }
    }
}

fn word_symbols(word: &str) -> Vec<Sym> {
    word.chars()
        .enumerate()
        .map(|(i, c)| Sym { initial: i == 0, text: c.to_string() })
        .collect()
}

/// Merges every allowed occurrence of `left right`, scanning left to right.
fn apply_merge(symbols: &mut Vec<Sym>, left: &str, right: &str, allow: impl Fn(&Sym) -> bool) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i].text == left && symbols[i + 1].text == right {
            let merged = Sym { initial: symbols[i].initial, text: format!("{left}{right}") };
            if allow(&merged) {
                symbols[i] = merged;
                symbols.remove(i + 1);
            }
        }
        i += 1;
    }
}

/// Greedy most-frequent-pair training. Pairs are counted on piece text with
/// the word marker ignored. Ties go to the lexicographically smallest
/// concatenation, then the smallest left symbol. Stops at `vocab_size`
/// pieces or when no pair occurs at least twice.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize, atomic_tokens: &[String]) -> Result<BpeVocab, BpeError> {
    let atomic: Vec<String> = {
        let mut seen = BTreeSet::new();
        atomic_tokens.iter().filter(|t| seen.insert(t.as_str())).cloned().collect()
    };
    let atomic_set: BTreeSet<&str> = atomic.iter().map(String::as_str).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut any_word = false;
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            any_word = true;
            if !atomic_set.contains(w) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    if !any_word {
        return Err(BpeError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<Sym>, usize)> = counts.iter().map(|(w, &c)| (word_symbols(w), c)).collect();
    let base: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().map(Sym::piece)).collect();

    let mut pieces: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
    pieces.extend(atomic.iter().cloned());
    pieces.extend(base.iter().cloned());
    if vocab_size < pieces.len() {
        return Err(BpeError::TooSmall { requested: vocab_size, minimum: pieces.len() });
    }
    let mut known: BTreeSet<String> = base;
    let mut merges = Vec::new();
    while pieces.len() < vocab_size {
        let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((w[0].text.as_str(), w[1].text.as_str())).or_default() += c;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb)
                    .then_with(|| {
                        let (ka, kb) = (format!("{}{}", pa.0, pa.1), format!("{}{}", pb.0, pb.1));
                        kb.cmp(&ka)
                    })
                    .then_with(|| pb.0.cmp(pa.0))
            })
            .map(|((a, b), _)| (a.to_string(), b.to_string()));
        let Some((left, right)) = best else { break };
        let mut fresh: BTreeSet<String> = BTreeSet::new();
        for (syms, _) in &words {
            for w in syms.windows(2) {
                if w[0].text == left && w[1].text == right {
                    let p = Sym { initial: w[0].initial, text: format!("{left}{right}") }.piece();
                    if !known.contains(&p) {
                        fresh.insert(p);
                    }
                }
            }
        }
        if pieces.len() + fresh.len() > vocab_size {
            break;
        }
        for (syms, _) in &mut words {
            apply_merge(syms, &left, &right, |_| true);
        }
        for p in fresh {
            known.insert(p.clone());
            pieces.push(p);
        }
        merges.push((left, right));
    }
    BpeVocab::from_parts(pieces, atomic, merges)
}

impl BpeVocab {
    fn from_parts(pieces: Vec<String>, atomic: Vec<String>, merges: Vec<(String, String)>) -> Result<Self, BpeError> {
        let control = [PAD, BOS, EOS, UNK];
        if pieces.len() < NUM_CONTROL + atomic.len() || pieces[..NUM_CONTROL] != control {
            return Err(BpeError::Invalid("pieces must start with the control tokens".into()));
        }
        if pieces[NUM_CONTROL..NUM_CONTROL + atomic.len()] != atomic[..] {
            return Err(BpeError::Invalid("atomic tokens must follow the control tokens".into()));
        }
        let mut index = HashMap::new();
        let mut atomic_index = HashMap::new();
        for (i, p) in pieces.iter().enumerate() {
            let id = i as u32;
            if i < NUM_CONTROL + atomic.len() {
                if atomic_index.insert(p.clone(), id).is_some() {
                    return Err(BpeError::Invalid(format!("duplicate special {p:?}")));
                }
            } else if index.insert(p.clone(), id).is_some() {
                return Err(BpeError::Invalid(format!("duplicate piece {p:?}")));
            }
        }
        for c in control {
            atomic_index.remove(c);
        }
        let ranks = merges.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        Ok(Self { pieces, index, atomic, atomic_index, merges, ranks })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn atomic_tokens(&self) -> &[String] {
        &self.atomic
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn atomic_id(&self, token: &str) -> Option<u32> {
        self.atomic_index.get(token).copied()
    }

    fn is_atomic_id(&self, id: u32) -> bool {
        let i = id as usize;
        (NUM_CONTROL..NUM_CONTROL + self.atomic.len()).contains(&i)
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(id) = self.atomic_id(word) {
            out.push(id);
            return;
        }
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| {
                    let rank = self.ranks.get(&(w[0].text.clone(), w[1].text.clone()))?;
                    let merged = Sym { initial: w[0].initial, text: format!("{}{}", w[0].text, w[1].text) };
                    self.index.contains_key(&merged.piece()).then_some(*rank)
                })
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            apply_merge(&mut syms, l, r, |m| self.index.contains_key(&m.piece()));
        }
        out.extend(syms.iter().map(|s| self.index.get(&s.piece()).copied().unwrap_or(UNK_ID)));
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace normalization;
    /// control tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String, BpeError> {
        let mut raw = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(BpeError::IdOutOfRange { id, size: self.len() })?;
            if (id as usize) < NUM_CONTROL {
                continue;
            }
            if self.is_atomic_id(id) {
                raw.push(' ');
                raw.push_str(piece);
                raw.push(' ');
            } else {
                raw.extend(piece.chars().map(|c| if c == WORD_MARK { ' ' } else { c }));
            }
        }
        Ok(raw.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    /// Pieces of `ids` as separate strings, for display.
    pub fn id_strings(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&id| self.piece(id).unwrap_or(UNK).to_string()).collect()
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: FORMAT_VERSION,
            specials: Specials {
                pad: PAD.into(),
                bos: BOS.into(),
                eos: EOS.into(),
                unk: UNK.into(),
                atomic: self.atomic.clone(),
            },
            pieces: self.pieces.clone(),
            merges: self.merges.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, BpeError> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.version != FORMAT_VERSION {
            return Err(BpeError::Invalid(format!("unsupported vocab version {}", file.version)));
        }
        let s = &file.specials;
        if (s.pad.as_str(), s.bos.as_str(), s.eos.as_str(), s.unk.as_str()) != (PAD, BOS, EOS, UNK) {
            return Err(BpeError::Invalid("unexpected control token spellings".into()));
        }
        Self::from_parts(file.pieces, file.specials.atomic, file.merges)
    }

    /// Hex SHA-256 of the JSON form.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        std::fs::write(path, self.to_json()).map_err(|source| BpeError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        let s = std::fs::read_to_string(path).map_err(|source| BpeError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&s)
    }
}
