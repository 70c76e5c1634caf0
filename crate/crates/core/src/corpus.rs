//! Synthetic flight-domain corpora, JSONL manifests and speed augmentation.

use std::collections::BTreeSet;
use std::f32::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{EntityAnnotation, SemanticFrame};
use crate::features::{load_audio, speed_perturb, write_wav, AudioSignal, FeatureError, DEFAULT_SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("grammar has no intents or templates")]
    EmptyGrammar,
    #[error("template {template:?} references unknown slot {slot:?}")]
    UnknownSlot { template: String, slot: String },
    #[error("requested an empty corpus")]
    ZeroCount,
    #[error("{path}:{line}: {message}")]
    Manifest { path: String, line: usize, message: String },
    #[error("utterance {id}: {message}")]
    Utterance { id: String, message: String },
    #[error("utterance {id}: cannot resolve {path}: {message}")]
    Resolve { id: String, path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub audio: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub text: String,
    pub frame: SemanticFrame,
}

impl Utterance {
    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }

    /// Word offset of each entity value, matched at its first occurrence.
    pub fn entity_spans(&self) -> Vec<Option<usize>> {
        let words = self.words();
        self.frame
            .entities
            .iter()
            .map(|e| {
                let n = e.value.len();
                (0..=words.len().saturating_sub(n)).find(|&s| {
                    n > 0 && s + n <= words.len() && words[s..s + n].iter().zip(&e.value).all(|(a, b)| a == b)
                })
            })
            .collect()
    }

    /// Values that do not occur as contiguous words of the transcript.
    pub fn missing_values(&self) -> Vec<String> {
        self.frame
            .entities
            .iter()
            .zip(self.entity_spans())
            .filter(|(_, s)| s.is_none())
            .map(|(e, _)| e.value.join(" "))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentTemplates {
    pub intent: String,
    /// Word templates with `{label}` slot placeholders.
    pub templates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotType {
    pub label: String,
    pub values: Vec<String>,
    /// Slots of the same group never repeat a value within one utterance.
    #[serde(default)]
    pub group: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGrammar {
    pub intents: Vec<IntentTemplates>,
    pub slots: Vec<SlotType>,
    #[serde(default)]
    pub seed: u64,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

const CITIES: [&str; 8] = ["boston", "denver", "dallas", "atlanta", "charlotte", "las vegas", "new york", "saint louis"];

impl Default for SynthGrammar {
    fn default() -> Self {
        let city = |label: &str| SlotType { label: label.into(), values: strings(&CITIES), group: Some("city".into()) };
        Self {
            intents: vec![
                IntentTemplates {
                    intent: "flight".into(),
                    templates: strings(&[
                        "show me flights from {fromloc.city_name} to {toloc.city_name}",
                        "flights from {fromloc.city_name} to {toloc.city_name} via {stoploc.city_name}",
                        "{airline.name} flights from {fromloc.city_name} to {toloc.city_name}",
                        "flights to {toloc.city_name} from {fromloc.city_name}",
                    ]),
                },
                IntentTemplates {
                    intent: "airfare".into(),
                    templates: strings(&[
                        "fare from {fromloc.city_name} to {toloc.city_name}",
                        "fare from {fromloc.city_name} to {toloc.city_name} on {airline.name}",
                        "{airline.name} fare to {toloc.city_name} via {stoploc.city_name}",
                    ]),
                },
                IntentTemplates {
                    intent: "ground_service".into(),
                    templates: strings(&[
                        "ground transportation in {toloc.city_name}",
                        "show me ground transportation in {toloc.city_name}",
                    ]),
                },
            ],
            slots: vec![
                city("fromloc.city_name"),
                city("toloc.city_name"),
                city("stoploc.city_name"),
                SlotType {
                    label: "airline.name".into(),
                    values: strings(&["delta", "united", "us air"]),
                    group: None,
                },
            ],
            seed: 0,
        }
    }
}

enum Piece<'a> {
    Word(&'a str),
    Slot(&'a str),
}

fn parse_template(t: &str) -> Vec<Piece<'_>> {
    t.split_whitespace()
        .map(|w| match w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
            Some(label) => Piece::Slot(label),
            None => Piece::Word(w),
        })
        .collect()
}

impl SynthGrammar {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.intents.is_empty() || self.intents.iter().any(|i| i.templates.is_empty()) {
            return Err(CorpusError::EmptyGrammar);
        }
        for t in self.intents.iter().flat_map(|i| &i.templates) {
            for p in parse_template(t) {
                if let Piece::Slot(label) = p {
                    if !self.slots.iter().any(|s| s.label == label && !s.values.is_empty()) {
                        return Err(CorpusError::UnknownSlot { template: t.clone(), slot: label.into() });
                    }
                }
            }
        }
        Ok(())
    }

    /// Every distinct word the grammar can produce.
    pub fn lexicon(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for t in self.intents.iter().flat_map(|i| &i.templates) {
            for p in parse_template(t) {
                if let Piece::Word(w) = p {
                    out.insert(w.to_string());
                }
            }
        }
        for v in self.slots.iter().flat_map(|s| &s.values) {
            out.extend(v.split_whitespace().map(str::to_string));
        }
        out
    }

    fn slot(&self, label: &str) -> &SlotType {
        self.slots.iter().find(|s| s.label == label).expect("validated slot")
    }
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

fn seed_of(parts: &[&[u8]]) -> u64 {
    u64::from_le_bytes(digest(parts)[..8].try_into().unwrap())
}

pub fn generate_corpus(grammar: &SynthGrammar, n: usize, seed: u64) -> Result<Vec<Utterance>, CorpusError> {
    grammar.validate()?;
    if n == 0 {
        return Err(CorpusError::ZeroCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_of(&[&grammar.seed.to_le_bytes(), &seed.to_le_bytes()]));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let intent = grammar.intents.choose(&mut rng).unwrap();
        let template = intent.templates.choose(&mut rng).unwrap();
        let mut words = Vec::new();
        let mut entities = Vec::new();
        let mut used: Vec<(Option<&str>, &str)> = Vec::new();
        for piece in parse_template(template) {
            match piece {
                Piece::Word(w) => words.push(w.to_string()),
                Piece::Slot(label) => {
                    let slot = grammar.slot(label);
                    let group = slot.group.as_deref();
                    let fresh: Vec<&String> = slot
                        .values
                        .iter()
                        .filter(|v| group.is_none() || !used.contains(&(group, v.as_str())))
                        .collect();
                    let pool = if fresh.is_empty() { slot.values.iter().collect() } else { fresh };
                    let value = *pool.choose(&mut rng).unwrap();
                    used.push((group, value));
                    let value_words: Vec<String> = value.split_whitespace().map(str::to_string).collect();
                    words.extend(value_words.iter().cloned());
                    entities.push(EntityAnnotation { label: label.to_string(), value: value_words });
                }
            }
        }
        out.push(Utterance {
            id: format!("synth{seed}-{i:05}"),
            audio: None,
            features: None,
            text: words.join(" "),
            frame: SemanticFrame::new(intent.intent.clone(), entities),
        });
    }
    Ok(out)
}

pub const TONE_MS: usize = 80;
pub const WORD_GAP_MS: usize = 40;
const TONE_AMPLITUDE: f32 = 0.3;
const NOISE_AMPLITUDE: f32 = 0.005;
const FADE_MS: usize = 5;

/// Fixed tone frequencies (Hz) that render `word`: two or three steps on a
/// 64-point log-spaced grid between 200 Hz and 4 kHz.
pub fn word_signature(word: &str) -> Vec<f32> {
    let d = digest(&[b"word", word.as_bytes()]);
    let n = 2 + (d[0] % 2) as usize;
    (0..n).map(|k| 200.0 * 20f32.powf((d[k + 1] % 64) as f32 / 63.0)).collect()
}

/// Renders a transcript as concatenated per-word tone sequences with low
/// noise seeded by `noise_seed`.
pub fn render_audio(text: &str, noise_seed: u64) -> AudioSignal {
    let sr = DEFAULT_SAMPLE_RATE as usize;
    let tone_len = sr * TONE_MS / 1000;
    let gap_len = sr * WORD_GAP_MS / 1000;
    let fade = sr * FADE_MS / 1000;
    let mut samples = vec![0.0f32; gap_len];
    for word in text.split_whitespace() {
        for f in word_signature(word) {
            let w = 2.0 * PI * f / sr as f32;
            samples.extend((0..tone_len).map(|t| {
                let env = (t.min(tone_len - 1 - t) as f32 / fade as f32).min(1.0);
                TONE_AMPLITUDE * env * (w * t as f32).sin()
            }));
        }
        samples.extend(std::iter::repeat_n(0.0, gap_len));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    for s in &mut samples {
        *s += rng.random_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
    }
    AudioSignal { samples, sample_rate: DEFAULT_SAMPLE_RATE }
}

/// Rendered audio of a synthetic utterance, noise keyed by its id.
pub fn synthesize(utt: &Utterance) -> AudioSignal {
    render_audio(&utt.text, seed_of(&[b"noise", utt.id.as_bytes()]))
}

/// Writes one WAV per utterance under `dir` and records relative paths.
pub fn write_corpus_audio(corpus: &mut [Utterance], dir: &Path) -> Result<(), CorpusError> {
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;
    for u in corpus {
        let rel = PathBuf::from("audio").join(format!("{}.wav", u.id));
        write_wav(&dir.join(&rel), &synthesize(u))?;
        u.audio = Some(rel);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ManifestEntity {
    label: String,
    value: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    #[serde(default)]
    audio: Option<PathBuf>,
    #[serde(default)]
    features: Option<PathBuf>,
    text: String,
    intent: String,
    #[serde(default)]
    entities: Vec<ManifestEntity>,
}

impl From<&Utterance> for ManifestLine {
    fn from(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            audio: u.audio.clone(),
            features: u.features.clone(),
            text: u.text.clone(),
            intent: u.frame.intent.clone(),
            entities: u
                .frame
                .entities
                .iter()
                .map(|e| ManifestEntity { label: e.label.clone(), value: e.value.join(" ") })
                .collect(),
        }
    }
}

pub fn manifest_line(u: &Utterance) -> String {
    serde_json::to_string(&ManifestLine::from(u)).expect("manifest line serializes")
}

pub fn save_manifest(corpus: &[Utterance], path: &Path) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for u in corpus {
        writeln!(f, "{}", manifest_line(u)).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestWarning {
    pub line: usize,
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub utterances: Vec<Utterance>,
    pub warnings: Vec<ManifestWarning>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Reads a JSONL manifest. With `strict`, an entity value absent from its
/// transcript is an error instead of a warning.
pub fn load_manifest(path: &Path, strict: bool) -> Result<Manifest, CorpusError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let at = |line: usize, message: String| CorpusError::Manifest { path: path.display().to_string(), line, message };
    let mut m = Manifest {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ..Default::default()
    };
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine = serde_json::from_str(&line).map_err(|e| at(n, e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(at(n, format!("duplicate id {:?}", rec.id)));
        }
        let entities = rec
            .entities
            .into_iter()
            .map(|e| EntityAnnotation { label: e.label, value: e.value.split_whitespace().map(str::to_string).collect() })
            .collect();
        let u = Utterance {
            id: rec.id,
            audio: rec.audio,
            features: rec.features,
            text: rec.text,
            frame: SemanticFrame::new(rec.intent, entities),
        };
        u.frame.validate().map_err(|e| at(n, e.to_string()))?;
        for v in u.missing_values() {
            let message = format!("entity value {v:?} not in transcript");
            if strict {
                return Err(at(n, message));
            }
            m.warnings.push(ManifestWarning { line: n, id: u.id.clone(), message });
        }
        m.utterances.push(u);
    }
    Ok(m)
}

fn factor_suffix(f: f32) -> String {
    format!("-sp{f}")
}

/// Expands every utterance into one copy per speed factor. Perturbed audio
/// is written under `out_dir`; factor 1.0 keeps the original file.
pub fn augment_speed(
    corpus: &[Utterance],
    base_dir: &Path,
    factors: &[f32],
    out_dir: &Path,
) -> Result<Vec<Utterance>, CorpusError> {
    if let Some(&f) = factors.iter().find(|f| !(**f > 0.0) || !f.is_finite()) {
        return Err(FeatureError::BadFactor(f).into());
    }
    let mut out = Vec::with_capacity(corpus.len() * factors.len());
    for u in corpus {
        let Some(audio) = &u.audio else {
            return Err(CorpusError::Utterance { id: u.id.clone(), message: "speed perturbation needs audio".into() });
        };
        let src = if audio.is_absolute() { audio.clone() } else { base_dir.join(audio) };
        let signal = if factors.iter().any(|&f| f != 1.0) { Some(load_resolved(&u.id, &src)?) } else { None };
        for &f in factors {
            let id = format!("{}{}", u.id, factor_suffix(f));
            let audio = if f == 1.0 {
                src.clone()
            } else {
                fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
                let p = out_dir.join(format!("{id}.wav"));
                write_wav(&p, &speed_perturb(signal.as_ref().unwrap(), f)?)?;
                p
            };
            out.push(Utterance { id, audio: Some(audio), features: None, ..u.clone() });
        }
    }
    Ok(out)
}

pub(crate) fn load_resolved(id: &str, path: &Path) -> Result<AudioSignal, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::Resolve { id: id.into(), path: path.display().to_string(), message: "not found".into() });
    }
    Ok(load_audio(path)?)
}

/// Deterministic split by hashed id: disjoint, order-independent.
pub fn split_corpus(corpus: &[Utterance], test_fraction: f64, seed: u64) -> (Vec<Utterance>, Vec<Utterance>) {
    let mut keyed: Vec<(u64, &Utterance)> =
        corpus.iter().map(|u| (seed_of(&[&seed.to_le_bytes(), u.id.as_bytes()]), u)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let n_test = ((corpus.len() as f64) * test_fraction).round() as usize;
    let test = keyed[..n_test].iter().map(|(_, u)| (*u).clone()).collect();
    let train = keyed[n_test..].iter().map(|(_, u)| (*u).clone()).collect();
    (train, test)
}
