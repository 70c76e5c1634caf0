//! Python bindings: codec, scorer, CTC, features, tokenizer and checkpoints.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use slu_core::bpe::{train_bpe, BpeVocab};
use slu_core::codec::{decode_iob, encode_iob, EntityAnnotation, LabelInventory, SemanticFrame};
use slu_core::corpus::{generate_corpus, load_manifest, SynthGrammar};
use slu_core::data::{prepare_examples, Vocabs};
use slu_core::evaluation::{score_report, Labeled};
use slu_core::features::{compute_filterbank, AudioSignal, FbankConfig, FeatureMatrix};
use slu_core::inference::{BeamConfig, DecodeRecord};
use slu_core::model::{MultiTaskModel, TaskId};
use slu_core::pipeline::decode_example;
use slu_core::trainer::load_checkpoint;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Entities = Vec<(String, String)>;

fn frame(intent: String, entities: Entities) -> SemanticFrame {
    let entities = entities
        .into_iter()
        .map(|(label, value)| EntityAnnotation { label, value: value.split_whitespace().map(str::to_string).collect() })
        .collect();
    SemanticFrame::new(intent, entities)
}

fn entities_of(f: &SemanticFrame) -> Entities {
    f.entities.iter().map(|e| (e.label.clone(), e.value.join(" "))).collect()
}

fn frame_dict<'py>(py: Python<'py>, f: &SemanticFrame) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("intent", &f.intent)?;
    d.set_item("entities", entities_of(f))?;
    Ok(d)
}

/// IOB token sequence of a frame; entities are `(label, value)` pairs.
#[pyfunction]
fn iob_encode(intent: String, entities: Entities) -> PyResult<Vec<String>> {
    encode_iob(&frame(intent, entities)).map_err(value_err)
}

/// Inverse of `iob_encode` as `(intent, entities, warnings)`.
#[pyfunction]
#[pyo3(signature = (tokens, labels = Vec::new()))]
fn iob_decode(tokens: Vec<String>, labels: Vec<String>) -> PyResult<(String, Entities, Vec<String>)> {
    let d = decode_iob(&tokens, &LabelInventory::new(&labels)).map_err(value_err)?;
    Ok((d.frame.intent.clone(), entities_of(&d.frame), d.warnings.iter().map(|w| w.to_string()).collect()))
}

type RefRow = (String, String, Entities);
type HypRow = (String, Option<String>, Entities);

/// Entity F1 and intent error rate. References are `(id, intent,
/// entities)`; a hypothesis intent of `None` means nothing was decoded.
#[pyfunction]
fn score<'py>(py: Python<'py>, refs: Vec<RefRow>, hyps: Vec<HypRow>) -> PyResult<Bound<'py, PyDict>> {
    let refs: Vec<Labeled> = refs.into_iter().map(|(id, i, e)| Labeled::new(id, Some(frame(i, e)))).collect();
    let hyps: Vec<Labeled> = hyps.into_iter().map(|(id, i, e)| Labeled::new(id, i.map(|i| frame(i, e)))).collect();
    let r = score_report(&refs, &hyps, false).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("f1", r.entities.f1)?;
    d.set_item("precision", r.entities.precision)?;
    d.set_item("recall", r.entities.recall)?;
    d.set_item("tp", r.entities.tp)?;
    d.set_item("fp", r.entities.fp)?;
    d.set_item("fn", r.entities.fn_)?;
    d.set_item("ier", r.intent.ier)?;
    d.set_item("intent_errors", r.intent.errors)?;
    Ok(d)
}

/// Negative log-likelihood of `target` under frame-wise log-probabilities.
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f64>>, target: Vec<u32>, blank: u32) -> PyResult<f64> {
    let classes = log_probs.first().map_or(0, Vec::len);
    if log_probs.iter().any(|r| r.len() != classes) {
        return Err(value_err("log_probs rows differ in length"));
    }
    let flat: Vec<f64> = log_probs.into_iter().flatten().collect();
    slu_core::model::ctc_loss(&flat, classes, &target, blank).map_err(value_err)
}

/// Synthetic flight-domain utterances as dicts.
#[pyfunction]
fn synth_corpus(py: Python<'_>, n: usize, seed: u64) -> PyResult<Vec<Bound<'_, PyDict>>> {
    let corpus = generate_corpus(&SynthGrammar::default(), n, seed).map_err(value_err)?;
    corpus
        .iter()
        .map(|u| {
            let d = frame_dict(py, &u.frame)?;
            d.set_item("id", &u.id)?;
            d.set_item("text", &u.text)?;
            Ok(d)
        })
        .collect()
}

fn rows(f: &FeatureMatrix) -> Vec<Vec<f32>> {
    (0..f.rows()).map(|i| f.row(i).to_vec()).collect()
}

/// Log-mel filterbank (plus pitch slots) of mono samples, one row per frame.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 16000))]
fn filterbank(samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<Vec<f32>>> {
    let audio = AudioSignal::new(samples, sample_rate).map_err(value_err)?;
    Ok(rows(&compute_filterbank(&audio, &FbankConfig::default()).map_err(value_err)?))
}

/// Byte-pair-encoding subword vocabulary.
#[pyclass(frozen)]
struct Tokenizer {
    inner: BpeVocab,
}

#[pymethods]
impl Tokenizer {
    #[staticmethod]
    #[pyo3(signature = (lines, vocab_size, atomic = Vec::new()))]
    fn train(lines: Vec<String>, vocab_size: usize, atomic: Vec<String>) -> PyResult<Self> {
        Ok(Self { inner: train_bpe(&lines, vocab_size, &atomic).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: BpeVocab::load(&path).map_err(value_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(value_err)
    }

    fn pieces(&self, ids: Vec<u32>) -> Vec<String> {
        self.inner.id_strings(&ids)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A trained checkpoint with its vocabularies.
#[pyclass(frozen)]
struct Model {
    model: MultiTaskModel,
    vocabs: Vocabs,
}

fn record_dict<'py>(py: Python<'py>, r: &DecodeRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("id", &r.id)?;
    d.set_item("text", &r.text)?;
    d.set_item("score", r.score)?;
    d.set_item("warnings", &r.warnings)?;
    match &r.frame {
        Some(f) => d.set_item("frame", frame_dict(py, f)?)?,
        None => d.set_item("frame", py.None())?,
    }
    Ok(d)
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(value_err)?;
        let vocabs = ck.vocabs.ok_or_else(|| value_err(format!("{}: checkpoint has no vocabularies", path.display())))?;
        Ok(Self { model: ck.model, vocabs })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.num_parameters()
    }

    /// Decodes every utterance of a manifest with task `s2ie`, `s2t` or `t2ie`.
    #[pyo3(signature = (manifest, task = "s2ie", beam_size = 4, max_len = 64, length_penalty = 0.6))]
    fn decode_manifest<'py>(
        &self,
        py: Python<'py>,
        manifest: PathBuf,
        task: &str,
        beam_size: usize,
        max_len: usize,
        length_penalty: f64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let task: TaskId = task.parse().map_err(value_err)?;
        let m = load_manifest(&manifest, false).map_err(value_err)?;
        let ex = prepare_examples(&m.utterances, &self.vocabs, Some(&m), task.is_speech()).map_err(value_err)?;
        let cfg = BeamConfig { beam_size, max_len, length_penalty };
        ex.iter()
            .map(|e| {
                let r = decode_example(&[&self.model], task, e, &self.vocabs, &cfg)
                    .map_err(|err| PyRuntimeError::new_err(err.to_string()))?;
                record_dict(py, &r)
            })
            .collect()
    }
}

#[pymodule]
fn slu(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iob_encode, m)?)?;
    m.add_function(wrap_pyfunction!(iob_decode, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(filterbank, m)?)?;
    m.add_class::<Tokenizer>()?;
    m.add_class::<Model>()?;
    Ok(())
}
