use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, TrainConfig, TrainError, Trainer};
use crate::data::Vocabs;
use crate::model::{layout, ModelConfig, ModelError, MultiTaskModel};
use crate::numeric::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamIndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the parameter blob.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabHashes {
    pub semantic: String,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub epoch: u64,
    pub best_val: Option<f64>,
    pub bad_epochs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub vocab_hashes: Option<VocabHashes>,
    pub params: Vec<ParamIndexEntry>,
    pub params_sha256: String,
    pub train_config: Option<TrainConfig>,
    pub trainer: Option<TrainerState>,
    pub optimizer_sha256: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: MultiTaskModel,
    pub vocabs: Option<Vocabs>,
    pub optimizer: Option<AdamState>,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Writes meta.json and params.bin, plus the vocabularies and the
/// optimizer state when given.
pub fn save_checkpoint(
    dir: &Path,
    model: &MultiTaskModel,
    vocabs: Option<&Vocabs>,
    training: Option<(&TrainConfig, &AdamState, &TrainerState)>,
) -> Result<CheckpointMeta, TrainError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut blob = Vec::with_capacity(model.params().num_elements() * 4);
    let mut index = Vec::with_capacity(model.params().len());
    for (_, e) in model.params().iter() {
        index.push(ParamIndexEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
            trainable: e.trainable,
        });
        push_f32s(&mut blob, e.value.data());
    }
    let mut optimizer_sha256 = None;
    if let Some((_, adam, _)) = training {
        let mut ob = Vec::new();
        for m in adam.m.iter().chain(&adam.v) {
            push_f32s(&mut ob, m);
        }
        optimizer_sha256 = Some(sha_hex(&ob));
        let p = dir.join(OPTIMIZER_FILE);
        fs::write(&p, &ob).map_err(io(&p))?;
    }
    if let Some(v) = vocabs {
        v.save(dir)?;
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model_config: model.config().clone(),
        vocab_hashes: vocabs.map(|v| VocabHashes { semantic: v.semantic.fingerprint(), text: v.text.fingerprint() }),
        params: index,
        params_sha256: sha_hex(&blob),
        train_config: training.map(|(c, _, _)| c.clone()),
        trainer: training.map(|(_, adam, s)| TrainerState { step: adam.step, ..s.clone() }),
        optimizer_sha256,
    };
    let p = dir.join(PARAMS_FILE);
    fs::write(&p, &blob).map_err(io(&p))?;
    let p = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    fs::write(&p, json + "\n").map_err(io(&p))?;
    Ok(meta)
}

fn corrupt(m: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(m.into())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    let p = dir.join(META_FILE);
    let raw = fs::read_to_string(&p).map_err(io(&p))?;
    let value: serde_json::Value = serde_json::from_str(&raw).map_err(|e| corrupt(format!("meta.json: {e}")))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(corrupt(format!("unsupported format version {v} (expected {FORMAT_VERSION})"))),
        None => return Err(corrupt("meta.json lacks format_version")),
    }
    let meta: CheckpointMeta = serde_json::from_value(value).map_err(|e| corrupt(format!("meta.json: {e}")))?;
    meta.model_config.validate()?;
    let specs = layout(&meta.model_config);
    let mut offset = 0u64;
    for (i, e) in meta.params.iter().enumerate() {
        let bad = |message: String| TrainError::Param { name: e.name.clone(), message };
        let Some(spec) = specs.get(i) else {
            return Err(bad("not part of the configured model".into()));
        };
        if spec.name != e.name {
            return Err(bad(format!("expected {} at index {i}", spec.name)));
        }
        if spec.shape != e.shape {
            return Err(bad(format!("shape {:?} does not match config shape {:?}", e.shape, spec.shape)));
        }
        if e.dtype != "f32" {
            return Err(bad(format!("unsupported dtype {:?}", e.dtype)));
        }
        if e.offset != offset {
            return Err(bad(format!("offset {} but expected {offset}", e.offset)));
        }
        if e.trainable != spec.trainable {
            return Err(bad("trainable flag disagrees with config".into()));
        }
        offset += 4 * spec.numel() as u64;
    }
    if let Some(missing) = specs.get(meta.params.len()) {
        return Err(TrainError::Param { name: missing.name.clone(), message: "missing from checkpoint".into() });
    }
    let p = dir.join(PARAMS_FILE);
    let blob = fs::read(&p).map_err(io(&p))?;
    if blob.len() as u64 != offset {
        return Err(corrupt(format!("params.bin has {} bytes, index requires {offset}", blob.len())));
    }
    if sha_hex(&blob) != meta.params_sha256 {
        return Err(corrupt("params.bin checksum mismatch"));
    }
    let mut store = ParamStore::new();
    for e in &meta.params {
        let start = e.offset as usize;
        let n: usize = e.shape.iter().product();
        let data = read_f32s(&blob[start..start + 4 * n]);
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data).map_err(ModelError::from)?, e.trainable).map_err(|err| {
            TrainError::Param { name: e.name.clone(), message: err.to_string() }
        })?;
    }
    let model = MultiTaskModel::from_params(meta.model_config.clone(), store)?;

    let vocabs = match &meta.vocab_hashes {
        None => None,
        Some(h) => {
            let v = Vocabs::load(dir)?;
            if v.semantic.fingerprint() != h.semantic || v.text.fingerprint() != h.text {
                return Err(corrupt("vocabulary files do not match the recorded hashes"));
            }
            Some(v)
        }
    };

    let optimizer = match (&meta.trainer, &meta.optimizer_sha256) {
        (Some(state), Some(sha)) => {
            let p = dir.join(OPTIMIZER_FILE);
            let bytes = fs::read(&p).map_err(io(&p))?;
            if &sha_hex(&bytes) != sha {
                return Err(corrupt("optimizer.bin checksum mismatch"));
            }
            let sizes: Vec<usize> =
                meta.params.iter().map(|e| if e.trainable { e.shape.iter().product() } else { 0 }).collect();
            let total: usize = sizes.iter().sum();
            if bytes.len() != 8 * total {
                return Err(corrupt(format!("optimizer.bin has {} bytes, expected {}", bytes.len(), 8 * total)));
            }
            let all = read_f32s(&bytes);
            let mut at = 0;
            let mut take = |n: usize| {
                let v = all[at..at + n].to_vec();
                at += n;
                v
            };
            let m = sizes.iter().map(|&n| take(n)).collect();
            let v = sizes.iter().map(|&n| take(n)).collect();
            Some(AdamState { step: state.step, m, v })
        }
        _ => None,
    };
    Ok(Checkpoint { meta, model, vocabs, optimizer })
}

impl Trainer {
    /// Saves the model with optimizer state and progress so training can
    /// resume exactly.
    pub fn save(&self, dir: &Path, vocabs: Option<&Vocabs>) -> Result<CheckpointMeta, TrainError> {
        save_checkpoint(dir, &self.model, vocabs, Some((&self.config, &self.adam, &self.state)))
    }
}
