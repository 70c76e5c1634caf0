//! Transformer encoders and decoders wired into three tied tasks.
//!
//! The speech encoder serves both speech tasks and the semantic decoder
//! serves both semantic tasks. Each block lives once in the parameter store,
//! so sharing is by [`ParamId`], never by copy.

mod config;
pub mod ctc;
mod layout;
mod network;

pub use config::{Component, InputLayer, ModelConfig, TaskId};
pub use ctc::{ctc_loss, ctc_loss_from_logits, min_frames};
pub use layout::{buffer_count, layout, param_count, Init, ParamSpec};
pub use network::{positional_encoding, Dropout, ModelInput, TaskLoss};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numeric::{ParamId, ParamStore, Tensor, TensorError};
use network::Ids;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("task {task} expects {expected} input")]
    Modality { task: TaskId, expected: &'static str },
    #[error("feature width {got} does not match configured input_dim {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("{frames} frames is too short for the input layer")]
    TooShort { frames: usize },
    #[error("target prefix of length {len} exceeds max_target_len {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("decoder prefix must start with bos")]
    MissingBos,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("CTC target needs {needed} frames but the encoder produced {frames}")]
    CtcInfeasible { frames: usize, needed: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("parameter {name}: {message}")]
    Param { name: String, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Interpolated speech-task loss `w·ctc + (1−w)·ce`.
pub fn hybrid_loss(ctc_weight: f32, ctc: f32, ce: f32) -> f32 {
    ctc_weight * ctc + (1.0 - ctc_weight) * ce
}

/// All parameters of the multi-task network plus the handles into them.
#[derive(Clone, Debug)]
pub struct MultiTaskModel {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
}

impl MultiTaskModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in layout(&config) {
            let n = spec.numel();
            let data = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.add(spec.name, Tensor::new(spec.shape, data)?, spec.trainable)?;
        }
        let ids = Ids::resolve(&config, &params);
        Ok(Self { config, params, ids })
    }

    /// Rebuilds a model from stored parameters, checking names, shapes and
    /// order against the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != params.len() {
            return Err(ModelError::Param {
                name: "<store>".into(),
                message: format!("expected {} tensors, found {}", specs.len(), params.len()),
            });
        }
        for (spec, (_, entry)) in specs.iter().zip(params.iter()) {
            if spec.name != entry.name {
                return Err(ModelError::Param { name: entry.name.clone(), message: format!("expected {}", spec.name) });
            }
            if spec.shape != entry.value.shape() {
                return Err(ModelError::Param {
                    name: spec.name.clone(),
                    message: format!("shape {:?} does not match config shape {:?}", entry.value.shape(), spec.shape),
                });
            }
        }
        let ids = Ids::resolve(&config, &params);
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().filter(|(_, e)| e.trainable).map(|(_, e)| e.value.numel()).sum()
    }

    pub fn component_params(&self, component: Component) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, e)| Component::of_param(&e.name) == Some(component))
            .map(|(id, _)| id)
            .collect()
    }

    /// Parameters a task reads: its encoder, decoder and, when enabled, its
    /// CTC head.
    pub fn task_params(&self, task: TaskId) -> Vec<ParamId> {
        let mut ids = self.component_params(task.encoder());
        ids.extend(self.component_params(task.decoder()));
        if let (true, Some(head)) = (self.config.ctc_enabled(task), task.ctc_head()) {
            ids.extend(self.component_params(head));
        }
        ids
    }

    /// Sets the global mean/variance normalization applied to speech features.
    pub fn set_cmvn(&mut self, mean: &[f32], std: &[f32]) -> Result<(), ModelError> {
        let d = self.config.input_dim;
        if mean.len() != d || std.len() != d {
            return Err(ModelError::InputDim { expected: d, got: mean.len().max(std.len()) });
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(ModelError::NonFinite("cmvn statistics".into()));
        }
        self.params.value_mut(self.ids.cmvn_mean).data_mut().copy_from_slice(mean);
        self.params.value_mut(self.ids.cmvn_std).data_mut().copy_from_slice(std);
        Ok(())
    }
}
