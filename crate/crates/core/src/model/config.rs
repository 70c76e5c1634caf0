use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::features::FBANK_DIM;

/// One of the three sequence-to-sequence tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    S2ie,
    S2t,
    T2ie,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::S2ie, TaskId::S2t, TaskId::T2ie];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::S2ie => "s2ie",
            TaskId::S2t => "s2t",
            TaskId::T2ie => "t2ie",
        }
    }

    pub fn is_speech(self) -> bool {
        !matches!(self, TaskId::T2ie)
    }

    pub fn encoder(self) -> Component {
        if self.is_speech() {
            Component::SpeechEncoder
        } else {
            Component::TextEncoder
        }
    }

    pub fn decoder(self) -> Component {
        match self {
            TaskId::S2t => Component::TextDecoder,
            _ => Component::SemanticDecoder,
        }
    }

    /// CTC head on the speech encoder predicting this task's output stream.
    pub fn ctc_head(self) -> Option<Component> {
        match self {
            TaskId::S2ie => Some(Component::CtcSemantic),
            TaskId::S2t => Some(Component::CtcText),
            TaskId::T2ie => None,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s2ie" => Ok(TaskId::S2ie),
            "s2t" => Ok(TaskId::S2t),
            "t2ie" => Ok(TaskId::T2ie),
            other => Err(ModelError::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Independently stored parameter blocks. Tasks share blocks, never copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    SpeechEncoder,
    TextEncoder,
    SemanticDecoder,
    TextDecoder,
    CtcSemantic,
    CtcText,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::SpeechEncoder,
        Component::TextEncoder,
        Component::SemanticDecoder,
        Component::TextDecoder,
        Component::CtcSemantic,
        Component::CtcText,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::SpeechEncoder => "speech_encoder",
            Component::TextEncoder => "text_encoder",
            Component::SemanticDecoder => "semantic_decoder",
            Component::TextDecoder => "text_decoder",
            Component::CtcSemantic => "ctc_semantic",
            Component::CtcText => "ctc_text",
        }
    }

    pub fn of_param(name: &str) -> Option<Component> {
        let head = name.split('.').next()?;
        Component::ALL.into_iter().find(|c| c.prefix() == head)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

impl FromStr for Component {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Component::ALL
            .into_iter()
            .find(|c| c.prefix() == s.trim())
            .ok_or_else(|| ModelError::Config(format!("unknown component {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputLayer {
    /// Two kernel-3, stride-2 convolutions with ReLU, then a linear map.
    Conv2dSubsample,
    /// A single linear map at the input frame rate.
    Embed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_units: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub dropout: f32,
    /// Width of the ingested feature matrices.
    pub input_dim: usize,
    /// Output width of a trainable linear+ReLU projection applied to the
    /// features before the input layer.
    pub feature_projection: Option<usize>,
    pub input_layer: InputLayer,
    pub conv_channels: usize,
    pub semantic_vocab: usize,
    pub text_vocab: usize,
    pub ctc_weight: f32,
    pub ctc_s2ie: bool,
    pub ctc_s2t: bool,
    /// Longest decoder input, bos included.
    pub max_target_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            ff_units: 256,
            attn_dim: 64,
            heads: 4,
            dropout: 0.1,
            input_dim: FBANK_DIM,
            feature_projection: None,
            input_layer: InputLayer::Conv2dSubsample,
            conv_channels: 16,
            semantic_vocab: 512,
            text_vocab: 512,
            ctc_weight: 0.5,
            ctc_s2ie: true,
            ctc_s2t: true,
            max_target_len: 128,
        }
    }

    pub fn base() -> Self {
        Self {
            enc_layers: 8,
            dec_layers: 4,
            ff_units: 2048,
            attn_dim: 256,
            heads: 4,
            conv_channels: 256,
            max_target_len: 256,
            ..Self::toy()
        }
    }

    pub fn large() -> Self {
        Self { enc_layers: 12, dec_layers: 6, attn_dim: 512, heads: 8, conv_channels: 512, ..Self::base() }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "toy" => Ok(Self::toy()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            other => Err(ModelError::Config(format!("unknown preset {other:?} (toy, base, large)"))),
        }
    }

    /// Width seen by the input layer.
    pub fn speech_dim(&self) -> usize {
        self.feature_projection.unwrap_or(self.input_dim)
    }

    pub fn ctc_enabled(&self, task: TaskId) -> bool {
        match task {
            TaskId::S2ie => self.ctc_s2ie,
            TaskId::S2t => self.ctc_s2t,
            TaskId::T2ie => false,
        }
    }

    pub fn output_vocab(&self, task: TaskId) -> usize {
        match task.decoder() {
            Component::TextDecoder => self.text_vocab,
            _ => self.semantic_vocab,
        }
    }

    /// Frames after subsampling, or `None` if the input is too short.
    pub fn subsampled_len(&self, frames: usize) -> Option<usize> {
        match self.input_layer {
            InputLayer::Embed => (frames >= 1).then_some(frames),
            InputLayer::Conv2dSubsample => conv_out(frames).and_then(conv_out),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.heads == 0 || self.attn_dim == 0 || self.attn_dim % self.heads != 0 {
            return bad(format!("attn_dim {} not divisible by {} heads", self.attn_dim, self.heads));
        }
        if self.ff_units == 0 || self.input_dim == 0 || self.conv_channels == 0 {
            return bad("ff_units, input_dim and conv_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return bad(format!("ctc_weight {} outside [0, 1]", self.ctc_weight));
        }
        if self.semantic_vocab < 5 || self.text_vocab < 5 {
            return bad("vocabularies need the control tokens plus at least one piece".into());
        }
        if self.max_target_len < 2 {
            return bad("max_target_len must be at least 2".into());
        }
        if self.feature_projection == Some(0) {
            return bad("feature_projection width must be positive".into());
        }
        if self.input_layer == InputLayer::Conv2dSubsample && self.subsampled_len(self.speech_dim()).is_none() {
            return bad(format!("feature width {} too narrow for two conv stages", self.speech_dim()));
        }
        Ok(())
    }
}

pub(crate) const CONV_KERNEL: usize = 3;
pub(crate) const CONV_STRIDE: usize = 2;

fn conv_out(len: usize) -> Option<usize> {
    (len >= CONV_KERNEL).then(|| (len - CONV_KERNEL) / CONV_STRIDE + 1)
}
