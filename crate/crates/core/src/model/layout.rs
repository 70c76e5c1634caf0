use serde::{Deserialize, Serialize};

use super::config::{InputLayer, ModelConfig, CONV_KERNEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform on ±1/√fan_in.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Builder(Vec<ParamSpec>);

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) {
        self.0.push(ParamSpec { name, shape, init, trainable });
    }

    fn linear(&mut self, p: &str, fan_in: usize, out: usize) {
        self.push(format!("{p}.weight"), vec![fan_in, out], Init::Uniform { fan_in }, true);
        self.push(format!("{p}.bias"), vec![out], Init::Uniform { fan_in }, true);
    }

    fn norm(&mut self, p: &str, d: usize) {
        self.push(format!("{p}.gain"), vec![d], Init::Ones, true);
        self.push(format!("{p}.bias"), vec![d], Init::Zeros, true);
    }

    fn attention(&mut self, p: &str, d: usize) {
        for proj in ["query", "key", "value", "out"] {
            self.linear(&format!("{p}.{proj}"), d, d);
        }
    }

    fn feed_forward(&mut self, p: &str, d: usize, ff: usize) {
        self.linear(&format!("{p}.ff1"), d, ff);
        self.linear(&format!("{p}.ff2"), ff, d);
    }

    fn encoder_stack(&mut self, p: &str, c: &ModelConfig) {
        let d = c.attn_dim;
        for i in 0..c.enc_layers {
            let l = format!("{p}.layers.{i}");
            self.norm(&format!("{l}.norm1"), d);
            self.attention(&format!("{l}.self_attn"), d);
            self.norm(&format!("{l}.norm2"), d);
            self.feed_forward(&l, d, c.ff_units);
        }
        self.norm(&format!("{p}.final_norm"), d);
    }

    fn decoder(&mut self, p: &str, c: &ModelConfig, vocab: usize) {
        let d = c.attn_dim;
        self.push(format!("{p}.embed.weight"), vec![vocab, d], Init::Uniform { fan_in: d }, true);
        for i in 0..c.dec_layers {
            let l = format!("{p}.layers.{i}");
            self.norm(&format!("{l}.norm1"), d);
            self.attention(&format!("{l}.self_attn"), d);
            self.norm(&format!("{l}.norm2"), d);
            self.attention(&format!("{l}.src_attn"), d);
            self.norm(&format!("{l}.norm3"), d);
            self.feed_forward(&l, d, c.ff_units);
        }
        self.norm(&format!("{p}.final_norm"), d);
        self.linear(&format!("{p}.output"), d, vocab);
    }
}

/// Every parameter and buffer of a model built from `c`, in storage order.
pub fn layout(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut b = Builder(Vec::new());
    let d = c.attn_dim;
    let se = "speech_encoder";
    b.push(format!("{se}.cmvn.mean"), vec![c.input_dim], Init::Zeros, false);
    b.push(format!("{se}.cmvn.std"), vec![c.input_dim], Init::Ones, false);
    if let Some(w) = c.feature_projection {
        b.linear(&format!("{se}.projection"), c.input_dim, w);
    }
    let width = c.speech_dim();
    match c.input_layer {
        InputLayer::Conv2dSubsample => {
            let ch = c.conv_channels;
            let kk = CONV_KERNEL * CONV_KERNEL;
            b.linear(&format!("{se}.subsample.conv1"), kk, ch);
            b.linear(&format!("{se}.subsample.conv2"), kk * ch, ch);
            let reduced = c.subsampled_len(width).unwrap_or(0);
            b.linear(&format!("{se}.subsample.out"), reduced * ch, d);
        }
        InputLayer::Embed => b.linear(&format!("{se}.input"), width, d),
    }
    b.encoder_stack(se, c);

    b.push("text_encoder.embed.weight".into(), vec![c.text_vocab, d], Init::Uniform { fan_in: d }, true);
    b.encoder_stack("text_encoder", c);
    b.decoder("semantic_decoder", c, c.semantic_vocab);
    b.decoder("text_decoder", c, c.text_vocab);
    b.linear("ctc_semantic", d, c.semantic_vocab + 1);
    b.linear("ctc_text", d, c.text_vocab + 1);
    b.0
}

/// Trainable scalar count.
pub fn param_count(c: &ModelConfig) -> usize {
    layout(c).iter().filter(|p| p.trainable).map(ParamSpec::numel).sum()
}

/// Scalars held in non-trainable buffers.
pub fn buffer_count(c: &ModelConfig) -> usize {
    layout(c).iter().filter(|p| !p.trainable).map(ParamSpec::numel).sum()
}
