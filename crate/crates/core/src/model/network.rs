use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{InputLayer, ModelConfig, TaskId, CONV_KERNEL, CONV_STRIDE};
use super::{ctc, Component, ModelError, MultiTaskModel};
use crate::bpe::BOS_ID;
use crate::features::FeatureMatrix;
use crate::numeric::{smoothed_cross_entropy, AttnMask, ConvGeom, Graph, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct EncLayer {
    norm1: Norm,
    attn: Attn,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct DecLayer {
    norm1: Norm,
    self_attn: Attn,
    norm2: Norm,
    src_attn: Attn,
    norm3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct EncoderStack {
    layers: Vec<EncLayer>,
    final_norm: Norm,
}

#[derive(Clone, Debug)]
enum SpeechInput {
    Conv { conv1: Linear, conv2: Linear, out: Linear },
    Linear(Linear),
}

#[derive(Clone, Debug)]
struct Decoder {
    embed: ParamId,
    layers: Vec<DecLayer>,
    final_norm: Norm,
    output: Linear,
    vocab: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Ids {
    pub(crate) cmvn_mean: ParamId,
    pub(crate) cmvn_std: ParamId,
    projection: Option<Linear>,
    speech_input: SpeechInput,
    speech_stack: EncoderStack,
    text_embed: ParamId,
    text_stack: EncoderStack,
    semantic_decoder: Decoder,
    text_decoder: Decoder,
    ctc_semantic: Linear,
    ctc_text: Linear,
}

struct Lookup<'a>(&'a ParamStore);

impl Lookup<'_> {
    fn id(&self, name: &str) -> ParamId {
        self.0.id(name).unwrap_or_else(|| panic!("layout is missing {name}"))
    }

    fn linear(&self, p: &str) -> Linear {
        Linear { w: self.id(&format!("{p}.weight")), b: self.id(&format!("{p}.bias")) }
    }

    fn norm(&self, p: &str) -> Norm {
        Norm { g: self.id(&format!("{p}.gain")), b: self.id(&format!("{p}.bias")) }
    }

    fn attn(&self, p: &str) -> Attn {
        Attn {
            q: self.linear(&format!("{p}.query")),
            k: self.linear(&format!("{p}.key")),
            v: self.linear(&format!("{p}.value")),
            o: self.linear(&format!("{p}.out")),
        }
    }

    fn stack(&self, p: &str, n: usize) -> EncoderStack {
        let layers = (0..n)
            .map(|i| {
                let l = format!("{p}.layers.{i}");
                EncLayer {
                    norm1: self.norm(&format!("{l}.norm1")),
                    attn: self.attn(&format!("{l}.self_attn")),
                    norm2: self.norm(&format!("{l}.norm2")),
                    ff1: self.linear(&format!("{l}.ff1")),
                    ff2: self.linear(&format!("{l}.ff2")),
                }
            })
            .collect();
        EncoderStack { layers, final_norm: self.norm(&format!("{p}.final_norm")) }
    }

    fn decoder(&self, p: &str, n: usize, vocab: usize) -> Decoder {
        let layers = (0..n)
            .map(|i| {
                let l = format!("{p}.layers.{i}");
                DecLayer {
                    norm1: self.norm(&format!("{l}.norm1")),
                    self_attn: self.attn(&format!("{l}.self_attn")),
                    norm2: self.norm(&format!("{l}.norm2")),
                    src_attn: self.attn(&format!("{l}.src_attn")),
                    norm3: self.norm(&format!("{l}.norm3")),
                    ff1: self.linear(&format!("{l}.ff1")),
                    ff2: self.linear(&format!("{l}.ff2")),
                }
            })
            .collect();
        Decoder {
            embed: self.id(&format!("{p}.embed.weight")),
            layers,
            final_norm: self.norm(&format!("{p}.final_norm")),
            output: self.linear(&format!("{p}.output")),
            vocab,
        }
    }
}

impl Ids {
    pub(crate) fn resolve(c: &ModelConfig, store: &ParamStore) -> Self {
        let l = Lookup(store);
        let speech_input = match c.input_layer {
            InputLayer::Conv2dSubsample => SpeechInput::Conv {
                conv1: l.linear("speech_encoder.subsample.conv1"),
                conv2: l.linear("speech_encoder.subsample.conv2"),
                out: l.linear("speech_encoder.subsample.out"),
            },
            InputLayer::Embed => SpeechInput::Linear(l.linear("speech_encoder.input")),
        };
        Self {
            cmvn_mean: l.id("speech_encoder.cmvn.mean"),
            cmvn_std: l.id("speech_encoder.cmvn.std"),
            projection: c.feature_projection.map(|_| l.linear("speech_encoder.projection")),
            speech_input,
            speech_stack: l.stack("speech_encoder", c.enc_layers),
            text_embed: l.id("text_encoder.embed.weight"),
            text_stack: l.stack("text_encoder", c.enc_layers),
            semantic_decoder: l.decoder("semantic_decoder", c.dec_layers, c.semantic_vocab),
            text_decoder: l.decoder("text_decoder", c.dec_layers, c.text_vocab),
            ctc_semantic: l.linear("ctc_semantic"),
            ctc_text: l.linear("ctc_text"),
        }
    }
}

/// Seeded dropout source. [`Dropout::off`] makes every forward pass exact.
#[derive(Clone, Debug)]
pub struct Dropout {
    p: f32,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn seeded(p: f32, seed: u64) -> Self {
        if p > 0.0 {
            Self { p, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
        } else {
            Self::off()
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        match &mut self.rng {
            Some(rng) => Ok(g.tape.dropout(x, self.p, rng)?),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Features(&'a FeatureMatrix),
    Tokens(&'a [u32]),
}

/// Per-task loss node and the values of its parts.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    pub loss: Var,
    pub value: f32,
    pub ce: f32,
    pub ctc: Option<f32>,
    /// The same loss carried in `f64` from the logits onward.
    pub exact: f64,
}

/// Sinusoidal positional encodings `[len × d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0f32; len * d];
    for t in 0..len {
        for i in (0..d).step_by(2) {
            let angle = t as f64 / 10000f64.powf(i as f64 / d as f64);
            data[t * d + i] = angle.sin() as f32;
            if i + 1 < d {
                data[t * d + i + 1] = angle.cos() as f32;
            }
        }
    }
    Tensor::new(vec![len, d], data).expect("positional encoding shape")
}

fn linear(g: &mut Graph, x: Var, l: Linear) -> Result<Var, ModelError> {
    let (w, b) = (g.param(l.w), g.param(l.b));
    Ok(g.tape.linear(x, w, b)?)
}

fn norm(g: &mut Graph, x: Var, n: Norm) -> Result<Var, ModelError> {
    let (gain, bias) = (g.param(n.g), g.param(n.b));
    Ok(g.tape.layer_norm(x, gain, bias, LN_EPS)?)
}

fn attention(g: &mut Graph, x: Var, kv: Var, a: &Attn, heads: usize, mask: AttnMask) -> Result<Var, ModelError> {
    let q = linear(g, x, a.q)?;
    let k = linear(g, kv, a.k)?;
    let v = linear(g, kv, a.v)?;
    let ctx = g.tape.attention(q, k, v, heads, mask)?;
    linear(g, ctx, a.o)
}

fn feed_forward(g: &mut Graph, x: Var, ff1: Linear, ff2: Linear) -> Result<Var, ModelError> {
    let h = linear(g, x, ff1)?;
    let h = g.tape.relu(h);
    linear(g, h, ff2)
}

fn residual(g: &mut Graph, x: Var, branch: Var, drop: &mut Dropout) -> Result<Var, ModelError> {
    let branch = drop.apply(g, branch)?;
    Ok(g.tape.add(x, branch)?)
}

/// Scales by √d, adds positional encodings, applies dropout.
fn embed_positions(g: &mut Graph, x: Var, d: usize, drop: &mut Dropout) -> Result<Var, ModelError> {
    let len = g.tape.shape(x)[0];
    let scaled = g.tape.scale(x, (d as f32).sqrt());
    let pe = g.input(positional_encoding(len, d));
    let x = g.tape.add(scaled, pe)?;
    drop.apply(g, x)
}

fn run_encoder(g: &mut Graph, mut x: Var, s: &EncoderStack, heads: usize, drop: &mut Dropout) -> Result<Var, ModelError> {
    for l in &s.layers {
        let h = norm(g, x, l.norm1)?;
        let h = attention(g, h, h, &l.attn, heads, AttnMask::None)?;
        x = residual(g, x, h, drop)?;
        let h = norm(g, x, l.norm2)?;
        let h = feed_forward(g, h, l.ff1, l.ff2)?;
        x = residual(g, x, h, drop)?;
    }
    norm(g, x, s.final_norm)
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<(), ModelError> {
    match ids.iter().find(|&&id| id as usize >= vocab) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

impl MultiTaskModel {
    fn decoder_for(&self, task: TaskId) -> &Decoder {
        match task.decoder() {
            Component::TextDecoder => &self.ids.text_decoder,
            _ => &self.ids.semantic_decoder,
        }
    }

    /// Normalized (and optionally projected) features, before the input layer.
    fn speech_frontend(&self, g: &mut Graph, feats: &FeatureMatrix) -> Result<Var, ModelError> {
        let c = &self.config;
        if feats.cols() != c.input_dim {
            return Err(ModelError::InputDim { expected: c.input_dim, got: feats.cols() });
        }
        let mean = self.params.value(self.ids.cmvn_mean).data();
        let std = self.params.value(self.ids.cmvn_std).data();
        let mut data = feats.data().to_vec();
        for row in data.chunks_mut(c.input_dim) {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
                *v = (*v - m) / s;
            }
        }
        let x = g.input(Tensor::new(vec![feats.rows(), c.input_dim], data)?);
        match self.ids.projection {
            Some(p) => {
                let h = linear(g, x, p)?;
                Ok(g.tape.relu(h))
            }
            None => Ok(x),
        }
    }

    /// The input layer alone: features to `[T' × attn_dim]` before positional
    /// encoding.
    pub fn subsample(&self, g: &mut Graph, feats: &FeatureMatrix) -> Result<Var, ModelError> {
        let c = &self.config;
        let frames = feats.rows();
        if c.subsampled_len(frames).is_none() {
            return Err(ModelError::TooShort { frames });
        }
        let x = self.speech_frontend(g, feats)?;
        match &self.ids.speech_input {
            SpeechInput::Linear(l) => linear(g, x, *l),
            SpeechInput::Conv { conv1, conv2, out } => {
                let geom = ConvGeom { kernel: CONV_KERNEL, stride: CONV_STRIDE };
                let width = c.speech_dim();
                let x = g.tape.reshape(x, vec![frames, width, 1])?;
                let (w1, b1) = (g.param(conv1.w), g.param(conv1.b));
                let h = g.tape.conv2d(x, w1, b1, geom)?;
                let h = g.tape.relu(h);
                let (w2, b2) = (g.param(conv2.w), g.param(conv2.b));
                let h = g.tape.conv2d(h, w2, b2, geom)?;
                let h = g.tape.relu(h);
                let shape = g.tape.shape(h).to_vec();
                let h = g.tape.reshape(h, vec![shape[0], shape[1] * shape[2]])?;
                linear(g, h, *out)
            }
        }
    }

    pub fn encode_speech(&self, g: &mut Graph, feats: &FeatureMatrix, drop: &mut Dropout) -> Result<Var, ModelError> {
        let x = self.subsample(g, feats)?;
        let x = embed_positions(g, x, self.config.attn_dim, drop)?;
        run_encoder(g, x, &self.ids.speech_stack, self.config.heads, drop)
    }

    pub fn encode_text(&self, g: &mut Graph, ids: &[u32], drop: &mut Dropout) -> Result<Var, ModelError> {
        check_ids(ids, self.config.text_vocab)?;
        let table = g.param(self.ids.text_embed);
        let x = g.tape.embedding(table, ids)?;
        let x = embed_positions(g, x, self.config.attn_dim, drop)?;
        run_encoder(g, x, &self.ids.text_stack, self.config.heads, drop)
    }

    /// Encoder memory for `task`.
    pub fn encode(&self, g: &mut Graph, task: TaskId, input: ModelInput, drop: &mut Dropout) -> Result<Var, ModelError> {
        match (task.is_speech(), input) {
            (true, ModelInput::Features(f)) => self.encode_speech(g, f, drop),
            (false, ModelInput::Tokens(t)) => self.encode_text(g, t, drop),
            (true, _) => Err(ModelError::Modality { task, expected: "feature" }),
            (false, _) => Err(ModelError::Modality { task, expected: "token" }),
        }
    }

    /// Next-token logits `[len(prefix) × V]` with causal self-attention.
    pub fn decode_logits(
        &self,
        g: &mut Graph,
        task: TaskId,
        memory: Var,
        prefix: &[u32],
        drop: &mut Dropout,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        if prefix.first() != Some(&BOS_ID) {
            return Err(ModelError::MissingBos);
        }
        if prefix.len() > c.max_target_len {
            return Err(ModelError::TargetTooLong { len: prefix.len(), max: c.max_target_len });
        }
        let dec = self.decoder_for(task);
        check_ids(prefix, dec.vocab)?;
        let table = g.param(dec.embed);
        let x = g.tape.embedding(table, prefix)?;
        let mut x = embed_positions(g, x, c.attn_dim, drop)?;
        for l in &dec.layers {
            let h = norm(g, x, l.norm1)?;
            let h = attention(g, h, h, &l.self_attn, c.heads, AttnMask::Causal)?;
            x = residual(g, x, h, drop)?;
            let h = norm(g, x, l.norm2)?;
            let h = attention(g, h, memory, &l.src_attn, c.heads, AttnMask::None)?;
            x = residual(g, x, h, drop)?;
            let h = norm(g, x, l.norm3)?;
            let h = feed_forward(g, h, l.ff1, l.ff2)?;
            x = residual(g, x, h, drop)?;
        }
        let x = norm(g, x, dec.final_norm)?;
        linear(g, x, dec.output)
    }

    /// CTC logits `[T' × (V+1)]` over the speech memory; the last class is blank.
    pub fn ctc_logits(&self, g: &mut Graph, task: TaskId, memory: Var) -> Result<Var, ModelError> {
        let head = match task {
            TaskId::S2ie => self.ids.ctc_semantic,
            TaskId::S2t => self.ids.ctc_text,
            TaskId::T2ie => return Err(ModelError::Modality { task, expected: "feature" }),
        };
        linear(g, memory, head)
    }

    /// Task loss given an encoder memory. `target` excludes bos and eos.
    pub fn loss_from_memory(
        &self,
        g: &mut Graph,
        task: TaskId,
        memory: Var,
        target: &[u32],
        drop: &mut Dropout,
        label_smoothing: f32,
    ) -> Result<TaskLoss, ModelError> {
        let c = &self.config;
        let mut prefix = Vec::with_capacity(target.len() + 1);
        prefix.push(BOS_ID);
        prefix.extend_from_slice(target);
        let mut gold = target.to_vec();
        gold.push(crate::bpe::EOS_ID);
        let logits = self.decode_logits(g, task, memory, &prefix, drop)?;
        let (ce_exact, ce_grad) =
            smoothed_cross_entropy(g.tape.value(logits), &gold, label_smoothing, crate::bpe::PAD_ID)?;
        let ce_value = ce_exact as f32;
        if !ce_value.is_finite() {
            return Err(ModelError::NonFinite(format!("{task} cross-entropy")));
        }
        let ce = g.tape.scalar_with_grad(logits, ce_value, ce_grad)?;
        let w = c.ctc_weight;
        if !c.ctc_enabled(task) || w == 0.0 {
            return Ok(TaskLoss { loss: ce, value: ce_value, ce: ce_value, ctc: None, exact: ce_exact });
        }
        let vocab = c.output_vocab(task);
        let logits = self.ctc_logits(g, task, memory)?;
        let (nll, grad) = ctc::ctc_loss_from_logits(g.tape.value(logits).data(), vocab + 1, target, vocab as u32)?;
        let ctc_value = nll as f32;
        if !ctc_value.is_finite() {
            return Err(ModelError::NonFinite(format!("{task} ctc")));
        }
        let ctc = g.tape.scalar_with_grad(logits, ctc_value, grad)?;
        let loss = if w == 1.0 {
            ctc
        } else {
            let a = g.tape.scale(ctc, w);
            let b = g.tape.scale(ce, 1.0 - w);
            g.tape.add(a, b)?
        };
        let value = g.tape.value(loss).item();
        let exact = w as f64 * nll + (1.0 - w as f64) * ce_exact;
        Ok(TaskLoss { loss, value, ce: ce_value, ctc: Some(ctc_value), exact })
    }

    pub fn task_loss(
        &self,
        g: &mut Graph,
        task: TaskId,
        input: ModelInput,
        target: &[u32],
        drop: &mut Dropout,
        label_smoothing: f32,
    ) -> Result<TaskLoss, ModelError> {
        let memory = self.encode(g, task, input, drop)?;
        self.loss_from_memory(g, task, memory, target, drop, label_smoothing)
    }
}
