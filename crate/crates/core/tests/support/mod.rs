//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slu_core::bpe::BOS_ID;
use slu_core::corpus::{generate_corpus, SynthGrammar};
use slu_core::data::{cmvn_stats, prepare_examples, Example, Vocabs};
use slu_core::features::FeatureMatrix;
use slu_core::inference::{InferenceError, StepScorer};
use slu_core::model::{ModelConfig, MultiTaskModel, TaskId};
use slu_core::numeric::{Tape, Tensor, Var};
use slu_core::trainer::TaskBatch;

pub const FD_STEP: f64 = 1e-3;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureMatrix {
    FeatureMatrix::new(frames, dim, (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares tape gradients of `Σ out·r` with central differences. Returns
/// the worst normwise relative error over all inputs.
pub fn gradcheck<F>(inputs: &[Tensor], rng: &mut ChaCha8Rng, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape0, _, out0) = run(inputs);
    let weights: Vec<f64> = (0..tape0.value(out0).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |t: &Tensor| t.data().iter().zip(&weights).map(|(&v, w)| v as f64 * w).sum::<f64>();

    let (mut tape, vars, out) = run(inputs);
    let r = tape.constant(Tensor::new(tape.shape(out).to_vec(), weights.iter().map(|&w| w as f32).collect()).unwrap());
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let mut worst = 0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
        let mut max_diff = 0f64;
        let mut scale = 1e-6f64;
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            let base = x.data()[j];
            xs[i].data_mut()[j] = (base as f64 + FD_STEP) as f32;
            let (t, _, o) = run(&xs);
            let plus = objective(t.value(o));
            xs[i].data_mut()[j] = (base as f64 - FD_STEP) as f32;
            let (t, _, o) = run(&xs);
            let minus = objective(t.value(o));
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_diff = max_diff.max((numeric - analytic[j] as f64).abs());
            scale = scale.max(numeric.abs()).max((analytic[j] as f64).abs());
        }
        worst = worst.max(max_diff / scale);
    }
    worst
}

/// CTC likelihood by enumerating every frame-level path.
pub fn brute_force_ctc(probs: &[f64], classes: usize, target: &[u32], blank: u32) -> f64 {
    let frames = probs.len() / classes;
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k as u32 != blank {
                collapsed.push(k as u32);
            }
            prev = Some(k);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &k)| probs[t * classes + k]).product::<f64>();
        }
        let mut i = 0;
        while i < frames {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == frames {
            return total;
        }
    }
}

/// Every label sequence of length at most `max_len`, the empty one included.
pub fn all_targets(labels: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            for l in 0..labels {
                let mut e: Vec<u32> = t.clone();
                e.push(l);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Random row-normalized probabilities, bounded away from zero.
pub fn random_distributions(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Vec<f64> {
    let mut probs = vec![0f64; frames * classes];
    for row in probs.chunks_mut(classes) {
        row.iter_mut().for_each(|p| *p = rng.random_range(0.05..1.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    probs
}

/// Random normalized distribution per prefix, fixed on first use.
pub struct TableScorer {
    v: usize,
    rng: ChaCha8Rng,
    table: HashMap<Vec<u32>, Vec<f64>>,
    quantize: bool,
}

impl TableScorer {
    pub fn new(v: usize, seed: u64, quantize: bool) -> Self {
        Self { v, rng: ChaCha8Rng::seed_from_u64(seed), table: HashMap::new(), quantize }
    }
}

impl StepScorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.v
    }
    fn next_log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, InferenceError> {
        assert_eq!(prefix[0], BOS_ID);
        let (v, q) = (self.v, self.quantize);
        let rng = &mut self.rng;
        Ok(self
            .table
            .entry(prefix.to_vec())
            .or_insert_with(|| {
                let w: Vec<f64> = (0..v).map(|_| if q { rng.random_range(1..4) as f64 } else { rng.random::<f64>() + 1e-3 }).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| (x / s).ln()).collect()
            })
            .clone())
    }
}

fn is_lower(a: &(f64, Vec<u32>), b: &(f64, Vec<u32>)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Best complete sequence by brute force: ended by eos, or cut at max_len.
pub fn exhaustive<S: StepScorer>(s: &mut S, eos: u32, max_len: usize, alpha: f64) -> (f64, Vec<u32>) {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut stack = vec![(Vec::<u32>::new(), 0.0f64)];
    while let Some((toks, lp)) = stack.pop() {
        let mut prefix = vec![BOS_ID];
        prefix.extend(&toks);
        let lps = s.next_log_probs(&prefix).unwrap();
        for (k, l) in lps.iter().enumerate() {
            let mut t = toks.clone();
            t.push(k as u32);
            let total = lp + l;
            if k as u32 == eos || t.len() == max_len {
                let cand = (total / (t.len() as f64).powf(alpha), t);
                if is_lower(&cand, &best) {
                    best = cand;
                }
            } else {
                stack.push((t, total));
            }
        }
    }
    best
}

/// Synthetic corpus with vocabularies and a one-layer configuration sized
/// to them.
pub fn setup(n: usize, seed: u64) -> (Vocabs, Vec<Example>, ModelConfig) {
    let corpus = generate_corpus(&SynthGrammar::default(), n, seed).unwrap();
    let vocabs = Vocabs::train(&corpus, 512, 512).unwrap();
    let ex = prepare_examples(&corpus, &vocabs, None, true).unwrap();
    let cfg = ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        ff_units: 32,
        attn_dim: 16,
        heads: 2,
        conv_channels: 4,
        semantic_vocab: vocabs.semantic.len(),
        text_vocab: vocabs.text.len(),
        max_target_len: 48,
        ..ModelConfig::toy()
    };
    (vocabs, ex, cfg)
}

pub fn model(cfg: &ModelConfig, ex: &[Example], seed: u64) -> MultiTaskModel {
    let mut m = MultiTaskModel::new(cfg.clone(), seed).unwrap();
    let (mean, std) = cmvn_stats(ex.iter().filter_map(|e| e.features.as_ref())).unwrap();
    m.set_cmvn(&mean, &std).unwrap();
    m
}

pub fn batches<'a>(ex: &'a [Example], tasks: &[TaskId]) -> Vec<TaskBatch<'a>> {
    tasks.iter().map(|&task| TaskBatch { task, examples: ex.iter().collect() }).collect()
}

pub fn param_bits(m: &MultiTaskModel) -> Vec<u32> {
    m.params().iter().flat_map(|(_, e)| e.value.data().iter().map(|x| x.to_bits())).collect()
}

/// Sorted `(file name, bytes)` of a directory.
pub fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}
