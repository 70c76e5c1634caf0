//! Weighted multi-task training with Adam, checkpoints and parameter transfer.

mod checkpoint;
mod transfer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ParamIndexEntry, TrainerState, VocabHashes,
    FORMAT_VERSION, META_FILE, OPTIMIZER_FILE, PARAMS_FILE,
};
pub use transfer::{transfer_parameters, TransferReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Example};
use crate::model::{Component, Dropout, ModelError, ModelInput, MultiTaskModel, TaskId};
use crate::numeric::{Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("all task weights are zero")]
    ZeroWeights,
    #[error("non-finite loss in task {task}")]
    NonFiniteLoss { task: TaskId },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("task {task}, example {id}: {source}")]
    Task { task: TaskId, id: String, source: ModelError },
    #[error("no training data for task {0}")]
    NoData(TaskId),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parameter {name}: {message}")]
    Param { name: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWeights {
    pub s2ie: f32,
    pub s2t: f32,
    pub t2ie: f32,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self { s2ie: 0.6, s2t: 0.2, t2ie: 0.2 }
    }
}

impl TaskWeights {
    pub fn only(task: TaskId) -> Self {
        let mut w = Self { s2ie: 0.0, s2t: 0.0, t2ie: 0.0 };
        w.set(task, 1.0);
        w
    }

    pub fn get(&self, task: TaskId) -> f32 {
        match task {
            TaskId::S2ie => self.s2ie,
            TaskId::S2t => self.s2t,
            TaskId::T2ie => self.t2ie,
        }
    }

    pub fn set(&mut self, task: TaskId, w: f32) {
        match task {
            TaskId::S2ie => self.s2ie = w,
            TaskId::S2t => self.s2t = w,
            TaskId::T2ie => self.t2ie = w,
        }
    }

    pub fn enabled(&self) -> Vec<TaskId> {
        TaskId::ALL.into_iter().filter(|&t| self.get(t) > 0.0).collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if TaskId::ALL.iter().any(|&t| !(self.get(t) >= 0.0) || !self.get(t).is_finite()) {
            return Err(TrainError::Config(format!("task weights must be finite and non-negative: {self:?}")));
        }
        if self.enabled().is_empty() {
            return Err(TrainError::ZeroWeights);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: TaskWeights,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f32,
    pub warmup_steps: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f32,
    pub label_smoothing: f32,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Components excluded from updates.
    pub freeze: Vec<Component>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: TaskWeights::default(),
            lr: 1e-3,
            warmup_steps: 1000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            batch_size: 8,
            max_epochs: 100,
            seed: 0,
            grad_clip: 5.0,
            label_smoothing: 0.1,
            patience: 5,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    /// Inverse-square-root schedule with linear warmup, for the `step`-th
    /// update counted from 1.
    pub fn lr_at(&self, step: u64) -> f32 {
        let s = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let w = self.warmup_steps as f64;
        (self.lr as f64 * (s / w).min((w / s).sqrt())) as f32
    }
}

/// `Σ wᵢ·lossᵢ` over the supplied tasks; zero-weight tasks are skipped.
pub fn multitask_loss(losses: &[(TaskId, f32)], weights: &TaskWeights) -> Result<f32, TrainError> {
    if weights.enabled().is_empty() {
        return Err(TrainError::ZeroWeights);
    }
    let mut total = 0.0f32;
    for &(task, loss) in losses {
        let w = weights.get(task);
        if w != 0.0 {
            total += w * loss;
        }
    }
    Ok(total)
}

/// Examples assigned to one task for one step.
#[derive(Clone, Debug)]
pub struct TaskBatch<'a> {
    pub task: TaskId,
    pub examples: Vec<&'a Example>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// Batch-mean loss per task that received data, in task order.
    pub task_losses: Vec<(TaskId, f32)>,
    pub total: f32,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f32,
}

/// First and second moment estimates for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &MultiTaskModel) -> Self {
        let sizes: Vec<usize> =
            model.params().iter().map(|(_, e)| if e.trainable { e.value.numel() } else { 0 }).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Loss values and accumulated parameter gradients of one step.
pub struct Gradients {
    pub task_losses: Vec<(TaskId, f32)>,
    pub total: f32,
    /// The weighted total carried in `f64` from the logits onward.
    pub total_exact: f64,
    /// Indexed like the parameter store; `None` for untouched parameters.
    pub grads: Vec<Option<Vec<f32>>>,
}

fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

fn id_hash(id: &str) -> u64 {
    mix(&id.bytes().map(u64::from).collect::<Vec<_>>())
}

fn target_for(task: TaskId, ex: &Example) -> &[u32] {
    match task {
        TaskId::S2t => &ex.text_ids,
        _ => &ex.semantic_ids,
    }
}

/// Batch-mean losses and gradients of `Σ wₜ·mean(Lₜ)`. Dropout for each
/// example is seeded from `(seed, step, id)`; `None` disables it.
pub fn compute_gradients(
    model: &MultiTaskModel,
    batches: &[TaskBatch],
    weights: &TaskWeights,
    label_smoothing: f32,
    dropout_seed: Option<(u64, u64)>,
) -> Result<Gradients, TrainError> {
    weights.validate()?;
    let params = model.params();
    // Group every (task, example) pair by example so a shared encoder runs once.
    let mut groups: Vec<(&Example, Vec<(TaskId, f32)>)> = Vec::new();
    let mut sums = [0.0f64; 3];
    let mut present = [false; 3];
    for b in batches {
        let w = weights.get(b.task);
        if w == 0.0 || b.examples.is_empty() {
            continue;
        }
        present[b.task as usize] = true;
        let scale = w / b.examples.len() as f32;
        for &ex in &b.examples {
            match groups.iter_mut().find(|(e, _)| std::ptr::eq(*e, ex)) {
                Some((_, tasks)) => tasks.push((b.task, scale)),
                None => groups.push((ex, vec![(b.task, scale)])),
            }
        }
    }
    let counts: Vec<usize> = TaskId::ALL
        .iter()
        .map(|&t| batches.iter().filter(|b| b.task == t && weights.get(t) != 0.0).map(|b| b.examples.len()).sum())
        .collect();
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; params.len()];
    let mut total_exact = 0.0f64;
    for (ex, tasks) in &groups {
        let mut g = Graph::new(params, true);
        let mut drop = match dropout_seed {
            Some((seed, step)) => Dropout::seeded(model.config().dropout, mix(&[seed, step, id_hash(&ex.id)])),
            None => Dropout::off(),
        };
        let fail = |task: TaskId| {
            move |e: ModelError| match e {
                ModelError::NonFinite(_) | ModelError::Tensor(TensorError::NonFinite { .. }) => {
                    TrainError::NonFiniteLoss { task }
                }
                source => TrainError::Task { task, id: ex.id.clone(), source },
            }
        };
        let mut speech_memory = None;
        let mut total = None;
        for &(task, scale) in tasks {
            let memory = if task.is_speech() {
                match speech_memory {
                    Some(m) => m,
                    None => {
                        let f = ex.features.as_ref().ok_or_else(|| TrainError::Task {
                            task,
                            id: ex.id.clone(),
                            source: ModelError::Modality { task, expected: "feature" },
                        })?;
                        let m = model.encode(&mut g, task, ModelInput::Features(f), &mut drop).map_err(fail(task))?;
                        speech_memory = Some(m);
                        m
                    }
                }
            } else {
                let input = ex.text_input();
                model.encode(&mut g, task, ModelInput::Tokens(&input), &mut drop).map_err(fail(task))?
            };
            let tl = model
                .loss_from_memory(&mut g, task, memory, target_for(task, ex), &mut drop, label_smoothing)
                .map_err(fail(task))?;
            if !tl.value.is_finite() {
                return Err(TrainError::NonFiniteLoss { task });
            }
            sums[task as usize] += tl.value as f64;
            total_exact += scale as f64 * tl.exact;
            let scaled = g.tape.scale(tl.loss, scale);
            total = Some(match total {
                None => scaled,
                Some(t) => g.tape.add(t, scaled).map_err(|e| TrainError::Model(e.into()))?,
            });
        }
        let Some(total) = total else { continue };
        g.tape.backward(total).map_err(|e| TrainError::Model(e.into()))?;
        for (id, grad) in g.param_grads() {
            match &mut grads[id.index()] {
                Some(acc) => crate::numeric::kernels::add_assign(acc, grad),
                slot @ None => *slot = Some(grad.to_vec()),
            }
        }
    }
    let task_losses: Vec<(TaskId, f32)> = TaskId::ALL
        .into_iter()
        .filter(|&t| present[t as usize])
        .map(|t| (t, (sums[t as usize] / counts[t as usize] as f64) as f32))
        .collect();
    let total = multitask_loss(&task_losses, weights)?;
    Ok(Gradients { task_losses, total, total_exact, grads })
}

/// Training state: model, optimizer moments and progress counters.
pub struct Trainer {
    pub model: MultiTaskModel,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub state: TrainerState,
    frozen: Vec<bool>,
}

/// Examples available to each task.
#[derive(Clone, Debug, Default)]
pub struct TaskSets<'a> {
    pub sets: Vec<(TaskId, Vec<&'a Example>)>,
}

impl<'a> TaskSets<'a> {
    /// The same examples for every enabled task.
    pub fn shared(examples: &'a [Example], tasks: &[TaskId]) -> Self {
        Self { sets: tasks.iter().map(|&t| (t, examples.iter().collect())).collect() }
    }

    pub fn get(&self, task: TaskId) -> Option<&[&'a Example]> {
        self.sets.iter().find(|(t, _)| *t == task).map(|(_, v)| v.as_slice())
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: Option<f64>,
    pub lr: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl Trainer {
    pub fn new(model: MultiTaskModel, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let frozen = model
            .params()
            .iter()
            .map(|(_, e)| Component::of_param(&e.name).is_some_and(|c| config.freeze.contains(&c)))
            .collect();
        Ok(Self { adam: AdamState::new(&model), model, config, state: TrainerState::default(), frozen })
    }

    /// Restores optimizer and progress from a checkpoint written mid-run.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        let mut t = Self::new(ckpt.model, config)?;
        if let Some(adam) = ckpt.optimizer {
            t.adam = adam;
        }
        if let Some(state) = ckpt.meta.trainer {
            t.state = state;
        }
        Ok(t)
    }

    /// One optimizer update on the given batches.
    pub fn step(&mut self, batches: &[TaskBatch]) -> Result<StepReport, TrainError> {
        let step = self.adam.step + 1;
        let g = compute_gradients(
            &self.model,
            batches,
            &self.config.weights,
            self.config.label_smoothing,
            Some((self.config.seed, step)),
        )?;
        let mut grads = g.grads;
        for (i, f) in self.frozen.iter().enumerate() {
            if *f {
                grads[i] = None;
            }
        }
        let sq: f64 = grads.iter().flatten().flat_map(|v| v.iter()).map(|&x| x as f64 * x as f64).sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(TrainError::NonFiniteGradient);
        }
        let clip = self.config.grad_clip as f64;
        let factor = if clip > 0.0 && norm > clip { (clip / norm) as f32 } else { 1.0 };
        let lr = self.config.lr_at(step);
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - (b1 as f64).powi(step as i32);
        let c2 = 1.0 - (b2 as f64).powi(step as i32);
        let step_size = (lr as f64 / c1) as f32;
        if step_size == 0.0 {
            self.adam.step = step;
            self.state.step = step;
            return Ok(StepReport { step, task_losses: g.task_losses, total: g.total, grad_norm: norm, lr });
        }
        let c2_sqrt = c2.sqrt() as f32;
        let ids: Vec<_> = self.model.params().ids().collect();
        for id in ids {
            let i = id.index();
            let Some(grad) = &grads[i] else { continue };
            let m = &mut self.adam.m[i];
            let v = &mut self.adam.v[i];
            let p = self.model.params_mut().value_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = grad[k] * factor;
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                p[k] -= step_size * m[k] / (v[k].sqrt() / c2_sqrt + eps);
            }
        }
        self.adam.step = step;
        self.state.step = step;
        Ok(StepReport { step, task_losses: g.task_losses, total: g.total, grad_norm: norm, lr })
    }

    fn primary_task(&self, sets: &TaskSets) -> Result<TaskId, TrainError> {
        let enabled = self.config.weights.enabled();
        let task = enabled[0];
        match sets.get(task) {
            Some(v) if !v.is_empty() => Ok(task),
            _ => Err(TrainError::NoData(task)),
        }
    }

    pub fn steps_per_epoch(&self, sets: &TaskSets) -> Result<u64, TrainError> {
        let n = sets.get(self.primary_task(sets)?).map_or(0, |v| v.len());
        Ok(n.div_ceil(self.config.batch_size) as u64)
    }

    /// Batches for global step index `k` (0-based). Each task walks its own
    /// per-epoch shuffle; identical example lists share one shuffle.
    pub fn batches_for<'a>(&self, sets: &TaskSets<'a>, k: u64) -> Result<Vec<TaskBatch<'a>>, TrainError> {
        let per_epoch = self.steps_per_epoch(sets)?;
        let (epoch, pos) = (k / per_epoch, (k % per_epoch) as usize);
        let bs = self.config.batch_size;
        let primary = self.primary_task(sets)?;
        let sig_of = |list: &[&Example]| mix(&list.iter().map(|e| id_hash(&e.id)).collect::<Vec<_>>());
        let primary_list = sets.get(primary).unwrap_or(&[]);
        let primary_sig = sig_of(primary_list);
        let mut out = Vec::new();
        for task in self.config.weights.enabled() {
            let Some(list) = sets.get(task).filter(|v| !v.is_empty()) else { continue };
            let sig = sig_of(list);
            let n = list.len();
            let examples = if task == primary || (sig == primary_sig && n == primary_list.len()) {
                let perm = permutation(n, mix(&[self.config.seed, epoch, sig]));
                perm[pos * bs..((pos + 1) * bs).min(n)].iter().map(|&i| list[i]).collect()
            } else {
                let start = (epoch * per_epoch + pos as u64) * bs as u64;
                (start..start + bs as u64)
                    .map(|s| list[permutation(n, mix(&[self.config.seed, s / n as u64, sig]))[(s % n as u64) as usize]])
                    .collect()
            };
            out.push(TaskBatch { task, examples });
        }
        Ok(out)
    }

    /// Runs `n` further steps continuing from the current step counter.
    pub fn run_steps(&mut self, sets: &TaskSets, n: u64) -> Result<Vec<StepReport>, TrainError> {
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let batches = self.batches_for(sets, self.adam.step)?;
            out.push(self.step(&batches)?);
        }
        Ok(out)
    }

    /// Mean loss of `task` over `examples` without dropout or smoothing.
    pub fn validation_loss(&self, task: TaskId, examples: &[&Example]) -> Result<f64, TrainError> {
        evaluate_loss(&self.model, task, examples, self.config.label_smoothing)
    }

    /// Epoch loop with early stopping on the primary task's validation
    /// loss. The best parameters are restored at the end.
    pub fn fit(&mut self, sets: &TaskSets, val: &[&Example]) -> Result<FitReport, TrainError> {
        let per_epoch = self.steps_per_epoch(sets)?;
        let primary = self.primary_task(sets)?;
        let mut report = FitReport { epochs: Vec::new(), best_epoch: None, stopped_early: false };
        let mut best = None;
        while (self.state.epoch as usize) < self.config.max_epochs {
            let reports = self.run_steps(sets, per_epoch)?;
            let train_loss = reports.iter().map(|r| r.total as f64).sum::<f64>() / reports.len().max(1) as f64;
            let epoch = self.state.epoch as usize;
            self.state.epoch += 1;
            let val_loss = if val.is_empty() { None } else { Some(self.validation_loss(primary, val)?) };
            let lr = reports.last().map_or(0.0, |r| r.lr);
            report.epochs.push(EpochReport { epoch, train_loss: train_loss as f32, val_loss, lr });
            if let Some(v) = val_loss {
                if self.state.best_val.is_none_or(|b| v < b) {
                    self.state.best_val = Some(v);
                    self.state.bad_epochs = 0;
                    report.best_epoch = Some(epoch);
                    best = Some(self.model.params().clone());
                } else {
                    self.state.bad_epochs += 1;
                    if self.state.bad_epochs >= self.config.patience as u64 {
                        report.stopped_early = true;
                        break;
                    }
                }
            }
        }
        if let Some(p) = best {
            *self.model.params_mut() = p;
        }
        Ok(report)
    }
}

/// Mean per-example loss of `task` with dropout off.
pub fn evaluate_loss(
    model: &MultiTaskModel,
    task: TaskId,
    examples: &[&Example],
    label_smoothing: f32,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for ex in examples {
        let mut g = Graph::new(model.params(), false);
        let mut drop = Dropout::off();
        let err = |source| TrainError::Task { task, id: ex.id.clone(), source };
        let memory = if task.is_speech() {
            let f = ex.features.as_ref().ok_or_else(|| err(ModelError::Modality { task, expected: "feature" }))?;
            model.encode(&mut g, task, ModelInput::Features(f), &mut drop).map_err(err)?
        } else {
            let input = ex.text_input();
            model.encode(&mut g, task, ModelInput::Tokens(&input), &mut drop).map_err(err)?
        };
        let tl = model.loss_from_memory(&mut g, task, memory, target_for(task, ex), &mut drop, label_smoothing).map_err(err)?;
        sum += tl.exact;
    }
    Ok(sum / examples.len().max(1) as f64)
}
