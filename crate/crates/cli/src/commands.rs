use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slu_core::bpe::train_bpe;
use slu_core::codec::SemanticFrame;
use slu_core::corpus::{
    augment_speed, generate_corpus, load_manifest, save_manifest, split_corpus, write_corpus_audio, Manifest,
    SynthGrammar, Utterance,
};
use slu_core::data::{prepare_examples, Example, FeatureKind, Vocabs};
use slu_core::evaluation::{score_report, Labeled};
use slu_core::features::{compute_filterbank, load_audio, save_features, FbankConfig};
use slu_core::inference::{cascade_decode, DecodeRecord};
use slu_core::model::{Component, MultiTaskModel, TaskId};
use slu_core::pipeline::{decode_example, init_model};
use slu_core::trainer::{load_checkpoint, transfer_parameters, FitReport, TaskSets, TaskWeights, Trainer};

use crate::config::{parse_weights, Overrides, RunConfig};
use crate::error::{CliError, Result};

fn create_dir(d: &Path) -> Result<()> {
    fs::create_dir_all(d).map_err(|e| CliError::io(d, e))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(d)?;
    }
    fs::write(p, contents).map_err(|e| CliError::io(p, e))
}

#[derive(clap::Args)]
pub struct SynthArgs {
    /// Output directory; receives manifest.jsonl and audio/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grammar as JSON or TOML; the built-in flight grammar by default.
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Also write train.jsonl and test.jsonl holding out this fraction.
    #[arg(long)]
    test_fraction: Option<f64>,
}

fn read_grammar(p: &Path) -> Result<SynthGrammar> {
    let raw = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
    let parsed = if p.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&raw).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&raw).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

pub fn synth_corpus(a: SynthArgs) -> Result<()> {
    let grammar = match &a.grammar {
        Some(p) => read_grammar(p)?,
        None => SynthGrammar::default(),
    };
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let mut corpus = generate_corpus(&grammar, a.n, a.seed)?;
    write_corpus_audio(&mut corpus, &a.out)?;
    save_manifest(&corpus, &a.out.join("manifest.jsonl"))?;
    if let Some(f) = a.test_fraction {
        if !(0.0..1.0).contains(&f) {
            return Err(CliError::Usage(format!("--test-fraction {f} outside [0, 1)")));
        }
        let (train, test) = split_corpus(&corpus, f, a.seed);
        save_manifest(&train, &a.out.join("train.jsonl"))?;
        save_manifest(&test, &a.out.join("test.jsonl"))?;
    }
    eprintln!("wrote {} utterances to {}", corpus.len(), a.out.display());
    Ok(())
}

pub fn read_manifest(p: &Path, strict: bool) -> Result<Manifest> {
    let m = load_manifest(p, strict)?;
    for w in &m.warnings {
        eprintln!("warning: {}:{}: {}: {}", p.display(), w.line, w.id, w.message);
    }
    Ok(m)
}

#[derive(clap::Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Receives feats/, perturbed audio and a rewritten manifest.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated speed factors, e.g. 0.9,1.0,1.1.
    #[arg(long, value_delimiter = ',')]
    speed_perturb: Option<Vec<f32>>,
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn featurize(a: FeaturizeArgs) -> Result<()> {
    let m = read_manifest(&a.manifest, false)?;
    let mut utts: Vec<Utterance> = m.utterances.clone();
    for u in &mut utts {
        u.audio = u.audio.as_ref().map(|p| absolute(&m.resolve(p)));
    }
    if let Some(factors) = &a.speed_perturb {
        utts = augment_speed(&utts, Path::new(""), factors, &absolute(&a.out_dir.join("audio")))?;
    }
    let feats_dir = a.out_dir.join("feats");
    create_dir(&feats_dir)?;
    let cfg = FbankConfig::default();
    for u in &mut utts {
        let Some(audio) = &u.audio else {
            return Err(CliError::Data(format!("utterance {}: no audio to featurize", u.id)));
        };
        if !audio.exists() {
            return Err(CliError::Data(format!("utterance {}: cannot resolve {}", u.id, audio.display())));
        }
        let f = compute_filterbank(&load_audio(audio)?, &cfg)?;
        let rel = PathBuf::from("feats").join(format!("{}.sluf", u.id));
        save_features(&a.out_dir.join(&rel), &f)?;
        u.features = Some(rel);
    }
    save_manifest(&utts, &a.out_dir.join("manifest.jsonl"))?;
    eprintln!("featurized {} utterances into {}", utts.len(), a.out_dir.display());
    Ok(())
}

#[derive(clap::Args)]
pub struct TokenizerArgs {
    /// One sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    vocab_size: usize,
    /// Keep intent and tag tokens of IOB lines whole.
    #[arg(long)]
    atomic_tags: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn tokenizer_train(a: TokenizerArgs) -> Result<()> {
    let f = fs::File::open(&a.input).map_err(|e| CliError::io(&a.input, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| CliError::io(&a.input, e))?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    let mut atomic = BTreeSet::new();
    if a.atomic_tags {
        for l in &lines {
            let toks: Vec<&str> = l.split_whitespace().collect();
            for (i, t) in toks.iter().enumerate() {
                if i % 2 == 0 || i + 1 == toks.len() {
                    atomic.insert(t.to_string());
                }
            }
        }
    }
    let atomic: Vec<String> = atomic.into_iter().collect();
    let vocab = train_bpe(&lines, a.vocab_size, &atomic)?;
    vocab.save(&a.out)?;
    eprintln!("{} pieces, {} merges -> {}", vocab.len(), vocab.merges().len(), a.out.display());
    Ok(())
}

/// Examples of a manifest, featurized according to `kind` when needed.
pub fn manifest_examples(m: &Manifest, vocabs: &Vocabs, kind: FeatureKind, with_features: bool) -> Result<Vec<Example>> {
    if with_features && kind == FeatureKind::External {
        if let Some(u) = m.utterances.iter().find(|u| u.features.is_none()) {
            return Err(CliError::Data(format!("utterance {}: external features requested but none given", u.id)));
        }
    }
    Ok(prepare_examples(&m.utterances, vocabs, Some(m), with_features)?)
}

#[derive(clap::Args, Clone)]
pub struct TrainIo {
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out manifest for early stopping.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Directory holding semantic_vocab.json, text_vocab.json and
    /// labels.json (a checkpoint, for instance).
    #[arg(long)]
    vocab_from: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    io: TrainIo,
    /// Enabled tasks; s2ie is required.
    #[arg(long, default_value = "s2ie,s2t,t2ie", value_delimiter = ',')]
    tasks: Vec<TaskId>,
    /// Task weights as s2ie,s2t,t2ie or s2ie=..,s2t=..,t2ie=..
    #[arg(long)]
    weights: Option<String>,
    /// Checkpoint whose speech encoder initializes this model.
    #[arg(long)]
    init_encoder: Option<PathBuf>,
    /// Checkpoint whose semantic decoder initializes this model.
    #[arg(long)]
    init_decoder: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    io: TrainIo,
}

/// Inputs for one training run.
pub struct TrainJob<'a> {
    pub config: &'a RunConfig,
    pub vocabs: &'a Vocabs,
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub encoder_donor: Option<&'a MultiTaskModel>,
    pub decoder_donor: Option<&'a MultiTaskModel>,
    pub log: bool,
}

pub fn run_training(job: TrainJob) -> Result<(Trainer, FitReport)> {
    let cfg = job.config;
    let mut model = init_model(&cfg.model, job.vocabs, job.train, cfg.train.seed)?;
    if let Some(d) = job.encoder_donor {
        transfer_parameters(&mut model, d, &[(Component::SpeechEncoder, Component::SpeechEncoder)])?;
    }
    if let Some(d) = job.decoder_donor {
        transfer_parameters(&mut model, d, &[(Component::SemanticDecoder, Component::SemanticDecoder)])?;
    }
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let tasks = cfg.train.weights.enabled();
    let sets = TaskSets::shared(job.train, &tasks);
    let val: Vec<&Example> = job.val.iter().collect();
    let report = trainer.fit(&sets, &val)?;
    if job.log {
        for e in &report.epochs {
            let val = e.val_loss.map(|v| format!(" val {v:.4}")).unwrap_or_default();
            eprintln!("epoch {} loss {:.4}{val} lr {:.2e}", e.epoch, e.train_loss, e.lr);
        }
    }
    Ok((trainer, report))
}

fn load_vocabs(dir: &Path) -> Result<Vocabs> {
    Vocabs::load(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

struct Prepared {
    config: RunConfig,
    vocabs: Vocabs,
    train: Vec<Example>,
    val: Vec<Example>,
}

fn prepare(io: &TrainIo, weights: TaskWeights, vocabs: Option<Vocabs>) -> Result<Prepared> {
    let mut config = io.overrides.resolve()?;
    config.train.weights = weights;
    config.validate()?;
    let m = read_manifest(&io.manifest, config.data.strict)?;
    let vocabs = match (vocabs, &io.vocab_from) {
        (Some(v), _) => v,
        (None, Some(d)) => load_vocabs(d)?,
        (None, None) => Vocabs::train(&m.utterances, config.data.semantic_vocab_size, config.data.text_vocab_size)?,
    };
    let speech = weights.enabled().iter().any(|t| t.is_speech());
    let train = manifest_examples(&m, &vocabs, config.data.feature_kind, speech)?;
    let val = match &io.val_manifest {
        Some(p) => manifest_examples(&read_manifest(p, config.data.strict)?, &vocabs, config.data.feature_kind, speech)?,
        None => Vec::new(),
    };
    Ok(Prepared { config, vocabs, train, val })
}

fn finish(io: &TrainIo, p: &Prepared, trainer: &Trainer, report: &FitReport) -> Result<()> {
    trainer.save(&io.out_dir, Some(&p.vocabs))?;
    p.config.dump(&io.out_dir.join("config.toml"))?;
    let mut log = String::new();
    for e in &report.epochs {
        log += &serde_json::to_string(e)?;
        log.push('\n');
    }
    write_file(&io.out_dir.join("train_log.jsonl"), log)?;
    eprintln!("saved checkpoint to {}", io.out_dir.display());
    Ok(())
}

fn donor(path: &Path) -> Result<(MultiTaskModel, Vocabs)> {
    let ck = load_checkpoint(path)?;
    let v = ck.vocabs.ok_or_else(|| CliError::Data(format!("{}: checkpoint carries no vocabularies", path.display())))?;
    Ok((ck.model, v))
}

pub fn train(a: TrainArgs) -> Result<()> {
    if !a.tasks.contains(&TaskId::S2ie) {
        return Err(CliError::Usage("--tasks must include s2ie".into()));
    }
    let mut weights = match &a.weights {
        Some(w) => parse_weights(w)?,
        None => a.io.overrides.resolve()?.train.weights,
    };
    for t in TaskId::ALL {
        if !a.tasks.contains(&t) {
            weights.set(t, 0.0);
        }
    }
    if weights.s2ie <= 0.0 {
        return Err(CliError::Usage("the s2ie weight must be positive".into()));
    }
    let enc = a.init_encoder.as_deref().map(donor).transpose()?;
    let dec = a.init_decoder.as_deref().map(donor).transpose()?;
    let mut vocabs = None;
    for (path, d) in [(&a.init_encoder, &enc), (&a.init_decoder, &dec)] {
        if let (Some(p), Some((_, v))) = (path, d) {
            match &vocabs {
                None => vocabs = Some(v.clone()),
                Some(prev) if prev != v => {
                    return Err(CliError::Data(format!("{}: vocabularies differ from the other donor", p.display())))
                }
                _ => {}
            }
        }
    }
    let p = prepare(&a.io, weights, vocabs)?;
    let (trainer, report) = run_training(TrainJob {
        config: &p.config,
        vocabs: &p.vocabs,
        train: &p.train,
        val: &p.val,
        encoder_donor: enc.as_ref().map(|d| &d.0),
        decoder_donor: dec.as_ref().map(|d| &d.0),
        log: true,
    })?;
    finish(&a.io, &p, &trainer, &report)
}

pub fn pretrain(a: PretrainArgs, task: TaskId) -> Result<()> {
    let p = prepare(&a.io, TaskWeights::only(task), None)?;
    let (trainer, report) = run_training(TrainJob {
        config: &p.config,
        vocabs: &p.vocabs,
        train: &p.train,
        val: &p.val,
        encoder_donor: None,
        decoder_donor: None,
        log: true,
    })?;
    finish(&a.io, &p, &trainer, &report)
}

#[derive(clap::Args)]
pub struct DecodeArgs {
    /// Model checkpoint. Without --config, its config.toml supplies the
    /// beam and data settings.
    #[arg(long, required_unless_present = "cascade")]
    ckpt: Option<PathBuf>,
    /// Further checkpoints averaged with --ckpt.
    #[arg(long, value_delimiter = ',', conflicts_with = "cascade")]
    ensemble: Vec<PathBuf>,
    /// S2T and T2IE checkpoints of a two-stage pipeline.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    cascade: Option<Vec<PathBuf>>,
    #[arg(long)]
    manifest: PathBuf,
    /// Output JSONL of decoded records.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "s2ie")]
    task: TaskId,
    #[command(flatten)]
    overrides: Overrides,
}

fn write_records(path: &Path, records: &[DecodeRecord]) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(d)?;
    }
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn config_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let mut overrides = a.overrides.clone();
    let primary = a.ckpt.as_ref().or(a.cascade.as_ref().and_then(|c| c.first()));
    if overrides.config.is_none() {
        overrides.config = primary.map(|d| d.join("config.toml")).filter(|p| p.exists());
    }
    let mut config = overrides.resolve()?;
    let records = if let Some(paths) = &a.cascade {
        let [s2t, t2ie] = paths.as_slice() else {
            return Err(CliError::Usage("--cascade takes exactly two checkpoints: S2T,T2IE".into()));
        };
        let (s2t, vocabs) = donor(s2t)?;
        let (t2ie, v2) = donor(t2ie)?;
        if v2 != vocabs {
            return Err(CliError::Data("cascade checkpoints use different vocabularies".into()));
        }
        config.model = s2t.config().clone();
        let m = read_manifest(&a.manifest, config.data.strict)?;
        let ex = manifest_examples(&m, &vocabs, config.data.feature_kind, true)?;
        ex.iter()
            .map(|e| cascade_decode(&e.id, &s2t, &t2ie, &vocabs, e.features.as_ref().expect("features"), &config.beam))
            .collect::<std::result::Result<Vec<_>, _>>()?
    } else {
        let first = a.ckpt.as_ref().expect("clap requires --ckpt");
        let (model, vocabs) = donor(first)?;
        let mut models = vec![model];
        for p in &a.ensemble {
            let (m, v) = donor(p)?;
            if v != vocabs {
                return Err(CliError::Data(format!("{}: vocabularies differ from {}", p.display(), first.display())));
            }
            models.push(m);
        }
        config.model = models[0].config().clone();
        let refs: Vec<&MultiTaskModel> = models.iter().collect();
        let m = read_manifest(&a.manifest, config.data.strict)?;
        let ex = manifest_examples(&m, &vocabs, config.data.feature_kind, a.task.is_speech())?;
        ex.iter().map(|e| decode_example(&refs, a.task, e, &vocabs, &config.beam)).collect::<std::result::Result<Vec<_>, _>>()?
    };
    write_records(&a.out, &records)?;
    config.dump(&config_path(&a.out))?;
    let warned = records.iter().filter(|r| !r.warnings.is_empty()).count();
    eprintln!("decoded {} utterances ({warned} with warnings) -> {}", records.len(), a.out.display());
    Ok(())
}

#[derive(clap::Args)]
pub struct ScoreArgs {
    /// Reference manifest.
    #[arg(long)]
    refs: PathBuf,
    /// Decoded JSONL.
    #[arg(long)]
    hyps: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Include per-utterance differences in the report.
    #[arg(long)]
    per_utterance: bool,
}

#[derive(Deserialize)]
struct HypLine {
    id: String,
    frame: Option<SemanticFrame>,
}

#[derive(Serialize)]
struct ScoreOutput<'a> {
    refs: &'a Path,
    hyps: &'a Path,
    #[serde(flatten)]
    report: slu_core::evaluation::ScoreReport,
}

pub fn read_hypotheses(p: &Path) -> Result<Vec<Labeled>> {
    let f = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(p, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let h: HypLine = serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", p.display(), i + 1)))?;
        out.push(Labeled::new(h.id, h.frame));
    }
    Ok(out)
}

pub fn score(a: ScoreArgs) -> Result<()> {
    let m = read_manifest(&a.refs, false)?;
    let refs: Vec<Labeled> = m.utterances.iter().map(|u| Labeled::new(u.id.clone(), Some(u.frame.clone()))).collect();
    let hyps = read_hypotheses(&a.hyps)?;
    let report = score_report(&refs, &hyps, a.per_utterance)?;
    let e = report.entities;
    println!(
        "f1={:.4} ier={:.4} precision={:.4} recall={:.4} tp={} fp={} fn={} intent_errors={}/{}",
        e.f1, report.intent.ier, e.precision, e.recall, e.tp, e.fp, e.fn_, report.intent.errors, report.intent.total
    );
    if let Some(p) = &a.report {
        let out = ScoreOutput { refs: &a.refs, hyps: &a.hyps, report };
        write_file(p, serde_json::to_string_pretty(&out)? + "\n")?;
    }
    Ok(())
}
