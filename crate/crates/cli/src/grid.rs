use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slu_core::data::{Example, FeatureKind, Vocabs};
use slu_core::model::{MultiTaskModel, TaskId};
use slu_core::pipeline::{decode_set, score_records};
use slu_core::trainer::{load_checkpoint, TaskWeights};

use crate::commands::{manifest_examples, read_manifest, run_training, TrainJob};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(clap::Args)]
pub struct GridArgs {
    /// TOML file listing the experiments.
    #[arg(long)]
    spec_file: PathBuf,
    /// CSV with one row per experiment and seed.
    #[arg(long)]
    out: PathBuf,
    /// Print per-epoch losses.
    #[arg(long)]
    verbose: bool,
}

/// `none`, `pretrain` (a donor trained in this grid on the training
/// manifest with the same seed) or a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Init {
    None,
    Pretrain,
    Checkpoint(PathBuf),
}

impl<'de> Deserialize<'de> for Init {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "none" | "" => Init::None,
            "pretrain" => Init::Pretrain,
            _ => Init::Checkpoint(PathBuf::from(s)),
        })
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Init::None => f.write_str("none"),
            Init::Pretrain => f.write_str("pretrain"),
            Init::Checkpoint(p) => write!(f, "{}", p.display()),
        }
    }
}

fn default_init() -> Init {
    Init::None
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub id: String,
    #[serde(default = "default_init")]
    pub encoder_init: Init,
    #[serde(default = "default_init")]
    pub decoder_init: Init,
    #[serde(default)]
    pub s2t: bool,
    #[serde(default)]
    pub t2ie: bool,
    #[serde(default)]
    pub feature_kind: FeatureKind,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Manifests with pre-extracted feature files, for external-feature rows.
    pub external_train_manifest: Option<PathBuf>,
    pub external_test_manifest: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Run configuration file shared by every row.
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub epochs: Option<usize>,
    #[serde(rename = "experiment")]
    pub experiments: Vec<Experiment>,
}

#[derive(Debug, Serialize)]
pub struct GridRow {
    pub experiment: String,
    pub encoder_init: String,
    pub decoder_init: String,
    pub s2t: bool,
    pub t2ie: bool,
    pub feature_kind: String,
    pub seed: u64,
    pub entity_f1: f64,
    pub ier: f64,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut spec: GridSpec = toml::from_str(&raw).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rel(&mut spec.train_manifest);
        rel(&mut spec.test_manifest);
        spec.external_train_manifest.as_mut().map(rel);
        spec.external_test_manifest.as_mut().map(rel);
        spec.config.as_mut().map(rel);
        for e in &mut spec.experiments {
            for init in [&mut e.encoder_init, &mut e.decoder_init] {
                if let Init::Checkpoint(p) = init {
                    rel(p);
                }
            }
        }
        if spec.seeds.is_empty() || spec.experiments.is_empty() {
            return Err(CliError::Usage(format!("{}: needs at least one seed and one experiment", path.display())));
        }
        Ok(spec)
    }

    fn manifests(&self, kind: FeatureKind) -> Result<(&Path, &Path)> {
        match kind {
            FeatureKind::Filterbank => Ok((&self.train_manifest, &self.test_manifest)),
            FeatureKind::External => match (&self.external_train_manifest, &self.external_test_manifest) {
                (Some(a), Some(b)) => Ok((a, b)),
                _ => Err(CliError::Usage(
                    "external-feature rows need external_train_manifest and external_test_manifest".into(),
                )),
            },
        }
    }
}

fn kind_name(k: FeatureKind) -> &'static str {
    match k {
        FeatureKind::Filterbank => "filterbank",
        FeatureKind::External => "external",
    }
}

struct Data {
    train: Vec<Example>,
    test: Vec<Example>,
}

struct Runner<'a> {
    spec: &'a GridSpec,
    base: RunConfig,
    vocabs: Vocabs,
    data: BTreeMap<&'static str, Data>,
    donors: BTreeMap<(TaskId, &'static str, u64), MultiTaskModel>,
    verbose: bool,
}

impl Runner<'_> {
    fn data(&mut self, kind: FeatureKind) -> Result<&Data> {
        let name = kind_name(kind);
        if !self.data.contains_key(name) {
            let (tr, te) = self.spec.manifests(kind)?;
            let strict = self.base.data.strict;
            let train = manifest_examples(&read_manifest(tr, strict)?, &self.vocabs, kind, true)?;
            let test = manifest_examples(&read_manifest(te, strict)?, &self.vocabs, kind, true)?;
            self.data.insert(name, Data { train, test });
        }
        Ok(&self.data[name])
    }

    fn config(&self, seed: u64, weights: TaskWeights, kind: FeatureKind) -> RunConfig {
        let mut c = self.base.clone();
        c.train.seed = seed;
        c.train.weights = weights;
        c.data.feature_kind = kind;
        c
    }

    fn donor(&mut self, init: &Init, task: TaskId, kind: FeatureKind, seed: u64) -> Result<Option<MultiTaskModel>> {
        match init {
            Init::None => Ok(None),
            Init::Checkpoint(p) => {
                let ck = load_checkpoint(p)?;
                if ck.vocabs.as_ref().is_some_and(|v| *v != self.vocabs) {
                    return Err(CliError::Data(format!("{}: vocabularies differ from the grid's", p.display())));
                }
                Ok(Some(ck.model))
            }
            Init::Pretrain => {
                let key = (task, kind_name(kind), seed);
                if !self.donors.contains_key(&key) {
                    let config = self.config(seed, TaskWeights::only(task), kind);
                    self.data(kind)?;
                    let data = &self.data[kind_name(kind)];
                    let (trainer, _) = run_training(TrainJob {
                        config: &config,
                        vocabs: &self.vocabs,
                        train: &data.train,
                        val: &[],
                        encoder_donor: None,
                        decoder_donor: None,
                        log: self.verbose,
                    })?;
                    self.donors.insert(key, trainer.model);
                }
                Ok(Some(self.donors[&key].clone()))
            }
        }
    }

    fn row(&mut self, e: &Experiment, seed: u64) -> Result<GridRow> {
        let mut weights = self.base.train.weights;
        weights.s2ie = weights.s2ie.max(f32::EPSILON);
        for (on, t) in [(e.s2t, TaskId::S2t), (e.t2ie, TaskId::T2ie)] {
            if !on {
                weights.set(t, 0.0);
            } else if weights.get(t) == 0.0 {
                weights.set(t, weights.s2ie);
            }
        }
        let enc = self.donor(&e.encoder_init, TaskId::S2t, e.feature_kind, seed)?;
        let dec = self.donor(&e.decoder_init, TaskId::T2ie, e.feature_kind, seed)?;
        let config = self.config(seed, weights, e.feature_kind);
        let vocabs = self.vocabs.clone();
        let verbose = self.verbose;
        let data = self.data(e.feature_kind)?;
        let (trainer, _) = run_training(TrainJob {
            config: &config,
            vocabs: &vocabs,
            train: &data.train,
            val: &[],
            encoder_donor: enc.as_ref(),
            decoder_donor: dec.as_ref(),
            log: verbose,
        })?;
        let records = decode_set(&[&trainer.model], TaskId::S2ie, &data.test, &vocabs, &config.beam)?;
        let report = score_records(&data.test, &records, false)?;
        Ok(GridRow {
            experiment: e.id.clone(),
            encoder_init: e.encoder_init.to_string(),
            decoder_init: e.decoder_init.to_string(),
            s2t: e.s2t,
            t2ie: e.t2ie,
            feature_kind: kind_name(e.feature_kind).into(),
            seed,
            entity_f1: report.entities.f1,
            ier: report.intent.ier,
        })
    }
}

pub fn run(a: GridArgs) -> Result<()> {
    let spec = GridSpec::load(&a.spec_file)?;
    let mut base = RunConfig::load(spec.config.as_deref(), spec.preset.as_deref())?;
    if let Some(n) = spec.epochs {
        base.train.max_epochs = n;
    }
    base.validate()?;
    let train = read_manifest(&spec.train_manifest, base.data.strict)?;
    let vocabs = Vocabs::train(&train.utterances, base.data.semantic_vocab_size, base.data.text_vocab_size)?;
    let mut runner = Runner { spec: &spec, base, vocabs, data: BTreeMap::new(), donors: BTreeMap::new(), verbose: a.verbose };
    if let Some(d) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    let mut w = csv::Writer::from_path(&a.out)?;
    for e in &spec.experiments {
        for &seed in &spec.seeds {
            let row = runner.row(e, seed)?;
            eprintln!("{} seed {seed}: f1={:.4} ier={:.4}", row.experiment, row.entity_f1, row.ier);
            w.serialize(&row)?;
            w.flush().map_err(|err| CliError::io(&a.out, err))?;
        }
    }
    runner.base.dump(&config_sibling(&a.out))
}

fn config_sibling(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}
