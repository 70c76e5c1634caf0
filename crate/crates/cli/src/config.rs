use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slu_core::bpe::SMALL_TEXT_PIECES;
use slu_core::data::FeatureKind;
use slu_core::inference::BeamConfig;
use slu_core::model::ModelConfig;
use slu_core::trainer::{TaskWeights, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub semantic_vocab_size: usize,
    pub text_vocab_size: usize,
    pub feature_kind: FeatureKind,
    /// Treat entity values missing from their transcript as errors.
    pub strict: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            semantic_vocab_size: slu_core::bpe::SEMANTIC_PIECES,
            text_vocab_size: SMALL_TEXT_PIECES,
            feature_kind: FeatureKind::Filterbank,
            strict: false,
        }
    }
}

/// Everything a run needs, as written to `config.toml` next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub data: DataConfig,
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl RunConfig {
    /// Builds the configuration from an optional TOML file. Keys under
    /// `[model]` override the chosen preset field by field.
    pub fn load(path: Option<&Path>, preset_flag: Option<&str>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let raw = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                raw.parse::<toml::Table>().map_err(|e| parse_err(p, e))?
            }
            None => toml::Table::new(),
        };
        let origin = path.unwrap_or(Path::new("<defaults>"));
        for key in table.keys() {
            if !["preset", "model", "train", "beam", "data"].contains(&key.as_str()) {
                return Err(parse_err(origin, format!("unknown section {key:?}")));
            }
        }
        let preset = match (preset_flag, table.remove("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p,
            (None, Some(other)) => return Err(parse_err(origin, format!("preset must be a string, got {other}"))),
            (None, None) => "toy".to_string(),
        };
        let base = ModelConfig::preset(&preset).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut model_value = toml::Value::try_from(&base).map_err(|e| CliError::Data(e.to_string()))?;
        if let Some(overrides) = table.remove("model") {
            let toml::Value::Table(over) = overrides else {
                return Err(parse_err(origin, "[model] must be a table"));
            };
            let mt = model_value.as_table_mut().expect("model config serializes to a table");
            for (k, v) in over {
                mt.insert(k, v);
            }
        }
        let model: ModelConfig = model_value.try_into().map_err(|e| parse_err(origin, e))?;
        let section = |table: &mut toml::Table, name: &str| table.remove(name).unwrap_or(toml::Value::Table(Default::default()));
        let train: TrainConfig = section(&mut table, "train").try_into().map_err(|e| parse_err(origin, e))?;
        let beam: BeamConfig = section(&mut table, "beam").try_into().map_err(|e| parse_err(origin, e))?;
        let data: DataConfig = section(&mut table, "data").try_into().map_err(|e| parse_err(origin, e))?;
        Ok(Self { preset, model, train, beam, data })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.beam.beam_size == 0 {
            return Err(CliError::Usage("beam_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
        }
        fs::write(path, self.to_toml()).map_err(|e| CliError::io(path, e))
    }
}

/// Shared flags that override configuration values.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Model preset: toy, base or large.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
    /// Feature source: filterbank (features file or audio) or external
    /// (features file required).
    #[arg(long, value_parser = parse_kind)]
    pub feature_kind: Option<FeatureKind>,
    #[arg(long)]
    pub strict: bool,
}

fn parse_kind(s: &str) -> std::result::Result<FeatureKind, String> {
    match s {
        "filterbank" => Ok(FeatureKind::Filterbank),
        "external" => Ok(FeatureKind::External),
        other => Err(format!("unknown feature kind {other:?} (filterbank, external)")),
    }
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref(), self.preset.as_deref())?;
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        if let Some(e) = self.epochs {
            c.train.max_epochs = e;
        }
        if let Some(lr) = self.lr {
            c.train.lr = lr;
        }
        if let Some(w) = self.warmup_steps {
            c.train.warmup_steps = w;
        }
        if let Some(b) = self.batch_size {
            c.train.batch_size = b;
        }
        if let Some(b) = self.beam_size {
            c.beam.beam_size = b;
        }
        if let Some(m) = self.max_len {
            c.beam.max_len = m;
        }
        if let Some(a) = self.length_penalty {
            c.beam.length_penalty = a;
        }
        if let Some(k) = self.feature_kind {
            c.data.feature_kind = k;
        }
        if self.strict {
            c.data.strict = true;
        }
        c.validate()?;
        Ok(c)
    }
}

/// `s2ie=a,s2t=b,t2ie=c` or three positional numbers in that order.
pub fn parse_weights(s: &str) -> Result<TaskWeights> {
    let mut w = TaskWeights { s2ie: 0.0, s2t: 0.0, t2ie: 0.0 };
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || CliError::Usage(format!("cannot parse weights {s:?}"));
    if parts.iter().all(|p| p.contains('=')) {
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(bad)?;
            let task = k.trim().parse().map_err(|_| bad())?;
            w.set(task, v.trim().parse().map_err(|_| bad())?);
        }
    } else {
        let vals: Vec<f32> = parts.iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let [a, b, c] = vals[..] else { return Err(bad()) };
        w = TaskWeights { s2ie: a, s2t: b, t2ie: c };
    }
    Ok(w)
}
