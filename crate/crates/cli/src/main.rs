mod commands;
mod config;
mod error;
mod grid;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "slu", version, about = "Multi-task spoken language understanding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic flight-domain corpus with rendered audio.
    SynthCorpus(commands::SynthArgs),
    /// Compute filterbank features for every utterance of a manifest.
    Featurize(commands::FeaturizeArgs),
    /// Train a subword vocabulary on a text file.
    TokenizerTrain(commands::TokenizerArgs),
    /// Train the multi-task model.
    Train(commands::TrainArgs),
    /// Train a standalone speech-to-text donor model.
    PretrainS2t(commands::PretrainArgs),
    /// Train a standalone text-to-semantics donor model.
    PretrainT2ie(commands::PretrainArgs),
    /// Decode a manifest with one model, an ensemble, or a cascade.
    Decode(commands::DecodeArgs),
    /// Score decoded hypotheses against reference frames.
    Score(commands::ScoreArgs),
    /// Run a grid of experiments and write one CSV row per run and seed.
    Grid(grid::GridArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::SynthCorpus(a) => commands::synth_corpus(a),
        Command::Featurize(a) => commands::featurize(a),
        Command::TokenizerTrain(a) => commands::tokenizer_train(a),
        Command::Train(a) => commands::train(a),
        Command::PretrainS2t(a) => commands::pretrain(a, slu_core::model::TaskId::S2t),
        Command::PretrainT2ie(a) => commands::pretrain(a, slu_core::model::TaskId::T2ie),
        Command::Decode(a) => commands::decode(a),
        Command::Score(a) => commands::score(a),
        Command::Grid(a) => grid::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
