mod args;
mod commands;
mod config;
mod error;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use pmech_core::transcoder::TranscoderKind;
use serde::de::DeserializeOwned;
use serde::Serialize;

use args::{Cli, Command, Common};
use error::{CliError, Result};

const THREADS_VAR: &str = "PROTOMECH_THREADS";

fn configure_threads() -> Result<()> {
    let Ok(text) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = text.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "{THREADS_VAR} must be a positive integer, got `{text}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

/// `args` with the config file merged in under command-line flags.
fn prepare<T: Serialize + DeserializeOwned>(
    args: &T,
    common: &Common,
    matches: &clap::ArgMatches,
) -> Result<T> {
    let file = match &common.config {
        Some(p) => config::read_config(p)?,
        None => BTreeMap::new(),
    };
    config::resolve(args, matches, &file)
}

fn write_echo<T: Serialize>(name: &str, out_dir: &Path, args: &T) -> Result<()> {
    let path = out_dir.join(format!("{name}.config"));
    fs::write(&path, config::echo(args)).map_err(|e| pmech_core::Error::Io { path, source: e })?;
    Ok(())
}

/// Resolves and runs one subcommand, then echoes the resolved arguments,
/// input paths included, as `<name>.config` in the output directory.
macro_rules! stage {
    ($name:expr, $args:expr, $matches:expr, $run:expr) => {{
        let mut a = prepare($args, &$args.common, $matches)?;
        let out = a.common.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| pmech_core::Error::Io {
            path: out.clone(),
            source: e,
        })?;
        let result = $run(&mut a);
        write_echo($name, &out, &a)?;
        result
    }};
}

fn run() -> Result<()> {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                std::process::exit(0);
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::Usage(
                first.trim_start_matches("error: ").to_string(),
            ));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    configure_threads()?;
    let (_, sub) = matches.subcommand().expect("a subcommand is required");
    let name = cli.command.name();
    match &cli.command {
        Command::GenCorpus(a) => stage!(name, a, sub, |a: &mut args::GenCorpusArgs| {
            commands::gen_corpus(a)
        }),
        Command::PretrainLm(a) => stage!(name, a, sub, commands::pretrain),
        Command::RecordTraces(a) => stage!(name, a, sub, commands::record_traces),
        Command::TrainClt(a) => stage!(name, a, sub, |a: &mut args::TrainTranscoderArgs| {
            commands::train_transcoder(a, TranscoderKind::CrossLayer)
        }),
        Command::TrainPlt(a) => stage!(name, a, sub, |a: &mut args::TrainTranscoderArgs| {
            commands::train_transcoder(a, TranscoderKind::PerLayer)
        }),
        Command::TrainProbe(a) => stage!(name, a, sub, commands::train_probe),
        Command::Discover(a) => stage!(name, a, sub, commands::discover_circuit),
        Command::Steer(a) => stage!(name, a, sub, commands::steer),
        Command::ExportViz(a) => stage!(name, a, sub, commands::export_viz),
        Command::EvalReplacement(a) => stage!(name, a, sub, commands::eval_replacement),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
