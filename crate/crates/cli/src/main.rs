mod args;
mod commands;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::Parser;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use args::{Cli, Command, Common};
use output::{read_json, Outcome, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] semiconv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Numeric(_) => 2,
            CliError::Core(e) if e.is_numeric() => 2,
            _ => 1,
        }
    }
}

/// Overlay the keys of the `--config` file on the parsed flags. Unknown keys
/// are an error.
fn apply_config<T: Serialize + DeserializeOwned>(args: &T, common: &Common) -> Result<(T, Value), CliError> {
    let mut value = serde_json::to_value(args).map_err(semiconv::Error::from)?;
    if let Some(path) = &common.config {
        let Value::Object(overrides) = read_json(path)? else {
            return Err(CliError::Usage(format!("{}: expected a JSON object", path.display())));
        };
        let target = value.as_object_mut().expect("args serialize to an object");
        for (k, v) in overrides {
            if !target.contains_key(&k) {
                return Err(CliError::Usage(format!("{}: unknown key {k:?}", path.display())));
            }
            target.insert(k, v);
        }
    }
    let merged = serde_json::from_value(value.clone())
        .map_err(|e| CliError::Usage(format!("bad config: {e}")))?;
    Ok((merged, value))
}

macro_rules! with_config {
    ($args:expr, $run:path, $outcome:expr) => {{
        let (mut merged, value) = apply_config($args, &$args.common)?;
        merged.common.config = $args.common.config.clone();
        merged.common.manifest = $args.common.manifest.clone();
        $run(&merged, $outcome)?;
        (value, merged.common.manifest)
    }};
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SEMICONV_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| CliError::Usage(format!("SEMICONV_THREADS={raw:?} is not a count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let start = Instant::now();
    let mut outcome = Outcome::default();
    let (config, manifest_path) = match &cli.command {
        Command::Dilemma(a) => with_config!(a, commands::dilemma, &mut outcome),
        Command::SynthGen(a) => with_config!(a, commands::synth_gen, &mut outcome),
        Command::Train(a) => with_config!(a, commands::train_cmd, &mut outcome),
        Command::Cluster(a) => with_config!(a, commands::cluster, &mut outcome),
        Command::Seedcut(a) => with_config!(a, commands::seedcut, &mut outcome),
        Command::Gradcheck(a) => with_config!(a, commands::gradcheck, &mut outcome),
        Command::RenderArrows(a) => with_config!(a, commands::render_arrows_cmd, &mut outcome),
    };
    let manifest = RunManifest::new(cli.command.name(), config, outcome, start.elapsed());
    let text = semiconv::json::to_canonical_string(&manifest)?;
    match manifest_path {
        Some(path) => std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
