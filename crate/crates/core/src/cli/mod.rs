//! Command-line front end: `unipool <command> [--config FILE] [--key VALUE]...`.
//!
//! Every configuration key is also a long flag; when a flag repeats, the
//! last value wins. Failures print one line
//! `ERROR:<exit code>:<kind>: <message>` on stderr and exit with 1 (usage),
//! 2 (data) or 3 (numerical failure).

pub mod commands;
pub mod options;

use clap::{Arg, ArgMatches, Command};

use crate::config::KeyValues;
use crate::error::{Error, Result};
pub use options::{RunConfig, DATA_DIR_ENV, KEYS};

const COMMANDS: [(&str, &str); 6] = [
    (
        "train",
        "train a model; writes metrics.csv and ckpt_<epoch>.upl",
    ),
    ("eval", "evaluate a checkpoint on the test split"),
    (
        "gradcheck",
        "compare backward gradients with central differences at 64-bit",
    ),
    (
        "analyze",
        "classify the channels of universal pooling sites and export their weights",
    ),
    (
        "synth",
        "write the synthetic dataset in the CIFAR binary layout",
    ),
    ("sweep", "train every pooling row of the comparison grid"),
];

fn command() -> Command {
    let key_args: Vec<Arg> = KEYS
        .iter()
        .map(|k| {
            let help = match k.default {
                Some(d) => format!("{} [default: {d}]", k.help),
                None => k.help.to_string(),
            };
            Arg::new(k.key)
                .long(k.key)
                .value_name("VALUE")
                .help(help)
                .overrides_with(k.key)
        })
        .collect();
    let config = Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("key = value file; command-line flags take precedence")
        .overrides_with("config");
    let mut cmd = Command::new("unipool")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Universal pooling experiments: training, gradient checks and pooling analysis")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        cmd = cmd.subcommand(
            Command::new(name)
                .about(about)
                .arg(config.clone())
                .args(key_args.iter().cloned()),
        );
    }
    cmd
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let file = match m.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some(KeyValues::parse(&text)?)
        }
        None => None,
    };
    let overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|k| {
            m.get_one::<String>(k.key)
                .map(|v| (k.key.to_string(), v.clone()))
        })
        .collect();
    RunConfig::resolve(file.as_ref(), &overrides)
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            return Err(Error::Config(first.to_string()));
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let rc = run_config(sub)?;
    if rc.is_full_scale()? {
        eprintln!(
            "warning: scale = full builds VGG19 / ResNet18 models; training them takes days on a CPU"
        );
    }
    match name {
        "train" => commands::train(&rc),
        "eval" => commands::eval(&rc),
        "gradcheck" => commands::gradcheck(&rc),
        "analyze" => commands::analyze(&rc),
        "synth" => commands::synth(&rc),
        "sweep" => commands::sweep(&rc),
        other => unreachable!("unregistered subcommand {other}"),
    }
}

/// One-line error report for stderr.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', "; ");
    format!("ERROR:{}:{}: {msg}", e.exit_code(), e.kind())
}

/// Runs the process arguments and returns the exit code.
pub fn main_exit_code() -> i32 {
    match run(std::env::args_os()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}
