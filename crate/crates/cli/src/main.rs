mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use amd_core::Result;
use clap::{value_parser, Arg, ArgMatches, Command};

use config::{defaults_table, render_value, resolve, RunConfig, KEYS};

fn with_keys(cmd: Command) -> Command {
    let defaults = defaults_table();
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("flat TOML file with any of the keys below"),
    );
    for (key, desc) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help(format!("{} [default: {}]", desc, render_value(&defaults[*key])))
                .help_heading("Config keys"),
        );
    }
    cmd
}

fn cli() -> Command {
    let sub = |name: &'static str, about: &'static str| with_keys(Command::new(name).about(about));
    Command::new("amd")
        .about("Attribute-guided metric distillation on synthetic person images")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("gen-data", "Render and split the synthetic dataset"))
        .subcommand(sub("train-target", "Train and freeze the target embedder"))
        .subcommand(sub("train-interpreter", "Distill the target into the interpreter"))
        .subcommand(
            sub("explain", "Decompose the distance of one image pair")
                .arg(
                    Arg::new("query")
                        .required(true)
                        .value_parser(value_parser!(usize))
                        .help("query image index"),
                )
                .arg(
                    Arg::new("gallery")
                        .required(true)
                        .value_parser(value_parser!(usize))
                        .help("gallery image index"),
                ),
        )
        .subcommand(sub("evaluate", "Retrieval, ADRE, X-mAP and localization report"))
        .subcommand(sub("reweight-eval", "Baseline versus re-weighted retrieval"))
        .subcommand(sub("avg-attention", "Average attention maps per attribute"))
}

fn config_from(m: &ArgMatches) -> Result<RunConfig> {
    let overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    resolve(m.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides)
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = config_from(m)?;
    match name {
        "gen-data" => commands::gen_data(&cfg),
        "train-target" => commands::train_target_cmd(&cfg),
        "train-interpreter" => commands::train_interpreter_cmd(&cfg),
        "explain" => commands::explain_cmd(&cfg, m.get_one::<usize>("query").copied().unwrap_or(0), m.get_one::<usize>("gallery").copied().unwrap_or(0)),
        "evaluate" => commands::evaluate_cmd(&cfg),
        "reweight-eval" => commands::reweight_cmd(&cfg),
        "avg-attention" => commands::avg_attention_cmd(&cfg),
        other => Err(amd_core::AmdError::Usage(format!("unknown command {}", other))),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
