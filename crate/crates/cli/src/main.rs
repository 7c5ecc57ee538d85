//! `qrm`: generate synthetic data, fit quantile and gating models, score,
//! run the toy RLHF comparison and evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use commands::{EvalArgs, GenDataArgs, RlhfArgs, ScoreArgs, TrainGatingArgs, TrainQuantilesArgs};
use config::{overlay, resolve, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "qrm",
    version,
    about = "Quantile reward models on synthetic feature vectors"
)]
struct Cli {
    /// More log output (-v info, -vv debug); RUST_LOG overrides
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; flags override its values
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed [default: 0]
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory, also searched for default inputs [default: qrm-out]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample attribute ratings, preference pairs and the ground truth
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: GenDataArgs,
    },
    /// Fit per-attribute quantile layers and the point baseline
    TrainQuantiles {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TrainQuantilesArgs,
    },
    /// Train the gating network on preference pairs with quantile layers frozen
    TrainGating {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TrainGatingArgs,
    },
    /// Score prompt/response rows: quantiles, expectation, utility, tail mean
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: ScoreArgs,
    },
    /// Train risk-neutral and risk-aware toy policies against the reward model
    Rlhf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: RlhfArgs,
    },
    /// Pairwise accuracy, coverage and bimodal capture; exits 1 on a failed threshold
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EvalArgs,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failures: Vec<String>,
}

fn emit_error(kind: &str, message: String, failures: Vec<String>) {
    let report = ErrorReport {
        error: kind,
        message,
        failures,
    };
    eprintln!(
        "{}",
        serde_json::to_string(&report).expect("error report serializes")
    );
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<qrm_core::QrmError>() {
            return e.kind();
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "invalid_input"
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

/// `Ok(failures)`: non-empty only for `eval` thresholds.
fn run(command: Command) -> anyhow::Result<Vec<String>> {
    macro_rules! prepare {
        ($common:expr, $args:expr, $section:ident) => {{
            let cfg = RunConfig::load($common.config.as_deref())?;
            let globals = resolve(&cfg, $common.seed, $common.out.clone());
            let settings = overlay(&cfg.$section, stringify!($section), &$args)?;
            log::debug!("{} settings: {settings:?}", stringify!($section));
            (settings, globals)
        }};
    }
    match command {
        Command::GenData { common, args } => {
            let (s, g) = prepare!(common, args, gen_data);
            commands::gen_data(&s, &g)?;
        }
        Command::TrainQuantiles { common, args } => {
            let (s, g) = prepare!(common, args, train_quantiles);
            commands::train_quantiles(&s, &g)?;
        }
        Command::TrainGating { common, args } => {
            let (s, g) = prepare!(common, args, train_gating);
            commands::train_gating_cmd(&s, &g)?;
        }
        Command::Score { common, args } => {
            let (s, g) = prepare!(common, args, score);
            commands::score(&s, &g)?;
        }
        Command::Rlhf { common, args } => {
            let (s, g) = prepare!(common, args, rlhf);
            commands::rlhf(&s, &g)?;
        }
        Command::Eval { common, args } => {
            let (s, g) = prepare!(common, args, eval);
            return commands::eval(&s, &g);
        }
    }
    Ok(Vec::new())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", e.to_string().trim_end().to_string(), Vec::new());
            return ExitCode::from(2);
        }
    };
    init_logging(cli.verbose);
    match run(cli.command) {
        Ok(failures) if failures.is_empty() => ExitCode::SUCCESS,
        Ok(failures) => {
            emit_error(
                "threshold",
                "evaluation thresholds failed; report written".into(),
                failures,
            );
            ExitCode::from(1)
        }
        Err(e) => {
            emit_error(error_kind(&e), format!("{e:#}"), Vec::new());
            ExitCode::from(2)
        }
    }
}
