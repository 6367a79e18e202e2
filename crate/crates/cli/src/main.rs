use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use deepicp_cli::commands::{self, Export, ExportArgs, Method, RegisterArgs};
use deepicp_cli::CliError;
use deepicp_net::cascade::CascadeOptions;

#[derive(Parser)]
#[command(name = "deepicp", about = "Point-cloud registration with learned correspondences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Deepicp,
    Icp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportArg {
    Keypoints,
    Probs,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pair dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and save a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register two clouds with a trained network.
    Register {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// `tx ty tz roll pitch yaw` (degrees) or twelve row-major numbers.
        #[arg(long, allow_hyphen_values = true)]
        prior: String,
        /// Ground truth in the same format; prints the errors.
        #[arg(long, allow_hyphen_values = true)]
        truth: Option<String>,
        #[arg(long)]
        bidirectional: bool,
        #[arg(long)]
        no_cascade: bool,
    },
    /// Evaluate a method over every pair of a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "deepicp")]
        method: MethodArg,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the per-pair CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Register two clouds with point-to-point ICP.
    Icp {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        prior: String,
        #[arg(long, allow_hyphen_values = true)]
        truth: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export keypoints (PLY) or probability volumes (DPRB directory).
    Export {
        #[arg(long, value_enum)]
        what: ExportArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        prior: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> deepicp_cli::Result<String> {
    match command {
        Command::Synth { config, out } => commands::synth(config.as_deref(), &out),
        Command::Train { data, config, out } => commands::train_command(&data, config.as_deref(), &out),
        Command::Register {
            ckpt,
            source,
            target,
            prior,
            truth,
            bidirectional,
            no_cascade,
        } => commands::register(&RegisterArgs {
            checkpoint: &ckpt,
            source: &source,
            target: &target,
            prior: &prior,
            truth: truth.as_deref(),
            options: CascadeOptions {
                cascade: !no_cascade,
                bidirectional,
            },
        }),
        Command::Eval {
            data,
            method,
            ckpt,
            config,
            csv,
        } => {
            let method = match method {
                MethodArg::Deepicp => Method::DeepIcp,
                MethodArg::Icp => Method::Icp,
            };
            commands::eval(&data, method, ckpt.as_deref(), config.as_deref(), csv.as_deref())
        }
        Command::Icp {
            source,
            target,
            prior,
            truth,
            config,
        } => commands::icp(&source, &target, &prior, truth.as_deref(), config.as_deref()),
        Command::Export {
            what,
            ckpt,
            source,
            target,
            prior,
            out,
        } => commands::export(&ExportArgs {
            what: match what {
                ExportArg::Keypoints => Export::Keypoints,
                ExportArg::Probs => Export::Probs,
            },
            checkpoint: &ckpt,
            source: &source,
            target: &target,
            prior: &prior,
            out: &out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().lines().next().unwrap_or("invalid arguments").to_string());
            eprintln!("{}", err.one_line());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::FAILURE
        }
    }
}
