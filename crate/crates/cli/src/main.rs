use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use stuffml_cli::commands::{dispatch, Command, SchemeArg};
use stuffml_cli::config::{parse_config, parse_str};

#[derive(Parser)]
#[command(
    name = "stuffml",
    version,
    about = "Train codecs for simulated stuff and check them by tomography"
)]
struct Cli {
    /// Run configuration (`section.key = value` lines). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Sub,
}

#[derive(Args)]
struct SchemeOpts {
    /// Scheme checkpoint written by `train`.
    #[arg(long, conflicts_with = "hand")]
    checkpoint: Option<PathBuf>,
    /// Use the hand-written reference scheme.
    #[arg(long)]
    hand: bool,
}

impl SchemeOpts {
    fn arg(&self) -> SchemeArg {
        match &self.checkpoint {
            Some(p) => SchemeArg::Checkpoint(p.clone()),
            None => SchemeArg::Hand,
        }
    }
}

#[derive(Subcommand)]
enum Sub {
    /// Ideal probability of a circuit file.
    Oracle { circuit: PathBuf },
    /// Random circuits from the configured generator.
    GenCircuits,
    /// Run a circuit through a scheme on the configured stuff.
    Simulate {
        circuit: PathBuf,
        #[command(flatten)]
        scheme: SchemeOpts,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Train a scheme on the configured stuff.
    Train {
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fragment tomography and bounded-data reconstruction on a chain strip.
    Tomography {
        #[command(flatten)]
        scheme: SchemeOpts,
    },
    /// Error growth against circuit size.
    Conjecture1 {
        #[command(flatten)]
        scheme: SchemeOpts,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let parsed = match &cli.config {
        Some(p) => parse_config(p),
        None => parse_str(""),
    };
    let mut cfg = match parsed.and_then(|mut c| c.apply_env(|k| std::env::var(k).ok()).map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cmd = match cli.cmd {
        Sub::Oracle { circuit } => Command::Oracle { circuit },
        Sub::GenCircuits => Command::GenCircuits,
        Sub::Simulate {
            circuit,
            scheme,
            episodes,
        } => Command::Simulate {
            circuit,
            scheme: scheme.arg(),
            episodes,
        },
        Sub::Train { resume } => Command::Train { resume },
        Sub::Tomography { scheme } => Command::Tomography {
            scheme: scheme.arg(),
        },
        Sub::Conjecture1 { scheme } => Command::Conjecture1 {
            scheme: scheme.arg(),
        },
    };
    if let Command::Simulate {
        scheme: SchemeArg::Checkpoint(p),
        ..
    } = &cmd
    {
        if !p.exists() {
            eprintln!("error: checkpoint {} not found", p.display());
            return ExitCode::from(2);
        }
    }
    cfg.out_dir = cfg.out_dir.join(cmd.name());
    match dispatch(&cmd, &cfg) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
