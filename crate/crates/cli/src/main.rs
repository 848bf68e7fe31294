use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffwin::attention::Site;
use diffwin::train::Split;
use diffwin_cli::commands::{self, EvalArgs, MaskDumpArgs, Scope};
use diffwin_cli::config::{Overrides, RunConfig};
use diffwin_cli::{Failure, EXIT_GRADCHECK};
use serde_json::Value;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "diffwin", version, about = "Train, evaluate and inspect window-attention models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, metrics.ndjson and final.bin.
    Train(TrainArgs),
    /// Score a checkpoint and print metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Corpus path for char-level checkpoints, if moved.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(value_enum)]
        scope: ScopeArg,
        /// Corrupt one primitive's backward rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write mask, score and weight CSVs for one attention head.
    Maskdump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Token ids separated by spaces or commas.
        #[arg(long, conflicts_with = "text")]
        tokens: Option<String>,
        /// Text for character-level models.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, value_enum)]
        site: SiteArg,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long, default_value_t = 1)]
        head: usize,
        #[arg(long, default_value = "maskdump")]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON config file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Window spec, e.g. "Enc(AW)-Cr(AW,Seg)-Dec(MW)" or "global".
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    segment_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop once a held-out metric record reaches this value.
    #[arg(long)]
    stop_at: Option<f64>,
    /// Write 0 for wall_ms so reruns give byte-identical logs.
    #[arg(long)]
    no_wall_clock: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Attention,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum SiteArg {
    #[value(alias = "encoder_self")]
    Enc,
    #[value(alias = "decoder_self")]
    Dec,
    #[value(alias = "cr")]
    Cross,
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json serialises"));
}

fn run_train(a: TrainArgs) -> Result<(), Failure> {
    let flags = Overrides {
        preset: a.preset,
        model: a.model,
        steps: a.steps,
        seed: a.seed,
        batch: a.batch,
        segment_size: a.segment_size,
        out: a.out,
        corpus: a.corpus,
        lr: a.lr,
        stop_at: a.stop_at,
        no_wall_clock: a.no_wall_clock,
    };
    let cfg = match &a.config {
        Some(path) => RunConfig::from_file(path, &flags)?,
        None => RunConfig::resolve(None, &flags)?,
    };
    if a.print_config {
        print(&serde_json::to_value(&cfg).expect("config serialises"));
        return Ok(());
    }
    print(&commands::train(&cfg)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval {
            checkpoint,
            split,
            corpus,
            batches,
            batch,
        } => {
            let args = EvalArgs {
                checkpoint,
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Eval => Split::Eval,
                },
                corpus,
                batches,
                batch_size: batch,
            };
            print(&commands::eval(&args)?);
            Ok(())
        }
        Command::Gradcheck { scope, inject_fault } => {
            let scope = match scope {
                ScopeArg::Ops => Scope::Ops,
                ScopeArg::Attention => Scope::Attention,
                ScopeArg::Model => Scope::Model,
            };
            let reports = commands::gradcheck(scope, inject_fault.as_deref())?;
            let mut failed = Vec::new();
            for r in &reports {
                let mut v = serde_json::to_value(r).expect("report serialises");
                v["passed"] = Value::Bool(r.passed());
                println!("{v}");
                eprintln!(
                    "{:<4} {:<60} {:.3e} (threshold {:.0e})",
                    if r.passed() { "ok" } else { "FAIL" },
                    r.unit,
                    r.max_rel_error,
                    r.threshold
                );
                if !r.passed() {
                    failed.push(r.unit.as_str());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                eprintln!("gradient check failed for: {}", failed.join("; "));
                std::process::exit(EXIT_GRADCHECK);
            }
        }
        Command::Maskdump {
            checkpoint,
            tokens,
            text,
            site,
            layer,
            head,
            out,
        } => {
            let args = MaskDumpArgs {
                checkpoint,
                tokens,
                text,
                site: match site {
                    SiteArg::Enc => Site::EncoderSelf,
                    SiteArg::Dec => Site::DecoderSelf,
                    SiteArg::Cross => Site::Cross,
                },
                layer,
                head,
                out,
            };
            print(&commands::maskdump(&args)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
