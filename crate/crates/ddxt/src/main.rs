use std::io::{self, Read};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddxt::commands;
use ddxt::config::{Layer, RunConfig};
use ddxt::error::{Error, Result};
use ddxt::report::summary_line;
use ddxt_core::dataset::SyntheticConfig;

#[derive(Parser)]
#[command(name = "ddxt", version, about = "Differential-diagnosis transformer: data, training, evaluation and prediction")]
struct Cli {
    /// TOML file with [model], [train] and [paths] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus in the patient CSV schema.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        pathologies: usize,
        /// Defaults to max(16, 2 * pathologies).
        #[arg(long)]
        evidence_codes: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, env = "DDXT_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Build encoder and decoder vocabularies from CSV files.
    BuildVocab {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        flags: Layer,
    },
    /// Tokenize a CSV file into a binary example cache.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        flags: Layer,
    },
    /// Train with teacher forcing, checkpointing every epoch.
    Train {
        /// Continue from last.ckpt in the checkpoint directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        flags: Layer,
    },
    /// Score a checkpoint on the test split and write report files.
    Eval {
        /// Defaults to best.ckpt, else last.ckpt, in the checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Feed gold decoder inputs instead of generated ones.
        #[arg(long)]
        teacher_forced: bool,
        #[command(flatten)]
        flags: Layer,
    },
    /// Diagnose a case given as JSON and print the result.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON file, or `-` for standard input.
        #[arg(long, default_value = "-")]
        input: String,
        /// Include classifier logits in the output.
        #[arg(long)]
        logits: bool,
    },
}

fn read_input(src: &str) -> Result<String> {
    if src == "-" {
        let mut s = String::new();
        io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Error::io(std::path::Path::new("<stdin>"), e))?;
        Ok(s)
    } else {
        let p = PathBuf::from(src);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }
}

fn run(cli: Cli) -> Result<()> {
    let resolve = |flags: &Layer| RunConfig::resolve(cli.config.as_deref(), flags);
    match &cli.command {
        Command::GenData { out, n, pathologies, evidence_codes, noise, seed } => {
            let cfg = SyntheticConfig {
                n_pathologies: *pathologies,
                n_evidence_codes: evidence_codes.unwrap_or(16.max(2 * pathologies)),
                n_records: *n,
                seed: *seed,
                noise_rate: *noise,
            };
            let sizes = commands::gen_data(out, &cfg, (0.8, 0.1, 0.1))?;
            println!("wrote {} train, {} val, {} test records to {}", sizes[0], sizes[1], sizes[2], out.display());
        }
        Command::BuildVocab { inputs, flags } => {
            let run = resolve(flags)?;
            let (enc, dec) = commands::build_vocab(inputs, &run.paths.vocab_dir)?;
            println!(
                "encoder vocabulary {} tokens, decoder vocabulary {} tokens, in {}",
                enc.len(),
                dec.len(),
                run.paths.vocab_dir.display()
            );
        }
        Command::Preprocess { input, output, flags } => {
            let run = resolve(flags)?;
            let n = commands::preprocess(input, output, &run)?;
            println!("cached {n} examples in {}", output.display());
        }
        Command::Train { resume, flags } => {
            let run = resolve(flags)?;
            let out = commands::train(&run, *resume, &mut io::stderr())?;
            println!("trained {} epochs; last checkpoint {}", out.epochs_run, out.last.display());
            if let Some(b) = out.best {
                println!("best validation checkpoint {}", b.display());
            }
        }
        Command::Eval { checkpoint, teacher_forced, flags } => {
            let run = resolve(flags)?;
            let report = commands::eval(&run, checkpoint.as_deref(), *teacher_forced)?;
            println!("{}", summary_line(&report));
            println!(
                "{} records, {}; reports in {}",
                report.meta.n_records,
                report.meta.decoding,
                run.paths.report_dir.display()
            );
        }
        Command::Predict { checkpoint, input, logits } => {
            let text = read_input(input)?;
            let v = commands::predict(checkpoint, &text, *logits)?;
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
