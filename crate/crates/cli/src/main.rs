use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use u2ut_core::seqprep::Side;
use u2ut_core::synth::ToySpec;
use u2ut_core::train::TrainError;

use u2ut_cli::commands::{self, FrontendKind, TranslateOutput};
use u2ut_cli::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "u2ut", version, about = "Speech-to-speech translation over discrete acoustic units")]
struct Cli {
    /// Worker threads: 1 is the bitwise-reproducible reference mode.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Source,
    Target,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Source => Side::Source,
            SideArg::Target => Side::Target,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FrontendArg {
    Discrete,
    Continuous,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutArg {
    Units,
    Wav,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Units,
    Transcripts,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic parallel corpus and its train/dev/test split.
    SynthData {
        /// Toy spec file (`key = value`); defaults are used when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, num_args = 3, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        split: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract features, train or load a codebook, and cache unit files.
    ExtractUnits {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        side: SideArg,
        /// Codebook file: loaded when it exists, otherwise trained and written.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Train a translation model on the configured manifests.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "discrete")]
        frontend: FrontendArg,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy-decode a manifest with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "units")]
        out: OutArg,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score hypotheses with corpus BLEU and WER.
    Evaluate {
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Units: directory of `<id>.u2uu`. Transcripts: one line per utterance.
        #[arg(long)]
        hyp: PathBuf,
        /// Units: manifest with target units. Transcripts: reference lines.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also write the report as a CSV row.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Histogram of units per sample (bin width 10) as CSV.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "source")]
        side: SideArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score each row of a hyperparameter grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epoch_cap: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_output(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            u2ut_cli::pipeline::ensure_parent(p)?;
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("configuring the thread pool")?;
    let stdout = &mut io::stdout();
    match cli.command {
        Command::SynthData {
            spec,
            pairs,
            seed,
            split,
            out,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    ToySpec::parse(&text)?
                }
                None => ToySpec::default(),
            };
            commands::synth_data(&spec, pairs, seed, [split[0], split[1], split[2]], &out, stdout)
        }
        Command::ExtractUnits {
            config,
            manifest,
            side,
            codebook,
        } => {
            let cfg = load_config(config.as_deref())?;
            commands::extract_units(&cfg, &manifest, side.into(), codebook.as_deref(), stdout)
        }
        Command::Train { config, frontend, resume } => {
            let cfg = PipelineConfig::load(&config)?;
            let flag = Arc::new(AtomicBool::new(false));
            let handler_flag = flag.clone();
            ctrlc::set_handler(move || handler_flag.store(true, Ordering::SeqCst))
                .context("installing the interrupt handler")?;
            let frontend = match frontend {
                FrontendArg::Discrete => FrontendKind::Discrete,
                FrontendArg::Continuous => FrontendKind::Continuous,
            };
            match commands::train_command(&cfg, frontend, resume.as_deref(), Some(flag), stdout) {
                Err(e) => {
                    let hint = match e.downcast_ref::<TrainError>() {
                        Some(TrainError::Interrupted { checkpoint }) => {
                            Some(format!("resume with --resume {}", checkpoint.display()))
                        }
                        _ => None,
                    };
                    Err(match hint {
                        Some(h) => e.context(h),
                        None => e,
                    })
                }
                Ok(_) => Ok(()),
            }
        }
        Command::Translate {
            checkpoint,
            manifest,
            out,
            out_dir,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let output = match out {
                OutArg::Units => TranslateOutput::Units,
                OutArg::Wav => TranslateOutput::Wav,
            };
            commands::translate(&cfg, &checkpoint, &manifest, output, &out_dir, stdout).map(|_| ())
        }
        Command::Evaluate {
            mode,
            hyp,
            reference,
            csv,
        } => {
            let report = match mode {
                EvalMode::Units => commands::evaluate_unit_files(&hyp, &reference)?,
                EvalMode::Transcripts => commands::evaluate_transcript_files(&hyp, &reference)?,
            };
            commands::write_report(&report, csv.as_deref(), stdout)
        }
        Command::Stats { manifest, side, out } => write_output(&commands::stats(&manifest, side.into())?, out.as_deref()),
        Command::Ablate {
            grid,
            config,
            epoch_cap,
            out,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let csv = commands::ablate(&cfg, &grid, epoch_cap, &mut io::stderr())?;
            write_output(&csv, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
