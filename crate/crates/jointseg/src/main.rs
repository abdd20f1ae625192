use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use jointseg::commands::{self, InferOptions, Task, TrainOptions};
use jointseg::config::SynthSpec;
use jointseg::{Error, Result};
use jointseg_core::data::Split;
use jointseg_core::gradcheck::Target;

/// Joint semantic segmentation and depth estimation with a depth-aware dense CRF.
///
/// Exit codes: 0 success, 1 validation error (bad arguments, config or failed
/// gradient check), 2 runtime error (IO, corrupt files, diverged training).
#[derive(Parser)]
#[command(name = "jointseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic block-world dataset.
    Synth {
        /// Synthetic dataset spec (TOML).
        spec: PathBuf,
        /// Output dataset directory.
        out: PathBuf,
    },
    /// Run the staged training schedule of a run config.
    Train {
        config: PathBuf,
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations in total.
        #[arg(long)]
        max_iterations: Option<u64>,
    },
    /// Predict labels, depth and class marginals for an image or a dataset.
    Infer {
        config: PathBuf,
        /// PNG image or dataset directory.
        input: PathBuf,
        /// Output directory (dataset layout plus marginals/).
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to load; defaults to the latest one of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Label by argmax of the network logits.
        #[arg(long)]
        no_crf: bool,
        /// Mean-field iterations.
        #[arg(long, conflicts_with = "no_crf")]
        crf_iters: Option<usize>,
        /// Only predict this split of a dataset input.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Score predictions against ground truth.
    Eval {
        pred: PathBuf,
        truth: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Run config providing class count and names.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        num_classes: Option<usize>,
        /// Write the CSV report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Flip the sign of one analytic gradient entry; the check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Depth,
    Seg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    Net,
    Losses,
    Crf,
    All,
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(Error::io(dir))?;
            }
            fs::write(p, text).map_err(Error::io(p))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let s = SynthSpec::load(&spec)?;
            let entries = commands::synth(&s, &out)?;
            let test = entries.iter().filter(|e| e.split == Split::Test).count();
            println!("{} scenes ({} train, {test} test) in {}", entries.len(), entries.len() - test, out.display());
        }
        Command::Train { config, resume, max_iterations } => {
            let s = commands::train(&config, TrainOptions { resume, max_iterations })?;
            println!(
                "{} iterations (total {}, stages completed {}); checkpoint {}",
                s.iterations_run,
                s.state.iteration,
                s.state.stages_completed,
                s.latest.display()
            );
        }
        Command::Infer { config, input, out, checkpoint, no_crf, crf_iters, split } => {
            let split = split.map(|s| match s {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            });
            let ids = commands::infer(&config, checkpoint.as_deref(), &input, &out, InferOptions { no_crf, crf_iters, split })?;
            println!("{} predictions in {}", ids.len(), out.display());
        }
        Command::Eval { pred, truth, task, config, num_classes, out } => {
            let task = match task {
                TaskArg::Depth => Task::Depth,
                TaskArg::Seg => Task::Seg,
            };
            let (c, names) = match task {
                Task::Seg => commands::class_names_for(config.as_deref(), num_classes)?,
                Task::Depth => (0, Vec::new()),
            };
            let e = commands::eval(&pred, &truth, task, c)?;
            match out {
                Some(p) => {
                    write_out(Some(&p), &e.csv(&names))?;
                    print!("{}", e.text(&names));
                }
                None => write_out(None, &e.csv(&names))?,
            }
        }
        Command::Gradcheck { module, seed, corrupt } => {
            let targets: &[Target] = match module {
                ModuleArg::Net => &[Target::Net],
                ModuleArg::Losses => &[Target::Losses],
                ModuleArg::Crf => &[Target::Crf],
                ModuleArg::All => &Target::ALL,
            };
            let reports = commands::gradcheck(targets, seed, corrupt)?;
            for r in &reports {
                println!("{}", commands::gradcheck_line(r));
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.target.name()).collect();
            if !failed.is_empty() {
                return Err(Error::GradcheckFailed(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
