use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{self, Context, GRAD_TOLERANCE};

#[derive(Debug, Parser)]
#[command(name = "ghanet", version, about = "Slide-only survival prediction with genome-informed attention")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces train.seed, which also seeds synthetic cohorts.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// No progress notes on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort with planted morphology-gene-risk structure.
    Synth,
    /// Differential gene selection on the training patients.
    SelectGenes {
        /// Cohort manifest; the configured synthetic cohort when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Use this fold's training split instead of every patient.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Train one model and write its checkpoint.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Train on this fold's training split and score its validation split.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Slide-only evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score every patient even if the checkpoint belongs to a fold.
        #[arg(long)]
        all: bool,
        /// Also report gene reconstruction correlations (reads genomics).
        #[arg(long)]
        spearman: bool,
    },
    /// k-fold cross-validation.
    CrossValidate {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Cross-validate once per top-k percentage in sweep.k_percent.
    SweepK {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Association matrices and top patches for one bag.
    ExportAssoc {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bag: PathBuf,
    },
    /// Kaplan-Meier curves and log-rank test for a median-risk split.
    Km {
        /// A predictions.tsv written by eval, train or cross-validate.
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code: 0 success, 1 invalid input or usage, 2 failure while running.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let mut ctx = Context::new(config, cli.out_dir);
    ctx.verbose = !cli.quiet;
    match cli.command {
        Command::Synth => {
            let out = pipeline::synth(&ctx)?;
            println!("wrote {} patients to {}", out.cohort.len(), out.manifest.display());
        }
        Command::SelectGenes { manifest, fold } => {
            let s = pipeline::select_genes(&ctx, manifest.as_deref(), fold)?;
            if let Some(reason) = &s.skipped {
                println!("selection skipped: {reason}");
            }
            println!("retained per category: {:?}", s.lengths());
        }
        Command::Train { manifest, fold } => {
            let (m, _) = pipeline::train(&ctx, manifest.as_deref(), fold)?;
            println!("final training loss {:.6}", m.final_loss);
            if let Some(c) = m.c_index {
                println!("validation c-index {c:.4} over {} patients", m.validation_patients);
            }
        }
        Command::Eval {
            manifest,
            checkpoint,
            all,
            spearman,
        } => {
            let m = pipeline::eval(&ctx, manifest.as_deref(), &checkpoint, all, spearman)?;
            println!("c-index {:.4} over {} patients", m.c_index, m.patients);
            println!("log-rank p {:.4e}", m.km.logrank_p);
        }
        Command::CrossValidate { manifest } => {
            let out = pipeline::cross_validate(&ctx, manifest.as_deref())?;
            let m = &out.metrics;
            println!("c-index {:.4} ± {:.4} ({:?})", m.c_index, m.c_index_std, m.per_fold);
            println!("log-rank p {:.4e}", m.logrank_p);
        }
        Command::SweepK { manifest } => {
            for r in pipeline::sweep_k(&ctx, manifest.as_deref())? {
                println!("k {:>5}%  c-index {:.4} ± {:.4}", r.k_percent, r.mean, r.std);
            }
        }
        Command::ExportAssoc { checkpoint, bag } => {
            let a = pipeline::export_assoc(&ctx, &checkpoint, &bag)?;
            println!("exported associations over {} patches", a.raw.cols());
        }
        Command::Km { predictions } => {
            let m = pipeline::km(&ctx, &predictions)?;
            println!(
                "high {} / low {}: log-rank statistic {:.4}, p {:.4e}",
                m.high_risk, m.low_risk, m.logrank_statistic, m.logrank_p
            );
        }
        Command::GradCheck => {
            let suite = pipeline::grad_check(&ctx)?;
            let mut worst = 0.0f64;
            for (name, r) in &suite {
                println!("{name:<24} {:.3e}  ({})", r.max_rel_error, r.worst_param);
                worst = worst.max(r.max_rel_error);
            }
            println!("max relative error {worst:.3e}");
            // f64::max skips NaN, so test every block
            if !suite.iter().all(|(_, r)| r.max_rel_error < GRAD_TOLERANCE) {
                return Err(Error::Failed(format!(
                    "max relative error {worst:.3e} is not below {GRAD_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(())
}
