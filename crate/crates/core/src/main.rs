use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sweatid::experiment::{self, Experiment};
use sweatid::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sweatid",
    version,
    about = "Sweat amino-acid biometric simulator"
)]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the experiment's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace every configured seed with seeds derived from this one.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads for the simulation pipeline.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the cohort CSV of every configured group.
    Cohort,
    /// Run cohort → kinetics → transduction → digitization; write output streams.
    Pipeline,
    /// Enroll a template per individual from the pipeline output streams.
    Enroll,
    /// Verify one output stream against one template; append to audit.csv.
    Verify {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        /// First stream step used for verification.
        #[arg(long, default_value_t = 0)]
        from_step: usize,
    },
    /// ROC, AUC, DeLong interval and EER of a `label,score` CSV.
    Roc {
        #[arg(long)]
        scores: PathBuf,
    },
    /// End-to-end authentication evaluation with ROC files and report.json.
    Report,
}

fn load(cli: &Cli) -> Result<Experiment> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut exp = Experiment::load(path, cli.seed_override)?.with_jobs(cli.jobs);
    if let Some(out) = &cli.out {
        exp = exp.with_output_dir(out.clone());
    }
    Ok(exp)
}

fn run(cli: &Cli) -> Result<()> {
    if cli.jobs == Some(0) {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    match &cli.command {
        Command::Cohort => {
            for path in experiment::cmd_cohort(&load(cli)?)? {
                println!("{}", path.display());
            }
        }
        Command::Pipeline => {
            let exp = load(cli)?;
            let members = experiment::cmd_pipeline(&exp)?;
            println!(
                "{} streams written to {}",
                members.len(),
                exp.output_dir.join("outputs").display()
            );
        }
        Command::Enroll => {
            for path in experiment::cmd_enroll(&load(cli)?)? {
                println!("{}", path.display());
            }
        }
        Command::Verify {
            template,
            stream,
            from_step,
        } => {
            let d = experiment::cmd_verify(&load(cli)?, template, stream, *from_step)?;
            println!(
                "{:?} statistic={:.6} step={:?} time={:?}",
                d.verdict, d.statistic, d.decision_step, d.decision_time
            );
        }
        Command::Roc { scores } => {
            let pop = experiment::read_scores_csv(scores)?;
            let (dir, hash) = match &cli.config {
                Some(_) => {
                    let exp = load(cli)?;
                    (exp.output_dir.clone(), Some(exp.config_hash))
                }
                None => (cli.out.clone().unwrap_or_else(|| PathBuf::from(".")), None),
            };
            let s = experiment::write_roc(&dir, "roc", &pop, hash.as_deref())?;
            println!(
                "auc={:.6} ci=[{:.6}, {:.6}] eer={:.6}",
                s.auc, s.ci_low, s.ci_high, s.eer
            );
        }
        Command::Report => {
            let exp = load(cli)?;
            let r = experiment::cmd_auth_eval(&exp)?;
            println!(
                "k=1: auc={:.4} eer={:.4}; k={}: auc={:.4} eer={:.4}; report at {}",
                r.single_step.auc,
                r.single_step.eer,
                r.accumulate,
                r.accumulated.auc,
                r.accumulated.eer,
                exp.output_dir.join("report.json").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
