use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dacdet::config::ExperimentConfig;
use dacdet::dataset::{self, EvalSplit};
use dacdet::error::{Error, Result};
use dacdet::metrics;
use dacdet::runner;
use dacdet_core::evalmap::APReport;
use dacdet_core::gradcheck::GradCheckConfig;

#[derive(Parser)]
#[command(name = "dacdet", version, about = "Domain-adaptive parasite detection on synthetic paired microscopy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the paired synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write logs plus the final checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// test, debug (alias test-hcm) or train-hcm.
        #[arg(long, default_value = "test")]
        split: String,
        /// Confidence threshold for precision/recall.
        #[arg(long)]
        conf: Option<f64>,
        /// Write the report and PR curves here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train both arms (with and without the contrastive loss) per seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter gradient in f64.
    GradCheck {
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn print_report(r: &APReport) {
    println!(
        "map50 {:.4}  ring {:.4}  trophozoite {:.4}  schizont {:.4}  gametocyte {:.4}",
        r.map50, r.ap_ring, r.ap_trophozoite, r.ap_schizont, r.ap_gametocyte
    );
    println!("precision {:.4}  recall {:.4}  tp {}  fp {}  fn {}", r.precision, r.recall, r.tp, r.fp, r.fn_);
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let m = dataset::generate_dataset(&cfg.data, &out)?;
            for s in &m.splits {
                println!("{}: {} samples", s.name, s.count);
            }
        }
        Command::Train { config, data, out, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            let o = runner::train(&cfg, &data, &out, resume.as_deref())?;
            println!("{} steps in {:.1}s", o.steps_run, o.wall_seconds);
            if let (Some(f), Some(l)) = (&o.first_loss, &o.last_loss) {
                println!("total loss {:.4} -> {:.4}", f.total, l.total);
            }
            if let Some(r) = &o.test_report {
                print_report(r);
            }
        }
        Command::Eval { checkpoint, data, split, conf, out } => {
            let split: EvalSplit = split.parse()?;
            let r = runner::evaluate_checkpoint(&checkpoint, &data, split, conf)?;
            print_report(&r);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_json(&dir.join("report.json"), &r)?;
                metrics::write_pr_curves(&dir, &r)?;
            }
        }
        Command::Ablate { config, data, seeds, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = runner::ablate(&cfg, &data, &seeds, &out)?;
            print!("{}", runner::format_ablation(&r));
        }
        Command::GradCheck { size, seed } => {
            let cfg = GradCheckConfig { image_size: size, seed, ..GradCheckConfig::default() };
            let r = runner::grad_check(&cfg)?;
            for c in &r.components {
                println!("{:<6} max rel error {:.3e}", c.component, c.max_rel_error);
            }
            println!("PASS: {} tensors, {} scalars, tolerance {:e}", r.n_tensors, r.n_scalars, r.tolerance);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
