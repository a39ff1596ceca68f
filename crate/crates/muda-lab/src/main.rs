//! Thin subcommand front-end over the experiment harness.
//!
//! Exit codes: 0 on success, 1 on invalid config, 2 on runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use muda_lab::harness::{self, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "muda-lab", version, about = "Machine-unlearning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the original model per seed and write checkpoints.
    Train(CommonArgs),
    /// Train, then run every configured unlearning method; write unlearned
    /// checkpoints and phase traces.
    Unlearn(CommonArgs),
    /// Full pipeline: train, retrain, unlearn, evaluate; write table.csv and
    /// table.json.
    Evaluate(CommonArgs),
    /// Like evaluate, and print the per-metric winners (smallest mean
    /// absolute diff from the retrained reference).
    Compare(CommonArgs),
    /// Backdoor-defense pipeline: poison, train, unlearn, report ASR.
    Backdoor(CommonArgs),
    /// Extended-budget stability sweep; write per-method LP curves.
    Stability(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed (overrides the config's seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => args.load().and_then(|cfg| harness::run_train(&cfg)),
        Command::Unlearn(args) => args.load().and_then(|cfg| harness::run_unlearn(&cfg)),
        Command::Evaluate(args) => args.load().and_then(|cfg| {
            let table = harness::run_experiment(&cfg)?;
            print_table_summary(&table);
            Ok(())
        }),
        Command::Compare(args) => args.load().and_then(|cfg| {
            let table = harness::run_experiment(&cfg)?;
            print_table_summary(&table);
            print_winners(&table);
            Ok(())
        }),
        Command::Backdoor(args) => args.load().and_then(|cfg| {
            let table = harness::run_backdoor(&cfg)?;
            print_table_summary(&table);
            print_winners(&table);
            Ok(())
        }),
        Command::Stability(args) => args.load().and_then(|cfg| {
            let curves = harness::run_stability(&cfg)?;
            for c in &curves {
                let last = c.lp_retain.last().copied().unwrap_or(f64::NAN);
                println!("{} seed {}: {} samples, final LP(retain) {:.3}", c.method, c.seed, c.iterations.len(), last);
            }
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_table_summary(table: &harness::ComparisonTable) {
    for mean in &table.means {
        let cell = |i: usize| {
            mean.metrics[i].map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
        };
        println!(
            "{:<20} da {}  lp_f {}  lp_r {}  f1 {}  nmi {}  acc_f {}  acc_r {}  mia {}  asr {}",
            mean.method,
            cell(0),
            cell(1),
            cell(2),
            cell(4),
            cell(5),
            cell(6),
            cell(7),
            cell(8),
            cell(9),
        );
    }
}

fn print_winners(table: &harness::ComparisonTable) {
    for w in &table.winners {
        println!("closest to retrained on {:<12} {}", w.metric, w.methods.join(", "));
    }
}
