use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xforge::pipeline::{self, Overrides, RunConfig};

/// Attribution maps, explanation metrics and the explanation optimizer.
#[derive(Parser)]
#[command(name = "xforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration (defaults to <out>/config.toml when present).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier and write its checkpoint and curves.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
    },
    /// Explain test instances and write XMAP files and heatmaps.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Comma-separated method names or `all`.
        #[arg(long)]
        methods: Option<String>,
        /// `N`, `a..b` or `i,j,k` over the test split.
        #[arg(long)]
        instances: Option<String>,
    },
    /// Score every explained map (faithfulness and complexity).
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate fusion weights and write Weighted Average maps.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        methods: Option<String>,
    },
    /// Train the explanation optimizer and write its maps.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Comma-separated learning rates, e.g. 5e-3,5e-4.
        #[arg(long, value_delimiter = ',')]
        lr_grid: Option<Vec<f64>>,
    },
    /// Headline table and box-plot data from the evaluated metrics.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("XFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("XFORGE_THREADS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn config(common: &Common, overrides: Overrides) -> xforge::Result<RunConfig> {
    let o = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        ..overrides
    };
    RunConfig::assemble(common.config.as_deref(), &o)
}

fn run(cli: Cli) -> xforge::Result<()> {
    match cli.command {
        Command::TrainClassifier { common } => {
            let cfg = config(&common, Overrides::default())?;
            let ckpt = pipeline::cmd_train_classifier(&cfg)?;
            println!(
                "trained {} epochs, test accuracy {:.4}; wrote {}",
                ckpt.curves.len(),
                ckpt.test_accuracy.unwrap_or(f64::NAN),
                cfg.out.join(pipeline::CLASSIFIER_FILE).display()
            );
        }
        Command::Explain {
            common,
            methods,
            instances,
        } => {
            let cfg = config(
                &common,
                Overrides {
                    methods,
                    instances,
                    ..Default::default()
                },
            )?;
            let out = pipeline::cmd_explain(&cfg)?;
            let maps: usize = out.iter().map(|i| i.maps.len()).sum();
            println!("wrote {maps} maps for {} instances", out.len());
        }
        Command::Evaluate { common } => {
            let cfg = config(&common, Overrides::default())?;
            let rows = pipeline::cmd_evaluate(&cfg)?;
            let undefined = rows.iter().filter(|r| r.undefined()).count();
            println!(
                "scored {} maps ({undefined} undefined); wrote {}",
                rows.len(),
                cfg.out.join(pipeline::METRICS_FILE).display()
            );
        }
        Command::Fuse { common, methods } => {
            let cfg = config(
                &common,
                Overrides {
                    methods,
                    ..Default::default()
                },
            )?;
            let w = pipeline::cmd_fuse(&cfg)?;
            for (m, v) in w.methods.iter().zip(&w.weights) {
                println!("{m:>22}  {v:.4}");
            }
        }
        Command::Optimize { common, lr_grid } => {
            let cfg = config(
                &common,
                Overrides {
                    lr_grid,
                    ..Default::default()
                },
            )?;
            let outcome = pipeline::cmd_optimize(&cfg)?;
            println!(
                "optimizer trained {} epochs, best validation loss {:.5}",
                outcome.curves.len(),
                outcome.best_val_loss
            );
        }
        Command::Report { common } => {
            let cfg = config(&common, Overrides::default())?;
            let (_, text) = pipeline::cmd_report(&cfg.out)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
