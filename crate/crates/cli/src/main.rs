use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};

use mergelab::ais::Variant;
use mergelab::training::GenerationMode;
use mergelab_cli::{
    cmd_evaluate, cmd_generate, cmd_predict, cmd_simulate, cmd_train, exit_code, Context,
    RunConfig,
};

/// Learned human-driver prediction and iterative MPC for a two-vehicle
/// highway merge.
///
/// Every run is determined by the config file, the flags and the master
/// seed. Flags override config values.
#[derive(Debug, Parser)]
#[command(name = "mergelab", version)]
struct Cli {
    /// JSON run configuration [default: built-in defaults: dt 0.2, H 10,
    /// v in [0, 14], u in [-3, 2], weights (1, 10, 1000), rho 1.0, z_c 70]
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed [default: config `seed`, which defaults to 0]
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory [default: config `paths.out_dir`, which defaults to `out`]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads [default: number of available cores]
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    jobs: Option<u32>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate merge episodes and write them as a trajectory CSV.
    Generate {
        /// Automated-vehicle policy: `safe` (gap acceptance) or `exploratory`
        /// (randomly weighted driver model)
        #[arg(long, default_value = "safe")]
        mode: GenerationMode,
        /// Number of episodes (at least 1)
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Output CSV [default: config `paths.dataset`, else <out>/dataset.csv]
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Train an encoder-decoder model; writes the model, training_loss.csv
    /// and training_report.json.
    Train {
        /// Trajectory CSV [default: config `paths.dataset`, else <out>/dataset.csv]
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Output model [default: config `paths.model`, else <out>/model.json]
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// merge, merge-literal or ngsim [default: merge for merge data, ngsim for NGSIM data]
        #[arg(long)]
        variant: Option<Variant>,
        /// Training epochs [default: config `train.epochs`, which defaults to 100]
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Replay a dataset through a model; writes predictions.csv and rmse.json.
    Predict {
        /// Model file [default: config `paths.model`, else <out>/model.json]
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Trajectory CSV [default: config `paths.dataset`, else <out>/dataset.csv]
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Use a predictor that returns the recorded future instead of a model
        #[arg(long, default_value_t = false)]
        stub_oracle: bool,
    },
    /// Run one closed-loop episode against a human-driver preset; writes
    /// simulate_<preset>_seed<seed>.csv and .json.
    Simulate {
        /// Model file [default: config `paths.model`, else <out>/model.json]
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// `aggressive`, `conservative` or a name defined under config `presets`
        #[arg(long, default_value = "aggressive")]
        preset: String,
        /// Reaction-delay parameter [default: config `scenario.rho`, which defaults to 1.0]
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Monte-Carlo safety table; writes safety_table.json and safety_table.txt.
    Evaluate {
        /// Model file, repeatable; rows are labelled by file stem
        #[arg(long = "model", value_name = "PATH", required = true)]
        models: Vec<PathBuf>,
        /// Episodes per rho value [default: config `evaluation.n`, which defaults to 500]
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated rho values [default: config `evaluation.rho_values`, 0.6,0.8,1.0]
        #[arg(long, value_delimiter = ',')]
        rho: Option<Vec<f64>>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j as usize)
            .build_global()
            .context("cannot start worker pool")?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.paths.out_dir = o;
    }
    let set = |slot: &mut Option<PathBuf>, v: Option<PathBuf>| {
        if v.is_some() {
            *slot = v;
        }
    };
    match cli.command {
        Command::Generate { mode, n, dataset } => {
            set(&mut cfg.paths.dataset, dataset);
            let ctx = Context::new(cfg, "generate")?;
            let s = cmd_generate(&ctx, mode, n)?;
            println!("wrote {}", s.path.display());
            println!("episodes: {}", s.episodes);
            println!("unsafe fraction: {:.4}", s.unsafe_fraction);
        }
        Command::Train {
            dataset,
            model,
            variant,
            epochs,
        } => {
            set(&mut cfg.paths.dataset, dataset);
            set(&mut cfg.paths.model, model);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let ctx = Context::new(cfg, "train")?;
            let s = cmd_train(&ctx, variant)?;
            for w in &s.report.warnings {
                eprintln!("warning: {w}");
            }
            let r = &s.report;
            println!("wrote {}", s.model_path.display());
            println!(
                "validation loss {:.6} -> {:.6} (best epoch {})",
                r.initial_val_loss, r.best_val_loss, r.best_epoch
            );
        }
        Command::Predict {
            model,
            dataset,
            stub_oracle,
        } => {
            set(&mut cfg.paths.dataset, dataset);
            set(&mut cfg.paths.model, model);
            let ctx = Context::new(cfg, "predict")?;
            let s = cmd_predict(&ctx, stub_oracle)?;
            println!("wrote {}", s.predictions_path.display());
            println!("wrote {}", s.rmse_path.display());
            println!("position rmse: {:.6}", s.rmse.position_rmse);
            if let Some(v) = s.rmse.speed_rmse {
                println!("speed rmse: {v:.6}");
            }
        }
        Command::Simulate { model, preset, rho } => {
            set(&mut cfg.paths.model, model);
            if let Some(r) = rho {
                cfg.scenario.rho = r;
            }
            let ctx = Context::new(cfg, "simulate")?;
            let s = cmd_simulate(&ctx, &preset)?;
            let fmt = |t: Option<f64>| t.map_or("never".to_string(), |t| format!("{t:.2} s"));
            println!("wrote {}", s.csv_path.display());
            println!("automated vehicle crosses at {}", fmt(s.log.cav_crossing));
            println!("human driver crosses at {}", fmt(s.log.hdv_crossing));
            println!("safe: {}", s.log.safe);
        }
        Command::Evaluate { models, n, rho } => {
            if let Some(n) = n {
                if n == 0 {
                    return Err(mergelab::Error::Usage("--n must be at least 1".into()).into());
                }
                cfg.evaluation.n = n;
            }
            if let Some(r) = rho {
                cfg.evaluation.rho_values = r;
            }
            let ctx = Context::new(cfg, "evaluate")?;
            let (table, paths) = cmd_evaluate(&ctx, &models)?;
            print!("{}", table.to_text());
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
