use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use clickme_game::server::{serve, AppState};
use clickme_game::store::{Catalog, GameStore};
use gala_cli::{CliError, Overrides, Result, RunConfig};
use gala_core::checkpoint;
use gala_core::dataset::load_folder;

/// Attention networks co-trained with human importance maps.
///
/// Every flag can also be set through an environment variable named
/// `GALA_<FLAG>` (for example `GALA_SEED=3`); flags on the command line win.
#[derive(Debug, Parser)]
#[command(name = "gala", version)]
struct Cli {
    /// JSON run configuration (see --dump-config for every field).
    #[arg(long, global = true, env = "GALA_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "GALA_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "GALA_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "GALA_LAMBDA")]
    lambda: Option<f64>,
    #[arg(long, global = true, env = "GALA_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, global = true, env = "GALA_PORT", default_value_t = 8080)]
    port: u16,
    /// Partner classifier checkpoint for the game server.
    #[arg(long, global = true, env = "GALA_PARTNER")]
    partner: Option<PathBuf>,
    /// Print the configuration with all defaults filled in and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic shapes dataset folder.
    Synth {
        #[arg(long, default_value_t = 5000)]
        count: usize,
    },
    /// Train one model; writes model.ckpt, report.json, summary.json and epochs.ndjson.
    Train,
    /// Train every lambda several times; writes sweep.ndjson and sweep.csv.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Score a checkpoint on a dataset folder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Build reveal stimuli from importance maps.
    Stimuli {
        /// Map folder with maps.ndjson.
        #[arg(long)]
        maps: PathBuf,
        /// Dataset folder with index.ndjson.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Run the game server.
    Serve {
        #[arg(long)]
        data: PathBuf,
        /// Directory for the game log and snapshots.
        #[arg(long, default_value = "game-store")]
        store: PathBuf,
    },
    /// Aggregate finished rounds into a map folder.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides { seed: cli.seed, lambda: cli.lambda, epochs: cli.epochs };
    if cli.dump_config {
        return print_json(&RunConfig::load(cli.config.as_deref(), &overrides)?);
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Usage("no command given; see --help".into()));
    };
    match command {
        Command::Synth { count } => {
            let out = out_dir(&cli, "shapes");
            gala_cli::synth(*count, cli.seed.unwrap_or(7), &out)?;
            println!("wrote {count} images to {}", out.display());
        }
        Command::Train => {
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            let out = out_dir(&cli, "run");
            let done = gala_cli::train(&cfg, &out, |e| {
                println!("{}", serde_json::to_string(e).unwrap_or_default());
            })?;
            println!(
                "selected epoch {}; test error {:.4}; checkpoint {}",
                done.summary.selected_epoch,
                done.summary.test_error,
                out.join(gala_cli::CHECKPOINT_FILE).display()
            );
        }
        Command::Sweep { lambdas, repeats } => {
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            let out = out_dir(&cli, "sweep");
            let done = gala_cli::sweep(&cfg, lambdas, *repeats, Some(&out), |r| {
                println!("{}", serde_json::to_string(r).unwrap_or_default());
            })?;
            println!("lambda  accuracy  explained  iou  baseline_iou");
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
            for r in &done.rows {
                println!(
                    "{:<7} {:.4}    {}     {}  {}",
                    r.lambda,
                    r.mean_test_accuracy,
                    f(r.mean_explained_variability),
                    f(r.mean_iou),
                    f(r.mean_baseline_iou)
                );
            }
            if let Some(l) = done.tuned_lambda {
                println!("tuned lambda {l}");
            }
        }
        Command::Eval { checkpoint, data } => {
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            let rows = gala_cli::eval(checkpoint, data, &cfg.train)?;
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("eval.json"), serde_json::to_vec_pretty(&rows)?)?;
            }
            print_json(&rows)?;
        }
        Command::Stimuli { maps, images, steps } => {
            let out = out_dir(&cli, "stimuli");
            let recs = gala_cli::stimuli(maps, images, *steps, cli.seed.unwrap_or(0), &out)?;
            println!("wrote {} stimuli to {}", recs.len(), out.display());
        }
        Command::Serve { data, store } => {
            let partner_path = cli
                .partner
                .as_ref()
                .ok_or_else(|| CliError::Usage("serve needs --partner <checkpoint>".into()))?;
            let partner = checkpoint::load(partner_path)?;
            let catalog = Catalog::from_samples(&load_folder(data)?);
            let store = GameStore::open(store, catalog)?;
            let state = AppState::new(store, Arc::new(partner));
            let addr = SocketAddr::from(([0, 0, 0, 0], cli.port));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(addr, state))?;
        }
        Command::Export { store, data } => {
            let out = out_dir(&cli, "clickme-maps");
            let recs = gala_cli::export(store, data, &out)?;
            println!("exported {} maps to {}", recs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
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
