use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use fedsiam_cli::config::load_config;
use fedsiam_cli::experiment::{
    build_partition, evaluate_run, load_dataset, partition_report, probe_table, replot_run,
    run_experiment,
};
use fedsiam_cli::sweep::{run_sweep, GridSpec};
use fedsiam_cli::CliError;
use fedsiam_core::partition::partition_stats;

/// Federated self-supervised learning experiments.
#[derive(Parser)]
#[command(name = "fedsiam", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split the dataset into client shards and report their label skew.
    Partition(ConfigArgs),
    /// Run the full pipeline: partition, train, evaluate, plot.
    Train(ConfigArgs),
    /// Re-run probes against a finished run's checkpoints.
    Evaluate {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Override evaluation keys, e.g. --set probe_epochs=60.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the cartesian product of --grid axes and summarize best cells.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Grid axis, e.g. --grid lr=0.1,0.3 --grid lambda=0.01,0.1
        #[arg(long = "grid", value_name = "KEY=V1,V2")]
        grid: Vec<String>,
        /// Run up to this many cells concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Regenerate curve CSVs and SVGs from a run's metrics log.
    Plot {
        /// Run directory containing metrics.jsonl.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML); defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set lr=0.3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    // Shorthand flags for the keys swept most often; these apply after
    // --set overrides.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    ssl: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    num_clients: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut sets = self.set.clone();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{key}={v}"));
            }
        };
        push("method", self.method.clone());
        push("ssl", self.ssl.clone());
        push("lr", self.lr.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("rounds", self.rounds.map(|v| v.to_string()));
        push("num_clients", self.num_clients.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("transport", self.transport.clone());
        push(
            "out_dir",
            self.out_dir
                .as_ref()
                .map(|p| format!("{:?}", p.to_string_lossy())),
        );
        sets
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Partition(args) => {
            let cfg = load_config(args.config.as_deref(), &args.overrides())?;
            let dataset = load_dataset(&cfg)?;
            let partition = build_partition(&cfg, &dataset)?;
            let stats =
                partition_stats(&partition.shards, dataset.train_labels(), dataset.num_classes)?;
            print!("{}", partition_report(&stats, &partition.shards));
            let out = cfg.resolved_out_dir();
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Runtime(format!("create {}: {e}", out.display())))?;
            partition.save(&out.join("partition.json"))?;
            println!("wrote {}", out.join("partition.json").display());
            Ok(())
        }
        Cmd::Train(args) => {
            let cfg = load_config(args.config.as_deref(), &args.overrides())?;
            let (out, summary) = run_experiment(&cfg)?;
            println!(
                "method={} final_loss={:+.4} knn={} artifacts={}",
                summary.method,
                summary.final_loss,
                summary
                    .final_knn
                    .map(|k| format!("{k:.3}"))
                    .unwrap_or_else(|| "-".into()),
                out.display()
            );
            Ok(())
        }
        Cmd::Evaluate { run, set } => {
            let probes = evaluate_run(&run, &set)?;
            print!("{}", probe_table(&probes));
            Ok(())
        }
        Cmd::Sweep {
            config,
            grid,
            parallel,
        } => {
            let grid = GridSpec::parse(&grid)?;
            let (root, table) = run_sweep(config.config.as_deref(), &config.overrides(), &grid, parallel)?;
            print!("{}", table.render());
            println!("summary: {}", root.join("sweep_summary.json").display());
            Ok(())
        }
        Cmd::Plot { run } => {
            for file in replot_run(&run)? {
                println!("wrote {}", file.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        // Bad flags are configuration errors, same as bad file values.
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
