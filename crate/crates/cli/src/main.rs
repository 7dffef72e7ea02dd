use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adapterlab_core::experiment::{
    cmd_ablate, cmd_logistic, cmd_params, cmd_plot, cmd_spectral, cmd_sweep, diagnose_sequence, preset_geometry,
    GridOutcome, LogisticReport,
};
use adapterlab_core::{Error, ExperimentConfig, MatrixGeometry, SpectralSource};
use clap::{Args, Parser, Subcommand};
use log::error;

const EXIT_PARTIAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "adapterlab", version, about = "Adapter rank sweeps, ablations and spectral diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the method x rank x seed grid from a config file.
    Sweep(GridArgs),
    /// Run the five-variant ablation at the config's ablation rank.
    Ablate(GridArgs),
    /// Recompute the singular spectrum of a finished run from its checkpoints.
    Spectral {
        /// Output directory of the sweep that produced the run.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run_id: String,
        /// latent_h, output_delta_d or delta_w (defaults to the run's own source).
        #[arg(long)]
        source: Option<String>,
    },
    /// Trainable parameter counts per rank for LoRA and CeRA.
    Params {
        /// llama3-8b or desk
        #[arg(long, default_value = "llama3-8b")]
        preset: String,
        /// Explicit geometry as d:k:count triples, e.g. 4096:4096:32,1024:4096:32.
        #[arg(long, value_delimiter = ',', conflicts_with = "preset")]
        geometry: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "16,64,128,512")]
        ranks: Vec<usize>,
    },
    /// Print a logistic-map trajectory and flag repeated states.
    Logistic {
        #[arg(long, default_value_t = 3.5)]
        r: f64,
        #[arg(long, default_value_t = 0.4)]
        x0: f64,
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Iterate without rounding each step to the display precision.
        #[arg(long)]
        full_precision: bool,
        /// Diagnose a generated sequence instead, e.g. 0.84,0.4704,0.8719,0.8719.
        #[arg(long, value_delimiter = ',')]
        check: Vec<f64>,
    },
    /// Re-render plots from an output directory's results.csv.
    Plot {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's outputs_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Replaces the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seed_override: Vec<u64>,
}

impl GridArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf), Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if !self.seed_override.is_empty() {
            cfg.seeds = self.seed_override.clone();
            cfg.validate()?;
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.outputs_dir.clone());
        Ok((cfg, out))
    }
}

fn parse_geometry(items: &[String]) -> Result<Vec<MatrixGeometry>, Error> {
    items
        .iter()
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let nums: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
            match nums.as_deref() {
                Some(&[d, k, multiplicity]) if d > 0 && k > 0 && multiplicity > 0 => {
                    Ok(MatrixGeometry { d, k, multiplicity })
                }
                _ => Err(Error::Config(format!("bad geometry {item:?}, expected d:k:count"))),
            }
        })
        .collect()
}

fn grid_exit(out: &Path, grid: &GridOutcome) -> ExitCode {
    if grid.is_complete() {
        ExitCode::SUCCESS
    } else {
        eprintln!(
            "{} of {} runs failed; see {}",
            grid.failures.len(),
            grid.failures.len() + grid.records.len(),
            out.join("failures.json").display()
        );
        ExitCode::from(EXIT_PARTIAL)
    }
}

fn print_logistic(rep: &LogisticReport) {
    println!("r = {}, x0 = {}", rep.r, rep.x0);
    for (i, v) in rep.display.iter().enumerate() {
        println!("x[{i}] = {v}");
    }
    match &rep.collapse {
        Some(c) => println!(
            "state collapse: {:.4} repeated {} times from step {}",
            c.value, c.length, c.start
        ),
        None => println!("no state collapse"),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Sweep(args) => {
            let (cfg, out) = args.load()?;
            let res = cmd_sweep(&cfg, &out, args.jobs)?;
            println!("{:<12} {:>5} {:>6} {:>14} {:>14} {:>9}", "method", "rank", "seeds", "metric", "floor", "ER");
            for s in &res.summary {
                let floor = s.linear_floor_mean.map(|f| format!("{f:.6e}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<12} {:>5} {:>6} {:>14.6e} {:>14} {:>9.3}",
                    s.method, s.rank, s.n_seeds, s.metric_mean, floor, s.effective_rank_mean
                );
            }
            println!("results written to {}", out.join("results.csv").display());
            Ok(grid_exit(&out, &res.grid))
        }
        Command::Ablate(args) => {
            let (cfg, out) = args.load()?;
            let res = cmd_ablate(&cfg, &out, args.jobs)?;
            print!("{}", res.table());
            Ok(grid_exit(&out, &res.grid))
        }
        Command::Spectral { out, run_id, source } => {
            let source = source.map(|s| s.parse::<SpectralSource>()).transpose()?;
            let rep = cmd_spectral(&out, &run_id, source)?;
            println!("{}", rep.to_json()?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Params { preset, geometry, ranks } => {
            let (name, geom) = if geometry.is_empty() {
                (preset.clone(), preset_geometry(&preset)?)
            } else {
                ("custom".to_string(), parse_geometry(&geometry)?)
            };
            let rows = cmd_params(&name, &geom, &ranks)?;
            println!("{:<10} {:<6} {:>6} {:>16}", "preset", "method", "rank", "params");
            for row in rows {
                println!("{:<10} {:<6} {:>6} {:>16}", row.preset, row.method, row.rank, row.params);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Logistic {
            r,
            x0,
            n,
            full_precision,
            check,
        } => {
            let rep = if check.is_empty() {
                cmd_logistic(r, x0, n, full_precision)?
            } else {
                diagnose_sequence(r, x0, check)
            };
            print_logistic(&rep);
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { out } => {
            cmd_plot(&out)?;
            println!("plots written to {}", out.join("plots").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            if e.is_config() || matches!(e, Error::Domain(_)) {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_PARTIAL)
            }
        }
    }
}
